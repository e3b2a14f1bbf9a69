"""Run configuration: flat ``section.key=value`` files and named seed streams.

Example::

    seed=7
    lm.d_model=32
    control.taps=1,3
    train.alpha=1.0
    metric=word:cat
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def derive_seed(root: int, name: str) -> int:
    """Independent 63-bit seed for the named stream (e.g. "datagen", "train.x")."""
    digest = hashlib.sha256(f"{int(root)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class CorpusSection:
    n_sentences: int = 30000
    target: str = "cat"
    base_rate: float = 0.05
    keep_prob: float = 0.8
    heldout_sentences: int = 3000
    target_sentences: int = 2000


@dataclass
class LMSection:
    n_blocks: int = 3
    d_model: int = 32
    n_heads: int = 4
    c_max: int = 32
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    finetune_steps: int = 300
    finetune_lr: float = 1e-3


@dataclass
class ControlSection:
    taps: tuple[int, ...] = (1, 3)
    window: int = 12
    teacher_forcing: bool = False


@dataclass
class DatagenSection:
    n: int = 1000
    inject_rate: float = 0.5
    tolerance: float = 0.05
    batch_size: int = 128
    max_iterations: int = 0  # 0 -> 4 * window
    corpus_sentences: int = 20000


@dataclass
class NetSection:
    hidden: tuple[int, ...] = (256,)
    npi_gain: float = 1.0


@dataclass
class TrainSection:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.25
    l_target: int = 1
    lr_x: float = 3e-5
    lr_y: float = 1e-3
    lr_z: float = 1e-4
    batch_size: int = 16
    epochs: int = 6
    y_refresh: bool = True
    refresh_every: int = 1
    x_steps: int = 1
    z_steps: int = 1
    clip: float = 1.0
    y_epochs: int = 15
    y_batch_size: int = 32
    y_holdout: float = 0.1
    y_gate: float = 0.85


@dataclass
class EvalSection:
    n_contexts: int = 200
    n_windows: int = 2
    distance: str = "euclidean"
    embed_dim: int = 32
    embed_window: int = 4
    embed_sentences: int = 5000
    length_sentences: int = 500
    exclude_target: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    jobs: int = 1
    metric: str = "word:cat"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    lm: LMSection = field(default_factory=LMSection)
    control: ControlSection = field(default_factory=ControlSection)
    datagen: DatagenSection = field(default_factory=DatagenSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                lines += [f"{f.name}.{g.name}={_fmt(getattr(v, g.name))}" for g in fields(v)]
            else:
                lines.append(f"{f.name}={_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _convert(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if origin is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(typ, '__name__', typ)}") from e
    raise ConfigError(f"{key}: unsupported type {typ}")  # pragma: no cover


def parse_lines(text: str) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def apply_overrides(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    hints = typing.get_type_hints(RunConfig)
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if not name:
            if section not in hints or dataclasses.is_dataclass(hints[section]):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, section, _convert(raw, hints[section], key))
            continue
        target = getattr(cfg, section, None)
        if not dataclasses.is_dataclass(target):
            raise ConfigError(f"unknown config section {section!r}")
        sub = typing.get_type_hints(type(target))
        if name not in sub:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _convert(raw, sub[name], key))
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        apply_overrides(cfg, parse_lines(text))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


__all__ = [
    "ConfigError",
    "RunConfig",
    "apply_overrides",
    "derive_seed",
    "load_config",
    "parse_lines",
]
