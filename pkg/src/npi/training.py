"""Classifier pretraining and the adversarial X / Z (/ Y) training loop.

E_X = gamma * BCE(Z(S'), 0) + alpha * BCE(Y(S'), l_target) + beta * MSE(S', S)
E_Z = BCE(Z(S), 0) + BCE(Z(S'), 1)
E_Y = BCE(Y(S), L)

Z outputs the probability that a sequence was perturbed, so X is rewarded
when Z scores its S' as original. BCE terms are evaluated from the
networks' logits, which gives the same value as BCE on the probability
output without the flat gradient of the clamped region.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from npi.autodiff import tensor as T
from npi.autodiff.nn import Module, frozen
from npi.autodiff.optim import AdamState, adam_step, clip_grad_norm
from npi.autodiff.tensor import ContractError, NonFiniteError, Tensor, no_grad
from npi.control import ControlConfig, controlled_rollout
from npi.datagen.dataset import Dataset
from npi.datagen.metrics import TargetMetric
from npi.lm.model import TransformerLM
from npi.lm.vocab import Vocabulary
from npi.models import ContentClassifier, Discriminator, NPINetwork, save_network

LOSS_FIELDS = ("e_x_total", "e_x_fluency", "e_x_content", "e_x_stability", "e_z", "e_y")


class ClassifierGateError(RuntimeError):
    """Y failed to reach the held-out accuracy required before adversarial training."""

    def __init__(self, accuracy: float, gate: float, diagnostics: dict):
        super().__init__(f"classifier held-out accuracy {accuracy:.3f} is below the gate {gate:.3f}")
        self.accuracy = accuracy
        self.gate = gate
        self.diagnostics = diagnostics


class TrainingAbort(RuntimeError):
    """A loss went non-finite; the networks were restored to the last good checkpoint."""

    def __init__(self, msg: str, checkpoint: str | None, step: int):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.step = step


@dataclass(frozen=True)
class TrainingConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.25
    l_target: int = 1
    lr_x: float = 1e-4
    lr_y: float = 1e-3
    lr_z: float = 1e-4
    batch_size: int = 16
    epochs: int = 5
    y_refresh: bool = False
    refresh_every: int = 4
    x_steps: int = 1
    z_steps: int = 1
    clip: float = 1.0
    seed: int = 0
    # classifier pretraining
    y_epochs: int = 20
    y_batch_size: int = 32
    y_holdout: float = 0.1
    y_gate: float = 0.85

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta, gamma must be >= 0")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("alpha, beta, gamma cannot all be zero")
        if self.l_target not in (0, 1):
            raise ValueError("l_target must be 0 or 1")
        if self.x_steps < 1 or self.z_steps < 0:
            raise ValueError("need x_steps >= 1 and z_steps >= 0")
        if not 0.1 <= self.y_holdout < 1:
            raise ValueError("y_holdout must lie in [0.1, 1)")


def avoidance_mode(config: TrainingConfig) -> TrainingConfig:
    return replace(config, l_target=0)


@dataclass
class LossBreakdown:
    step: int
    e_x_total: float
    e_x_fluency: float
    e_x_content: float
    e_x_stability: float
    e_z: float = 0.0
    e_y: float = 0.0

    def weighted_total(self, cfg: TrainingConfig) -> float:
        return cfg.gamma * self.e_x_fluency + cfg.alpha * self.e_x_content + cfg.beta * self.e_x_stability


def _as(x, like_dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=like_dtype)


def compute_npi_loss(S, S_prime, Y: ContentClassifier, Z: Discriminator, config: TrainingConfig, step: int = 0):
    """E_X for one batch. Returns (scalar loss tensor, LossBreakdown).

    Y and Z are held constant; gradients flow only through S'.
    """
    S_prime = _as(S_prime, np.float32)
    S = np.asarray(S.data if isinstance(S, Tensor) else S)
    if S.shape != S_prime.shape:
        raise ContractError(f"S {S.shape} and S' {S_prime.shape} differ in shape")
    with frozen(Y, Z):
        fluency = T.bce_logits(Z.logits(S_prime), 0.0)
        content = T.bce_logits(Y.logits(S_prime), float(config.l_target))
        stability = T.mse(S_prime, S.astype(S_prime.dtype))
    total = T.add(
        T.add(T.scale(fluency, config.gamma), T.scale(content, config.alpha)),
        T.scale(stability, config.beta),
    )
    parts = LossBreakdown(step, float(total.data), float(fluency.data), float(content.data), float(stability.data))
    return total, parts


def _bce_step(net, batches, opt: AdamState, clip: float) -> tuple[float, float]:
    """One Adam step on the sum of BCE terms given as (inputs, target) pairs."""
    net.zero_grad()
    loss = None
    for x, t in batches:
        term = T.bce_logits(net.logits(_as(x, np.float32)), t)
        loss = term if loss is None else T.add(loss, term)
    T.backward(loss)
    norm = clip_grad_norm(net.parameters(), clip)
    adam_step(net.parameters(), opt)
    return float(loss.data), norm


def discriminator_step(Z: Discriminator, S, S_prime, opt: AdamState, clip: float = 0.0) -> float:
    """One Adam step on E_Z = BCE(Z(S), 0) + BCE(Z(S'), 1); returns E_Z before the step."""
    e_z, _ = _bce_step(Z, [(np.asarray(S), 0.0), (np.asarray(S_prime), 1.0)], opt, clip)
    return e_z


def refresh_classifier(Y: ContentClassifier, S_prime, texts, metric: TargetMetric, opt: AdamState, clip: float = 0.0):
    """Relabel perturbed windows with the metric and take one Adam step on E'_Y."""
    labels = np.array([metric(t) for t in texts], dtype=np.float32)
    e_y, _ = _bce_step(Y, [(np.asarray(S_prime), labels)], opt, clip)
    return e_y, labels


def _accuracy(net, S, labels, batch: int = 256) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = np.concatenate([net.predict(S[i : i + batch]) for i in range(0, len(S), batch)])
    return float(((pred > 0.5).astype(int) == np.asarray(labels)).mean())


def split_holdout(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    k = max(int(np.ceil(frac * n)), 1) if n > 1 else 0
    return np.sort(perm[k:]), np.sort(perm[:k])


def pretrain_classifier(Y: ContentClassifier, ds: Dataset, config: TrainingConfig, log: Callable | None = None):
    """Fit Y to the dataset labels; returns (Y, held-out accuracy).

    Raises ClassifierGateError if the accuracy after ``y_epochs`` is below ``y_gate``.
    """
    if len(ds) < 2:
        raise ClassifierGateError(0.0, config.y_gate, {"reason": "dataset has fewer than 2 examples"})
    train, hold = split_holdout(len(ds), config.y_holdout, config.seed)
    Y.fit_input_stats(ds.S[train])
    opt = AdamState(lr=config.lr_y)
    rng = np.random.default_rng(config.seed + 1)
    labels = ds.labels.astype(np.float32)
    history = []
    for epoch in range(config.y_epochs):
        order = train[rng.permutation(len(train))]
        losses = []
        for lo in range(0, len(order), config.y_batch_size):
            idx = np.sort(order[lo : lo + config.y_batch_size])
            loss, _ = _bce_step(Y, [(ds.S[idx], labels[idx])], opt, config.clip)
            losses.append(loss)
        acc = _accuracy(Y, ds.S[hold], ds.labels[hold])
        history.append({"epoch": epoch, "e_y": float(np.mean(losses)), "holdout_accuracy": acc})
        if log:
            log(history[-1])
    acc = history[-1]["holdout_accuracy"] if history else _accuracy(Y, ds.S[hold], ds.labels[hold])
    if not acc >= config.y_gate:
        diag = {
            "train_accuracy": _accuracy(Y, ds.S[train], ds.labels[train]),
            "holdout_size": int(len(hold)),
            "class_counts": list(ds.class_counts()),
            "history": history,
        }
        raise ClassifierGateError(acc, config.y_gate, diag)
    return Y, acc


@dataclass
class TrainingResult:
    log: list[dict]
    epoch_d_norm: list[float]
    checkpoints: list[str]


def _batches(ds: Dataset, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches whose inputs share one token length."""
    groups: dict[int, list[int]] = {}
    for j in rng.permutation(len(ds)):
        groups.setdefault(len(ds.tokens[j]), []).append(int(j))
    out = []
    for length in sorted(groups):
        idx = groups[length]
        out += [np.array(idx[i : i + size]) for i in range(0, len(idx), size)]
    return [out[k] for k in rng.permutation(len(out))]


def _snapshot(*nets: Module) -> list[dict]:
    return [n.state_dict() for n in nets]


def _restore(nets, states) -> None:
    for n, s in zip(nets, states):
        n.load_state_dict(s)


def train_adversarial(
    X: NPINetwork,
    Y: ContentClassifier,
    Z: Discriminator,
    ds: Dataset,
    lm: TransformerLM,
    vocab: Vocabulary,
    config: TrainingConfig,
    out_dir=None,
    log_path=None,
    fit_stats: bool = True,
) -> TrainingResult:
    """Alternate Z and X updates (optionally refreshing Y) over the dataset.

    Each batch: D = X(S); S' = controlled rollout from the stored inputs
    with D injected; ``z_steps`` Z updates on (S, S'); ``x_steps`` X
    updates on E_X (the first reuses this rollout, later ones re-roll); a
    Y refresh every ``refresh_every`` batches when enabled. One JSON line
    is logged per batch. X is checkpointed after every epoch.
    """
    lm.verify_frozen()
    ctl: ControlConfig = ds.config
    ctl.check_model(lm)
    if fit_stats:
        X.fit_input_stats(ds.S)
        Z.fit_input_stats(ds.S)
    opt_x, opt_y, opt_z = AdamState(lr=config.lr_x), AdamState(lr=config.lr_y), AdamState(lr=config.lr_z)
    rng = np.random.default_rng(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    logf = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    log, epoch_norms, ckpts = [], [], []
    good = _snapshot(X, Y, Z)
    good_path = None
    step = 0
    try:
        for epoch in range(config.epochs):
            norms = []
            for bi, idx in enumerate(_batches(ds, config.batch_size, rng)):
                S = ds.S[idx]
                ctx = np.stack([ds.tokens[j] for j in idx])
                try:
                    rec = _train_batch(X, Y, Z, lm, vocab, ds.metric, ctl, config, S, ctx, step, bi, opt_x, opt_y, opt_z)
                except NonFiniteError as e:
                    _restore((X, Y, Z), good)
                    raise TrainingAbort(f"non-finite value at step {step}: {e}", good_path, step) from e
                if not all(np.isfinite(rec[k]) for k in LOSS_FIELDS):
                    _restore((X, Y, Z), good)
                    raise TrainingAbort(f"non-finite loss at step {step}", good_path, step)
                rec["epoch"] = epoch
                norms.append(rec["d_norm"])
                log.append(rec)
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                step += 1
            epoch_norms.append(float(np.mean(norms)) if norms else 0.0)
            good = _snapshot(X, Y, Z)
            if out is not None:
                good_path = str(out / f"npi_epoch{epoch + 1:03d}.npiw")
                save_network(X, good_path)
                ckpts.append(good_path)
    finally:
        if logf:
            logf.close()
    lm.verify_frozen()
    return TrainingResult(log, epoch_norms, ckpts)


def _train_batch(X, Y, Z, lm, vocab, metric, ctl, config, S, ctx, step, bi, opt_x, opt_y, opt_z) -> dict:
    S_t = Tensor(S, dtype=np.float32)
    rec: dict = {"step": step}
    e_z = 0.0
    parts = None
    gx = gz = 0.0
    for k in range(config.x_steps):
        X.zero_grad()
        D = X(S_t)
        toks, S_prime = controlled_rollout(lm, ctx, D, ctl, forced_tokens=None)
        if k == 0:
            d_norm = float(np.sqrt((D.data.astype(np.float64) ** 2).reshape(len(S), -1).sum(axis=1)).mean())
            texts = [vocab.detokenize(t) for t in toks]
            for _ in range(config.z_steps):
                e_z = discriminator_step(Z, S, S_prime.data, opt_z, config.clip)
            first_toks, first_sp = toks, S_prime.data
        loss, parts = compute_npi_loss(S, S_prime, Y, Z, config, step)
        T.backward(loss)
        gx = clip_grad_norm(X.parameters(), config.clip)
        adam_step(X.parameters(), opt_x)
    labels = np.array([metric(t) for t in texts], dtype=np.float32)
    if config.y_refresh and bi % config.refresh_every == 0:
        e_y, _ = refresh_classifier(Y, first_sp, texts, metric, opt_y, config.clip)
    else:
        with no_grad():
            e_y = float(T.bce_logits(Y.logits(Tensor(first_sp, dtype=np.float32)), labels).data)
    rec.update(asdict(parts))
    rec["step"] = step
    rec["e_z"] = e_z
    rec["e_y"] = e_y
    rec["grad_norm_x"] = gx
    rec["target_rate"] = float(labels.mean())
    rec["d_norm"] = d_norm
    del first_toks
    return rec
