"""``npi`` command line: pretrain, harvest, train, generate and evaluate.

Every command writes its artifacts into a fresh run directory plus a
``manifest.json`` holding the resolved config and the sha256 of every input
and output file. Failures print one JSON object on stderr and exit nonzero
(2 for usage errors, 3 for failed gates and preconditions, 1 otherwise).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from npi.config import ConfigError, RunConfig, derive_seed, load_config
from npi.control import ControlConfig
from npi.datagen import build_dataset, corpus_contexts, load_dataset, parse_metric, save_dataset
from npi.eval import evaluate, fit_embeddings, fit_length_threshold, prescreen_contexts
from npi.eval.harness import npi_generate
from npi.lm import LMConfig, LMTrainConfig, Vocabulary, fine_tune, generate_batch, load_lm, perplexity, pretrain, save_lm
from npi.lm.corpus import generic_sentences, synthetic_corpus, target_corpus
from npi.models import init_network, load_network, save_network
from npi.training import ClassifierGateError, TrainingAbort, TrainingConfig, _accuracy, pretrain_classifier, split_holdout, train_adversarial

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_GATE = 0, 1, 2, 3
log = logging.getLogger("npi")


class UsageError(Exception):
    pass


class GateError(Exception):
    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


def _emit_error(kind: str, message: str, code: int, details: dict | None = None) -> None:
    err = {"error": kind, "message": message, "exit_code": code}
    if details:
        err["details"] = details
    print(json.dumps(err, sort_keys=True, default=str), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# run directory and provenance
# ---------------------------------------------------------------------------


def file_digest(path) -> str:
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(q for q in p.iterdir() if q.is_file()):
            h.update(f.name.encode())
            h.update(hashlib.sha256(f.read_bytes()).digest())
        return h.hexdigest()
    return hashlib.sha256(p.read_bytes()).hexdigest()


class Run:
    """Output directory of one command invocation."""

    def __init__(self, command: str, cfg: RunConfig, args):
        if args.run_dir:
            path = Path(args.run_dir)
        else:
            root = Path(args.out_root or os.environ.get("NPI_RUN_DIR") or "runs")
            base = f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}-{command}"
            path, k = root / base, 1
            while path.exists():
                path, k = root / f"{base}-{k}", k + 1
        path.mkdir(parents=True, exist_ok=True)
        self.dir = path
        self.command = command
        self.cfg = cfg
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def consume(self, name: str, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"{name} not found: {p}")
        self.inputs[name] = file_digest(p)
        return p

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def write_json(self, name: str, obj: dict) -> Path:
        p = self.path(name)
        body = {**obj, "provenance": dict(sorted(self.inputs.items()))}
        p.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return p

    def finish(self, summary: dict | None = None) -> dict:
        outputs = {}
        for name in sorted(set(self.outputs)):
            p = self.dir / name
            if p.exists():
                outputs[name] = file_digest(p)
        manifest = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": outputs,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        result = {"command": self.command, "run_dir": str(self.dir), **(summary or {})}
        print(json.dumps(result, sort_keys=True))
        return result


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------


def _control(cfg: RunConfig, c_max: int) -> ControlConfig:
    c = cfg.control
    return ControlConfig(taps=c.taps, window=c.window, c_max=c_max, teacher_forcing=c.teacher_forcing)


def _training(cfg: RunConfig) -> TrainingConfig:
    t = cfg.train
    fields = {k: getattr(t, k) for k in TrainingConfig.__dataclass_fields__ if k != "seed" and hasattr(t, k)}
    return TrainingConfig(**fields, seed=derive_seed(cfg.seed, "train") % 2**32)


def _net_kw(cfg: RunConfig) -> dict:
    return {"hidden": cfg.net.hidden}


def _corpus(cfg: RunConfig, stream: str, n: int) -> str:
    c = cfg.corpus
    return synthetic_corpus(n, target=c.target, base_rate=c.base_rate, keep_prob=c.keep_prob, seed=derive_seed(cfg.seed, stream) % 2**32)


def _read_text(run: Run, name: str, path) -> str:
    return run.consume(name, path).read_text(encoding="utf-8")


def _lm(run: Run, path, name: str = "lm"):
    if path is None:
        raise UsageError(f"--{name.replace('_', '-')} is required")
    return load_lm(run.consume(name, path))


def _eval_contexts(cfg: RunConfig, run: Run, args, model, vocab, metric) -> tuple[np.ndarray, list[str]]:
    c_max = model.config.c_max
    steps = cfg.control.window * cfg.eval.n_windows
    if args.contexts:
        lines = [ln for ln in _read_text(run, "contexts", args.contexts).splitlines() if ln]
        if not lines:
            raise UsageError("contexts file is empty")
        texts = [ln[-c_max:] for ln in lines]
        n = min(len(t) for t in texts)
        texts = [t[-n:] for t in texts]
    else:
        corpus = _corpus(cfg, "eval.corpus", cfg.corpus.heldout_sentences)
        texts = corpus_contexts(corpus, c_max, np.random.default_rng(derive_seed(cfg.seed, "eval.contexts")))
        if not args.prescreen and cfg.eval.exclude_target:
            texts = [t for t in texts if not metric(t)]
    if args.prescreen:
        kept = []
        for lo in range(0, len(texts), 400):
            if len(kept) >= cfg.eval.n_contexts:
                break
            chunk = texts[lo : lo + 400]
            ids = np.stack([vocab.encode(t) for t in chunk])
            kept += [chunk[i] for i in prescreen_contexts(model, vocab, ids, metric, steps)]
        texts = kept
    texts = texts[: cfg.eval.n_contexts]
    if not texts:
        raise GateError("no evaluation contexts left after filtering")
    return np.stack([vocab.encode(t) for t in texts]), texts


def _eval_assets(cfg: RunConfig):
    e = cfg.eval
    table = fit_embeddings(_corpus(cfg, "eval.embed", e.embed_sentences), dim=e.embed_dim, window=e.embed_window)
    threshold = fit_length_threshold(generic_sentences(e.length_sentences, seed=derive_seed(cfg.seed, "eval.length") % 2**32))
    return table, threshold


def _load_npi(run: Run, path, shape, cfg: RunConfig):
    X = init_network("npi", shape, 0, **_net_kw(cfg))
    try:
        return load_network(X, run.consume("npi", path))
    except (KeyError, ValueError) as e:
        raise GateError(f"NPI checkpoint does not fit this configuration: {e}") from e


def _write_report(run: Run, stem: str, report) -> dict:
    run.write_json(f"{stem}.json", json.loads(report.to_json()))
    run.write_text(f"{stem}.csv", report.to_csv())
    return report.summary()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain_lm(cfg: RunConfig, args, run: Run) -> dict:
    corpus = _read_text(run, "corpus", args.corpus) if args.corpus else _corpus(cfg, "lm.corpus", cfg.corpus.n_sentences)
    vocab = Vocabulary.from_text(corpus)
    c = cfg.lm
    lm_cfg = LMConfig(vocab_size=len(vocab), n_blocks=c.n_blocks, d_model=c.d_model, n_heads=c.n_heads, c_max=c.c_max)
    train = LMTrainConfig(steps=c.steps, batch_size=c.batch_size, lr=c.lr, seed=derive_seed(cfg.seed, "lm.batches") % 2**32)
    model, losses = pretrain(corpus, vocab, lm_cfg, train, init_seed=derive_seed(cfg.seed, "lm.init") % 2**32)
    lm_dir = save_lm(model, vocab, run.dir / "lm")
    run.outputs += [f"lm/{f.name}" for f in sorted(lm_dir.iterdir())]
    tail = float(np.mean(losses[-50:])) if losses else float("nan")
    run.write_json("lm_report.json", {"digest": model.frozen_digest.hex(), "final_loss": tail, "losses": losses[::50], "vocab_size": len(vocab)})
    return {"lm": str(lm_dir), "digest": model.frozen_digest.hex(), "final_loss": tail}


def cmd_finetune_lm(cfg: RunConfig, args, run: Run) -> dict:
    model, vocab = _lm(run, args.lm)
    target = cfg.corpus.target
    text = (
        _read_text(run, "target_corpus", args.target_corpus)
        if args.target_corpus
        else target_corpus(cfg.corpus.target_sentences, target, seed=derive_seed(cfg.seed, "finetune.corpus") % 2**32)
    )
    before = model.frozen_digest.hex()
    c = cfg.lm
    train = LMTrainConfig(steps=c.finetune_steps, batch_size=c.batch_size, lr=c.finetune_lr, warmup=10, seed=derive_seed(cfg.seed, "finetune.batches") % 2**32)
    tuned, losses = fine_tune(model, vocab, text, train)
    model.verify_frozen()
    probe = target_corpus(200, target, seed=derive_seed(cfg.seed, "finetune.probe") % 2**32)
    ppl_orig, ppl_tuned = perplexity(model, vocab, probe), perplexity(tuned, vocab, probe)
    lm_dir = save_lm(tuned, vocab, run.dir / "lm")
    run.outputs += [f"lm/{f.name}" for f in sorted(lm_dir.iterdir())]
    report = {
        "original_digest_before": before,
        "original_digest_after": model.digest().hex(),
        "tuned_digest": tuned.frozen_digest.hex(),
        "target_perplexity_original": ppl_orig,
        "target_perplexity_tuned": ppl_tuned,
        "losses": losses[::25],
    }
    run.write_json("finetune_report.json", report)
    return {"lm": str(lm_dir), "target_perplexity_original": ppl_orig, "target_perplexity_tuned": ppl_tuned}


def cmd_datagen(cfg: RunConfig, args, run: Run) -> dict:
    model, vocab = _lm(run, args.lm)
    n = cfg.datagen.n if args.n is None else args.n
    if n < 0:
        raise UsageError("--n must be >= 0")
    metric = parse_metric(cfg.metric)
    ctl = _control(cfg, model.config.c_max)
    if args.corpus:
        corpus = _read_text(run, "corpus", args.corpus)
        corpus_id = "file:" + run.inputs["corpus"][:16]
    else:
        corpus = _corpus(cfg, "datagen.corpus", cfg.datagen.corpus_sentences)
        corpus_id = "synthetic:" + hashlib.sha256(corpus.encode()).hexdigest()[:16]
    d = cfg.datagen
    ds = build_dataset(
        model,
        vocab,
        corpus,
        metric,
        ctl,
        n,
        seed=derive_seed(cfg.seed, "datagen"),
        inject_rate=d.inject_rate,
        tolerance=d.tolerance,
        batch_size=d.batch_size,
        max_iterations=d.max_iterations or None,
        corpus_id=corpus_id,
        jobs=cfg.jobs,
    )
    save_dataset(ds, run.path("dataset.npiq"))
    stats = {**ds.stats, "partial": ds.partial, "corpus_id": corpus_id, "shape": list(ds.shape), "metric": cfg.metric}
    run.write_json("datagen_report.json", stats)
    return {"dataset": str(run.dir / "dataset.npiq"), **stats}


def cmd_train_classifier(cfg: RunConfig, args, run: Run) -> dict:
    if args.dataset is None:
        raise UsageError("--dataset is required")
    ds = load_dataset(run.consume("dataset", args.dataset))
    tc = _training(cfg)
    Y = init_network("classifier", ds.shape, derive_seed(cfg.seed, "net.y"), **_net_kw(cfg))
    history = []
    try:
        Y, acc = pretrain_classifier(Y, ds, tc, log=history.append)
    except ClassifierGateError as e:
        run.write_json("classifier_report.json", {"accuracy": e.accuracy, "gate": e.gate, "passed": False, "history": history})
        raise GateError(str(e), accuracy=e.accuracy, gate=e.gate, diagnostics=e.diagnostics) from e
    save_network(Y, run.path("classifier.npiw"))
    run.write_json("classifier_report.json", {"accuracy": acc, "gate": tc.y_gate, "passed": True, "history": history})
    return {"classifier": str(run.dir / "classifier.npiw"), "accuracy": acc}


def cmd_train_npi(cfg: RunConfig, args, run: Run) -> dict:
    if args.classifier is None or not Path(args.classifier).exists():
        raise GateError("train-npi needs a trained content classifier checkpoint (--classifier)")
    if args.dataset is None:
        raise UsageError("--dataset is required")
    model, vocab = _lm(run, args.lm)
    ds = load_dataset(run.consume("dataset", args.dataset))
    if ds.lm_digest != model.frozen_digest:
        raise GateError("dataset was harvested from a different LM", dataset_lm=ds.lm_digest.hex(), lm=model.frozen_digest.hex())
    tc = _training(cfg)
    Y = init_network("classifier", ds.shape, 0, **_net_kw(cfg))
    try:
        load_network(Y, run.consume("classifier", args.classifier))
    except (KeyError, ValueError) as e:
        raise GateError(f"classifier checkpoint does not fit this dataset: {e}") from e
    _, hold = split_holdout(len(ds), tc.y_holdout, tc.seed)
    acc = _accuracy(Y, ds.S[hold], ds.labels[hold]) if len(hold) else 0.0
    if not acc >= tc.y_gate:
        raise GateError(f"classifier accuracy {acc:.3f} is below the gate {tc.y_gate}", accuracy=acc, gate=tc.y_gate)
    X = init_network("npi", ds.shape, derive_seed(cfg.seed, "net.x"), gain_init=cfg.net.npi_gain, **_net_kw(cfg))
    Z = init_network("discriminator", ds.shape, derive_seed(cfg.seed, "net.z"), **_net_kw(cfg))
    ckpt_dir = run.dir / "checkpoints"
    try:
        result = train_adversarial(X, Y, Z, ds, model, vocab, tc, out_dir=ckpt_dir, log_path=run.path("train_log.jsonl"))
    except TrainingAbort as e:
        raise RuntimeError(f"{e} (last good checkpoint: {e.checkpoint})") from e
    run.outputs += [f"checkpoints/{Path(p).name}" for p in result.checkpoints]
    save_network(X, run.path("npi.npiw"))
    save_network(Z, run.path("discriminator.npiw"))
    if tc.y_refresh:
        save_network(Y, run.path("classifier_refreshed.npiw"))
    last = result.log[-1] if result.log else {}
    run.write_json("train_report.json", {"steps": len(result.log), "epoch_d_norm": result.epoch_d_norm, "last": last, "classifier_gate_accuracy": acc})
    return {"npi": str(run.dir / "npi.npiw"), "steps": len(result.log)}


def cmd_generate(cfg: RunConfig, args, run: Run) -> dict:
    model, vocab = _lm(run, args.lm)
    ctl = _control(cfg, model.config.c_max)
    n_windows = args.windows or cfg.eval.n_windows
    X = _load_npi(run, args.npi, ctl.sequence_shape(model.config.d_model), cfg) if args.npi else None
    out = []
    for text in args.context:
        ids = vocab.encode(text)[None, -model.config.c_max :]
        orig, _ = generate_batch(model, ids, ctl.window * n_windows)
        row = {"context": text, "original": vocab.detokenize(orig[0])}
        if X is not None:
            row["controlled"] = vocab.detokenize(npi_generate(model, ids, X, ctl, n_windows)[0])
        out.append(row)
    run.write_json("generations.json", {"rows": out})
    return {"rows": out}


def _comparison(cfg: RunConfig, args, run: Run, model, vocab, **controlled) -> dict:
    metric = parse_metric(cfg.metric)
    ids, _ = _eval_contexts(cfg, run, args, model, vocab, metric)
    table, threshold = _eval_assets(cfg)
    steps = cfg.control.window * cfg.eval.n_windows
    common = dict(length_threshold=threshold, distance=cfg.eval.distance, jobs=cfg.jobs)
    base = evaluate(model, vocab, ids, metric, table, model_id="unmodified", steps=steps, **common)
    label = controlled.pop("model_id")
    ctrl = evaluate(model, vocab, ids, metric, table, model_id=label, steps=steps, **controlled, **common)
    summary = {"unmodified": _write_report(run, "report_unmodified", base), label: _write_report(run, f"report_{label}", ctrl)}
    b, c = summary["unmodified"], summary[label]
    summary["perplexity_ratio"] = c["perplexity_proxy"] / b["perplexity_proxy"] if b["perplexity_proxy"] else float("inf")
    run.write_json("eval_summary.json", summary)
    return summary


def cmd_evaluate(cfg: RunConfig, args, run: Run) -> dict:
    model, vocab = _lm(run, args.lm)
    if args.npi:
        ctl = _control(cfg, model.config.c_max)
        X = _load_npi(run, args.npi, ctl.sequence_shape(model.config.d_model), cfg)
        return _comparison(cfg, args, run, model, vocab, model_id=args.model_id or "npi", npi=X, config=ctl, n_windows=cfg.eval.n_windows)
    if args.controlled_lm:
        tuned, _ = _lm(run, args.controlled_lm, "controlled_lm")
        return _comparison(cfg, args, run, model, vocab, model_id=args.model_id or "controlled_lm", controlled_model=tuned)
    return _comparison(cfg, args, run, model, vocab, model_id=args.model_id or "unmodified_repeat")


def cmd_baseline(cfg: RunConfig, args, run: Run) -> dict:
    model, vocab = _lm(run, args.lm)
    if args.mode == "finetune":
        tuned, _ = _lm(run, args.controlled_lm, "controlled_lm")
        return _comparison(cfg, args, run, model, vocab, model_id="finetune", controlled_model=tuned)
    return _comparison(cfg, args, run, model, vocab, model_id=f"wordprob_{args.mode}", baseline=args.mode)


def cmd_gradcheck(cfg: RunConfig, args, run: Run) -> dict:
    from npi.autodiff.gradcheck import op_suite

    errors = op_suite(cfg.seed)
    worst = max(errors.values())
    run.write_json("gradcheck.json", {"errors": errors, "tolerance": args.tol})
    if not worst <= args.tol:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3g} > {args.tol}")
    return {"max_rel_error": worst}


COMMANDS = {
    "pretrain-lm": cmd_pretrain_lm,
    "finetune-lm": cmd_finetune_lm,
    "datagen": cmd_datagen,
    "train-classifier": cmd_train_classifier,
    "train-npi": cmd_train_npi,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel workers (ignored in deterministic mode)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--run-dir", help="exact output directory")
    common.add_argument("--out-root", help="parent of timestamped run directories (default $NPI_RUN_DIR or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="npi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("pretrain-lm", parents=[common], help="train the toy LM on a synthetic or given corpus")
    p.add_argument("--corpus")
    p = sub.add_parser("finetune-lm", parents=[common], help="fine-tune a copy of the LM on target-word text")
    p.add_argument("--lm")
    p.add_argument("--target-corpus")
    p = sub.add_parser("datagen", parents=[common], help="harvest a labelled activation dataset")
    p.add_argument("--lm")
    p.add_argument("--n", type=int)
    p.add_argument("--corpus")
    p = sub.add_parser("train-classifier", parents=[common], help="fit the content classifier Y")
    p.add_argument("--dataset")
    p = sub.add_parser("train-npi", parents=[common], help="adversarial training of the NPI")
    p.add_argument("--lm")
    p.add_argument("--dataset")
    p.add_argument("--classifier")
    p = sub.add_parser("generate", parents=[common], help="continue contexts with and without an NPI")
    p.add_argument("--lm")
    p.add_argument("--npi")
    p.add_argument("--context", action="append", required=True)
    p.add_argument("--windows", type=int)
    for name in ("evaluate", "baseline"):
        p = sub.add_parser(name, parents=[common], help="score controlled against unmodified generations")
        p.add_argument("--lm")
        p.add_argument("--controlled-lm")
        p.add_argument("--contexts", help="file with one context per line")
        p.add_argument("--prescreen", action="store_true", help="keep contexts whose unmodified output has the target")
        p.add_argument("--model-id")
        if name == "evaluate":
            p.add_argument("--npi")
        else:
            p.add_argument("--mode", choices=("induce", "avoid", "finetune"), required=True)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable op")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in ("seed", "jobs"):
        if getattr(args, key) is not None:
            overrides[key] = str(getattr(args, key))
    if args.deterministic is not None:
        overrides["deterministic"] = str(args.deterministic)
    cfg = load_config(args.config, overrides)
    if cfg.deterministic or cfg.jobs < 1:
        cfg.jobs = 1
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(name)s: %(message)s")
        cfg = resolve_config(args)
        run = Run(args.command, cfg, args)
        summary = COMMANDS[args.command](cfg, args, run)
        run.finish(summary)
        return EXIT_OK
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (UsageError, ConfigError) as e:
        _emit_error("UsageError", str(e), EXIT_USAGE)
        return EXIT_USAGE
    except GateError as e:
        _emit_error("GateError", str(e), EXIT_GATE, e.details)
        return EXIT_GATE
    except Exception as e:
        log.debug("command failed", exc_info=True)
        _emit_error(type(e).__name__, str(e), EXIT_ERROR)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
