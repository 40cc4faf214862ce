"""Command-line front end: ``haltpred gen | train | eval | explain``.

Machine-readable output goes to stdout as JSON, logs go to stderr.  Exit
codes: 2 bad flags or inputs, 3 generation failure, 4 training abort,
5 ensemble membership violation, 6 too many tokens for exact attribution.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .corpus import DEFAULT_BUDGET, Corpus, build_corpus, split
from .errors import (
    EmptyEnsemble,
    GenerationMismatch,
    MembershipError,
    NonFiniteLoss,
    ParseError,
    SequenceTooLong,
    TooManyTokens,
)
from .imbalance import LOSS_KINDS, LossSpec

log = logging.getLogger("haltpred")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_GENERATION = 3
EXIT_TRAINING = 4
EXIT_MEMBERSHIP = 5
EXIT_TOO_MANY_TOKENS = 6


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def digest_json(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    command: list[str]
    config_digest: str
    seeds: dict[str, int]
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _finish_manifest(argv: Sequence[str], config: dict, seeds: dict[str, int], inputs: Sequence[Path],
                     outputs: Sequence[Path], started: float, path: Path) -> None:
    manifest = RunManifest(
        command=["haltpred", *argv],
        config_digest=digest_json(config),
        seeds=seeds,
        inputs={str(p): sha256_file(p) for p in inputs},
        outputs={str(p): sha256_file(p) for p in outputs},
        wall_clock_seconds=round(time.perf_counter() - started, 3),
    )
    manifest.write(path)


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise CliError(f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file not found: {p}")
    return p


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(_require_file(path, "config").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc


def _pick(args: argparse.Namespace, config: dict, key: str, default):
    """Explicit flag > config file entry > built-in default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return config.get(key, default)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = time.perf_counter()
    cfg = _load_config(args.config)
    size = int(_pick(args, cfg, "size", 2000))
    ratio = float(_pick(args, cfg, "ratio", 0.02))
    budget = int(_pick(args, cfg, "budget", DEFAULT_BUDGET))
    seed = int(_pick(args, cfg, "seed", 0))
    if size < 10:
        raise CliError("size must be >= 10")
    if not 0 < ratio < 0.5:
        raise CliError("minority_ratio must be < 0.5 and > 0")
    if budget < 1:
        raise CliError("budget must be >= 1")
    out = Path(args.out)
    if not out.parent.exists():
        raise CliError(f"output directory does not exist: {out.parent}")
    try:
        corpus = build_corpus(size, ratio, budget, seed)
    except GenerationMismatch as exc:
        raise CliError(str(exc), EXIT_GENERATION) from exc

    outputs = [out]
    summary = {"path": str(out), "n0": corpus.n0, "n1": corpus.n1, "budget": budget, "master_seed": seed}
    if args.test_out:
        fraction = float(_pick(args, cfg, "train_fraction", 0.8))
        pair = split(corpus, fraction, seed)
        pair.train.save(out)
        pair.test.save(args.test_out)
        outputs.append(Path(args.test_out))
        summary.update(train=list(pair.train.counts), test=list(pair.test.counts), test_path=args.test_out)
    else:
        corpus.save(out)
    _finish_manifest(argv, {"size": size, "ratio": ratio, "budget": budget}, {"seed": seed}, [], outputs,
                     started, out.with_name(out.name + ".manifest.json"))
    _emit(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_config(args: argparse.Namespace, cfg: dict, counts: tuple[int, int]):
    from .training import TrainConfig

    loss_cfg = dict(cfg.get("loss", {}))
    for key in ("beta", "gamma", "margin_c", "scale_s"):
        if getattr(args, key) is not None:
            loss_cfg[key] = getattr(args, key)
    loss_cfg["kind"] = args.loss or loss_cfg.get("kind", "ce")
    loss_cfg["class_counts"] = list(counts)
    base = TrainConfig()
    use_cas = args.cas if args.cas is not None else bool(cfg.get("use_cas", base.use_cas))
    return TrainConfig(
        loss=LossSpec.from_json(loss_cfg),
        lr=float(_pick(args, cfg, "lr", base.lr)),
        weight_decay=float(_pick(args, cfg, "weight_decay", base.weight_decay)),
        batch_size=int(_pick(args, cfg, "batch_size", base.batch_size)),
        max_epochs=int(_pick(args, cfg, "max_epochs", base.max_epochs)),
        patience=int(_pick(args, cfg, "patience", base.patience)),
        checks_per_epoch=int(_pick(args, cfg, "checks_per_epoch", base.checks_per_epoch)),
        use_cas=use_cas,
        min_minority=int(_pick(args, cfg, "min_minority", base.min_minority)),
        seed=int(_pick(args, cfg, "seed", base.seed)),
    )


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    from .model import ModelConfig, init_model, save_checkpoint, tokenize
    from .plotting import plot_training_history
    from .training import TrainReport, train, validation_split

    started = time.perf_counter()
    cfg = _load_config(args.config)
    corpus_path = _require_file(args.corpus, "corpus")
    try:
        corpus = Corpus.load(corpus_path)
    except (ValueError, KeyError) as exc:
        raise CliError(f"cannot read corpus {corpus_path}: {exc}") from exc
    seed = int(_pick(args, cfg, "seed", 0))
    try:
        train_set, val_set = validation_split(corpus, seed, float(_pick(args, cfg, "val_split", 0.8)))
        tcfg = _train_config(args, cfg, train_set.counts)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    model_cfg = dict(cfg.get("model", {}))
    for key in ("d_model", "n_heads", "n_layers", "d_ff", "max_len"):
        if getattr(args, key) is not None:
            model_cfg[key] = getattr(args, key)
    model_cfg.setdefault("seed", seed)
    try:
        mcfg = ModelConfig(**model_cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid model config: {exc}") from exc
    longest = max(len(tokenize(s)) for s in corpus.sources)
    if longest > mcfg.max_len:
        raise CliError(f"corpus holds a {longest}-token program; raise --max-len above {mcfg.max_len}")

    prefix = Path(args.out)
    if not prefix.parent.exists():
        raise CliError(f"output directory does not exist: {prefix.parent}")
    report_path = prefix.with_name(prefix.name + ".report.json")
    try:
        best, report = train(init_model(mcfg), train_set, val_set, tcfg)
    except NonFiniteLoss as exc:
        partial = TrainReport(exc.history, -1, True, tcfg, final_model="aborted")
        doc = partial.to_json() | {"error": str(exc), "offending_batch": exc.batch}
        report_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        raise CliError(f"training aborted: {exc}", EXIT_TRAINING) from exc

    ckpt_path = prefix.with_name(prefix.name + ".best.json")
    save_checkpoint(best, ckpt_path)
    doc = report.to_json() | {"model": asdict(mcfg), "n_params": best.n_params}
    report_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    outputs = [ckpt_path, report_path]
    if not args.no_figures:
        outputs.append(plot_training_history(report, prefix.with_name(prefix.name + ".history.png")))
    _finish_manifest(argv, {"train": tcfg.to_json(), "model": asdict(mcfg)}, {"seed": seed, "model_seed": mcfg.seed},
                     [corpus_path], outputs, started, prefix.with_name(prefix.name + ".manifest.json"))
    _emit({
        "checkpoint": str(ckpt_path),
        "report": str(report_path),
        "best_check": report.best_check,
        "best_val_balanced_map": report.best.val_balanced_map,
        "epochs_run": report.epochs_run,
        "stopped_early": report.stopped_early,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / explain


def _load_target(args: argparse.Namespace):
    from .ensemble import EnsembleSpec, Member
    from .model import load_checkpoint

    if bool(args.ensemble) == bool(args.checkpoint):
        raise CliError("give exactly one of --ensemble or --checkpoint")
    if args.checkpoint:
        path = _require_file(args.checkpoint, "checkpoint")
        return [load_checkpoint(path)], [path]
    path = _require_file(args.ensemble, "ensemble spec")
    try:
        spec = EnsembleSpec.load(path)
    except (MembershipError, EmptyEnsemble) as exc:
        raise CliError(f"ensemble {path}: {exc}", EXIT_MEMBERSHIP) from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(f"malformed ensemble spec {path}: {exc}") from exc
    members: list[Member] = spec.members
    paths = []
    for m in members:
        p = Path(m.checkpoint)
        paths.append(_require_file(str(p if p.is_absolute() else path.parent / p), "member checkpoint"))
    return spec.models(), [path, *paths]


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    from .ensemble import ensemble_proba, report_from_scores
    from .plotting import plot_precision_recall

    started = time.perf_counter()
    models, inputs = _load_target(args)
    corpus_path = _require_file(args.corpus, "corpus")
    corpus = Corpus.load(corpus_path)
    try:
        scores = ensemble_proba(models, corpus.sources)
        report = report_from_scores(scores, corpus.labels, args.threshold)
    except SequenceTooLong as exc:
        raise CliError(str(exc)) from exc
    except ValueError as exc:
        raise CliError(f"cannot evaluate on {corpus_path}: {exc}") from exc
    doc = report.to_json()
    if args.out:
        prefix = Path(args.out)
        json_path = prefix.with_name(prefix.name + ".eval.json")
        json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        outputs = [json_path]
        if not args.no_figures:
            outputs.append(plot_precision_recall(scores, corpus.labels, prefix.with_name(prefix.name + ".pr.png")))
        _finish_manifest(argv, {"threshold": args.threshold}, {}, [*inputs, corpus_path], outputs, started,
                         prefix.with_name(prefix.name + ".manifest.json"))
    _emit(doc)
    return EXIT_OK


def cmd_explain(args: argparse.Namespace, argv: Sequence[str]) -> int:
    from .attribution import explain, export_attributed_graph, top_nodes
    from .plotting import plot_token_attribution

    started = time.perf_counter()
    models, inputs = _load_target(args)
    if args.program:
        program_path = _require_file(args.program, "program")
        source = program_path.read_text(encoding="utf-8")
        inputs.append(program_path)
    elif args.source is not None:
        source = args.source
    else:
        raise CliError("give --program FILE or --source TEXT")
    seed = int(args.seed if args.seed is not None else 0)
    try:
        result = explain(models, source, args.method, args.permutations, seed)
    except ParseError as exc:
        raise CliError(f"program does not parse: {exc}") from exc
    except TooManyTokens as exc:
        raise CliError(str(exc), EXIT_TOO_MANY_TOKENS) from exc
    except SequenceTooLong as exc:
        raise CliError(str(exc)) from exc

    outputs = []
    for path, fmt in ((args.out_dot, "dot"), (args.out_json, "json")):
        if path:
            text = export_attributed_graph(result.ast, result.nodes, fmt, result.base_value, result.full_value)
            Path(path).write_text(text, encoding="utf-8")
            outputs.append(Path(path))
    if args.out_png:
        outputs.append(plot_token_attribution(result.tokens.texts(source), result.token_phi, args.out_png,
                                              f"p(non-terminating) = {result.probability:.3f}"))
    if outputs:
        anchor = outputs[0]
        _finish_manifest(argv, {"method": args.method, "permutations": args.permutations}, {"seed": seed}, inputs,
                         outputs, started, anchor.with_name(anchor.name + ".manifest.json"))
    ranked = top_nodes(result.nodes.phi, k=3)
    _emit({
        "probability": result.probability,
        "verdict": "non-terminating" if result.probability >= 0.5 else "terminating",
        "base_value": result.base_value,
        "full_value": result.full_value,
        "top_nodes": [
            {"id": i, "kind": result.ast[i].kind, "label": result.ast[i].label, "phi": float(result.nodes.phi[i])}
            for i in ranked
        ],
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's own exit code is already 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON file whose keys mirror the long flag names")
    common.add_argument("--quiet", action="store_true")

    parser = _Parser(prog="haltpred", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", parents=[common], help="generate a labelled corpus")
    gen.add_argument("--size", type=int)
    gen.add_argument("--ratio", type=float, help="minority (non-terminating) fraction")
    gen.add_argument("--budget", type=int)
    gen.add_argument("--out", required=True)
    gen.add_argument("--test-out", help="also split 80/20 and write the held-out part here")
    gen.add_argument("--train-fraction", type=float)

    tr = sub.add_parser("train", parents=[common], help="train one model")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--loss", choices=LOSS_KINDS)
    tr.add_argument("--beta", type=float)
    tr.add_argument("--gamma", type=float)
    tr.add_argument("--margin-c", dest="margin_c", type=float)
    tr.add_argument("--scale-s", dest="scale_s", type=float)
    tr.add_argument("--cas", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--min-minority", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--weight-decay", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--max-epochs", type=int)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--checks-per-epoch", type=int)
    tr.add_argument("--val-split", type=float, help="fraction of the corpus kept for fitting")
    tr.add_argument("--d-model", type=int)
    tr.add_argument("--n-heads", type=int)
    tr.add_argument("--n-layers", type=int)
    tr.add_argument("--d-ff", type=int)
    tr.add_argument("--max-len", type=int)
    tr.add_argument("--out", required=True, help="output prefix")
    tr.add_argument("--no-figures", action="store_true")

    for name, helptext in (("eval", "evaluate a model or ensemble"), ("explain", "attribute a prediction")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--ensemble")
        p.add_argument("--checkpoint")
    ev = sub.choices["eval"]
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--out", help="also write <out>.eval.json and a precision-recall figure")
    ev.add_argument("--no-figures", action="store_true")

    ex = sub.choices["explain"]
    ex.add_argument("--program")
    ex.add_argument("--source")
    ex.add_argument("--method", choices=("exact", "sampled"), default="sampled")
    ex.add_argument("--permutations", type=int, default=200)
    ex.add_argument("--out-dot")
    ex.add_argument("--out-json")
    ex.add_argument("--out-png")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors, --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except CliError as exc:
        print(f"haltpred {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
