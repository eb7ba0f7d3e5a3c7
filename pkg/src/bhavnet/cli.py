"""``bhavnet`` command line: train, eval, predict, graph-dump, gradcheck.

Exit codes: 0 ok, 1 check failed, 2 bad config or data, 3 unknown token,
4 unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .data import (
    FormatError,
    LabeledPair,
    VocabularyError,
    filter_resolvable,
    load_embeddings,
    load_pairs,
    save_pairs,
    stratified_split,
    synthetic_task,
)
from .graph import build_graph, graph_stats
from .model import CheckpointError, HyperParams, ModelParams, encode, forward_batch, load_checkpoint, project_dual
from .objective import total_loss
from .tensor import InvalidConfigError, Rng, grad_check
from .train import LanguageData, evaluate, predict, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_VOCAB, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
RUN_ROOT_ENV = "BHAVNET_RUN_ROOT"
GRADCHECK_TOLERANCE = 1e-4

GRADCHECK_CONFIG = dict(d=8, d_prime=4, fused_dim=8, H=2, L_layers=1, hidden=4, tau=0.5, dropout_rate=0.1)

log = logging.getLogger("bhavnet")


class UsageError(Exception):
    """Bad flags or config; exits with code 2."""


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_hparam_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("hyperparameters (override --config)")
    for f in dataclasses.fields(HyperParams):
        names = [_flag(f.name)]
        if f.name == "lambda_w":
            names.append("--lambda")
        if f.type in ("bool", bool):
            g.add_argument(*names, dest=f.name, action="store_true", default=None, help=f"set {f.name}")
        else:
            kind = int if f.type in ("int", "int | None") else float
            g.add_argument(*names, dest=f.name, type=kind, default=None, metavar=f.name.upper(), help=f"{f.name}")


def _lang_path(spec: str) -> tuple[str, str]:
    lang, sep, path = spec.partition("=")
    return (lang, path) if sep else ("en", spec)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bhavnet", description="Dual-space antonym/synonym classifier.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON file of hyperparameters")
        if data:
            p.add_argument("--embeddings", action="append", default=[], metavar="[LANG=]PATH",
                           help="embedding text file; repeat per language")
            p.add_argument("--pairs", action="append", default=[], metavar="[LANG=]PATH",
                           help="w1<TAB>w2<TAB>label file; repeat per language")
        _add_hparam_flags(p)

    p = sub.add_parser("train", help="train a model and write a run directory")
    common(p)
    p.add_argument("--dev", action="append", default=[], metavar="[LANG=]PATH",
                   help="dev pairs; without it --pairs is split 80/10/10")
    p.add_argument("--out", help=f"run directory (default: ${RUN_ROOT_ENV} or ./runs, then run-seed<SEED>)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled pairs")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("predict", help="score one word pair")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--language", default="en")
    p.add_argument("w1")
    p.add_argument("w2")

    p = sub.add_parser("graph-dump", help="print the pair graph of a batch")
    common(p)
    p.add_argument("--checkpoint", help="parameters to project with (default: seeded init)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    common(p, data=False)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--pairs-count", type=int, default=4)
    return parser


def effective_config(args, **inferred) -> HyperParams:
    """Defaults < inferred values < config file < flags."""
    values: dict = dict(inferred)
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, ValueError) as err:
            raise UsageError(f"--config: cannot read {args.config}: {err}") from None
    for f in dataclasses.fields(HyperParams):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        return HyperParams.from_dict(values)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid config: {err}") from None


def _load_tables(args, required: bool = True) -> dict:
    if not args.embeddings:
        if required:
            raise UsageError("--embeddings is required")
        return {}
    tables = {}
    for spec in args.embeddings:
        lang, path = _lang_path(spec)
        if not Path(path).exists():
            raise UsageError(f"--embeddings: no such file {path}")
        tables[lang] = load_embeddings(path, language=lang)
    return tables


def _load_pair_files(specs, flag: str, tables: dict) -> dict[str, list[LabeledPair]]:
    out = {}
    for spec in specs:
        lang, path = _lang_path(spec)
        if not Path(path).exists():
            raise UsageError(f"{flag}: no such file {path}")
        if lang not in tables:
            raise UsageError(f"{flag}: no --embeddings given for language {lang!r}")
        pairs, dropped = filter_resolvable(load_pairs(path, lang), tables[lang])
        if dropped:
            log.warning("%s: dropped %d pairs with out-of-vocabulary tokens", path, dropped)
        out[lang] = pairs
    return out


def _infer_dim(tables: dict) -> dict:
    dims = {t.dim for t in tables.values()}
    if len(dims) > 1:
        raise UsageError(f"embedding tables disagree on dimension: {sorted(dims)}")
    return {"d": dims.pop()} if dims else {}


def cmd_train(args) -> int:
    tables = _load_tables(args)
    if not args.pairs:
        raise UsageError("--pairs is required")
    hp = effective_config(args, **_infer_dim(tables))
    pairs = _load_pair_files(args.pairs, "--pairs", tables)
    devs = _load_pair_files(args.dev, "--dev", tables)
    out = Path(args.out) if args.out else Path(os.environ.get(RUN_ROOT_ENV, "runs")) / f"run-seed{hp.seed}"
    out.mkdir(parents=True, exist_ok=True)

    datasets = {}
    split_rng = Rng(hp.seed).stream("split")
    for lang, lang_pairs in pairs.items():
        if lang in devs:
            datasets[lang] = LanguageData(lang_pairs, devs[lang])
            continue
        tr, dv, te = stratified_split(lang_pairs, (0.8, 0.1, 0.1), split_rng)
        for name, part in (("train", tr), ("dev", dv), ("test", te)):
            save_pairs(part, out / f"{name}.{lang}.tsv")
        datasets[lang] = LanguageData(tr, dv)

    def report(state, metrics):
        dev = metrics.get("dev")
        extra = f" dev_macro_f1={dev.macro_f1:.4f}" if dev else ""
        log.info("epoch %d train_loss=%.6f%s", state.epoch, metrics["train_loss"], extra)

    state = train(datasets, tables, hp, callbacks=[report], run_dir=out)
    print(f"run directory: {out}")
    print(f"epochs: {state.epoch}  steps: {len(state.loss_trace)}")
    if state.dev_reports:
        print(f"best dev macro_f1: {state.best_macro_f1:.4f} (epoch {state.best_epoch})")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, hp = load_checkpoint(args.checkpoint)
    tables = _load_tables(args)
    if not args.pairs:
        raise UsageError("--pairs is required")
    pairs = [p for group in _load_pair_files(args.pairs, "--pairs", tables).values() for p in group]
    if not pairs:
        raise UsageError("--pairs: no resolvable pairs")
    report = evaluate(pairs, tables, params)
    print(report.summary())
    return EXIT_OK


def cmd_predict(args) -> int:
    params, hp = load_checkpoint(args.checkpoint)
    tables = _load_tables(args)
    if args.language not in tables:
        raise UsageError(f"--language {args.language}: no embeddings for it")
    if args.w1 == args.w2:
        raise UsageError("the two words must differ")
    result = predict(args.w1, args.w2, args.language, tables[args.language], params)
    print(result.line())
    return EXIT_OK


def cmd_graph_dump(args) -> int:
    tables = _load_tables(args)
    if not args.pairs:
        raise UsageError("--pairs is required")
    if args.checkpoint:
        params, hp = load_checkpoint(args.checkpoint)
        params = ModelParams(effective_config(args, **hp.to_dict()), params.tensors)
    else:
        params = ModelParams.init(effective_config(args, **_infer_dim(tables)))
    hp = params.hp
    for lang, pairs in _load_pair_files(args.pairs, "--pairs", tables).items():
        if not pairs:
            continue
        H1, H2 = encode(pairs, tables[lang])
        graph = build_graph(pairs, project_dual(H1, H2, params), hp.tau, hp.trans_weight)
        for line in graph.dump_lines():
            print(line)
        print(graph_stats(graph).footer())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    hp = effective_config(args, **GRADCHECK_CONFIG)
    rng = Rng(hp.seed)
    pairs, table = synthetic_task(args.pairs_count, hp.d, rng.stream("sampling"), noise=0.3)
    params = ModelParams.init(hp, rng.stream("init"), bias_scale=0.1)
    labels = [p.label for p in pairs]

    def loss():
        out = forward_batch(pairs, table, params, training=False)
        return total_loss(out.probs, labels, out.forward, hp).tensor

    errors = grad_check(loss, list(params), eps=args.eps, per_param=True)
    worst = max(errors)
    for name, err in zip(params.names(), errors):
        log.info("%-24s %.3e", name, err)
    print(f"max relative error: {worst:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_CHECK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "graph-dump": cmd_graph_dump,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except VocabularyError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VOCAB
    except CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (UsageError, FormatError, InvalidConfigError, UnicodeDecodeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
