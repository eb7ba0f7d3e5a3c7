"""Training loop, SGD update, metrics and single-pair prediction."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import EmbeddingTable, LabeledPair, VocabularyError, batches
from .model import HyperParams, ModelParams, forward_batch, load_checkpoint, save_checkpoint
from .objective import LossBreakdown, total_loss
from .tensor import GradTape, InvalidConfigError, InvalidInputError, Rng

logger = logging.getLogger(__name__)

THRESHOLD = 0.5

METRIC_COLUMNS = [
    "epoch", "split", "loss", "macro_f1", "accuracy",
    "precision_0", "recall_0", "f1_0", "precision_1", "recall_1", "f1_1",
]


class TrainingError(RuntimeError):
    """The loss became non-finite."""


def sgd_step(params: ModelParams, grads, lr: float) -> ModelParams:
    """``p <- p - lr * g`` for every array. ``grads`` is a list aligned with ``params`` or a name map."""
    names = params.names()
    if isinstance(grads, Mapping):
        grads = [grads[n] for n in names]
    grads = list(grads)
    if len(grads) != len(names):
        raise InvalidInputError(f"{len(grads)} gradients for {len(names)} parameters")
    for name, g in zip(names, grads):
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        new = p.data - lr * g
        new.setflags(write=False)
        p.data = new
    return params


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    synonym: ClassScores
    antonym: ClassScores
    macro_f1: float
    accuracy: float
    zero_division: int = 0
    loss: float | None = None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def per_class(self, label: int) -> ClassScores:
        return self.antonym if label == 1 else self.synonym

    def as_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        lines = [
            f"accuracy  {self.accuracy:.4f}",
            f"macro_f1  {self.macro_f1:.4f}",
        ]
        for label, name in ((0, "synonym"), (1, "antonym")):
            c = self.per_class(label)
            lines.append(
                f"{label} {name:8s} P={c.precision:.4f} R={c.recall:.4f} F1={c.f1:.4f} n={c.support}"
            )
        lines.append(f"confusion TP={self.tp} FP={self.fp} TN={self.tn} FN={self.fn}")
        return "\n".join(lines)


def _ratio(num: int, den: int) -> tuple[float, int]:
    return (num / den, 0) if den else (0.0, 1)


def _scores(tp: int, fp: int, fn: int) -> tuple[ClassScores, int]:
    p, zp = _ratio(tp, tp + fp)
    r, zr = _ratio(tp, tp + fn)
    f, zf = (2 * p * r / (p + r), 0) if p + r > 0 else (0.0, 1)
    return ClassScores(p, r, f, tp + fn), zp + zr + zf


def report_from_counts(tp: int, fp: int, tn: int, fn: int, loss: float | None = None) -> EvalReport:
    """Per-class scores with label 1 as the positive class; 0/0 scores count as 0."""
    total = tp + fp + tn + fn
    if total == 0:
        raise InvalidInputError("no predictions to evaluate")
    antonym, z1 = _scores(tp, fp, fn)
    synonym, z0 = _scores(tn, fn, fp)
    zero = z0 + z1
    if zero:
        logger.warning("%d precision/recall/F1 values had a zero denominator and were set to 0", zero)
    return EvalReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        synonym=synonym, antonym=antonym,
        macro_f1=(synonym.f1 + antonym.f1) / 2,
        accuracy=(tp + tn) / total,
        zero_division=zero,
        loss=loss,
    )


def evaluate_predictions(predicted: Sequence[int], labels: Sequence[int], loss: float | None = None) -> EvalReport:
    pred = np.asarray(predicted).astype(int).reshape(-1)
    gold = np.asarray(labels).astype(int).reshape(-1)
    if pred.shape != gold.shape:
        raise InvalidInputError(f"{pred.size} predictions but {gold.size} labels")
    tp = int(np.sum((pred == 1) & (gold == 1)))
    fp = int(np.sum((pred == 1) & (gold == 0)))
    tn = int(np.sum((pred == 0) & (gold == 0)))
    fn = int(np.sum((pred == 0) & (gold == 1)))
    return report_from_counts(tp, fp, tn, fn, loss)


def to_label(prob: float) -> int:
    # ties go to the antonym class
    return 1 if prob >= THRESHOLD else 0


def predict_batches(
    pairs: Sequence[LabeledPair],
    table: EmbeddingTable,
    params: ModelParams,
    batch_size: int | None = None,
) -> tuple[np.ndarray, float]:
    """Eval-mode probabilities over consecutive batches in input order, plus the mean total loss."""
    hp = params.hp
    size = batch_size or hp.batch_size
    probs, losses = [], []
    for start in range(0, len(pairs), size):
        chunk = pairs[start:start + size]
        out = forward_batch(chunk, table, params, training=False)
        lb = total_loss(out.probs, [p.label for p in chunk], out.forward, hp)
        probs.append(np.atleast_1d(out.probs.data))
        losses.append(lb.total * len(chunk))
    return np.concatenate(probs), float(sum(losses) / len(pairs))


def evaluate(
    pairs: Sequence[LabeledPair],
    table: EmbeddingTable | Mapping[str, EmbeddingTable],
    params: ModelParams,
    hp: HyperParams | None = None,
) -> EvalReport:
    """Threshold eval-mode predictions at 0.5 and score them.

    ``table`` may be a single table or a language -> table map; pairs are
    grouped by language and batched in input order within each group.
    """
    if not pairs:
        raise InvalidInputError("cannot evaluate an empty pair list")
    if hp is not None and hp is not params.hp:
        params = ModelParams(hp, params.tensors)
    tables = table if isinstance(table, Mapping) else None
    groups: dict[str, list[LabeledPair]] = {}
    for p in pairs:
        groups.setdefault(p.language if tables else "", []).append(p)
    predicted, gold = [], []
    loss_sum = 0.0
    for lang, group in groups.items():
        tbl = tables[lang] if tables else table
        probs, loss = predict_batches(group, tbl, params)
        predicted.extend(to_label(float(x)) for x in probs)
        gold.extend(p.label for p in group)
        loss_sum += loss * len(group)
    return evaluate_predictions(predicted, gold, loss_sum / len(pairs))


@dataclass
class Prediction:
    prob: float
    sim_syn: float
    sim_ant: float
    label: int

    def line(self) -> str:
        return f"{self.prob:.6f} {self.sim_syn:.6f} {self.sim_ant:.6f} {self.label}"


def predict(w1: str, w2: str, language: str, table: EmbeddingTable, params: ModelParams, hp: HyperParams | None = None) -> Prediction:
    for tok in (w1, w2):
        if tok not in table:
            raise VocabularyError(tok)
    if hp is not None and hp is not params.hp:
        params = ModelParams(hp, params.tensors)
    pair = LabeledPair(w1, w2, 0, language)
    out = forward_batch([pair], table, params, training=False)
    prob = float(out.probs.data.reshape(-1)[0])
    return Prediction(
        prob=prob,
        sim_syn=float(out.forward.sim_syn.data.reshape(-1)[0]),
        sim_ant=float(out.forward.sim_ant.data.reshape(-1)[0]),
        label=to_label(prob),
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class LanguageData:
    train: list[LabeledPair]
    dev: list[LabeledPair] = field(default_factory=list)


@dataclass
class TrainState:
    params: ModelParams
    epoch: int = 0
    loss_trace: list[float] = field(default_factory=list)
    batches_per_epoch: list[int] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epoch_bce: list[float] = field(default_factory=list)
    epoch_margin: list[float] = field(default_factory=list)
    dev_reports: list[EvalReport] = field(default_factory=list)
    best_macro_f1: float = -1.0
    best_epoch: int = 0
    best_params: ModelParams | None = None
    best_checkpoint: Path | None = None
    stopped_early: bool = False


def _round_robin(per_language: list[list]) -> list:
    order = []
    for k in range(max((len(b) for b in per_language), default=0)):
        for lang_batches in per_language:
            if k < len(lang_batches):
                order.append(lang_batches[k])
    return order


def train(
    datasets: Mapping[str, LanguageData],
    tables: Mapping[str, EmbeddingTable],
    hp: HyperParams,
    epochs: int | None = None,
    callbacks: Sequence[Callable[[TrainState, dict], None]] = (),
    run_dir=None,
    params: ModelParams | None = None,
) -> TrainState:
    """Plain-SGD training over all languages.

    Each epoch reshuffles every language's training pairs into batches and
    interleaves them round-robin in the configured language order. After
    each epoch the pooled dev set (when present) is evaluated; the params
    with the best dev macro-F1 are kept and, with ``run_dir``, saved to
    ``checkpoints/best.ckpt``. Training stops after ``hp.patience`` epochs
    without improvement (0 disables early stopping).
    """
    epochs = hp.epochs if epochs is None else epochs
    languages = [lang for lang in datasets if datasets[lang].train]
    if not languages:
        raise InvalidConfigError("no language has training pairs")
    for lang in languages:
        if lang not in tables:
            raise InvalidConfigError(f"no embedding table for language {lang!r}")
        if tables[lang].dim != hp.d:
            raise InvalidConfigError(f"{lang}: embeddings have dim {tables[lang].dim}, config says d={hp.d}")

    root = Rng(hp.seed)
    params = params if params is not None else ModelParams.init(hp, root.stream("init"))
    dropout_rng = root.stream("dropout")
    sampling_rng = root.stream("sampling")
    dev = [p for lang in languages for p in datasets[lang].dev]
    dev_tables = {lang: tables[lang] for lang in languages}

    writer = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(hp.to_dict(), indent=2, sort_keys=True) + "\n")
        metrics_fh = open(run_dir / "metrics.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(metrics_fh)
        writer.writerow(METRIC_COLUMNS)

    state = TrainState(params=params)
    since_best = 0
    try:
        for epoch in range(1, epochs + 1):
            per_language = [list(batches(datasets[lang].train, hp.batch_size, sampling_rng)) for lang in languages]
            schedule = _round_robin(per_language)
            sums = np.zeros(3)
            for batch in schedule:
                table = tables[batch[0].language] if batch[0].language in tables else tables[languages[0]]
                lb = _step(batch, table, params, hp, dropout_rng)
                state.loss_trace.append(lb.total)
                sums += (lb.total, lb.bce, hp.lambda_w * lb.margin)
            state.epoch = epoch
            state.batches_per_epoch.append(len(schedule))
            total, bce, margin = (float(x) for x in sums / len(schedule))
            state.epoch_losses.append(total)
            state.epoch_bce.append(bce)
            state.epoch_margin.append(margin)
            metrics = {"epoch": epoch, "train_loss": state.epoch_losses[-1]}
            if writer:
                writer.writerow([epoch, "train", f"{state.epoch_losses[-1]:.10g}"] + [""] * 8)

            if dev:
                # score exactly what a checkpoint would restore
                stored = params.as_stored()
                report = evaluate(dev, dev_tables, stored)
                state.dev_reports.append(report)
                metrics["dev"] = report
                if writer:
                    writer.writerow(_metric_row(epoch, "dev", report))
                if report.macro_f1 > state.best_macro_f1:
                    state.best_macro_f1 = report.macro_f1
                    state.best_epoch = epoch
                    state.best_params = stored
                    since_best = 0
                    if run_dir is not None:
                        state.best_checkpoint = run_dir / "checkpoints" / "best.ckpt"
                        save_checkpoint(params, hp, state.best_checkpoint)
                else:
                    since_best += 1
            for cb in callbacks:
                cb(state, metrics)
            if dev and hp.patience and since_best >= hp.patience:
                state.stopped_early = True
                break
    finally:
        if writer:
            metrics_fh.close()

    if run_dir is not None:
        save_checkpoint(params, hp, run_dir / "checkpoints" / "last.ckpt")
        if state.best_checkpoint is None:
            state.best_checkpoint = run_dir / "checkpoints" / "last.ckpt"
        report = {
            "epochs_completed": state.epoch,
            "stopped_early": state.stopped_early,
            "best_epoch": state.best_epoch,
            "best_dev_macro_f1": state.best_macro_f1 if dev else None,
            "final_train_loss": state.epoch_losses[-1] if state.epoch_losses else None,
            "final_train_bce": state.epoch_bce[-1] if state.epoch_bce else None,
            # lambda_w times the mean margin term
            "final_train_margin_contribution": state.epoch_margin[-1] if state.epoch_margin else None,
            "steps": len(state.loss_trace),
            "best_checkpoint": str(state.best_checkpoint),
        }
        (run_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return state


def _metric_row(epoch: int, split: str, r: EvalReport) -> list:
    fmt = lambda x: f"{x:.10g}"  # noqa: E731
    return [
        epoch, split, fmt(r.loss) if r.loss is not None else "", fmt(r.macro_f1), fmt(r.accuracy),
        fmt(r.synonym.precision), fmt(r.synonym.recall), fmt(r.synonym.f1),
        fmt(r.antonym.precision), fmt(r.antonym.recall), fmt(r.antonym.f1),
    ]


def _step(batch, table, params: ModelParams, hp: HyperParams, rng: Rng) -> LossBreakdown:
    tensors = list(params)
    with GradTape() as tape:
        out = forward_batch(batch, table, params, training=True, rng=rng)
        lb = total_loss(out.probs, [p.label for p in batch], out.forward, hp)
    if not math.isfinite(lb.total):
        words = ", ".join(f"{p.w1}/{p.w2}" for p in batch)
        raise TrainingError(f"non-finite loss {lb.total} (bce={lb.bce}, margin={lb.margin}) on batch [{words}]")
    grads = tape.gradient(lb.tensor, tensors)
    sgd_step(params, grads, hp.lr)
    return lb


def load_model(path) -> ModelParams:
    params, _ = load_checkpoint(path)
    return params


__all__ = [
    "EvalReport", "LanguageData", "Prediction", "TrainState", "TrainingError",
    "evaluate", "evaluate_predictions", "predict", "report_from_counts", "sgd_step", "train",
]
