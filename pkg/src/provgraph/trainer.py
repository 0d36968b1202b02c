"""Training harness: arguments, callbacks, early stopping, checkpoints and
stratified k-fold cross-validation for graph classification."""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .gnn import (AdamState, Aggregation, GradientTape, NonFiniteLoss, PreparedGraph, RGCNModel, adam_step,
                  init_model, loss_and_backward, predict, save_checkpoint)
from .hetgraph import Label
from .pipeline import dataset_schema, feature_dim, prepare_graphs

log = logging.getLogger(__name__)


@dataclass
class TrainingArguments:
    epochs: int = 10
    learning_rate: float = 0.001
    weight_decay: float = 0.005
    aggregation: str = "sum"
    hidden_dim: int = 256
    num_layers: int = 2
    dropout: float = 0.5
    early_stopping_patience: Optional[int] = None
    checkpoint_dir: Optional[str] = None
    eval_every: int = 1
    seed: int = 0
    batch_size: int = 8
    readout: str = "sum"
    feature_mode: str = "combined"
    spectral_dim: int = 16
    coupling: float = 1.0
    validation_fraction: float = 0.1
    restore_best: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.early_stopping_patience is not None and self.early_stopping_patience < 1:
            raise ValueError("early_stopping_patience must be >= 1 when set")
        if self.eval_every < 1 or self.batch_size < 1:
            raise ValueError("eval_every and batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        Aggregation(self.aggregation)
        if self.feature_mode not in ("degree", "spectral", "combined"):
            raise ValueError(f"unknown feature_mode {self.feature_mode!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainingArguments":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown training argument(s): {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainingArguments":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# per-vector R-GCN schedules: (epochs, aggregation, learning rate)
RGCN_SCHEDULES: dict[str, tuple[int, str, float]] = {
    "brute-force": (10, "sum", 0.001),
    "cl-injection": (7, "sum", 0.0005),
    "sql-injection": (20, "mean", 0.0005),
    "xss-dom": (10, "sum", 0.0005),
    "xss-reflected": (20, "mean", 0.0005),
    "xss-stored": (7, "sum", 0.001),
}


def schedule_for(vector: str, **overrides) -> TrainingArguments:
    epochs, aggregation, lr = RGCN_SCHEDULES[str(getattr(vector, "value", vector))]
    return TrainingArguments(**{"epochs": epochs, "aggregation": aggregation, "learning_rate": lr, **overrides})


# ------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Metrics:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    # no positive predictions: precision was defined as 0
    precision_undefined: bool = False

    @property
    def support(self) -> dict[str, int]:
        return {"attack": self.tp + self.fn, "benign": self.fp + self.tn}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int]) -> Metrics:
    """Precision/recall/F1 of the ATTACK class."""
    t = np.asarray(y_true, dtype=np.int64) == int(Label.ATTACK)
    p = np.asarray(y_pred, dtype=np.int64) == int(Label.ATTACK)
    tp, fp = int(np.sum(t & p)), int(np.sum(~t & p))
    fn, tn = int(np.sum(t & ~p)), int(np.sum(~t & ~p))
    undefined = tp + fp == 0
    precision = 0.0 if undefined else tp / (tp + fp)
    recall = 0.0 if tp + fn == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return Metrics(f1, precision, recall, tp, fp, fn, tn, undefined)


def evaluate(model: RGCNModel, test_set: Sequence[PreparedGraph]) -> Metrics:
    if not test_set:
        raise ValueError("test set is empty")
    preds = [predict(model, pg) for pg in test_set]
    return compute_metrics([int(pg.label) for pg in test_set], preds)


# ----------------------------------------------------------------- callbacks

class EventKind(str, enum.Enum):
    EPOCH_END = "EPOCH_END"
    LOG = "LOG"
    CHECKPOINT_SAVED = "CHECKPOINT_SAVED"
    EARLY_STOP = "EARLY_STOP"
    TRAIN_END = "TRAIN_END"


@dataclass(frozen=True)
class CallbackEvent:
    kind: EventKind
    epoch: int
    payload: dict = field(default_factory=dict)


Callback = Callable[[CallbackEvent], None]


class LoggingCallback:
    """Default callback: one log line per event."""

    def __init__(self, logger: logging.Logger = log, prefix: str = ""):
        self.logger = logger
        self.prefix = prefix

    def __call__(self, event: CallbackEvent) -> None:
        p = event.payload
        if event.kind is EventKind.LOG:
            self.logger.info("%sepoch %d loss %.4f val f1 %.4f", self.prefix, event.epoch,
                             p["train_loss"], p["val"]["f1"])
        elif event.kind is EventKind.EPOCH_END:
            self.logger.debug("%sepoch %d loss %.4f", self.prefix, event.epoch, p["train_loss"])
        else:
            self.logger.info("%s%s at epoch %d %s", self.prefix, event.kind.value, event.epoch,
                             {k: v for k, v in p.items() if k != "val"})


class EventRecorder:
    """Keeps every event; handy in tests and notebooks."""

    def __init__(self):
        self.events: list[CallbackEvent] = []

    def __call__(self, event: CallbackEvent) -> None:
        self.events.append(event)

    @property
    def kinds(self) -> list[EventKind]:
        return [e.kind for e in self.events]


def _seed_of(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(1)[0])


class Trainer:
    """Mini-batch training of one model with validation-driven early stopping.

    Graphs in a batch are processed independently; the batch loss and gradient
    are means over its graphs.
    """

    def __init__(self, args: TrainingArguments, model: RGCNModel, train_set: Sequence[PreparedGraph],
                 eval_set: Sequence[PreparedGraph], callbacks: Sequence[Callback] | None = None,
                 evaluate_fn: Callable[[RGCNModel, Sequence[PreparedGraph]], Metrics] = evaluate):
        if not train_set or not eval_set:
            raise ValueError("training and validation sets must be non-empty")
        self.args = args
        self.model = model
        self.train_set = list(train_set)
        self.eval_set = list(eval_set)
        self.callbacks = list(callbacks) if callbacks is not None else [LoggingCallback()]
        self.evaluate_fn = evaluate_fn
        self.optimizer = AdamState()

    def _emit(self, kind: EventKind, epoch: int, **payload) -> None:
        event = CallbackEvent(kind, epoch, payload)
        for cb in self.callbacks:
            cb(event)

    def _train_epoch(self, epoch: int) -> float:
        args = self.args
        order = np.random.default_rng([args.seed, epoch]).permutation(len(self.train_set))
        losses = []
        for start in range(0, len(order), args.batch_size):
            batch = order[start:start + args.batch_size]
            tape = GradientTape.zeros_like(self.model)
            for i in batch:
                pg = self.train_set[i]
                loss, g = loss_and_backward(self.model, pg, label=pg.label, train_mode=True,
                                            seed=_seed_of(args.seed, epoch, i))
                tape.add_(g, 1.0 / len(batch))
                losses.append(loss)
            adam_step(self.model, tape, self.optimizer, args.learning_rate, args.weight_decay)
        return float(np.mean(losses))

    def train(self) -> tuple[RGCNModel, dict]:
        args = self.args
        ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
        history: dict = {"epochs": [], "best_epoch": None, "best_f1": None, "stopped_early": False}
        best_f1, best_params, stale = -np.inf, None, 0
        epoch = 0
        try:
            for epoch in range(1, args.epochs + 1):
                train_loss = self._train_epoch(epoch)
                record = {"epoch": epoch, "train_loss": train_loss, "val": None}
                history["epochs"].append(record)
                self._emit(EventKind.EPOCH_END, epoch, train_loss=train_loss)
                if epoch % args.eval_every:
                    continue
                metrics = self.evaluate_fn(self.model, self.eval_set)
                record["val"] = metrics.to_dict()
                self._emit(EventKind.LOG, epoch, train_loss=train_loss, val=metrics.to_dict())
                if metrics.f1 > best_f1:
                    best_f1, stale = metrics.f1, 0
                    history["best_epoch"], history["best_f1"] = epoch, metrics.f1
                    best_params = self.model.copy()
                    if ckpt_dir is not None:
                        path = ckpt_dir / "best.ckpt"
                        save_checkpoint(self.model, path, {"epoch": epoch, "val_f1": metrics.f1, "args": args.to_dict()})
                        self._emit(EventKind.CHECKPOINT_SAVED, epoch, path=str(path), val_f1=metrics.f1)
                else:
                    stale += 1
                    if args.early_stopping_patience is not None and stale >= args.early_stopping_patience:
                        history["stopped_early"] = True
                        self._emit(EventKind.EARLY_STOP, epoch, best_epoch=history["best_epoch"],
                                   best_f1=best_f1)
                        break
        except NonFiniteLoss as exc:
            self._emit(EventKind.TRAIN_END, epoch, error=str(exc))
            raise
        if ckpt_dir is not None:
            path = ckpt_dir / "last.ckpt"
            save_checkpoint(self.model, path, {"epoch": epoch, "args": args.to_dict()})
            self._emit(EventKind.CHECKPOINT_SAVED, epoch, path=str(path))
        if args.restore_best and best_params is not None:
            self.model = best_params
        history["epochs_run"] = epoch
        self._emit(EventKind.TRAIN_END, epoch, epochs_run=epoch, best_epoch=history["best_epoch"])
        return self.model, history


def train(args: TrainingArguments, model: RGCNModel, train_set: Sequence[PreparedGraph],
          eval_set: Sequence[PreparedGraph], callbacks: Sequence[Callback] | None = None):
    return Trainer(args, model, train_set, eval_set, callbacks).train()


# --------------------------------------------------------- cross-validation

class InvalidFoldCount(ValueError):
    pass


def kfold_split(labels: Sequence[int], k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified folds: each class is shuffled and dealt into ``k`` near-equal parts."""
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise InvalidFoldCount(f"need at least 2 folds, got {k}")
    classes = np.unique(labels)
    for c in classes:
        if np.sum(labels == c) < k:
            raise InvalidFoldCount(f"class {c} has fewer than {k} members")
    rng = np.random.default_rng(seed)
    test_parts: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        for f, chunk in enumerate(np.array_split(members, k)):
            test_parts[f].append(chunk)
    folds = []
    all_idx = np.arange(len(labels))
    for parts in test_parts:
        test = np.sort(np.concatenate(parts))
        folds.append((np.setdiff1d(all_idx, test), test))
    return folds


def stratified_holdout(indices: np.ndarray, labels: np.ndarray, fraction: float,
                       seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``indices`` into (train, validation) keeping class proportions."""
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(labels[indices]):
        members = rng.permutation(indices[labels[indices] == c])
        n_val = int(round(fraction * len(members)))
        if len(members) >= 2:
            n_val = min(max(n_val, 1), len(members) - 1)
        else:
            n_val = 0
        val.append(members[:n_val])
        train.append(members[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


METRIC_NAMES = ("f1", "precision", "recall")


@dataclass
class CVSummary:
    folds: list[Metrics]
    k: int
    seed: int
    name: str = ""
    histories: list[dict] = field(default_factory=list)

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(m, metric) for m in self.folds]))

    def std(self, metric: str) -> float:
        # population std: the k folds are the whole experiment
        return float(np.std([getattr(m, metric) for m in self.folds]))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "k": self.k,
            "seed": self.seed,
            "folds": [m.to_dict() for m in self.folds],
            "mean": {m: self.mean(m) for m in METRIC_NAMES},
            "std": {m: self.std(m) for m in METRIC_NAMES},
            "histories": self.histories,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CVSummary":
        return cls([Metrics(**m) for m in doc["folds"]], doc["k"], doc["seed"], doc.get("name", ""),
                   doc.get("histories", []))

    def __eq__(self, other):
        if not isinstance(other, CVSummary):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def cross_validate(args: TrainingArguments, dataset, k: int = 5, seed: int | None = None,
                   callbacks: Sequence[Callback] | None = None, prepared: Sequence[PreparedGraph] | None = None,
                   name: str | None = None) -> CVSummary:
    """k-fold CV: each fold's training part is split 90/10 into train and
    validation, a fresh model is trained, and the held-out fold is scored."""
    seed = args.seed if seed is None else seed
    graphs = dataset.graphs
    labels = np.array([int(g.label) for g in graphs], dtype=np.int64)
    folds = kfold_split(labels, k, seed)
    schema = dataset_schema(graphs)
    if prepared is None:
        prepared = prepare_graphs(graphs, schema, args.feature_mode, args.spectral_dim, args.coupling, seed)
    dim = feature_dim(schema, args.feature_mode, args.spectral_dim)
    results, histories = [], []
    for f, (train_idx, test_idx) in enumerate(folds):
        tr, va = stratified_holdout(train_idx, labels, args.validation_fraction, _seed_of(seed, f, 1))
        fold_args = dataclasses.replace(
            args, seed=_seed_of(seed, f, 2),
            checkpoint_dir=str(Path(args.checkpoint_dir) / f"fold{f}") if args.checkpoint_dir else None)
        model = init_model(schema, dim, args.hidden_dim, args.num_layers, args.aggregation,
                           seed=_seed_of(seed, f, 3), readout=args.readout, dropout_rate=args.dropout)
        prefix = f"[fold {f}] "
        cbs = list(callbacks) if callbacks is not None else [LoggingCallback(prefix=prefix)]
        model, history = Trainer(fold_args, model, [prepared[i] for i in tr], [prepared[i] for i in va],
                                 cbs).train()
        metrics = evaluate(model, [prepared[i] for i in test_idx])
        log.info("%stest f1 %.4f precision %.4f recall %.4f", prefix, metrics.f1, metrics.precision,
                 metrics.recall)
        results.append(metrics)
        histories.append(history)
    if name is None:
        name = getattr(getattr(dataset, "vector", None), "value", "") or ""
    return CVSummary(results, k, seed, name, histories)


# ------------------------------------------------------------------ reports

def _pct(mean: float, std: float) -> str:
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def report(summary: CVSummary, fmt: str = "text") -> bytes:
    """Render a summary as a ``text`` table, ``json`` or ``csv`` (percent scale)."""
    fmt = fmt.lower().replace("_table", "")
    if fmt == "json":
        return (json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n").encode()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "f1", "precision", "recall", "tp", "fp", "fn", "tn"])
        for i, m in enumerate(summary.folds):
            w.writerow([i] + [f"{100 * getattr(m, k):.2f}" for k in METRIC_NAMES] + [m.tp, m.fp, m.fn, m.tn])
        w.writerow(["mean±std"] + [_pct(summary.mean(k), summary.std(k)) for k in METRIC_NAMES]
                   + [sum(getattr(m, c) for m in summary.folds) for c in ("tp", "fp", "fn", "tn")])
        return buf.getvalue().encode()
    if fmt == "text":
        name = summary.name or "dataset"
        cells = [_pct(summary.mean(k), summary.std(k)) for k in METRIC_NAMES]
        width = max(len(name), 7)
        lines = [f"{'':<{width}}  {'F1':<15}{'Precision':<15}{'Recall':<15}".rstrip(),
                 f"{name:<{width}}  " + "".join(f"{c:<15}" for c in cells).rstrip()]
        return ("\n".join(lines) + "\n").encode()
    raise ValueError(f"unknown report format {fmt!r}")
