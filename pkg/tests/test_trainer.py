import csv
import dataclasses
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score, precision_score, recall_score

from provgraph.gnn import NonFiniteLoss, init_model
from provgraph.pipeline import dataset_schema, feature_dim, prepare_graphs
from provgraph.synth import generate_dataset
from provgraph.trainer import (CVSummary, EventKind, EventRecorder, InvalidFoldCount, Metrics, Trainer,
                               TrainingArguments, compute_metrics, cross_validate, evaluate, kfold_split, report,
                               stratified_holdout, train)


def confusion_oracle(y_true, y_pred):
    tp = fp = fn = tn = 0
    for t, p in zip(y_true, y_pred):
        if t == 1 and p == 1:
            tp += 1
        elif t == 0 and p == 1:
            fp += 1
        elif t == 1 and p == 0:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return tp, fp, fn, tn, precision, recall, f1


def labels_from_counts(tp, fp, fn, tn):
    y_true = [1] * tp + [0] * fp + [1] * fn + [0] * tn
    y_pred = [1] * tp + [1] * fp + [0] * fn + [0] * tn
    return y_true, y_pred


@pytest.fixture(scope="module")
def tiny():
    ds = generate_dataset("brute-force", 10, 10, 3, scale=0.002)
    schema = dataset_schema(ds.graphs)
    prepared = prepare_graphs(ds.graphs, schema, "degree")
    return ds, schema, prepared


def tiny_args(**kw):
    base = dict(epochs=4, hidden_dim=8, num_layers=2, learning_rate=0.01, feature_mode="degree", batch_size=4,
                seed=0)
    base.update(kw)
    return TrainingArguments(**base)


def tiny_model(schema, args, seed=0):
    return init_model(schema, feature_dim(schema, args.feature_mode, args.spectral_dim), args.hidden_dim,
                      args.num_layers, args.aggregation, seed=seed, readout=args.readout, dropout_rate=args.dropout)


# ----------------------------------------------------------------- metrics

def test_perfect_classifier():
    m = compute_metrics(*labels_from_counts(5, 0, 0, 5))
    assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)


def test_hand_confusion_matrix():
    m = compute_metrics(*labels_from_counts(3, 1, 2, 4))
    assert m.precision == pytest.approx(0.75)
    assert m.recall == pytest.approx(0.6)
    assert m.f1 == pytest.approx(0.6667, abs=1e-4)
    assert m.support == {"attack": 5, "benign": 5}


def test_all_negative_predictions():
    m = compute_metrics([0, 1, 1, 0], [0, 0, 0, 0])
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    assert m.precision_undefined


def test_metrics_agree_with_oracles_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        y_true = rng.integers(0, 2, n)
        y_pred = rng.integers(0, 2, n) if rng.random() > 0.1 else np.zeros(n, dtype=int)
        m = compute_metrics(y_true, y_pred)
        tp, fp, fn, tn, p, r, f1 = confusion_oracle(y_true.tolist(), y_pred.tolist())
        assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
        assert m.precision == pytest.approx(p, abs=1e-12)
        assert m.recall == pytest.approx(r, abs=1e-12)
        assert m.f1 == pytest.approx(f1, abs=1e-12)
        assert m.precision == pytest.approx(precision_score(y_true, y_pred, zero_division=0), abs=1e-12)
        assert m.recall == pytest.approx(recall_score(y_true, y_pred, zero_division=0), abs=1e-12)
        assert m.f1 == pytest.approx(f1_score(y_true, y_pred, zero_division=0), abs=1e-12)


def test_evaluate_uses_argmax_with_attack_positive(tiny):
    ds, schema, prepared = tiny
    args = tiny_args()
    model = tiny_model(schema, args)
    for p in model.parameters().values():
        p[...] = 0
    model.classifier_bias[:] = [0.0, 1.0]  # always ATTACK
    m = evaluate(model, prepared)
    assert (m.tp, m.fp, m.fn, m.tn) == (10, 10, 0, 0)
    with pytest.raises(ValueError):
        evaluate(model, [])


# ------------------------------------------------------------------- folds

def test_kfold_hundred_per_class():
    labels = [0] * 100 + [1] * 100
    folds = kfold_split(labels, 5, seed=1)
    assert len(folds) == 5
    for train_idx, test_idx in folds:
        assert len(test_idx) == 40
        assert np.sum(np.asarray(labels)[test_idx]) == 20
        assert len(np.intersect1d(train_idx, test_idx)) == 0
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(folds, kfold_split(labels, 5, seed=1)))


@pytest.mark.parametrize("k", [0, 1])
def test_kfold_invalid_count(k):
    with pytest.raises(InvalidFoldCount):
        kfold_split([0, 1] * 10, k)


def test_kfold_class_too_small():
    with pytest.raises(InvalidFoldCount):
        kfold_split([0] * 10 + [1] * 3, 5)


@settings(max_examples=100)
@given(st.integers(2, 6), st.integers(0, 30), st.integers(0, 30), st.integers(0, 2**32 - 1))
def test_kfold_partition_property(k, n0, n1, seed):
    labels = np.array([0] * (n0 + k) + [1] * (n1 + k))
    folds = kfold_split(labels, k, seed)
    tests = np.concatenate([t for _, t in folds])
    assert sorted(tests.tolist()) == list(range(len(labels)))
    for train_idx, test_idx in folds:
        assert sorted(np.r_[train_idx, test_idx].tolist()) == list(range(len(labels)))
        for c, n in ((0, n0 + k), (1, n1 + k)):
            count = int(np.sum(labels[test_idx] == c))
            assert n // k <= count <= -(-n // k)
            if n % k == 0:
                assert count == n // k


def test_stratified_holdout():
    labels = np.array([0] * 40 + [1] * 40)
    tr, va = stratified_holdout(np.arange(80), labels, 0.1, seed=0)
    assert len(va) == 8 and np.sum(labels[va]) == 4
    assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == 80


# -------------------------------------------------------------- arguments

def test_argument_validation():
    for bad in (dict(epochs=0), dict(learning_rate=0.0), dict(early_stopping_patience=0), dict(aggregation="max")):
        with pytest.raises(ValueError):
            TrainingArguments(**bad)
    args = TrainingArguments()
    assert (args.weight_decay, args.hidden_dim, args.num_layers, args.dropout, args.batch_size) == (
        0.005, 256, 2, 0.5, 8)


def test_arguments_json(tmp_path):
    path = tmp_path / "args.json"
    path.write_text(json.dumps({"epochs": 10, "aggregation": "sum", "learning_rate": 0.001}))
    args = TrainingArguments.from_json(path)
    assert (args.epochs, args.learning_rate) == (10, 0.001)
    assert TrainingArguments.from_dict(args.to_dict()) == args
    path.write_text(json.dumps({"epochs": 10, "bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        TrainingArguments.from_json(path)


# ---------------------------------------------------------------- training

def split(prepared):
    return prepared[:5] + prepared[10:15], prepared[5:10] + prepared[15:]


def test_training_events_and_checkpoints(tiny, tmp_path):
    _, schema, prepared = tiny
    args = tiny_args(checkpoint_dir=str(tmp_path / "ck"), eval_every=2)
    rec = EventRecorder()
    tr, va = split(prepared)
    model, history = train(args, tiny_model(schema, args), tr, va, [rec])
    kinds = rec.kinds
    assert kinds[-1] is EventKind.TRAIN_END
    assert kinds.count(EventKind.EPOCH_END) == 4
    assert kinds.count(EventKind.LOG) == 2
    epochs = [e.epoch for e in rec.events]
    assert epochs == sorted(epochs)
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["best.ckpt", "last.ckpt"]
    assert [r["val"] is not None for r in history["epochs"]] == [False, True, False, True]
    assert all(np.isfinite(r["train_loss"]) for r in history["epochs"])


def test_patience_one_constant_metric_stops_after_second_evaluation(tiny):
    _, schema, prepared = tiny
    args = tiny_args(epochs=10, early_stopping_patience=1)
    rec = EventRecorder()
    constant = Metrics(0.5, 0.5, 0.5, 1, 1, 1, 1)
    tr, va = split(prepared)
    trainer = Trainer(args, tiny_model(schema, args), tr, va, [rec], evaluate_fn=lambda m, s: constant)
    _, history = trainer.train()
    assert history["stopped_early"] and history["epochs_run"] == 2
    assert rec.kinds.count(EventKind.LOG) == 2
    assert EventKind.EARLY_STOP in rec.kinds
    assert rec.kinds.index(EventKind.EARLY_STOP) < rec.kinds.index(EventKind.TRAIN_END)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 6), st.one_of(st.none(), st.integers(1, 3)), st.integers(1, 3))
def test_early_stopping_never_adds_epochs(epochs, patience, eval_every):
    ds = generate_dataset("brute-force", 3, 3, 1, scale=0.002)
    schema = dataset_schema(ds.graphs)
    prepared = prepare_graphs(ds.graphs, schema, "degree")
    args = tiny_args(epochs=epochs, early_stopping_patience=patience, eval_every=eval_every, hidden_dim=4)
    _, history = train(args, tiny_model(schema, args), prepared[:2] + prepared[3:5], prepared[2:3] + prepared[5:],
                       [])
    assert history["epochs_run"] <= epochs
    assert len(history["epochs"]) == history["epochs_run"]


def test_training_is_deterministic(tiny):
    _, schema, prepared = tiny
    args = tiny_args()
    tr, va = split(prepared)
    m1, h1 = train(args, tiny_model(schema, args), tr, va, [])
    m2, h2 = train(args, tiny_model(schema, args), tr, va, [])
    assert h1 == h2 and m1 == m2


def test_training_reduces_loss(tiny):
    _, schema, prepared = tiny
    args = tiny_args(epochs=15, dropout=0.0)
    tr, va = split(prepared)
    _, history = train(args, tiny_model(schema, args), tr, va, [])
    losses = [r["train_loss"] for r in history["epochs"]]
    assert losses[-1] < losses[0]


def test_non_finite_loss_emits_train_end(tiny):
    _, schema, prepared = tiny
    args = tiny_args()
    model = tiny_model(schema, args)
    model.classifier_weight[...] = np.nan
    rec = EventRecorder()
    tr, va = split(prepared)
    with pytest.raises(NonFiniteLoss):
        train(args, model, tr, va, [rec])
    assert rec.kinds == [EventKind.TRAIN_END]
    assert "error" in rec.events[0].payload


def test_empty_sets_rejected(tiny):
    _, schema, prepared = tiny
    args = tiny_args()
    with pytest.raises(ValueError):
        train(args, tiny_model(schema, args), [], prepared, [])


# ---------------------------------------------------------------- cross-val

def test_cross_validate_deterministic_and_checkpoints(tiny, tmp_path):
    ds, _, prepared = tiny
    args = tiny_args(epochs=2, checkpoint_dir=str(tmp_path / "ck"))
    s1 = cross_validate(args, ds, k=2, seed=5, callbacks=[], prepared=prepared)
    s2 = cross_validate(dataclasses.replace(args, checkpoint_dir=None), ds, k=2, seed=5, callbacks=[],
                        prepared=prepared)
    assert [m.to_dict() for m in s1.folds] == [m.to_dict() for m in s2.folds]
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["fold0", "fold1"]
    assert len(s1.folds) == 2 and sum(m.tp + m.fn for m in s1.folds) == 10


def test_cross_validate_featurizes_when_not_given():
    ds = generate_dataset("brute-force", 4, 4, 2, scale=0.002)
    s = cross_validate(tiny_args(epochs=1, hidden_dim=4), ds, k=2, seed=0, callbacks=[])
    assert s.name == "brute-force" and len(s.folds) == 2


def test_summary_statistics():
    def metric(f1):
        return Metrics(f1, f1, f1, 0, 0, 0, 0)
    s = CVSummary([metric(1.0), metric(0.5)], k=2, seed=0)
    assert s.mean("f1") == pytest.approx(0.75) and s.std("f1") == pytest.approx(0.25)
    same = CVSummary([metric(0.8)] * 5, k=5, seed=0)
    assert same.std("recall") == 0.0


# ------------------------------------------------------------------ report

def perfect_summary(k=5):
    return CVSummary([Metrics(1.0, 1.0, 1.0, 20, 0, 0, 20)] * k, k=k, seed=1, name="brute-force")


def test_report_text_perfect_row():
    text = report(perfect_summary(), "text").decode()
    row = text.splitlines()[1]
    assert row.split()[0] == "brute-force"
    assert row.split()[1:] == ["100.00±0.00"] * 3


def test_report_json_round_trip():
    s = CVSummary([Metrics(1.0, 1.0, 1.0, 20, 0, 0, 20), Metrics(0.5, 0.4, 2 / 3, 2, 3, 1, 4, False)], 2, 3, "x",
                  [{"epochs": []}, {"epochs": []}])
    assert CVSummary.from_dict(json.loads(report(s, "json"))) == s
    assert report(s, "json") == report(s, "json")


def test_report_csv_rows():
    rows = list(csv.reader(io.StringIO(report(perfect_summary(), "csv").decode())))
    assert rows[0][:4] == ["fold", "f1", "precision", "recall"]
    assert len(rows) == 1 + 5 + 1
    assert rows[-1][1:4] == ["100.00±0.00"] * 3
    assert rows[1][1] == "100.00"


def test_report_unknown_format():
    with pytest.raises(ValueError):
        report(perfect_summary(), "xml")
