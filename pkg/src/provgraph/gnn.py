"""Relational GCN for whole-graph binary classification, in numpy.

Layer update for node ``v``::

    h_v' = relu( sum_r sum_{u in N_r(v)} c_{v,r}^-1 W_r^T h_u  +  W_0^T h_v )

with ``c = 1`` for sum aggregation and ``c = |N_r(v)|`` (incoming r-edges,
multiplicity counted) for mean aggregation.  Messages follow the stored edge
direction, src -> dst.  Node states are pooled over all nodes and an affine
head produces two logits (BENIGN, ATTACK).  Gradients are computed by hand.
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .features import FeatureSet
from .hetgraph import HeteroMultigraph, Label, Relation
from .util import atomic_write


class Aggregation(str, enum.Enum):
    SUM = "sum"
    MEAN = "mean"


class Readout(str, enum.Enum):
    SUM_POOL = "sum"
    MEAN_POOL = "mean"


class SchemaMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class RGCNLayer:
    weights: dict[Relation, np.ndarray]
    self_weight: np.ndarray
    aggregation: Aggregation = Aggregation.SUM

    @property
    def in_dim(self) -> int:
        return self.self_weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.self_weight.shape[1]


@dataclass
class RGCNModel:
    schema: list[Relation]
    layers: list[RGCNLayer]
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray
    readout: Readout = Readout.SUM_POOL
    dropout_rate: float = 0.5

    @property
    def feature_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def hidden_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def aggregation(self) -> Aggregation:
        return self.layers[0].aggregation

    def parameters(self) -> dict[str, np.ndarray]:
        """Named parameter arrays (live references) in a fixed order."""
        params: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for r in self.schema:
                params[f"layers.{i}.rel.{'|'.join(r)}"] = layer.weights[r]
            params[f"layers.{i}.self"] = layer.self_weight
        params["classifier.weight"] = self.classifier_weight
        params["classifier.bias"] = self.classifier_bias
        return params

    def copy(self) -> "RGCNModel":
        return RGCNModel(
            list(self.schema),
            [RGCNLayer({r: w.copy() for r, w in l.weights.items()}, l.self_weight.copy(), l.aggregation)
             for l in self.layers],
            self.classifier_weight.copy(), self.classifier_bias.copy(), self.readout, self.dropout_rate,
        )

    def __eq__(self, other):
        if not isinstance(other, RGCNModel):
            return NotImplemented
        a, b = self.parameters(), other.parameters()
        return (self.schema == other.schema and self.readout == other.readout
                and self.dropout_rate == other.dropout_rate and self.aggregation == other.aggregation
                and list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a))


@dataclass
class GradientTape:
    grads: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, model: RGCNModel) -> "GradientTape":
        return cls({k: np.zeros_like(v) for k, v in model.parameters().items()})

    def add_(self, other: "GradientTape", scale: float = 1.0) -> "GradientTape":
        for k, g in other.grads.items():
            self.grads[k] += scale * g
        return self

    def scale_(self, factor: float) -> "GradientTape":
        for g in self.grads.values():
            g *= factor
        return self

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.grads.values())


def init_model(schema: Sequence[Relation], feature_dim: int, hidden_dim: int = 256, num_layers: int = 2,
               aggregation: Aggregation | str = Aggregation.SUM, seed: int = 0,
               readout: Readout | str = Readout.SUM_POOL, dropout_rate: float = 0.5) -> RGCNModel:
    """Glorot-uniform weights, zero classifier bias; deterministic in ``seed``."""
    if feature_dim < 1 or hidden_dim < 1 or num_layers < 1:
        raise ValueError("dimensions and layer count must be >= 1")
    schema = sorted(tuple(r) for r in schema)
    rng = np.random.default_rng(seed)

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    layers = []
    dims = [feature_dim] + [hidden_dim] * num_layers
    for din, dout in zip(dims[:-1], dims[1:]):
        weights = {r: glorot(din, dout) for r in schema}
        layers.append(RGCNLayer(weights, glorot(din, dout), Aggregation(aggregation)))
    return RGCNModel(schema, layers, glorot(hidden_dim, 2), np.zeros(2), Readout(readout), dropout_rate)


@dataclass
class PreparedGraph:
    """Graph and features laid out for message passing against one schema.

    For every schema relation present: the distinct destination rows and a
    CSR operator mapping all node states onto those rows.
    """
    x: np.ndarray
    relations: list[tuple[int, np.ndarray, sp.csr_matrix, sp.csr_matrix]]
    label: Label | None = None
    # layer-0 messages depend only on x, so they are computed once per aggregation
    _input_messages: dict[Aggregation, list[np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    def input_messages(self, aggregation: Aggregation) -> list[np.ndarray]:
        msgs = self._input_messages.get(aggregation)
        if msgs is None:
            msgs = [(mean if aggregation is Aggregation.MEAN else total) @ self.x
                    for _, _, total, mean in self.relations]
            self._input_messages[aggregation] = msgs
        return msgs


def prepare(g: HeteroMultigraph, feats: FeatureSet | np.ndarray, schema: Sequence[Relation]) -> PreparedGraph:
    schema = [tuple(r) for r in schema]
    position = {r: j for j, r in enumerate(schema)}
    unknown = [r for r in g.relations if r not in position]
    if unknown:
        raise SchemaMismatch(f"graph relation {unknown[0]} is not in the model schema")
    if isinstance(feats, FeatureSet):
        missing = [t for t in g.node_types if t not in feats.blocks or len(feats.blocks[t]) != len(g.node_ids[t])]
        if missing:
            raise SchemaMismatch(f"features do not cover node type {missing[0]!r}")
        x = feats.stacked(g.node_types)
    else:
        x = np.asarray(feats, dtype=np.float64)
    if x.shape[0] != g.num_nodes:
        raise SchemaMismatch(f"{x.shape[0]} feature rows for {g.num_nodes} nodes")
    n = g.num_nodes
    rels = []
    for r in g.relations:
        src, dst = g.global_edges(r)
        rows, local = np.unique(dst, return_inverse=True)
        total = sp.csr_matrix((np.ones(len(src)), (local, src)), shape=(len(rows), n))
        total.sum_duplicates()
        counts = np.asarray(total.sum(axis=1)).ravel()
        mean = sp.csr_matrix(sp.diags(1.0 / counts) @ total)
        rels.append((position[r], rows, total, mean))
    rels.sort(key=lambda t: t[0])
    return PreparedGraph(np.ascontiguousarray(x), rels, g.label)


def _check_dims(model: RGCNModel, pg: PreparedGraph) -> None:
    if pg.x.shape[1] != model.feature_dim:
        raise SchemaMismatch(f"feature dim {pg.x.shape[1]} != model input dim {model.feature_dim}")


def forward(model: RGCNModel, g: HeteroMultigraph | PreparedGraph, feats: FeatureSet | np.ndarray | None = None,
            train_mode: bool = False, seed: int = 0):
    """Logits (length 2) and the activations needed by :func:`backward`."""
    pg = g if isinstance(g, PreparedGraph) else prepare(g, feats, model.schema)
    _check_dims(model, pg)
    rng = np.random.default_rng(seed) if train_mode and model.dropout_rate > 0 else None
    keep = 1.0 - model.dropout_rate
    H = pg.x
    cache = []
    for depth, layer in enumerate(model.layers):
        agg = layer.aggregation
        if depth == 0:
            msgs = pg.input_messages(agg)
        else:
            msgs = [(mean if agg is Aggregation.MEAN else total) @ H for _, _, total, mean in pg.relations]
        Z = H @ layer.self_weight
        for (j, rows, _, _), M in zip(pg.relations, msgs):
            Z[rows] += M @ layer.weights[model.schema[j]]
        out = np.maximum(Z, 0.0)
        mask = None
        if rng is not None:
            mask = (rng.random(out.shape) < keep) / keep
            out = out * mask
        cache.append((H, Z, msgs, mask))
        H = out
    pooled = H.sum(axis=0)
    if model.readout is Readout.MEAN_POOL and pg.num_nodes:
        pooled = pooled / pg.num_nodes
    logits = pooled @ model.classifier_weight + model.classifier_bias
    return logits, (pg, cache, pooled)


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the logits."""
    # non-finite logits surface as NonFiniteLoss in the caller, not as warnings
    with np.errstate(invalid="ignore", over="ignore"):
        shift = logits - logits.max()
        lse = np.log(np.exp(shift).sum())
        probs = np.exp(shift - lse)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(lse - shift[label]), grad


def backward(model: RGCNModel, activations, dlogits: np.ndarray) -> GradientTape:
    pg, cache, pooled = activations
    grads: dict[str, np.ndarray] = {}
    dpooled = model.classifier_weight @ dlogits
    n = pg.num_nodes
    if model.readout is Readout.MEAN_POOL and n:
        dpooled = dpooled / n
    dH = np.broadcast_to(dpooled, (n, len(dpooled)))
    layer_grads = []
    for depth in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[depth]
        agg = layer.aggregation
        H_in, Z, msgs, mask = cache[depth]
        if mask is not None:
            dH = dH * mask
        dZ = np.where(Z > 0, dH, 0.0)
        lg = {"self": H_in.T @ dZ}
        need_input = depth > 0
        dH_in = dZ @ layer.self_weight.T if need_input else None
        for (j, rows, total, mean), M in zip(pg.relations, msgs):
            r = model.schema[j]
            dZr = dZ[rows]
            lg[r] = M.T @ dZr
            if need_input:
                A = mean if agg is Aggregation.MEAN else total
                dH_in += A.T @ (dZr @ layer.weights[r].T)
        layer_grads.append((depth, lg))
        dH = dH_in
    for depth, lg in sorted(layer_grads, key=lambda t: t[0]):
        layer = model.layers[depth]
        for r in model.schema:
            grads[f"layers.{depth}.rel.{'|'.join(r)}"] = lg.get(r, np.zeros_like(layer.weights[r]))
        grads[f"layers.{depth}.self"] = lg["self"]
    grads["classifier.weight"] = np.outer(pooled, dlogits)
    grads["classifier.bias"] = dlogits.copy()
    return GradientTape(grads)


def loss_and_backward(model: RGCNModel, g: HeteroMultigraph | PreparedGraph, feats=None,
                      label: Label | int | None = None, train_mode: bool = False,
                      seed: int = 0) -> tuple[float, GradientTape]:
    """Cross-entropy of one graph and the exact parameter gradient."""
    logits, acts = forward(model, g, feats, train_mode, seed)
    if label is None:
        label = acts[0].label
    if label is None:
        raise ValueError("graph carries no label")
    loss, dlogits = cross_entropy(logits, int(Label(label)))
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}; logits {logits}")
    tape = backward(model, acts, dlogits)
    if not tape.is_finite():
        raise NonFiniteLoss("gradient has non-finite entries")
    return loss, tape


def predict(model: RGCNModel, g: HeteroMultigraph | PreparedGraph, feats=None) -> int:
    logits, _ = forward(model, g, feats, train_mode=False)
    return int(np.argmax(logits))


@dataclass
class AdamState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(model: RGCNModel, tape: GradientTape, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> RGCNModel:
    """One Adam update in place; ``weight_decay * theta`` is added to the gradient."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, theta in model.parameters().items():
        g = tape.grads[name]
        if weight_decay:
            g = g + weight_decay * theta
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"PGCK"


def save_checkpoint(model: RGCNModel, path: str | Path, extra: dict | None = None) -> None:
    """JSON header (schema, dims, aggregation, ...) followed by raw float64 parameters."""
    params = model.parameters()
    header = {
        "schema": [list(r) for r in model.schema],
        "feature_dim": model.feature_dim,
        "hidden_dim": model.hidden_dim,
        "num_layers": len(model.layers),
        "aggregation": model.aggregation.value,
        "readout": model.readout.value,
        "dropout_rate": model.dropout_rate,
        "parameters": [[k, list(v.shape)] for k, v in params.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for v in params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    atomic_write(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[RGCNModel, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen])
    model = init_model([tuple(r) for r in header["schema"]], header["feature_dim"], header["hidden_dim"],
                       header["num_layers"], header["aggregation"], 0, header["readout"], header["dropout_rate"])
    params = model.parameters()
    pos = 8 + hlen
    for name, shape in header["parameters"]:
        size = int(np.prod(shape)) * 8
        chunk = data[pos:pos + size]
        if len(chunk) != size:
            raise ValueError(f"{path}: parameter blob truncated at {name}")
        params[name][...] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        pos += size
    return model, header["extra"]
