"""Node features: per-relation degrees and multilayer spectral embeddings.

The spectral part stacks one normalized Laplacian per canonical relation into
a supra-Laplacian over ``m`` copies of the node set,

    S = blockdiag(L_1, ..., L_m) + gamma * (m I - 1 1^T) (x) I_n,

i.e. ``L_a + (m-1) gamma I`` on the diagonal blocks and ``-gamma I`` coupling
every pair of copies of the same node.  Its smallest eigenvectors are read back
into node space by summing a node's entries over its ``m`` copies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .hetgraph import HeteroMultigraph, Relation
from .lobpcg import LobpcgResult, lobpcg, orthonormalize

DEFAULT_K = 16
DEFAULT_GAMMA = 1.0
DENSE_THRESHOLD = 512

# scipy CSR is the storage; symmetry is guaranteed by construction
SparseSymMatrix = sp.csr_matrix


class UnknownRelation(KeyError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class FeatureSet:
    blocks: dict[str, np.ndarray]
    schema: list[str] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return len(self.schema)

    def stacked(self, node_types: Sequence[str]) -> np.ndarray:
        """Rows for every node in global (type-major) order."""
        return np.vstack([self.blocks[t] for t in node_types]) if node_types else np.zeros((0, self.dim))

    def concat(self, other: "FeatureSet") -> "FeatureSet":
        if set(self.blocks) != set(other.blocks):
            raise DimensionMismatch("feature sets cover different node types")
        return FeatureSet({t: np.hstack([self.blocks[t], other.blocks[t]]) for t in self.blocks},
                          self.schema + other.schema)

    def to_json(self) -> dict:
        return {t: {"schema": list(self.schema), "rows": m.tolist()} for t, m in self.blocks.items()}

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureSet":
        schema: list[str] = []
        blocks = {}
        for t, body in doc.items():
            schema = list(body["schema"])
            blocks[t] = np.asarray(body["rows"], dtype=np.float64).reshape(-1, len(schema))
        return cls(blocks, schema)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (self.schema == other.schema and list(self.blocks) == list(other.blocks)
                and all(np.array_equal(self.blocks[t], other.blocks[t]) for t in self.blocks))


def relation_name(r: Relation) -> str:
    return "|".join(r)


def degree_features(g: HeteroMultigraph, relations: Sequence[Relation] | None = None) -> FeatureSet:
    """``(in, out)`` degree of each node under each relation, multiplicity counted.

    ``relations`` fixes the column order (e.g. a dataset-wide schema); it
    defaults to the graph's own relations.  Relations absent from ``g`` give
    zero columns.
    """
    relations = list(g.relations) if relations is None else list(relations)
    blocks = {t: np.zeros((len(ids), 2 * len(relations))) for t, ids in g.node_ids.items()}
    for j, r in enumerate(relations):
        e = g.relations.get(r)
        if e is None:
            continue
        st, _, dt = r
        blocks[dt][:, 2 * j] += np.bincount(e.dst, minlength=len(g.node_ids[dt]))
        blocks[st][:, 2 * j + 1] += np.bincount(e.src, minlength=len(g.node_ids[st]))
    schema = [f"{d}:{relation_name(r)}" for r in relations for d in ("in", "out")]
    return FeatureSet(blocks, schema)


def _laplacian_from_pairs(a: np.ndarray, b: np.ndarray, n: int) -> sp.csr_matrix:
    """Normalized Laplacian of the simple undirected graph on ``n`` local
    indices spanned by the pairs ``(a, b)``.  Self-loops and repeats are
    dropped; isolated rows are left zero."""
    keep = a != b
    a, b = a[keep], b[keep]
    A = sp.coo_matrix((np.ones(2 * len(a)), (np.concatenate([a, b]), np.concatenate([b, a]))), shape=(n, n)).tocsr()
    A.data[:] = 1.0  # duplicates were summed; collapse to simple
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    Dm = sp.diags(inv_sqrt)
    L = sp.diags(nz.astype(np.float64)) - Dm @ A @ Dm
    return sp.csr_matrix(L)


def normalized_laplacian(g: HeteroMultigraph, r: Relation) -> tuple[sp.csr_matrix, np.ndarray]:
    """``I - D^-1/2 A D^-1/2`` over the nodes touched by relation ``r``.

    Returns the matrix and, for each of its rows, the node's global index
    (see :meth:`HeteroMultigraph.type_offsets`).
    """
    r = tuple(r)
    if r not in g.relations:
        raise UnknownRelation(r)
    src, dst = g.global_edges(r)
    nodes, inverse = np.unique(np.concatenate([src, dst]), return_inverse=True)
    m = len(src)
    return _laplacian_from_pairs(inverse[:m], inverse[m:], len(nodes)), nodes


def embed(L: sp.csr_matrix, index: np.ndarray, n: int) -> sp.csr_matrix:
    """Zero-pad a local Laplacian into the ``n``-node global index space."""
    L = L.tocoo()
    return sp.csr_matrix((L.data, (index[L.row], index[L.col])), shape=(n, n))


def build_block_matrix(laplacians: Sequence[sp.spmatrix], gamma: float = DEFAULT_GAMMA) -> sp.csr_matrix:
    """Assemble the supra-Laplacian of layers sharing one global node index."""
    if gamma < 0:
        raise ValueError("coupling must be nonnegative")
    if not laplacians:
        raise DimensionMismatch("need at least one layer")
    n = laplacians[0].shape[0]
    for L in laplacians:
        if L.shape != (n, n):
            raise DimensionMismatch(f"layer of shape {L.shape} in a stack of {n}x{n} layers")
    m = len(laplacians)
    diag = sp.block_diag(laplacians, format="csr")
    if m == 1 or gamma == 0:
        return sp.csr_matrix(diag)
    coupling = sp.kron(sp.csr_matrix(m * np.eye(m) - np.ones((m, m))), sp.identity(n), format="csr")
    return sp.csr_matrix(diag + gamma * coupling)


class SupraOperator:
    """Matrix-free product with the supra-Laplacian.

    Materialising the coupling would cost ``m(m-1)n`` nonzeros; here each layer
    only touches its own nodes.  Pure function of its input.
    """

    def __init__(self, layers: Sequence[tuple[sp.csr_matrix, np.ndarray]], n: int, gamma: float):
        self.layers = list(layers)
        self.n = n
        self.m = len(self.layers)
        self.gamma = gamma

    @property
    def shape(self) -> tuple[int, int]:
        return self.m * self.n, self.m * self.n

    def __call__(self, X: np.ndarray) -> np.ndarray:
        b = X.shape[1]
        Xs = X.reshape(self.m, self.n, b)
        out = (self.gamma * self.m) * Xs - self.gamma * Xs.sum(axis=0, keepdims=True)
        for a, (L, index) in enumerate(self.layers):
            out[a, index] += L @ Xs[a, index]
        return out.reshape(self.m * self.n, b)

    def dense(self) -> np.ndarray:
        return build_block_matrix([embed(L, idx, self.n) for L, idx in self.layers], self.gamma).toarray()

    def preconditioner(self, shift: float = 1e-2) -> Callable[[np.ndarray], np.ndarray]:
        """Inverse of ``diag(S) + shift I`` with the coupling kept exact.

        Per node the kept part is ``diag(d) + gamma m I - gamma 1 1^T`` over its
        ``m`` copies, inverted by Sherman-Morrison.  SPD for ``shift > 0``.
        """
        m, n, gamma = self.m, self.n, self.gamma
        D = np.zeros((m, n))
        for a, (L, index) in enumerate(self.layers):
            D[a, index] = L.diagonal()
        inv = 1.0 / (D + gamma * m + shift)
        corr = gamma / (1.0 - gamma * inv.sum(axis=0))

        def apply(X: np.ndarray) -> np.ndarray:
            b = X.shape[1]
            Y = inv[..., None] * X.reshape(m, n, b)
            Y += inv[..., None] * (corr[:, None] * Y.sum(axis=0))[None]
            return Y.reshape(m * n, b)

        return apply


def _canonical_signs(V: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if V.size == 0:
        return V
    pivots = np.abs(V).argmax(axis=0)
    signs = np.sign(V[pivots, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def spectral_embedding(g: HeteroMultigraph, k: int = DEFAULT_K, gamma: float = DEFAULT_GAMMA, *,
                       seed: int = 0, tol: float = 1e-6, max_iter: int = 200,
                       dense_threshold: int = DENSE_THRESHOLD,
                       precondition: bool = False) -> tuple[np.ndarray, LobpcgResult | None]:
    """``n x k`` node embedding (global order) from the supra-Laplacian.

    Columns beyond the supra dimension are zero.  The second value is the
    eigensolver result, or None when the dense path was taken.
    """
    n = g.num_nodes
    out = np.zeros((n, k))
    if n == 0 or not g.relations:
        return out, None
    layers = [normalized_laplacian(g, r) for r in g.relations]
    op = SupraOperator(layers, n, gamma)
    dim = op.shape[0]
    kk = min(k, dim)
    result = None
    if dim <= dense_threshold or 3 * kk >= dim:
        w, V = np.linalg.eigh(op.dense())
        V = V[:, :kk]
    else:
        rng = np.random.default_rng(seed)
        X0 = orthonormalize(rng.standard_normal((dim, kk)))
        M = op.preconditioner() if precondition else None
        result = lobpcg(op, dim, kk, X0, tol=tol, max_iter=max_iter, apply_M=M)
        V = result.eigenvectors
    V = _canonical_signs(V)
    out[:, :kk] = V.reshape(op.m, n, kk).sum(axis=0)
    return out, result


def split_by_type(g: HeteroMultigraph, rows: np.ndarray) -> dict[str, np.ndarray]:
    offsets = g.type_offsets()
    return {t: rows[offsets[t]:offsets[t] + len(ids)] for t, ids in g.node_ids.items()}


def spectral_node_features(g: HeteroMultigraph, k: int = DEFAULT_K, gamma: float = DEFAULT_GAMMA,
                           relations: Sequence[Relation] | None = None, **solver) -> FeatureSet:
    """Degree features followed by ``k`` spectral columns."""
    emb, _ = spectral_embedding(g, k, gamma, **solver)
    spectral = FeatureSet(split_by_type(g, emb), [f"spectral:{i}" for i in range(k)])
    return degree_features(g, relations).concat(spectral)


def node_features(g: HeteroMultigraph, mode: str = "combined", relations: Sequence[Relation] | None = None,
                  k: int = DEFAULT_K, gamma: float = DEFAULT_GAMMA, **solver) -> FeatureSet:
    """Features by ``mode``: ``degree``, ``spectral`` or ``combined``."""
    if mode == "degree":
        return degree_features(g, relations)
    if mode == "combined":
        return spectral_node_features(g, k, gamma, relations, **solver)
    if mode == "spectral":
        emb, _ = spectral_embedding(g, k, gamma, **solver)
        return FeatureSet(split_by_type(g, emb), [f"spectral:{i}" for i in range(k)])
    raise ValueError(f"unknown feature mode {mode!r}")
