"""Seeded synthetic provenance graphs for six web-attack scenarios.

Stands in for the VM capture stage: every generated graph matches the average
node, edge and relation-type counts published for its (vector, class) row,
up to a uniform jitter, and attack graphs carry a vector-specific motif.

Seeding
-------
A dataset seed ``s`` expands to per-graph seeds with SplitMix64::

    graph_seed(s, i) = splitmix64(splitmix64(s) XOR i)      (all mod 2**64)

for the global index ``i`` (benign block first, then attack).  Inside one
graph, independent numpy streams are keyed by ``(seed, vector, purpose)`` so
that a benign and an attack graph built from the same seed share their
backbone relation family.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hetgraph import HeteroMultigraph, Label, Relation, RelationEdges, deserialize, serialize, stats
from .util import atomic_write

MASK64 = (1 << 64) - 1


class Vector(str, enum.Enum):
    XSS_STORED = "xss-stored"
    XSS_REFLECTED = "xss-reflected"
    XSS_DOM = "xss-dom"
    CL_INJECTION = "cl-injection"
    SQL_INJECTION = "sql-injection"
    BRUTE_FORCE = "brute-force"

    @classmethod
    def parse(cls, name: str) -> "Vector":
        key = name.strip().lower().replace("_", "-")
        for v in cls:
            if v.value == key or v.name.lower().replace("_", "-") == key:
                return v
        raise ValueError(f"unknown attack vector {name!r}; choose from {', '.join(v.value for v in cls)}")


# average (nodes, edges, relation types) per (vector, class)
TARGET_STATS: dict[tuple[Vector, Label], tuple[int, int, int]] = {
    (Vector.XSS_STORED, Label.BENIGN): (19_436, 463_682, 30),
    (Vector.XSS_STORED, Label.ATTACK): (19_547, 480_179, 31),
    (Vector.XSS_REFLECTED, Label.BENIGN): (33_481, 824_276, 31),
    (Vector.XSS_REFLECTED, Label.ATTACK): (24_435, 666_705, 32),
    (Vector.XSS_DOM, Label.BENIGN): (31_243, 753_519, 30),
    (Vector.XSS_DOM, Label.ATTACK): (30_261, 751_133, 32),
    (Vector.CL_INJECTION, Label.BENIGN): (32_996, 793_318, 29),
    (Vector.CL_INJECTION, Label.ATTACK): (25_720, 631_633, 30),
    (Vector.SQL_INJECTION, Label.BENIGN): (22_903, 543_266, 30),
    (Vector.SQL_INJECTION, Label.ATTACK): (29_576, 733_375, 30),
    (Vector.BRUTE_FORCE, Label.BENIGN): (21_518, 517_101, 30),
    (Vector.BRUTE_FORCE, Label.ATTACK): (418, 416, 1),
}

BRUTE_FORCE_RELATION: Relation = ("socket", "WasDerivedFrom", "socket")

# share of the node budget per node type (renormalised over the types present)
NODE_TYPE_WEIGHTS = {
    "task": 0.12, "process_memory": 0.08, "file": 0.22, "directory": 0.06, "path": 0.15,
    "socket": 0.08, "pipe": 0.04, "packet": 0.06, "argv": 0.05, "envp": 0.05,
    "machine": 0.01, "xattr": 0.03, "link": 0.02, "shm": 0.01, "mmaped_file": 0.01,
}

# (relation, share of the edge budget); present in every benign backbone
CORE_RELATIONS: list[tuple[Relation, float]] = [
    (("task", "Used", "file"), 0.14),
    (("file", "WasGeneratedBy", "task"), 0.08),
    (("task", "Used", "path"), 0.07),
    (("path", "WasDerivedFrom", "file"), 0.03),
    (("task", "WasInformedBy", "task"), 0.08),
    (("process_memory", "WasGeneratedBy", "task"), 0.05),
    (("task", "Used", "process_memory"), 0.06),
    (("process_memory", "WasDerivedFrom", "path"), 0.02),
    (("task", "Used", "socket"), 0.05),
    (("socket", "WasGeneratedBy", "task"), 0.04),
    (("packet", "WasDerivedFrom", "socket"), 0.03),
    (("socket", "WasDerivedFrom", "packet"), 0.03),
    (("task", "Used", "directory"), 0.03),
    (("directory", "WasGeneratedBy", "task"), 0.01),
    (("file", "WasDerivedFrom", "file"), 0.02),
    (("task", "Used", "pipe"), 0.02),
    (("pipe", "WasGeneratedBy", "task"), 0.02),
    (("task", "Used", "argv"), 0.02),
    (("task", "Used", "envp"), 0.02),
    (("argv", "WasGeneratedBy", "task"), 0.01),
    (("task", "WasAssociatedWith", "machine"), 0.01),
    (("process_memory", "WasDerivedFrom", "process_memory"), 0.02),
    (("file", "WasDerivedFrom", "path"), 0.02),
    (("directory", "WasDerivedFrom", "path"), 0.01),
    (("task", "Used", "xattr"), 0.01),
    (("xattr", "WasGeneratedBy", "task"), 0.01),
]

# optional relations; benign graphs draw a seeded subset to hit their count
POOL_RELATIONS: list[tuple[Relation, float]] = [
    (BRUTE_FORCE_RELATION, 0.01),
    (("pipe", "WasDerivedFrom", "file"), 0.01),
    (("file", "WasDerivedFrom", "socket"), 0.01),
    (("envp", "WasGeneratedBy", "task"), 0.01),
    (("link", "WasDerivedFrom", "file"), 0.01),
    (("task", "Used", "link"), 0.01),
    (("directory", "WasDerivedFrom", "directory"), 0.01),
    (("packet", "WasGeneratedBy", "task"), 0.01),
    (("path", "WasGeneratedBy", "task"), 0.01),
    (("argv", "WasDerivedFrom", "argv"), 0.01),
    (("xattr", "WasDerivedFrom", "file"), 0.01),
]

# attack-only relations: (relation, nodes of the new type, edges)
POPUP = [(("task", "Used", "shm"), 12), (("shm", "WasDerivedFrom", "socket"), 12)]
ATTACK_MOTIFS: dict[Vector, list[tuple[Relation, int]]] = {
    Vector.XSS_REFLECTED: POPUP[:1],
    Vector.XSS_DOM: POPUP,
    Vector.CL_INJECTION: [(("task", "Used", "mmaped_file"), 10)],
    Vector.SQL_INJECTION: [(("socket", "WasDerivedFrom", "file"), 10)],
}
MOTIF_NODES = {"shm": 3, "mmaped_file": 2}

# bot posts replay the same message path; fraction of the edge budget
STORED_REPEAT_FRACTION = 0.005
STORED_REPEAT_RELATIONS: list[Relation] = [
    ("task", "Used", "socket"), ("file", "WasGeneratedBy", "task"), ("task", "Used", "file"),
]

_VECTOR_CODE = {v: i + 1 for i, v in enumerate(Vector)}
_RELSET, _SIZE, _STRUCT = 0x5E7, 0x512E, 0x57C7


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def graph_seed(dataset_seed: int, index: int) -> int:
    return splitmix64(splitmix64(dataset_seed & MASK64) ^ (index & MASK64))


@dataclass(frozen=True)
class ScenarioSpec:
    vector: Vector
    class_label: Label
    seed: int
    jitter: float = 0.10
    # multiplies node and edge targets; relation-type counts are unaffected
    scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.jitter <= 0.5:
            raise ValueError(f"jitter {self.jitter} outside [0, 0.5]")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not isinstance(self.vector, Vector):
            object.__setattr__(self, "vector", Vector.parse(self.vector))
        object.__setattr__(self, "class_label", Label(self.class_label))


def _rng(spec: ScenarioSpec, purpose: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed & MASK64, _VECTOR_CODE[spec.vector], purpose, *extra])


def _uniform_target(rng: np.random.Generator, mean: float, jitter: float) -> float:
    return mean * rng.uniform(1.0 - jitter, 1.0 + jitter) if jitter else float(mean)


def _allocate(total: int, weights: np.ndarray, minimum: int = 1) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` (largest remainder),
    each share at least ``minimum``."""
    k = len(weights)
    base = np.full(k, minimum, dtype=np.int64)
    rest = total - base.sum()
    if rest <= 0:
        return base
    w = weights / weights.sum()
    raw = w * rest
    counts = np.floor(raw).astype(np.int64)
    short = rest - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return base + counts


def benign_relation_family(spec: ScenarioSpec) -> list[Relation]:
    """Backbone relations for ``spec``'s seed; identical for both classes."""
    rng = _rng(spec, _RELSET)
    target = TARGET_STATS[(spec.vector, Label.BENIGN)][2] + int(rng.integers(-1, 2))
    extra = target - len(CORE_RELATIONS)
    picks = rng.choice(len(POOL_RELATIONS), size=extra, replace=False)
    return [r for r, _ in CORE_RELATIONS] + [POOL_RELATIONS[i][0] for i in sorted(picks)]


def attack_relation_plan(spec: ScenarioSpec) -> tuple[list[Relation], list[tuple[Relation, int]]]:
    """Backbone relations and motif relations of an attack graph."""
    family = benign_relation_family(spec)
    rng = _rng(spec, _RELSET, 1)
    pool = [r for r, _ in POOL_RELATIONS]
    if spec.vector is Vector.XSS_STORED:
        unused = [r for r in pool if r not in family]
        family = family + [unused[int(rng.integers(len(unused)))]]
    elif spec.vector is Vector.SQL_INJECTION:
        optional = [r for r in family if r in pool]
        family = [r for r in family if r != optional[int(rng.integers(len(optional)))]]
    return family, list(ATTACK_MOTIFS.get(spec.vector, []))


_WEIGHT = dict(CORE_RELATIONS + POOL_RELATIONS)


def _brute_force_attack(spec: ScenarioSpec) -> HeteroMultigraph:
    rng = _rng(spec, _SIZE, int(spec.class_label))
    nodes_mean = TARGET_STATS[(spec.vector, Label.ATTACK)][0] * spec.scale
    chains = 2
    n = max(2 * chains, int(round(_uniform_target(rng, nodes_mean, spec.jitter))))
    lengths = _allocate(n, np.ones(chains), minimum=2)
    src, dst, start = [], [], 0
    for length in lengths:
        idx = np.arange(start, start + length)
        # each newer socket state derives from the previous one
        src.append(idx[1:])
        dst.append(idx[:-1])
        start += length
    rel = RelationEdges(np.concatenate(src), np.concatenate(dst))
    return HeteroMultigraph({"socket": [f"socket:{i}" for i in range(n)]}, {BRUTE_FORCE_RELATION: rel},
                            label=Label.ATTACK, scenario=spec.vector.value)


def generate_scenario(spec: ScenarioSpec) -> HeteroMultigraph:
    """One labeled graph; a pure function of ``spec``."""
    if spec.vector is Vector.BRUTE_FORCE and spec.class_label is Label.ATTACK:
        return _brute_force_attack(spec)

    if spec.class_label is Label.ATTACK:
        backbone, motifs = attack_relation_plan(spec)
    else:
        backbone, motifs = benign_relation_family(spec), []

    nodes_mean, edges_mean, _ = TARGET_STATS[(spec.vector, spec.class_label)]
    size_rng = _rng(spec, _SIZE, int(spec.class_label))
    n_target = _uniform_target(size_rng, nodes_mean * spec.scale, spec.jitter)
    e_target = _uniform_target(size_rng, edges_mean * spec.scale, spec.jitter)
    rng = _rng(spec, _STRUCT, int(spec.class_label))

    motif_edges = sum(c for _, c in motifs)
    repeat_edges = 0
    if spec.vector is Vector.XSS_STORED and spec.class_label is Label.ATTACK:
        repeat_edges = max(len(STORED_REPEAT_RELATIONS), int(round(STORED_REPEAT_FRACTION * e_target)))

    # node budget: backbone types by weight, motif types get their fixed count
    backbone_types = sorted({t for r in backbone for t in (r[0], r[2])})
    motif_types = sorted({t for r, _ in motifs for t in (r[0], r[2])} - set(backbone_types))
    n_motif = sum(MOTIF_NODES[t] for t in motif_types)
    n_backbone = max(len(backbone_types), int(round(n_target)) - n_motif)
    counts = _allocate(n_backbone, np.array([NODE_TYPE_WEIGHTS[t] for t in backbone_types]))
    node_counts = dict(zip(backbone_types, counts.tolist()))
    node_counts.update({t: MOTIF_NODES[t] for t in motif_types})

    # heavy-tailed attractiveness: a static-fitness stand-in for preferential attachment
    fitness = {t: rng.pareto(1.2, size=c) + 1.0 for t, c in node_counts.items()}
    probs = {t: f / f.sum() for t, f in fitness.items()}

    e_backbone = max(len(backbone), int(round(e_target)) - motif_edges - repeat_edges)
    e_counts = _allocate(e_backbone, np.array([_WEIGHT[r] for r in backbone]))

    buckets: dict[Relation, tuple[np.ndarray, np.ndarray]] = {}
    for r, c in zip(backbone, e_counts.tolist()):
        st, _, dt = r
        buckets[r] = (rng.choice(node_counts[st], size=c, p=probs[st]),
                      rng.choice(node_counts[dt], size=c, p=probs[dt]))
    _cover_isolated(rng, buckets, node_counts, probs)

    for r, c in motifs:
        st, _, dt = r
        buckets[r] = (rng.choice(node_counts[st], size=c, p=probs[st]),
                      rng.choice(node_counts[dt], size=c, p=probs[dt]))
        if st in MOTIF_NODES or dt in MOTIF_NODES:
            t, side = (st, 0) if st in MOTIF_NODES else (dt, 1)
            ends = buckets[r][side]
            ends[: node_counts[t]] = np.arange(node_counts[t])[: len(ends)]

    if repeat_edges:
        # one bot post replayed along the same task/socket/file path
        per = _allocate(repeat_edges, np.ones(len(STORED_REPEAT_RELATIONS)))
        post = {t: int(rng.choice(node_counts[t], p=probs[t])) for t in ("task", "socket", "file")}
        for r, c in zip(STORED_REPEAT_RELATIONS, per.tolist()):
            s, d = buckets[r]
            buckets[r] = (np.concatenate([s, np.full(c, post[r[0]])]),
                          np.concatenate([d, np.full(c, post[r[2]])]))

    relations = {r: RelationEdges(s.astype(np.int64), d.astype(np.int64)) for r, (s, d) in buckets.items()}
    node_ids = {t: [f"{t}:{i}" for i in range(c)] for t, c in node_counts.items()}
    return HeteroMultigraph(node_ids, relations, label=spec.class_label, scenario=spec.vector.value)


def _cover_isolated(rng, buckets, node_counts, probs) -> None:
    """Rewire endpoints so that every backbone node has at least one edge."""
    touched = {t: np.zeros(c, dtype=bool) for t, c in node_counts.items()}
    for (st, _, dt), (s, d) in buckets.items():
        touched[st][s] = True
        touched[dt][d] = True
    for t, seen in touched.items():
        lonely = np.flatnonzero(~seen)
        if not len(lonely):
            continue
        sides = [(r, 0 if r[0] == t else 1) for r in buckets if t in (r[0], r[2])]
        if not sides:
            continue
        for j, chunk in enumerate(np.array_split(lonely, len(sides))):
            r, side = sides[j]
            ends = buckets[r][side]
            if len(chunk) == 0:
                continue
            # overwrite the least attractive current endpoints
            slots = np.argsort(probs[t][ends], kind="stable")[: len(chunk)]
            ends[slots] = chunk[: len(slots)]


@dataclass
class Dataset:
    graphs: list[HeteroMultigraph]
    vector: Vector
    seed: int
    seeds: list[int] = field(default_factory=list)
    scale: float = 1.0
    jitter: float = 0.10

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(g.label) for g in self.graphs], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, indices) -> "Dataset":
        idx = [int(i) for i in indices]
        return Dataset([self.graphs[i] for i in idx], self.vector, self.seed,
                       [self.seeds[i] for i in idx] if self.seeds else [], self.scale, self.jitter)


def generate_dataset(vector: Vector | str, n_benign: int, n_attack: int, seed: int,
                     scale: float = 1.0, jitter: float = 0.10) -> Dataset:
    """Benign block followed by attack block, seeded per graph by :func:`graph_seed`."""
    vector = Vector.parse(vector) if not isinstance(vector, Vector) else vector
    if n_benign < 0 or n_attack < 0:
        raise ValueError("counts must be nonnegative")
    labels = [Label.BENIGN] * n_benign + [Label.ATTACK] * n_attack
    seeds = [graph_seed(seed, i) for i in range(len(labels))]
    graphs = [generate_scenario(ScenarioSpec(vector, lab, s, jitter, scale)) for lab, s in zip(labels, seeds)]
    return Dataset(graphs, vector, seed, seeds, scale, jitter)


# --------------------------------------------------------------- persistence

class ManifestMismatch(ValueError):
    pass


class IOFailure(OSError):
    pass


MANIFEST = "manifest.json"


def _graph_path(vector: Vector, label: Label, index: int) -> str:
    return f"{vector.value}/{label.name.lower()}/{index:05d}.pgrf"


def export_dataset(ds: Dataset, directory: str | os.PathLike) -> Path:
    """Write one compressed graph file per graph plus ``manifest.json``."""
    root = Path(directory)
    entries = []
    try:
        for i, g in enumerate(ds.graphs):
            rel = _graph_path(ds.vector, g.label, i)
            atomic_write(root / rel, serialize(g, "binary"))
            st = stats(g)
            entries.append({
                "index": i, "file": rel, "label": g.label.name,
                "seed": ds.seeds[i] if ds.seeds else None,
                "num_nodes": st.num_nodes, "num_edges": st.num_edges,
                "num_relation_types": st.num_relation_types,
            })
        manifest = {
            "format": "provgraph-dataset", "version": 1, "vector": ds.vector.value,
            "seed": ds.seed, "scale": ds.scale, "jitter": ds.jitter, "graphs": entries,
        }
        atomic_write(root / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    except OSError as exc:
        raise IOFailure(f"cannot write dataset to {root}: {exc}") from exc
    return root / MANIFEST


def load_dataset(directory: str | os.PathLike) -> Dataset:
    root = Path(directory)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read {root / MANIFEST}: {exc}") from exc
    graphs, seeds = [], []
    for entry in manifest["graphs"]:
        try:
            g = deserialize((root / entry["file"]).read_bytes())
        except OSError as exc:
            raise IOFailure(f"cannot read {entry['file']}: {exc}") from exc
        st = stats(g)
        recorded = (entry["num_nodes"], entry["num_edges"], entry["num_relation_types"])
        if st.as_tuple() != recorded:
            raise ManifestMismatch(f"{entry['file']}: manifest says {recorded}, file has {st.as_tuple()}")
        if g.label is None or g.label.name != entry["label"]:
            raise ManifestMismatch(f"{entry['file']}: label {entry['label']} disagrees with file")
        graphs.append(g)
        seeds.append(entry.get("seed"))
    return Dataset(graphs, Vector(manifest["vector"]), manifest["seed"],
                   seeds if all(s is not None for s in seeds) else [],
                   manifest.get("scale", 1.0), manifest.get("jitter", 0.10))


def membership_oracle_accuracy(graphs: list[HeteroMultigraph]) -> float:
    """Best accuracy of any rule "ATTACK iff relation r is (not) present"."""
    labels = np.array([int(g.label) for g in graphs])
    universe = sorted({r for g in graphs for r in g.relations})
    best = max(np.mean(labels == 0), np.mean(labels == 1)) if len(labels) else 1.0
    for r in universe:
        has = np.array([r in g.relations for g in graphs])
        acc = np.mean(has == labels)
        best = max(best, acc, 1.0 - acc)
    return float(best)
