"""Typed heterogeneous multigraph keyed by canonical relation.

Edges live per canonical relation ``(src_type, edge_type, dst_type)`` as two
parallel int64 index arrays into the per-type node lists.  Parallel edges and
self-loops are kept.  Attributes are stored sparsely since synthetic graphs
carry none and real logs carry them on every record.

Binary layout (``PGRF``, version 1)::

    b"PGRF" | u8 version | u8 flags | u32 crc32(payload) | u64 raw_len | payload

``payload`` is the zlib-compressed concatenation of sections, each
``4-byte tag | u64 length | body``, in this order:

    STRS  u32 count, then count x (u32 len, utf-8 bytes)
    META  u32 label (0xFFFFFFFF = none), u32 scenario string (0xFFFFFFFF = none)
    NODE  u32 ntypes; per type: u32 type, u32 n, n x u32 id,
          u32 n_attr; per attributed node: u32 index, u32 k, k x (u32 key, u32 value)
    RELS  u32 nrel; per relation: 3 x u32 (src type, edge type, dst type), u64 m,
          m x i64 src, m x i64 dst, u64 n_attr; per attributed edge:
          u64 index, u32 k, k x (u32 key, u32 value)
    FEAT  (only when flags & 1) u32 ncols, ncols x u32 column name,
          u32 ntypes; per type: u32 type, u64 rows, rows*ncols x f64

All integers little-endian; every string is an index into STRS.
"""

from __future__ import annotations

import enum
import io
import json
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .parser import DanglingEndpoint, DanglingPolicy, ProvDocument

Relation = tuple[str, str, str]

MAGIC = b"PGRF"
VERSION = 1
_NONE = 0xFFFFFFFF


class Label(enum.IntEnum):
    BENIGN = 0
    ATTACK = 1


class CorruptPayload(ValueError):
    """Serialized graph bytes are truncated or inconsistent."""


class IdCollision(ValueError):
    pass


@dataclass
class RelationEdges:
    src: np.ndarray
    dst: np.ndarray
    # edge index -> attributes; absent means no attributes
    attributes: dict[int, dict[str, str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.src)

    def __eq__(self, other):
        if not isinstance(other, RelationEdges):
            return NotImplemented
        return (np.array_equal(self.src, other.src) and np.array_equal(self.dst, other.dst)
                and self.attributes == other.attributes)


@dataclass
class HeteroMultigraph:
    node_ids: dict[str, list[str]]
    relations: dict[Relation, RelationEdges]
    node_attributes: dict[str, dict[int, dict[str, str]]] = field(default_factory=dict)
    label: Label | None = None
    scenario: str | None = None

    def __post_init__(self):
        self.node_ids = {t: list(self.node_ids[t]) for t in sorted(self.node_ids)}
        self.relations = {r: self.relations[r] for r in sorted(self.relations) if len(self.relations[r])}
        if self.label is not None:
            self.label = Label(self.label)

    @property
    def node_types(self) -> tuple[str, ...]:
        return tuple(self.node_ids)

    @property
    def edge_types(self) -> tuple[str, ...]:
        return tuple(sorted({r[1] for r in self.relations}))

    @property
    def num_nodes(self) -> int:
        return sum(len(v) for v in self.node_ids.values())

    @property
    def num_edges(self) -> int:
        return sum(len(e) for e in self.relations.values())

    def type_offsets(self) -> dict[str, int]:
        """Start of each node type in the global (type-major) node index."""
        offsets, acc = {}, 0
        for t, ids in self.node_ids.items():
            offsets[t] = acc
            acc += len(ids)
        return offsets

    def global_edges(self, relation: Relation) -> tuple[np.ndarray, np.ndarray]:
        off = self.type_offsets()
        e = self.relations[relation]
        return e.src + off[relation[0]], e.dst + off[relation[2]]

    def validate(self) -> None:
        for (st, et, dt), e in self.relations.items():
            for t in (st, dt):
                if t not in self.node_ids:
                    raise ValueError(f"relation {(st, et, dt)} uses unknown node type {t!r}")
            if len(e) == 0:
                raise ValueError(f"relation {(st, et, dt)} has no edges")
            if len(e.src) != len(e.dst):
                raise ValueError(f"relation {(st, et, dt)} has ragged endpoint arrays")
            for arr, t in ((e.src, st), (e.dst, dt)):
                if arr.min() < 0 or arr.max() >= len(self.node_ids[t]):
                    raise ValueError(f"relation {(st, et, dt)} indexes outside node type {t!r}")

    def __eq__(self, other):
        if not isinstance(other, HeteroMultigraph):
            return NotImplemented
        return (self.node_ids == other.node_ids
                and list(self.relations) == list(other.relations)
                and all(self.relations[r] == other.relations[r] for r in self.relations)
                and _drop_empty(self.node_attributes) == _drop_empty(other.node_attributes)
                and self.label == other.label and self.scenario == other.scenario)


def _drop_empty(attrs):
    return {t: a for t, a in attrs.items() if a}


@dataclass(frozen=True)
class GraphStats:
    num_nodes: int
    num_edges: int
    num_relation_types: int
    node_type_histogram: dict[str, int]
    edge_type_histogram: dict[str, int]
    relation_histogram: dict[Relation, int]

    def as_tuple(self) -> tuple[int, int, int]:
        return self.num_nodes, self.num_edges, self.num_relation_types

    def to_json(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "num_edges": self.num_edges,
            "num_relation_types": self.num_relation_types,
            "node_type_histogram": self.node_type_histogram,
            "edge_type_histogram": self.edge_type_histogram,
            "relation_histogram": {"|".join(r): n for r, n in self.relation_histogram.items()},
        }


def stats(g: HeteroMultigraph) -> GraphStats:
    rel_hist = {r: len(e) for r, e in g.relations.items()}
    edge_hist: Counter[str] = Counter()
    for (_, et, _), n in rel_hist.items():
        edge_hist[et] += n
    return GraphStats(
        num_nodes=g.num_nodes,
        num_edges=sum(rel_hist.values()),
        num_relation_types=len(rel_hist),
        node_type_histogram={t: len(ids) for t, ids in g.node_ids.items()},
        edge_type_histogram=dict(sorted(edge_hist.items())),
        relation_histogram=rel_hist,
    )


def build(doc: ProvDocument, policy: DanglingPolicy | str = DanglingPolicy.SYNTHESIZE,
          label: Label | None = None, scenario: str | None = None) -> HeteroMultigraph:
    """Assemble a multigraph from a (normalized) document.

    Nodes keep first-appearance order within their type.  Edges whose endpoints
    were never declared are handled by ``policy`` in case ``doc`` skipped
    normalization.
    """
    policy = DanglingPolicy(policy)
    where: dict[str, tuple[str, int]] = {}
    node_ids: dict[str, list[str]] = {}
    node_attrs: dict[str, dict[int, dict[str, str]]] = {}

    def add_node(node_id: str, node_type: str, attrs: dict[str, str]) -> None:
        ids = node_ids.setdefault(node_type, [])
        where[node_id] = (node_type, len(ids))
        if attrs:
            node_attrs.setdefault(node_type, {})[len(ids)] = dict(attrs)
        ids.append(node_id)

    for n in doc.nodes:
        if n.id in where:
            # later declaration wins, as in normalize
            t, i = where[n.id]
            if t == n.node_type:
                if n.attributes:
                    node_attrs.setdefault(t, {}).setdefault(i, {}).update(n.attributes)
                continue
            raise ValueError(f"node {n.id!r} declared with types {t!r} and {n.node_type!r}; normalize first")
        add_node(n.id, n.node_type, n.attributes)

    buckets: dict[Relation, tuple[list[int], list[int], dict[int, dict[str, str]]]] = {}
    for e in doc.edges:
        if e.src not in where or e.dst not in where:
            if policy is DanglingPolicy.FAIL:
                raise DanglingEndpoint(f"edge {e.id!r} references an undeclared node")
            if policy is DanglingPolicy.SKIP:
                continue
            for x in (e.src, e.dst):
                if x not in where:
                    add_node(x, "unknown", {})
        st, si = where[e.src]
        dt, di = where[e.dst]
        src, dst, attrs = buckets.setdefault((st, e.relation, dt), ([], [], {}))
        if e.attributes:
            attrs[len(src)] = dict(e.attributes)
        src.append(si)
        dst.append(di)

    relations = {r: RelationEdges(np.asarray(s, dtype=np.int64), np.asarray(d, dtype=np.int64), a)
                 for r, (s, d, a) in buckets.items()}
    return HeteroMultigraph(node_ids, relations, node_attrs, label, scenario)


def merge(gs: Sequence[HeteroMultigraph], namespace: bool = False) -> HeteroMultigraph:
    """Disjoint union.  With ``namespace`` every id is prefixed by ``"<i>/"``."""
    node_ids: dict[str, list[str]] = {}
    node_attrs: dict[str, dict[int, dict[str, str]]] = {}
    parts: dict[Relation, list[tuple[np.ndarray, np.ndarray, dict]]] = {}
    seen: set[str] = set()
    for i, g in enumerate(gs):
        offsets = {}
        for t, ids in g.node_ids.items():
            target = node_ids.setdefault(t, [])
            offsets[t] = len(target)
            if namespace:
                ids = [f"{i}/{x}" for x in ids]
            else:
                clash = seen.intersection(ids)
                if clash:
                    raise IdCollision(f"graph {i} reuses node id {sorted(clash)[0]!r}")
                seen.update(ids)
            target.extend(ids)
            for j, a in g.node_attributes.get(t, {}).items():
                node_attrs.setdefault(t, {})[offsets[t] + j] = dict(a)
        for r, e in g.relations.items():
            parts.setdefault(r, []).append((e.src + offsets[r[0]], e.dst + offsets[r[2]], e.attributes))
    relations = {}
    for r, chunks in parts.items():
        attrs, base = {}, 0
        for s, _, a in chunks:
            attrs.update({base + k: dict(v) for k, v in a.items()})
            base += len(s)
        relations[r] = RelationEdges(np.concatenate([c[0] for c in chunks]),
                                     np.concatenate([c[1] for c in chunks]), attrs)
    labels = {g.label for g in gs}
    scenarios = {g.scenario for g in gs}
    return HeteroMultigraph(node_ids, relations, node_attrs,
                            labels.pop() if len(labels) == 1 else None,
                            scenarios.pop() if len(scenarios) == 1 else None)


# ---------------------------------------------------------------- JSON export

def to_json(g: HeteroMultigraph) -> dict:
    doc = {
        "node_types": list(g.node_types),
        "edge_types": list(g.edge_types),
        "nodes": {t: ids for t, ids in g.node_ids.items()},
        "relations": [
            {"src_type": st, "edge_type": et, "dst_type": dt,
             "edges": np.stack([e.src, e.dst], axis=1).tolist()}
            for (st, et, dt), e in g.relations.items()
        ],
        "label": g.label.name if g.label is not None else None,
        "scenario": g.scenario,
    }
    node_attrs = {t: {str(i): a for i, a in sorted(m.items())} for t, m in g.node_attributes.items() if m}
    if node_attrs:
        doc["node_attributes"] = node_attrs
    for rel, (_, e) in zip(doc["relations"], g.relations.items()):
        if e.attributes:
            rel["edge_attributes"] = {str(i): a for i, a in sorted(e.attributes.items())}
    return doc


def from_json(doc: dict) -> HeteroMultigraph:
    try:
        relations = {}
        for rel in doc["relations"]:
            edges = np.asarray(rel["edges"], dtype=np.int64).reshape(-1, 2)
            attrs = {int(k): v for k, v in rel.get("edge_attributes", {}).items()}
            relations[(rel["src_type"], rel["edge_type"], rel["dst_type"])] = RelationEdges(
                edges[:, 0].copy(), edges[:, 1].copy(), attrs)
        node_attrs = {t: {int(k): v for k, v in m.items()} for t, m in doc.get("node_attributes", {}).items()}
        label = doc.get("label")
        g = HeteroMultigraph({t: doc["nodes"].get(t, []) for t in doc["node_types"]}, relations, node_attrs,
                             Label[label] if label is not None else None, doc.get("scenario"))
        g.validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptPayload(f"invalid graph JSON: {exc}") from None
    return g


# ------------------------------------------------------------- binary export

class _Strings:
    def __init__(self):
        self.index: dict[str, int] = {}

    def __call__(self, s: str) -> int:
        i = self.index.get(s)
        if i is None:
            i = self.index[s] = len(self.index)
        return i


def _section(out: io.BytesIO, tag: bytes, body: bytes) -> None:
    out.write(tag)
    out.write(struct.pack("<Q", len(body)))
    out.write(body)


def _attr_block(buf: io.BytesIO, attrs: dict[int, dict[str, str]], strings: _Strings, wide: bool) -> None:
    buf.write(struct.pack("<Q" if wide else "<I", len(attrs)))
    for i in sorted(attrs):
        a = attrs[i]
        buf.write(struct.pack("<QI" if wide else "<II", i, len(a)))
        for k in sorted(a):
            buf.write(struct.pack("<II", strings(k), strings(a[k])))


def serialize(g: HeteroMultigraph, fmt: str = "binary", features=None) -> bytes:
    """Encode ``g`` as ``"json"`` or compressed ``"binary"`` bytes.

    ``features`` (a FeatureSet) is only embedded in the binary format.
    Output is deterministic for equal inputs.
    """
    fmt = fmt.lower()
    if fmt == "json":
        return json.dumps(to_json(g), sort_keys=True, separators=(",", ":")).encode()
    if fmt not in ("binary", "binary_compressed"):
        raise ValueError(f"unknown graph format {fmt!r}")

    strings = _Strings()
    meta = struct.pack("<II", _NONE if g.label is None else int(g.label),
                       _NONE if g.scenario is None else strings(g.scenario))

    nodes = io.BytesIO()
    nodes.write(struct.pack("<I", len(g.node_ids)))
    for t, ids in g.node_ids.items():
        nodes.write(struct.pack("<II", strings(t), len(ids)))
        nodes.write(np.fromiter((strings(x) for x in ids), dtype="<u4", count=len(ids)).tobytes())
        _attr_block(nodes, g.node_attributes.get(t, {}), strings, wide=False)

    rels = io.BytesIO()
    rels.write(struct.pack("<I", len(g.relations)))
    for (st, et, dt), e in g.relations.items():
        rels.write(struct.pack("<IIIQ", strings(st), strings(et), strings(dt), len(e)))
        rels.write(e.src.astype("<i8").tobytes())
        rels.write(e.dst.astype("<i8").tobytes())
        _attr_block(rels, e.attributes, strings, wide=True)

    feat = None
    if features is not None:
        feat = io.BytesIO()
        feat.write(struct.pack("<I", len(features.schema)))
        feat.write(np.fromiter((strings(c) for c in features.schema), dtype="<u4").tobytes())
        feat.write(struct.pack("<I", len(features.blocks)))
        for t, mat in features.blocks.items():
            feat.write(struct.pack("<IQ", strings(t), mat.shape[0]))
            feat.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())

    table = io.BytesIO()
    table.write(struct.pack("<I", len(strings.index)))
    for s in strings.index:
        b = s.encode("utf-8")
        table.write(struct.pack("<I", len(b)))
        table.write(b)

    body = io.BytesIO()
    _section(body, b"STRS", table.getvalue())
    _section(body, b"META", meta)
    _section(body, b"NODE", nodes.getvalue())
    _section(body, b"RELS", rels.getvalue())
    if feat is not None:
        _section(body, b"FEAT", feat.getvalue())
    raw = body.getvalue()
    payload = zlib.compress(raw, 6)
    header = MAGIC + struct.pack("<BBIQ", VERSION, 1 if feat is not None else 0, zlib.crc32(payload), len(raw))
    return header + payload


class _Reader:
    def __init__(self, data: bytes, base: int = 0):
        self.data = data
        self.pos = 0
        self.base = base

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptPayload(f"truncated {what} at offset {self.base + self.pos} "
                                 f"(need {n} bytes, {len(self.data) - self.pos} left)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, n: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n * size, what), dtype=dtype)


def _read_attrs(r: _Reader, strings: list[str], wide: bool) -> dict[int, dict[str, str]]:
    (count,) = r.unpack("<Q" if wide else "<I", "attribute count")
    out = {}
    for _ in range(count):
        i, k = r.unpack("<QI" if wide else "<II", "attribute header")
        pairs = r.array("<u4", 2 * k, "attribute pairs")
        out[int(i)] = {strings[pairs[2 * j]]: strings[pairs[2 * j + 1]] for j in range(k)}
    return out


def deserialize(data: bytes, with_features: bool = False):
    """Inverse of :func:`serialize`; accepts either format.

    Returns the graph, or ``(graph, features_or_None)`` when ``with_features``.
    """
    from .features import FeatureSet

    data = bytes(data)
    if not data.startswith(MAGIC):
        if data.lstrip()[:1] == b"{":
            try:
                g = from_json(json.loads(data))
            except json.JSONDecodeError as exc:
                raise CorruptPayload(f"invalid graph JSON at offset {exc.pos}: {exc.msg}") from None
            return (g, None) if with_features else g
        raise CorruptPayload("bad magic at offset 0: not a PGRF graph")
    head = _Reader(data)
    head.take(4, "magic")
    version, flags, crc, raw_len = head.unpack("<BBIQ", "header")
    if version != VERSION:
        raise CorruptPayload(f"unsupported version {version} at offset 4")
    payload = data[head.pos:]
    if zlib.crc32(payload) != crc:
        raise CorruptPayload(f"checksum mismatch over payload at offset {head.pos} ({len(payload)} bytes)")
    try:
        raw = zlib.decompress(payload)
    except zlib.error as exc:
        raise CorruptPayload(f"compressed payload at offset {head.pos} is damaged: {exc}") from None
    if len(raw) != raw_len:
        raise CorruptPayload(f"decompressed length {len(raw)} != header length {raw_len}")

    r = _Reader(raw)
    sections = {}
    while r.pos < len(raw):
        tag = r.take(4, "section tag")
        (n,) = r.unpack("<Q", "section length")
        sections[tag] = _Reader(r.take(n, f"section {tag!r}"), r.pos - n)
    for tag in (b"STRS", b"META", b"NODE", b"RELS"):
        if tag not in sections:
            raise CorruptPayload(f"missing section {tag.decode()}")

    s = sections[b"STRS"]
    (count,) = s.unpack("<I", "string count")
    strings = []
    for _ in range(count):
        (n,) = s.unpack("<I", "string length")
        strings.append(s.take(n, "string").decode("utf-8"))

    try:
        label, scen = sections[b"META"].unpack("<II", "meta")
        nd = sections[b"NODE"]
        node_ids, node_attrs = {}, {}
        (ntypes,) = nd.unpack("<I", "node type count")
        for _ in range(ntypes):
            t, n = nd.unpack("<II", "node type header")
            node_ids[strings[t]] = [strings[i] for i in nd.array("<u4", n, "node ids")]
            attrs = _read_attrs(nd, strings, wide=False)
            if attrs:
                node_attrs[strings[t]] = attrs
        rl = sections[b"RELS"]
        relations = {}
        (nrel,) = rl.unpack("<I", "relation count")
        for _ in range(nrel):
            st, et, dt, m = rl.unpack("<IIIQ", "relation header")
            src = rl.array("<i8", m, "edge sources").astype(np.int64)
            dst = rl.array("<i8", m, "edge targets").astype(np.int64)
            relations[(strings[st], strings[et], strings[dt])] = RelationEdges(
                src, dst, _read_attrs(rl, strings, wide=True))
        g = HeteroMultigraph(node_ids, relations, node_attrs,
                             None if label == _NONE else Label(label),
                             None if scen == _NONE else strings[scen])
        g.validate()
        feats = None
        if flags & 1:
            f = sections.get(b"FEAT")
            if f is None:
                raise CorruptPayload("flags announce features but FEAT section is missing")
            (ncols,) = f.unpack("<I", "feature column count")
            schema = [strings[i] for i in f.array("<u4", ncols, "feature schema")]
            (nt,) = f.unpack("<I", "feature type count")
            blocks = {}
            for _ in range(nt):
                t, rows = f.unpack("<IQ", "feature block header")
                blocks[strings[t]] = f.array("<f8", rows * ncols, "feature rows").reshape(rows, ncols).copy()
            feats = FeatureSet(blocks, schema)
    except IndexError:
        raise CorruptPayload("string index out of range") from None
    except ValueError as exc:
        if isinstance(exc, CorruptPayload):
            raise
        raise CorruptPayload(f"inconsistent graph payload: {exc}") from None
    return (g, feats) if with_features else g


def from_arrays(node_counts: dict[str, int], relations: dict[Relation, tuple[Iterable[int], Iterable[int]]],
                label: Label | None = None, scenario: str | None = None, id_prefix: str = "") -> HeteroMultigraph:
    """Convenience constructor with generated ids ``"<type>:<i>"``."""
    node_ids = {t: [f"{id_prefix}{t}:{i}" for i in range(n)] for t, n in node_counts.items()}
    rels = {r: RelationEdges(np.asarray(list(s) if not isinstance(s, np.ndarray) else s, dtype=np.int64),
                             np.asarray(list(d) if not isinstance(d, np.ndarray) else d, dtype=np.int64))
            for r, (s, d) in relations.items()}
    g = HeteroMultigraph(node_ids, rels, {}, label, scenario)
    g.validate()
    return g
