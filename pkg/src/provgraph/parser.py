"""Readers for W3C PROV-JSON and SPADE JSON provenance logs.

Both readers produce a :class:`ProvDocument`, a flat stream of node and edge
records.  Nothing is coerced or reordered at parse time; :func:`normalize`
canonicalises labels, merges duplicate ids and resolves dangling endpoints.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterator


class ProvFormat(str, enum.Enum):
    W3C_PROV = "W3C_PROV"
    SPADE_JSON = "SPADE_JSON"
    UNKNOWN = "UNKNOWN"


class Layer(str, enum.Enum):
    KERNEL = "KERNEL"
    APPLICATION = "APPLICATION"
    UNKNOWN = "UNKNOWN"


class DanglingPolicy(str, enum.Enum):
    SYNTHESIZE = "synthesize"
    SKIP = "skip"
    FAIL = "fail"


class MalformedInput(ValueError):
    """Input is not JSON, or its top level has the wrong shape."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class DanglingEndpoint(ValueError):
    """An edge references a node id that is never declared."""


@dataclass(frozen=True)
class NodeRecord:
    id: str
    node_type: str
    attributes: dict[str, str] = field(default_factory=dict)
    layer: Layer = Layer.UNKNOWN

    def __post_init__(self):
        if not self.node_type:
            raise ValueError(f"node {self.id!r} has an empty node_type")


@dataclass(frozen=True)
class EdgeRecord:
    id: str
    relation: str
    src: str
    dst: str
    attributes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.relation and self.src and self.dst):
            raise ValueError(f"edge {self.id!r} needs relation, src and dst")


@dataclass
class ProvDocument:
    format_tag: ProvFormat
    nodes: list[NodeRecord] = field(default_factory=list)
    edges: list[EdgeRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def warn(self, code: str, detail: str) -> None:
        self.warnings.append(f"{code} {detail}")

    def canonical_key(self):
        """Order-insensitive view used to compare documents up to record order."""
        nodes = sorted((n.id, n.node_type, sorted(n.attributes.items()), n.layer.value) for n in self.nodes)
        edges = sorted((e.id, e.relation, e.src, e.dst, sorted(e.attributes.items())) for e in self.edges)
        return self.format_tag.value, nodes, edges, sorted(self.warnings)


# PROV-JSON relation name -> (subject key, object key).  src is the subject.
W3C_RELATIONS: dict[str, tuple[str, str]] = {
    "used": ("prov:activity", "prov:entity"),
    "wasGeneratedBy": ("prov:entity", "prov:activity"),
    "wasInformedBy": ("prov:informed", "prov:informant"),
    "wasDerivedFrom": ("prov:generatedEntity", "prov:usedEntity"),
    "wasAssociatedWith": ("prov:activity", "prov:agent"),
    "wasAttributedTo": ("prov:entity", "prov:agent"),
    "actedOnBehalfOf": ("prov:delegate", "prov:responsible"),
    "wasStartedBy": ("prov:activity", "prov:trigger"),
    "wasEndedBy": ("prov:activity", "prov:trigger"),
    "wasInvalidatedBy": ("prov:entity", "prov:activity"),
    "wasInfluencedBy": ("prov:influencee", "prov:influencer"),
    "specializationOf": ("prov:specificEntity", "prov:generalEntity"),
    "alternateOf": ("prov:alternate1", "prov:alternate2"),
    "hadMember": ("prov:collection", "prov:entity"),
}
W3C_NODE_CATEGORIES = ("entity", "activity", "agent")
W3C_METADATA_KEYS = ("prefix",)

# SPADE emits both OPM and PROV vocabularies.
SPADE_NODE_TYPES = {"entity", "activity", "agent", "process", "artifact"}

# canonical spelling for every relation label either format can produce
CANONICAL_RELATIONS = {name.lower(): name[0].upper() + name[1:] for name in W3C_RELATIONS}
CANONICAL_RELATIONS.update({
    "wastriggeredby": "WasTriggeredBy",
    "wascontrolledby": "WasControlledBy",
})
SPADE_EDGE_TYPES = set(CANONICAL_RELATIONS)

TYPE_ATTRIBUTE_KEYS = ("prov:type", "cf:type", "type")
SPADE_TYPE_ANNOTATIONS = ("object_type", "subtype", "cf:type", "prov:type")
LAYER_ATTRIBUTE_KEYS = ("layer", "prov:layer", "cf:layer", "app:layer")


def _iter_json_values(text: str) -> Iterator[Any]:
    """Yield every top-level JSON value; handles single documents, JSON lines
    and concatenated objects alike."""
    decoder = json.JSONDecoder()
    pos, end = 0, len(text)
    while True:
        while pos < end and text[pos].isspace():
            pos += 1
        if pos >= end:
            return
        try:
            value, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError as exc:
            raise MalformedInput(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
        yield value


def _load(text: str | bytes) -> list[Any]:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise MalformedInput(f"input is not UTF-8 at byte {exc.start}") from None
    values = list(_iter_json_values(text))
    if not values:
        raise MalformedInput("input is empty")
    return values


def _stringify(value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, dict) and "$" in value:
        # PROV-JSON typed literal
        return _stringify(value["$"])
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def _attributes(raw: Any) -> dict[str, str]:
    if not isinstance(raw, dict):
        return {}
    return {str(k): _stringify(v) for k, v in raw.items()}


def _layer_of(attrs: dict[str, str]) -> Layer:
    for key in LAYER_ATTRIBUTE_KEYS:
        value = attrs.get(key, "").strip().lower()
        if value in ("kernel", "application", "app"):
            return Layer.APPLICATION if value != "kernel" else Layer.KERNEL
    return Layer.UNKNOWN


def _is_spade_array(value: Any) -> bool:
    return isinstance(value, list) and bool(value) and all(isinstance(r, dict) and "type" in r for r in value)


def sniff_format(raw: str | bytes) -> ProvFormat:
    """Guess which serialization ``raw`` holds.  Never raises."""
    try:
        values = _load(raw)
    except MalformedInput:
        return ProvFormat.UNKNOWN
    first = values[0]
    if len(values) == 1 and _is_spade_array(first):
        return ProvFormat.SPADE_JSON
    if all(isinstance(v, dict) for v in values):
        if all("type" in v and not any(k in v for k in W3C_NODE_CATEGORIES) for v in values):
            return ProvFormat.SPADE_JSON
        if isinstance(first, dict):
            if any(_is_spade_array(v) for v in first.values()):
                return ProvFormat.SPADE_JSON
            known = set(W3C_NODE_CATEGORIES) | set(W3C_RELATIONS) | set(W3C_METADATA_KEYS)
            if first == {} or any(k in known for k in first):
                return ProvFormat.W3C_PROV
    return ProvFormat.UNKNOWN


def parse_w3c_prov(text: str | bytes) -> ProvDocument:
    """Parse a PROV-JSON document (or a stream of them, as camflowd writes)."""
    values = _load(text)
    doc = ProvDocument(ProvFormat.W3C_PROV)
    for chunk in values:
        if not isinstance(chunk, dict):
            raise MalformedInput(f"top level must be an object, got {type(chunk).__name__}")
        for key, entries in chunk.items():
            if key in W3C_METADATA_KEYS:
                continue
            if key in W3C_NODE_CATEGORIES:
                _w3c_nodes(doc, key, entries)
            elif key in W3C_RELATIONS:
                _w3c_edges(doc, key, entries)
            else:
                doc.warn("UNKNOWN_KEY", f"ignoring top-level key {key!r}")
    return doc


def _w3c_nodes(doc: ProvDocument, category: str, entries: Any) -> None:
    if not isinstance(entries, dict):
        doc.warn("BAD_RECORD", f"{category} section is not an object")
        return
    for node_id, body in entries.items():
        attrs = _attributes(body)
        node_type = next((attrs[k] for k in TYPE_ATTRIBUTE_KEYS if attrs.get(k)), category)
        doc.nodes.append(NodeRecord(str(node_id), node_type, attrs, _layer_of(attrs)))


def _w3c_edges(doc: ProvDocument, relation: str, entries: Any) -> None:
    if not isinstance(entries, dict):
        doc.warn("BAD_RECORD", f"{relation} section is not an object")
        return
    src_key, dst_key = W3C_RELATIONS[relation]
    for edge_id, body in entries.items():
        attrs = _attributes(body)
        src, dst = attrs.pop(src_key, ""), attrs.pop(dst_key, "")
        if not src or not dst:
            doc.warn("MISSING_ENDPOINT", f"{relation} {edge_id!r} lacks {src_key} or {dst_key}")
            continue
        doc.edges.append(EdgeRecord(str(edge_id), relation, src, dst, attrs))


def _spade_records(values: list[Any]) -> list[Any]:
    if len(values) == 1:
        top = values[0]
        if isinstance(top, list):
            return top
        if isinstance(top, dict):
            arrays = [v for v in top.values() if _is_spade_array(v)]
            if arrays:
                return [rec for arr in arrays for rec in arr]
            return [top]
        raise MalformedInput(f"top level must be an array, got {type(top).__name__}")
    records = []
    for v in values:
        records.extend(v if isinstance(v, list) else [v])
    return records


def _content_id(rec: Any) -> str:
    blob = json.dumps(rec, sort_keys=True, separators=(",", ":"), default=str)
    return "e:" + hashlib.sha1(blob.encode()).hexdigest()[:16]


def parse_spade_json(text: str | bytes) -> ProvDocument:
    """Parse a SPADE JSON array, or its one-record-per-line variant."""
    records = _spade_records(_load(text))
    doc = ProvDocument(ProvFormat.SPADE_JSON)
    seen_edge_ids: dict[str, int] = {}
    for rec in records:
        if not isinstance(rec, dict) or "type" not in rec:
            doc.warn("BAD_RECORD", f"record {_content_id(rec)} is not an object with a 'type'")
            continue
        kind = str(rec["type"])
        annotations = _attributes(rec.get("annotations"))
        if kind.lower() in SPADE_NODE_TYPES:
            node_id = rec.get("id")
            if node_id is None:
                doc.warn("BAD_RECORD", f"{kind} record {_content_id(rec)} has no id")
                continue
            node_type = next((annotations[k] for k in SPADE_TYPE_ANNOTATIONS if annotations.get(k)), kind)
            doc.nodes.append(NodeRecord(str(node_id), node_type, annotations, _layer_of(annotations)))
        elif kind.lower() in SPADE_EDGE_TYPES:
            src, dst = rec.get("from"), rec.get("to")
            if src in (None, "") or dst in (None, ""):
                doc.warn("MISSING_ENDPOINT", f"{kind} record {_content_id(rec)} lacks from/to")
                continue
            # no id in most SPADE output; derive one from content so that
            # reordering the array does not rename edges
            edge_id = str(rec["id"]) if rec.get("id") is not None else _content_id(rec)
            n = seen_edge_ids.get(edge_id, 0)
            seen_edge_ids[edge_id] = n + 1
            if n and rec.get("id") is None:
                edge_id = f"{edge_id}#{n}"
            doc.edges.append(EdgeRecord(edge_id, kind, str(src), str(dst), annotations))
        else:
            doc.warn("UNKNOWN_RECORD_TYPE", f"record {_content_id(rec)} has type {kind!r}")
    return doc


def parse(text: str | bytes, fmt: ProvFormat | str = "auto") -> ProvDocument:
    """Parse with an explicit format, or sniff it when ``fmt`` is ``auto``."""
    if isinstance(fmt, str) and not isinstance(fmt, ProvFormat):
        fmt = {"auto": None, "w3c": ProvFormat.W3C_PROV, "spade": ProvFormat.SPADE_JSON}.get(fmt.lower(), fmt)
        if fmt is not None:
            fmt = ProvFormat(fmt)
    if fmt is None:
        fmt = sniff_format(text)
        if fmt is ProvFormat.UNKNOWN:
            # parse anyway so the caller sees a proper diagnostic
            _load(text)
            raise MalformedInput("input is neither W3C PROV-JSON nor SPADE JSON")
    if fmt is ProvFormat.W3C_PROV:
        return parse_w3c_prov(text)
    if fmt is ProvFormat.SPADE_JSON:
        return parse_spade_json(text)
    raise ValueError(f"cannot parse format {fmt}")


_TYPE_SEP = re.compile(r"[\s\-]+")


def canonical_node_type(label: str) -> str:
    return _TYPE_SEP.sub("_", label.strip()).lower() or "unknown"


def canonical_relation(label: str) -> str:
    key = label.strip()
    return CANONICAL_RELATIONS.get(key.lower(), key)


def _find_cycles(nodes: list[NodeRecord], edges: list[EdgeRecord]) -> int:
    """Number of nodes that sit on a directed cycle (self-loops included)."""
    index = {n.id: i for i, n in enumerate(nodes)}
    indeg = [0] * len(nodes)
    out: list[list[int]] = [[] for _ in nodes]
    for e in edges:
        s, d = index[e.src], index[e.dst]
        out[s].append(d)
        indeg[d] += 1
    # Kahn: whatever cannot be peeled off lies on, or downstream of, a cycle
    stack = [i for i, k in enumerate(indeg) if k == 0]
    removed = 0
    while stack:
        i = stack.pop()
        removed += 1
        for j in out[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                stack.append(j)
    return len(nodes) - removed


def normalize(doc: ProvDocument, policy: DanglingPolicy | str = DanglingPolicy.SYNTHESIZE) -> ProvDocument:
    """Canonicalise labels, merge duplicate node ids and resolve dangling edges.

    Returns a new document; ``doc`` is left untouched.  Idempotent: a second
    pass returns an equal document with no additional warnings.
    """
    policy = DanglingPolicy(policy)
    out = ProvDocument(doc.format_tag, warnings=list(doc.warnings))

    def warn(code: str, detail: str) -> None:
        msg = f"{code} {detail}"
        if msg not in out.warnings:
            out.warnings.append(msg)

    merged: dict[str, NodeRecord] = {}
    for node in doc.nodes:
        node = replace(node, node_type=canonical_node_type(node.node_type))
        prev = merged.get(node.id)
        if prev is None:
            merged[node.id] = node
            continue
        warn("DUPLICATE_NODE", f"{node.id!r} declared more than once; merged")
        attrs = dict(prev.attributes)
        for k, v in node.attributes.items():
            if k in attrs and attrs[k] != v:
                warn("ATTRIBUTE_CONFLICT", f"{node.id!r}.{k}: kept later value")
            attrs[k] = v
        node_type = node.node_type
        if prev.node_type != node_type:
            warn("TYPE_CONFLICT", f"{node.id!r}: {prev.node_type!r} -> {node_type!r}")
        layer = node.layer if node.layer is not Layer.UNKNOWN else prev.layer
        merged[node.id] = NodeRecord(node.id, node_type, attrs, layer)

    seen_edges: set[str] = set()
    for edge in doc.edges:
        if edge.id in seen_edges:
            warn("DUPLICATE_EDGE", f"{edge.id!r} declared more than once; later copy dropped")
            continue
        seen_edges.add(edge.id)
        missing = [x for x in (edge.src, edge.dst) if x not in merged]
        if missing:
            if policy is DanglingPolicy.FAIL:
                raise DanglingEndpoint(f"edge {edge.id!r} references undeclared node {missing[0]!r}")
            if policy is DanglingPolicy.SKIP:
                warn("DANGLING_ENDPOINT", f"edge {edge.id!r} skipped, unknown node {missing[0]!r}")
                continue
            for node_id in missing:
                if node_id not in merged:
                    warn("DANGLING_ENDPOINT", f"placeholder created for {node_id!r}")
                    merged[node_id] = NodeRecord(node_id, "unknown")
        out.edges.append(replace(edge, relation=canonical_relation(edge.relation)))

    out.nodes = list(merged.values())
    on_cycles = _find_cycles(out.nodes, out.edges)
    if on_cycles:
        warn("CYCLE", f"{on_cycles} nodes lie on or behind directed cycles")
    return out
