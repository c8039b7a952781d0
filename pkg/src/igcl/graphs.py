"""Report knowledge graphs: data model, JSON ingestion, and structural transforms.

A report graph is a small multi-relational graph extracted from a radiology
note: anatomy and observation nodes joined by modify / located_at /
suggestive_of edges, usually split into several connected components.  This
module owns the wire format, connected-component labeling, the three
component-joining augmentations (dummy / meta / primary), the five
information-removal ablations, and corpus statistics.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

VOCAB_SIZE = 4096
UNK_TOKEN = 0


def token_for(text: str) -> int:
    """Deterministic hash of node text into the fixed vocabulary.

    Slot 0 is reserved for the unknown token used by the text ablation, so
    real text maps into 1..VOCAB_SIZE-1.  CRC32 keeps the mapping stable
    across runs and platforms; collisions are acceptable at this scale.
    """
    return 1 + zlib.crc32(text.encode("utf-8")) % (VOCAB_SIZE - 1)


class NodeType(Enum):
    ANATOMY = "ANATOMY"
    OBS_PRESENT = "OBS_PRESENT"
    OBS_UNCERTAIN = "OBS_UNCERTAIN"
    OBS_ABSENT = "OBS_ABSENT"
    SYNTHETIC_AUG = "SYNTHETIC_AUG"
    NEUTRAL = "NEUTRAL"  # reserved for the type ablation


class Relation(Enum):
    MODIFY = "modify"
    LOCATED_AT = "located_at"
    SUGGESTIVE_OF = "suggestive_of"
    AUG_LINK = "aug_link"  # only in augmented graphs
    GENERIC = "generic"    # only in relation-ablated graphs


WIRE_TYPES = {
    "ANAT": NodeType.ANATOMY,
    "OBS-DP": NodeType.OBS_PRESENT,
    "OBS-U": NodeType.OBS_UNCERTAIN,
    "OBS-DA": NodeType.OBS_ABSENT,
}
TYPE_WIRE = {v: k for k, v in WIRE_TYPES.items()}

WIRE_RELATIONS = {
    "modify": Relation.MODIFY,
    "located_at": Relation.LOCATED_AT,
    "suggestive_of": Relation.SUGGESTIVE_OF,
}
RELATION_WIRE = {v: k for k, v in WIRE_RELATIONS.items()}


class AugmentStrategy(Enum):
    DUMMY = "dummy"
    META = "meta"
    PRIMARY = "primary"


class AblationMode(Enum):
    DROP_NODE_TEXT = "drop_node_text"
    DROP_NODE_TYPE = "drop_node_type"
    DROP_RELATION_TYPES = "drop_relation_types"
    DROP_STRUCTURE = "drop_structure"
    TRIPLETS_ONLY = "triplets_only"


class GraphFormatError(ValueError):
    """Base for all document-level validation failures."""


class MalformedDocumentError(GraphFormatError):
    pass


class EmptyGraphError(GraphFormatError):
    pass


class DanglingEdgeError(GraphFormatError):
    pass


class DuplicateEdgeError(GraphFormatError):
    pass


class SelfLoopError(GraphFormatError):
    pass


class UnknownTypeError(GraphFormatError):
    pass


class UnknownRelationError(GraphFormatError):
    pass


@dataclass(frozen=True)
class GraphNode:
    text: str
    node_type: NodeType
    token_id: int


def make_node(text: str, node_type: NodeType) -> GraphNode:
    return GraphNode(text=text, node_type=node_type, token_id=token_for(text))


@dataclass(frozen=True)
class GraphEdge:
    src: int
    dst: int
    relation: Relation


@dataclass(frozen=True)
class ReportGraph:
    graph_id: str
    nodes: tuple[GraphNode, ...]
    edges: tuple[GraphEdge, ...]

    def num_nodes(self) -> int:
        return len(self.nodes)


def validate_graph(g: ReportGraph) -> None:
    """Raise a GraphFormatError subtype on the first structural violation."""
    if not g.nodes:
        raise EmptyGraphError(f"graph {g.graph_id!r} has no nodes")
    n = len(g.nodes)
    seen: set[tuple[int, int, Relation]] = set()
    for e in g.edges:
        if not (0 <= e.src < n) or not (0 <= e.dst < n):
            raise DanglingEdgeError(
                f"graph {g.graph_id!r}: edge ({e.src}, {e.dst}, {e.relation.value}) "
                f"references a node outside 0..{n - 1}")
        if e.src == e.dst:
            raise SelfLoopError(
                f"graph {g.graph_id!r}: self-loop on node {e.src}")
        key = (e.src, e.dst, e.relation)
        if key in seen:
            raise DuplicateEdgeError(
                f"graph {g.graph_id!r}: duplicate edge ({e.src}, {e.dst}, "
                f"{e.relation.value})")
        seen.add(key)


def parse_graph(document: str) -> ReportGraph:
    """Parse and validate one wire-format JSON document."""
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as exc:
        raise MalformedDocumentError(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise MalformedDocumentError(f"expected a JSON object, got {type(raw).__name__}")

    graph_id = raw.get("graph_id")
    if not isinstance(graph_id, str):
        raise MalformedDocumentError("missing or non-string 'graph_id'")
    raw_nodes = raw.get("nodes")
    if not isinstance(raw_nodes, list):
        raise MalformedDocumentError(f"graph {graph_id!r}: 'nodes' must be a list")
    raw_edges = raw.get("edges", [])
    if not isinstance(raw_edges, list):
        raise MalformedDocumentError(f"graph {graph_id!r}: 'edges' must be a list")

    nodes = []
    for i, item in enumerate(raw_nodes):
        if not isinstance(item, dict) or not isinstance(item.get("text"), str):
            raise MalformedDocumentError(f"graph {graph_id!r}: node {i} malformed")
        type_str = item.get("type")
        if type_str not in WIRE_TYPES:
            raise UnknownTypeError(
                f"graph {graph_id!r}: node {i} has unknown type {type_str!r}")
        nodes.append(make_node(item["text"], WIRE_TYPES[type_str]))

    edges = []
    for i, item in enumerate(raw_edges):
        if not isinstance(item, dict):
            raise MalformedDocumentError(f"graph {graph_id!r}: edge {i} malformed")
        rel_str = item.get("rel")
        if rel_str not in WIRE_RELATIONS:
            raise UnknownRelationError(
                f"graph {graph_id!r}: edge {i} has unknown relation {rel_str!r}")
        src, dst = item.get("src"), item.get("dst")
        if not isinstance(src, int) or not isinstance(dst, int) \
                or isinstance(src, bool) or isinstance(dst, bool):
            raise MalformedDocumentError(
                f"graph {graph_id!r}: edge {i} endpoints must be integers")
        edges.append(GraphEdge(src=src, dst=dst, relation=WIRE_RELATIONS[rel_str]))

    g = ReportGraph(graph_id=graph_id, nodes=tuple(nodes), edges=tuple(edges))
    validate_graph(g)
    return g


def serialize_graph(g: ReportGraph) -> str:
    """Canonical wire form: node order preserved, edges sorted, compact JSON."""
    for i, node in enumerate(g.nodes):
        if node.node_type not in TYPE_WIRE:
            raise UnknownTypeError(
                f"graph {g.graph_id!r}: node {i} type {node.node_type.value} "
                "has no wire representation")
    for e in g.edges:
        if e.relation not in RELATION_WIRE:
            raise UnknownRelationError(
                f"graph {g.graph_id!r}: relation {e.relation.value} "
                "has no wire representation")
    doc = {
        "graph_id": g.graph_id,
        "nodes": [{"text": n.text, "type": TYPE_WIRE[n.node_type]} for n in g.nodes],
        "edges": [{"src": e.src, "dst": e.dst, "rel": RELATION_WIRE[e.relation]}
                  for e in sorted(g.edges,
                                  key=lambda e: (e.src, e.dst, e.relation.value))],
    }
    return json.dumps(doc, separators=(",", ":"))


@dataclass(frozen=True)
class ComponentLabeling:
    component_id: tuple[int, ...]
    component_count: int


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:  # path compression
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def connected_components(g: ReportGraph) -> ComponentLabeling:
    """Undirected connectivity; ids assigned by smallest member node index."""
    uf = _UnionFind(len(g.nodes))
    for e in g.edges:
        uf.union(e.src, e.dst)
    roots = [uf.find(i) for i in range(len(g.nodes))]
    order: dict[int, int] = {}
    for i, r in enumerate(roots):
        if r not in order:
            order[r] = len(order)
    ids = tuple(order[r] for r in roots)
    return ComponentLabeling(component_id=ids, component_count=len(order))


def augment(g: ReportGraph, strategy: AugmentStrategy) -> ReportGraph:
    """Join disconnected components with synthetic nodes and aug-link edges.

    Original nodes and edges are preserved untouched; the result always has
    exactly one component.  Aug-link edges run node-to-meta, meta-to-meta
    and meta-to-primary; the encoder's inverse relations mirror them.
    """
    labeling = connected_components(g)
    nodes = list(g.nodes)
    edges = list(g.edges)
    n = len(g.nodes)

    if strategy is AugmentStrategy.DUMMY:
        dummy = n
        nodes.append(make_node("[dummy]", NodeType.SYNTHETIC_AUG))
        for v in range(n):
            edges.append(GraphEdge(v, dummy, Relation.AUG_LINK))
    elif strategy is AugmentStrategy.META:
        meta_of = [n + c for c in range(labeling.component_count)]
        for c in range(labeling.component_count):
            nodes.append(make_node(f"[meta_{c}]", NodeType.SYNTHETIC_AUG))
        for v in range(n):
            edges.append(GraphEdge(v, meta_of[labeling.component_id[v]],
                                   Relation.AUG_LINK))
        for a in range(labeling.component_count):
            for b in range(a + 1, labeling.component_count):
                edges.append(GraphEdge(meta_of[a], meta_of[b], Relation.AUG_LINK))
    elif strategy is AugmentStrategy.PRIMARY:
        meta_of = [n + c for c in range(labeling.component_count)]
        for c in range(labeling.component_count):
            nodes.append(make_node(f"[meta_{c}]", NodeType.SYNTHETIC_AUG))
        primary = n + labeling.component_count
        nodes.append(make_node("[primary]", NodeType.SYNTHETIC_AUG))
        for v in range(n):
            edges.append(GraphEdge(v, meta_of[labeling.component_id[v]],
                                   Relation.AUG_LINK))
        for m in meta_of:
            edges.append(GraphEdge(m, primary, Relation.AUG_LINK))
    else:
        raise ValueError(f"unknown augmentation strategy {strategy!r}")

    return ReportGraph(graph_id=g.graph_id, nodes=tuple(nodes), edges=tuple(edges))


@dataclass(frozen=True)
class AblatedGraph:
    """Result of one information-removal transform.

    All modes except TRIPLETS_ONLY keep a graph form; TRIPLETS_ONLY reduces
    the graph to the multiset of (src_token, relation, dst_token) triples.
    """
    mode: AblationMode
    graph: ReportGraph | None = None
    triples: tuple[tuple[int, Relation, int], ...] | None = None


def ablate(g: ReportGraph, mode: AblationMode) -> AblatedGraph:
    if mode is AblationMode.DROP_NODE_TEXT:
        nodes = tuple(GraphNode(text="", node_type=n.node_type, token_id=UNK_TOKEN)
                      for n in g.nodes)
        return AblatedGraph(mode, graph=ReportGraph(g.graph_id, nodes, g.edges))
    if mode is AblationMode.DROP_NODE_TYPE:
        nodes = tuple(GraphNode(text=n.text, node_type=NodeType.NEUTRAL,
                                token_id=n.token_id) for n in g.nodes)
        return AblatedGraph(mode, graph=ReportGraph(g.graph_id, nodes, g.edges))
    if mode is AblationMode.DROP_RELATION_TYPES:
        seen: set[tuple[int, int]] = set()
        edges = []
        for e in g.edges:
            if (e.src, e.dst) not in seen:  # relabeling can collide; dedupe
                seen.add((e.src, e.dst))
                edges.append(GraphEdge(e.src, e.dst, Relation.GENERIC))
        return AblatedGraph(mode, graph=ReportGraph(g.graph_id, g.nodes, tuple(edges)))
    if mode is AblationMode.DROP_STRUCTURE:
        return AblatedGraph(mode, graph=ReportGraph(g.graph_id, g.nodes, ()))
    if mode is AblationMode.TRIPLETS_ONLY:
        triples = tuple(sorted(
            (g.nodes[e.src].token_id, e.relation, g.nodes[e.dst].token_id)
            for e in g.edges))
        return AblatedGraph(mode, triples=triples)
    raise ValueError(f"unknown ablation mode {mode!r}")


@dataclass(frozen=True)
class StatsTable:
    node_count_hist: dict[int, int]
    edge_count_hist: dict[int, int]
    component_count_hist: dict[int, int]
    relation_freq: dict[str, int]
    mean_nodes: float
    mean_edges: float
    mean_components: float

    def to_csv(self) -> str:
        lines = ["statistic,bucket,value"]
        for name, hist in (("node_count", self.node_count_hist),
                           ("edge_count", self.edge_count_hist),
                           ("component_count", self.component_count_hist)):
            for bucket in sorted(hist):
                lines.append(f"{name},{bucket},{hist[bucket]}")
        for rel in sorted(self.relation_freq):
            lines.append(f"relation_freq,{rel},{self.relation_freq[rel]}")
        lines.append(f"node_count,mean,{self.mean_nodes:.6f}")
        lines.append(f"edge_count,mean,{self.mean_edges:.6f}")
        lines.append(f"component_count,mean,{self.mean_components:.6f}")
        return "\n".join(lines) + "\n"


def graph_stats(corpus: Sequence[ReportGraph]) -> StatsTable:
    """Corpus-level histograms of size, connectivity and relation usage."""
    if not corpus:
        raise ValueError("graph_stats needs a nonempty corpus")
    node_hist: dict[int, int] = {}
    edge_hist: dict[int, int] = {}
    comp_hist: dict[int, int] = {}
    rel_freq: dict[str, int] = {}
    totals = [0, 0, 0]
    for g in corpus:
        nn, ne = len(g.nodes), len(g.edges)
        nc = connected_components(g).component_count
        node_hist[nn] = node_hist.get(nn, 0) + 1
        edge_hist[ne] = edge_hist.get(ne, 0) + 1
        comp_hist[nc] = comp_hist.get(nc, 0) + 1
        for e in g.edges:
            rel_freq[e.relation.value] = rel_freq.get(e.relation.value, 0) + 1
        totals[0] += nn
        totals[1] += ne
        totals[2] += nc
    n = len(corpus)
    return StatsTable(
        node_count_hist=node_hist,
        edge_count_hist=edge_hist,
        component_count_hist=comp_hist,
        relation_freq=rel_freq,
        mean_nodes=totals[0] / n,
        mean_edges=totals[1] / n,
        mean_components=totals[2] / n,
    )
