import json

import numpy as np
import pytest

from igcl.graphs import (
    AblationMode,
    AugmentStrategy,
    ComponentLabeling,
    DanglingEdgeError,
    DuplicateEdgeError,
    EmptyGraphError,
    GraphEdge,
    GraphNode,
    MalformedDocumentError,
    NodeType,
    Relation,
    ReportGraph,
    SelfLoopError,
    UnknownRelationError,
    UnknownTypeError,
    UNK_TOKEN,
    VOCAB_SIZE,
    ablate,
    augment,
    connected_components,
    graph_stats,
    make_node,
    parse_graph,
    serialize_graph,
    token_for,
)

TWO_NODE_DOC = json.dumps({
    "graph_id": "g0",
    "nodes": [{"text": "opacity", "type": "OBS-DP"},
              {"text": "lung", "type": "ANAT"}],
    "edges": [{"src": 0, "dst": 1, "rel": "located_at"}],
})


def random_graph(rng, n_nodes=None, edge_prob=0.08):
    """Random valid wire-compatible graph."""
    n = int(n_nodes if n_nodes is not None else rng.integers(1, 12))
    types = [NodeType.ANATOMY, NodeType.OBS_PRESENT,
             NodeType.OBS_UNCERTAIN, NodeType.OBS_ABSENT]
    nodes = tuple(make_node(f"word{rng.integers(0, 40)}", types[rng.integers(0, 4)])
                  for _ in range(n))
    rels = [Relation.MODIFY, Relation.LOCATED_AT, Relation.SUGGESTIVE_OF]
    edges = []
    seen = set()
    for s in range(n):
        for d in range(n):
            if s == d or rng.random() > edge_prob:
                continue
            r = rels[rng.integers(0, 3)]
            if (s, d, r) not in seen:
                seen.add((s, d, r))
                edges.append(GraphEdge(s, d, r))
    return ReportGraph(graph_id=f"r{rng.integers(0, 10**6)}",
                       nodes=nodes, edges=tuple(edges))


def brute_force_components(g: ReportGraph) -> ComponentLabeling:
    """Transitive closure over the undirected adjacency matrix."""
    n = len(g.nodes)
    reach = np.eye(n, dtype=bool)
    for e in g.edges:
        reach[e.src, e.dst] = True
        reach[e.dst, e.src] = True
    for _ in range(n):
        reach = reach | (reach @ reach)
    ids = [-1] * n
    count = 0
    for i in range(n):
        if ids[i] == -1:
            for j in range(n):
                if reach[i, j]:
                    ids[j] = count
            count += 1
    return ComponentLabeling(component_id=tuple(ids), component_count=count)


class TestTokenHash:
    def test_deterministic_and_in_range(self):
        assert token_for("opacity") == token_for("opacity")
        assert 1 <= token_for("opacity") < VOCAB_SIZE
        assert UNK_TOKEN == 0

    def test_distinct_words_usually_distinct(self):
        toks = {token_for(f"w{i}") for i in range(50)}
        assert len(toks) == 50


class TestParse:
    def test_two_node_document(self):
        g = parse_graph(TWO_NODE_DOC)
        assert len(g.nodes) == 2
        assert len(g.edges) == 1
        assert g.nodes[0].node_type is NodeType.OBS_PRESENT
        assert g.edges[0].relation is Relation.LOCATED_AT

    def test_dangling_endpoint(self):
        doc = json.dumps({"graph_id": "g", "nodes": [
            {"text": "a", "type": "ANAT"}, {"text": "b", "type": "ANAT"},
            {"text": "c", "type": "ANAT"}],
            "edges": [{"src": 0, "dst": 5, "rel": "modify"}]})
        with pytest.raises(DanglingEdgeError, match="5"):
            parse_graph(doc)

    def test_malformed_json(self):
        with pytest.raises(MalformedDocumentError):
            parse_graph("{not json")

    def test_empty_node_list(self):
        with pytest.raises(EmptyGraphError):
            parse_graph(json.dumps({"graph_id": "g", "nodes": [], "edges": []}))

    def test_duplicate_triple(self):
        doc = json.dumps({"graph_id": "g", "nodes": [
            {"text": "a", "type": "ANAT"}, {"text": "b", "type": "ANAT"}],
            "edges": [{"src": 0, "dst": 1, "rel": "modify"},
                      {"src": 0, "dst": 1, "rel": "modify"}]})
        with pytest.raises(DuplicateEdgeError, match=r"\(0, 1, modify\)"):
            parse_graph(doc)

    def test_self_loop(self):
        doc = json.dumps({"graph_id": "g",
                          "nodes": [{"text": "a", "type": "ANAT"}],
                          "edges": [{"src": 0, "dst": 0, "rel": "modify"}]})
        with pytest.raises(SelfLoopError):
            parse_graph(doc)

    def test_unknown_type_and_relation(self):
        with pytest.raises(UnknownTypeError, match="WEIRD"):
            parse_graph(json.dumps({"graph_id": "g",
                                    "nodes": [{"text": "a", "type": "WEIRD"}],
                                    "edges": []}))
        with pytest.raises(UnknownRelationError, match="causes"):
            parse_graph(json.dumps({"graph_id": "g", "nodes": [
                {"text": "a", "type": "ANAT"}, {"text": "b", "type": "ANAT"}],
                "edges": [{"src": 0, "dst": 1, "rel": "causes"}]}))

    def test_round_trip_on_generated_documents(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            g = random_graph(rng)
            canonical = serialize_graph(g)
            assert serialize_graph(parse_graph(canonical)) == canonical

    def test_parse_assigns_hash_tokens(self):
        g = parse_graph(TWO_NODE_DOC)
        assert g.nodes[0].token_id == token_for("opacity")


class TestComponents:
    def test_single_edge(self):
        g = parse_graph(TWO_NODE_DOC)
        assert connected_components(g).component_count == 1

    def test_no_edges(self):
        nodes = tuple(make_node(f"n{i}", NodeType.ANATOMY) for i in range(4))
        g = ReportGraph("g", nodes, ())
        lab = connected_components(g)
        assert lab.component_count == 4
        assert lab.component_id == (0, 1, 2, 3)

    def test_id_assignment_order(self):
        nodes = tuple(make_node(f"n{i}", NodeType.ANATOMY) for i in range(5))
        # components {0,4}, {1}, {2,3}: ids follow smallest member index
        edges = (GraphEdge(4, 0, Relation.MODIFY), GraphEdge(2, 3, Relation.MODIFY))
        lab = connected_components(ReportGraph("g", nodes, edges))
        assert lab.component_id == (0, 1, 2, 2, 0)
        assert lab.component_count == 3

    def test_agrees_with_brute_force_on_random_graphs(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            g = random_graph(rng, n_nodes=50, edge_prob=0.02)
            fast = connected_components(g)
            slow = brute_force_components(g)
            assert fast == slow


class TestAugment:
    def two_component_graph(self):
        nodes = tuple(make_node(f"n{i}", NodeType.ANATOMY) for i in range(5))
        edges = (GraphEdge(0, 1, Relation.MODIFY),
                 GraphEdge(1, 2, Relation.LOCATED_AT),
                 GraphEdge(3, 4, Relation.SUGGESTIVE_OF))
        return ReportGraph("two", nodes, edges)

    def test_dummy_counts(self):
        g = self.two_component_graph()
        out = augment(g, AugmentStrategy.DUMMY)
        assert len(out.nodes) == 6
        added = [e for e in out.edges if e.relation is Relation.AUG_LINK]
        assert len(added) == 5
        assert connected_components(out).component_count == 1

    def test_meta_counts(self):
        g = self.two_component_graph()
        out = augment(g, AugmentStrategy.META)
        metas = [n for n in out.nodes if n.node_type is NodeType.SYNTHETIC_AUG]
        assert len(metas) == 2
        meta_ids = {i for i, n in enumerate(out.nodes)
                    if n.node_type is NodeType.SYNTHETIC_AUG}
        meta_meta = [e for e in out.edges
                     if e.src in meta_ids and e.dst in meta_ids]
        assert len(meta_meta) == 1
        assert connected_components(out).component_count == 1

    def test_primary_counts(self):
        g = self.two_component_graph()
        out = augment(g, AugmentStrategy.PRIMARY)
        synth = [n for n in out.nodes if n.node_type is NodeType.SYNTHETIC_AUG]
        assert len(synth) == 3  # two metas plus the primary
        aug_edges = [e for e in out.edges if e.relation is Relation.AUG_LINK]
        assert len(aug_edges) == 5 + 2

    def test_single_component_stays_single(self):
        g = parse_graph(TWO_NODE_DOC)
        for strategy in AugmentStrategy:
            assert connected_components(augment(g, strategy)).component_count == 1

    @pytest.mark.parametrize("strategy", list(AugmentStrategy))
    def test_preserves_originals_and_connects(self, strategy):
        rng = np.random.default_rng(9)
        for _ in range(40):
            g = random_graph(rng)
            out = augment(g, strategy)
            assert out.nodes[:len(g.nodes)] == g.nodes
            assert out.edges[:len(g.edges)] == g.edges
            assert connected_components(out).component_count == 1
            for e in out.edges[len(g.edges):]:
                assert e.relation is Relation.AUG_LINK
            for n in out.nodes[len(g.nodes):]:
                assert n.node_type is NodeType.SYNTHETIC_AUG


class TestAblate:
    def sample(self):
        nodes = (make_node("opacity", NodeType.OBS_PRESENT),
                 make_node("lung", NodeType.ANATOMY),
                 make_node("severe", NodeType.OBS_PRESENT),
                 make_node("heart", NodeType.ANATOMY),
                 make_node("edema", NodeType.OBS_ABSENT))
        edges = (GraphEdge(0, 1, Relation.LOCATED_AT),
                 GraphEdge(2, 0, Relation.MODIFY),
                 GraphEdge(4, 3, Relation.LOCATED_AT))
        return ReportGraph("s", nodes, edges)

    def test_drop_structure(self):
        out = ablate(self.sample(), AblationMode.DROP_STRUCTURE)
        assert len(out.graph.nodes) == 5
        assert out.graph.edges == ()

    def test_triplets_only_drops_isolated_nodes(self):
        nodes = (make_node("a", NodeType.ANATOMY),
                 make_node("b", NodeType.ANATOMY),
                 make_node("isolated", NodeType.OBS_PRESENT))
        g = ReportGraph("t", nodes, (GraphEdge(0, 1, Relation.MODIFY),))
        out = ablate(g, AblationMode.TRIPLETS_ONLY)
        toks = {t for trip in out.triples for t in (trip[0], trip[2])}
        assert token_for("isolated") not in toks
        assert out.triples == ((token_for("a"), Relation.MODIFY, token_for("b")),)

    def test_drop_relation_types_single_relation(self):
        out = ablate(self.sample(), AblationMode.DROP_RELATION_TYPES)
        assert {e.relation for e in out.graph.edges} == {Relation.GENERIC}

    def test_drop_node_text_uses_unk(self):
        out = ablate(self.sample(), AblationMode.DROP_NODE_TEXT)
        assert all(n.token_id == UNK_TOKEN for n in out.graph.nodes)
        assert [n.node_type for n in out.graph.nodes] == \
               [n.node_type for n in self.sample().nodes]

    def test_drop_node_type_uses_neutral(self):
        out = ablate(self.sample(), AblationMode.DROP_NODE_TYPE)
        assert all(n.node_type is NodeType.NEUTRAL for n in out.graph.nodes)

    def test_text_and_type_ablations_commute(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            g = random_graph(rng)
            a = ablate(ablate(g, AblationMode.DROP_NODE_TEXT).graph,
                       AblationMode.DROP_NODE_TYPE)
            b = ablate(ablate(g, AblationMode.DROP_NODE_TYPE).graph,
                       AblationMode.DROP_NODE_TEXT)
            assert a.graph == b.graph


class TestStats:
    def test_single_graph(self):
        g = parse_graph(TWO_NODE_DOC)
        table = graph_stats([g])
        assert table.component_count_hist == {1: 1}
        assert table.relation_freq == {"located_at": 1}

    def test_mean_components(self):
        one = parse_graph(TWO_NODE_DOC)
        nodes = tuple(make_node(f"n{i}", NodeType.ANATOMY) for i in range(3))
        three = ReportGraph("g3", nodes, ())
        table = graph_stats([one, three])
        assert table.mean_components == pytest.approx(2.0)

    def test_csv_shape(self):
        table = graph_stats([parse_graph(TWO_NODE_DOC)])
        lines = table.to_csv().strip().split("\n")
        assert lines[0] == "statistic,bucket,value"
        assert any(line.startswith("component_count,mean,") for line in lines)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            graph_stats([])
