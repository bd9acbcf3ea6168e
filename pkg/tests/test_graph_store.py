import os
import tempfile

import numpy as np
import pytest

from corpus import Vocabulary
from exceptions import DataFormatError, GraphValidationError
from graph_store import (
    KnowledgeGraph,
    drop_triplets,
    induced_subgraph,
    load_graph,
    neighbors,
    random_walk,
    reachable_within,
    sample_neighborhood,
    split_unseen,
    write_graph,
)
from tests.conftest import description


def chain_graph(n=6):
    """0 -> 1 -> 2 -> ... -> n-1 over relation 0."""
    return KnowledgeGraph(
        num_entities=n,
        num_relations=1,
        num_categories=1,
        triplets=np.asarray([(i, 0, i + 1) for i in range(n - 1)]),
        categories=np.zeros(n, dtype=np.int64),
        entity_descriptions=[description(6) for _ in range(n)],
        relation_descriptions=[description(6)],
    )


class TestValidation:
    """Tests for KnowledgeGraph validation"""

    def test_duplicate_triplet(self):
        """Test a repeated triplet is rejected"""
        with pytest.raises(GraphValidationError, match="duplicate"):
            KnowledgeGraph(
                num_entities=2, num_relations=1, num_categories=1,
                triplets=np.asarray([(0, 0, 1), (0, 0, 1)]),
                categories=np.asarray([0, 0]),
                entity_descriptions=[description(6), description(7)],
                relation_descriptions=[description(6)],
            )

    def test_entity_out_of_range(self):
        """Test a tail id past N is rejected"""
        with pytest.raises(GraphValidationError, match="entity id"):
            KnowledgeGraph(
                num_entities=2, num_relations=1, num_categories=1,
                triplets=np.asarray([(0, 0, 2)]),
                categories=np.asarray([0, 0]),
                entity_descriptions=[description(6), description(7)],
                relation_descriptions=[description(6)],
            )

    def test_category_out_of_range(self):
        """Test a label at C is rejected"""
        with pytest.raises(GraphValidationError, match="category"):
            KnowledgeGraph(
                num_entities=1, num_relations=1, num_categories=2,
                triplets=np.zeros((0, 3)),
                categories=np.asarray([2]),
                entity_descriptions=[description(6)],
                relation_descriptions=[description(6)],
            )

    def test_description_needs_cls_and_eos(self):
        """Test a description missing [EOS] is rejected"""
        with pytest.raises(GraphValidationError, match="CLS"):
            KnowledgeGraph(
                num_entities=1, num_relations=1, num_categories=1,
                triplets=np.zeros((0, 3)),
                categories=np.asarray([0]),
                entity_descriptions=[[1, 6]],
                relation_descriptions=[description(6)],
            )


class TestNeighbors:
    """Tests for neighbor access"""

    def test_outgoing_pairs_sorted(self, star_graph):
        """Test neighbors lists (relation, tail) for outgoing triplets only"""
        assert neighbors(star_graph, 0) == [(0, 1), (1, 2), (1, 4)]
        assert neighbors(star_graph, 1) == []

    def test_incident_includes_inverse_edges(self, star_graph):
        """Test incoming triplets appear with the inverse flag"""
        rows = star_graph.incident(0).tolist()
        assert [0, 3, 1] in rows
        assert star_graph.degree(0) == 4

    def test_out_of_range(self, star_graph):
        """Test an unknown entity raises"""
        with pytest.raises(GraphValidationError):
            neighbors(star_graph, 6)

    def test_labeled_entities(self, star_graph):
        """Test the unlabeled entity is excluded"""
        assert star_graph.labeled_entities().tolist() == [0, 1, 2, 3, 5]


class TestSampleNeighborhood:
    """Tests for sample_neighborhood"""

    def test_edges_exist_in_graph(self, star_graph):
        """Test every sampled edge is a real triplet in its stated direction"""
        sub = sample_neighborhood(star_graph, [0, 5], hops=2, fanout=2, seed=3)
        triplets = {tuple(t) for t in star_graph.triplets.tolist()}
        for dst, rel, src, inv in sub.global_edges().tolist():
            if inv:
                assert (src, rel, dst) in triplets
            else:
                assert (dst, rel, src) in triplets

    def test_fanout_caps_edges_per_node(self, star_graph):
        """Test no node gets more than fanout incoming messages"""
        sub = sample_neighborhood(star_graph, [0], hops=1, fanout=2, seed=0)
        assert np.bincount(sub.dst).max() <= 2

    def test_dense_keeps_every_edge(self, star_graph):
        """Test fanout None keeps the full one-hop neighborhood"""
        sub = sample_neighborhood(star_graph, [0], hops=1, fanout=None)
        assert len(sub.dst) == star_graph.degree(0)
        assert sorted(sub.nodes.tolist()) == [0, 1, 2, 3, 4]

    def test_duplicate_targets_collapse(self, star_graph):
        """Test repeated targets keep first-occurrence order"""
        sub = sample_neighborhood(star_graph, [4, 0, 4], hops=0)
        assert sub.targets.tolist() == [4, 0]
        assert sub.layer_sizes == [2]

    def test_layer_sizes_nested(self, star_graph):
        """Test hop layers grow monotonically"""
        sub = sample_neighborhood(star_graph, [1], hops=2, fanout=None)
        assert sub.layer_sizes[0] <= sub.layer_sizes[1] <= sub.layer_sizes[2]
        assert 5 in sub.nodes.tolist()
        assert 5 not in sub.nodes[:sub.layer_sizes[1]].tolist()

    def test_empty_targets(self, star_graph):
        """Test an empty target list raises"""
        with pytest.raises(GraphValidationError, match="at least one"):
            sample_neighborhood(star_graph, [])

    def test_seeded(self, star_graph):
        """Test equal seeds sample equal neighborhoods"""
        a = sample_neighborhood(star_graph, [0], hops=2, fanout=1, seed=9)
        b = sample_neighborhood(star_graph, [0], hops=2, fanout=1, seed=9)
        np.testing.assert_array_equal(a.global_edges(), b.global_edges())


class TestTraversal:
    """Tests for walks and reachability"""

    def test_random_walk_follows_edges(self, star_graph):
        """Test consecutive walk entities are adjacent"""
        batch = random_walk(star_graph, [0, 5], length=4, seed=1)
        for walk in batch.walks:
            for a, b in zip(walk, walk[1:]):
                assert b in star_graph.incident(a)[:, 1].tolist()
        assert batch.entities.tolist() == sorted(set(v for w in batch.walks for v in w))

    def test_reachable_within(self, star_graph):
        """Test distances are undirected and exclude the start"""
        assert reachable_within(star_graph, 5, 1) == [4]
        assert reachable_within(star_graph, 5, 2) == [0, 4]
        assert reachable_within(star_graph, 1, 2) == [0, 2, 3, 4]


class TestSplits:
    """Tests for induced subgraphs, unseen splits and triplet dropping"""

    def test_induced_subgraph_reindexes(self, star_graph):
        """Test kept triplets are remapped and global ids recorded"""
        sub = induced_subgraph(star_graph, [4, 5, 0])
        assert sub.global_ids.tolist() == [0, 4, 5]
        assert sorted(map(tuple, sub.triplets.tolist())) == [(0, 1, 1), (1, 0, 2)]

    def test_split_unseen_partitions(self):
        """Test both sides are disjoint and cover every entity"""
        kg = chain_graph(10)
        seen, unseen = split_unseen(kg, fraction=0.3, seed=2)
        assert unseen.num_entities == 3
        assert sorted(seen.global_ids.tolist() + unseen.global_ids.tolist()) == list(range(10))

    def test_split_unseen_rejects_empty_side(self):
        """Test a fraction that rounds to nothing raises"""
        with pytest.raises(GraphValidationError, match="empty"):
            split_unseen(chain_graph(3), fraction=0.1)

    def test_drop_triplets_extremes(self, star_graph):
        """Test probability 0 keeps everything and 1 drops everything"""
        assert drop_triplets(star_graph, 0.0).num_triplets == star_graph.num_triplets
        assert drop_triplets(star_graph, 1.0).num_triplets == 0


class TestFiles:
    """Tests for the tab-separated graph files"""

    def test_write_then_load(self):
        """Test a written graph loads back equal"""
        vocab = Vocabulary(['w%d' % i for i in range(10)])
        kg = chain_graph(4)
        with tempfile.TemporaryDirectory() as tmpdir:
            paths = [os.path.join(tmpdir, name) for name in ('e.tsv', 'r.tsv', 't.tsv')]
            write_graph(kg, vocab, *paths)
            loaded = load_graph(*paths, vocab, num_categories=1)
        assert loaded.equals(kg)

    def test_malformed_line_reports_line_number(self):
        """Test a bad triplet line names the file and line"""
        vocab = Vocabulary(['w0'])
        with tempfile.TemporaryDirectory() as tmpdir:
            entity = os.path.join(tmpdir, 'e.tsv')
            relation = os.path.join(tmpdir, 'r.tsv')
            triplet = os.path.join(tmpdir, 't.tsv')
            with open(entity, 'w') as f:
                f.write("0\t0\t[CLS] w0 [EOS]\t-\n1\t-\t[CLS] w0 [EOS]\t-\n")
            with open(relation, 'w') as f:
                f.write("0\t[CLS] w0 [EOS]\n")
            with open(triplet, 'w') as f:
                f.write("0\t0\t1\n0\tx\t1\n")
            with pytest.raises(DataFormatError, match=r"t\.tsv:2"):
                load_graph(entity, relation, triplet, vocab)
