import itertools

import numpy as np
import pytest

from sumrank.family import (
    Family,
    FamilyError,
    RankVector,
    TreeGraph,
    bbht_family,
    build_tree,
    complementary_family,
    is_exhaustive,
    is_feasible,
    merge_equivalent_modes,
    root_subset,
    tucker_family,
    validate,
    variety_dim,
)
from sumrank.tensor import Shape


class TestValidation:
    def test_tucker_is_hierarchical(self):
        ok, violations = validate(tucker_family(4))
        assert ok and not violations

    def test_overlap_violation(self):
        ok, violations = validate(Family(4, [(1, 2), (2, 3)]))
        assert not ok
        assert any("overlap" in v[2] for v in violations)

    def test_complement_pair_violation(self):
        ok, violations = validate(Family(2, [(1,), (2,)]))
        assert not ok
        assert any("complement" in v[2] for v in violations)

    def test_merge_equivalence(self):
        fam = Family(3, [(1,)])
        assert merge_equivalent_modes(fam) == [(2, 3)]
        assert merge_equivalent_modes(tucker_family(3)) == []


class TestBuildTree:
    def test_matrix_case(self):
        g = build_tree(Family(2, [(1,)]))
        assert g.vertices == frozenset({1, 2})
        assert g.edges == frozenset({frozenset({1, 2})})
        assert g.edge_subset[frozenset({1, 2})].members == (1,)

    def test_tucker_star(self):
        g = build_tree(tucker_family(4))
        assert g.vertices == frozenset({1, 2, 3, 4, 5})
        assert g.edges == frozenset(frozenset({mu, 5}) for mu in range(1, 5))
        for mu in range(1, 5):
            assert g.edge_subset[frozenset({mu, 5})].members == (mu,)

    def test_bbht_binary_tree(self):
        fam = bbht_family(4)
        assert set(tuple(s.members) for s in fam.subsets) == {
            (1,), (2,), (3,), (4,), (1, 2)
        }
        g = build_tree(fam)
        assert len(g.edges) == 5 == 2 * 4 - 3
        interiors = [v for v in g.vertices if v > 4]
        assert len(interiors) == 2
        assert all(g.degree(v) == 3 for v in interiors)

    def test_chain_with_interior_mode(self):
        g = build_tree(Family(3, [(1,), (1, 2)]))
        assert g.vertices == frozenset({1, 2, 3})
        assert g.degree(2) == 2

    def test_unseparated_modes_rejected(self):
        with pytest.raises(FamilyError):
            build_tree(Family(3, [(1,)]))

    def test_non_hierarchical_rejected(self):
        with pytest.raises(FamilyError):
            build_tree(Family(4, [(1, 2), (2, 3)]))

    def test_every_subset_is_an_edge_label(self):
        for fam in (tucker_family(5), bbht_family(6), bbht_family(5)):
            g = build_tree(fam)
            labels = {s for s in g.edge_subset.values()}
            assert labels == set(fam.subsets)
            assert len(g.edges) == len(fam)

    def test_rebuild_roundtrip(self):
        # extract the family from each rooted orientation and rebuild
        fam = bbht_family(5)
        g = build_tree(fam)
        for c in sorted(g.vertices):
            _, oriented, _ = root_subset(g, c)
            rebuilt = build_tree(Family(5, [s.members for s in oriented.values()]))
            assert len(rebuilt.edges) == len(g.edges)
            rebuilt_splits = {
                frozenset([s.members, s.complement().members])
                for s in rebuilt.edge_subset.values()
            }
            orig_splits = {
                frozenset([s.members, s.complement().members])
                for s in g.edge_subset.values()
            }
            assert rebuilt_splits == orig_splits


class TestGraphQueries:
    def setup_method(self):
        self.gt = build_tree(tucker_family(4))
        self.gb = build_tree(bbht_family(4))

    def test_tucker_path(self):
        assert self.gt.path(1, 3) == (5,)
        assert self.gt.path(5, 1) == ()

    def test_tucker_branch_and_desc(self):
        assert self.gt.branch(5, 1) == frozenset({1})
        assert self.gt.desc(5, 1) == set()

    def test_bbht_path_between_leaves(self):
        interiors = sorted(v for v in self.gb.vertices if v > 4)
        path = self.gb.path(1, 4)
        assert set(path) == set(interiors)
        # exhaustive check against adjacency walking
        full = self.gb.path_inclusive(1, 4)
        for u, w in zip(full[:-1], full[1:]):
            assert frozenset((u, w)) in self.gb.edges

    def test_edge_split_partitions_modes(self):
        for g in (self.gt, self.gb):
            for e in g.edges:
                v, w = tuple(e)
                j_vw = g.leaf_set(w, v)
                j_wv = g.leaf_set(v, w)
                assert sorted(j_vw.members + j_wv.members) == [1, 2, 3, 4]

    def test_edge_sets(self):
        e_s, interior, boundary = self.gb.edge_sets({1, 2})
        assert not interior
        assert e_s == boundary
        all_e, inner, bound = self.gb.edge_sets(self.gb.vertices)
        assert inner == self.gb.edges and not bound

    def test_unknown_vertex(self):
        with pytest.raises(KeyError):
            self.gt.neigh(99)

    def test_euler_tour(self):
        tour = self.gb.euler_tour(5)
        assert tour[0] == tour[-1] == 5
        assert set(tour) == self.gb.vertices
        for u, w in zip(tour[:-1], tour[1:]):
            assert frozenset((u, w)) in self.gb.edges


class TestComplementaryFamily:
    def test_empty_replacement(self):
        fam = bbht_family(4)
        assert complementary_family(fam, []) == fam

    def test_matrix_root_subsets(self):
        g = build_tree(Family(2, [(1,)]))
        s_c, oriented, _ = root_subset(g, 2)
        assert s_c == []
        assert [s.members for s in oriented.values()] == [(1,)]
        s_c, oriented, _ = root_subset(g, 1)
        assert [s.members for s in s_c] == [(1,)]
        assert [s.members for s in oriented.values()] == [(2,)]

    def test_tucker_center_root(self):
        g = build_tree(tucker_family(4))
        s_c, oriented, vertex_of = root_subset(g, 5)
        assert s_c == []
        for e, s in oriented.items():
            assert vertex_of[s] in e

    def test_replacement_is_complement(self):
        fam = bbht_family(4)
        comp = complementary_family(fam, [(1, 2)])
        members = {s.members for s in comp.subsets}
        assert (3, 4) in members and (1, 2) not in members

    def test_unknown_subset_rejected(self):
        with pytest.raises(FamilyError):
            complementary_family(tucker_family(3), [(1, 2)])


class TestFeasibilityAndDimension:
    def test_tucker_feasible(self):
        fam = tucker_family(3)
        g = build_tree(fam)
        shape = Shape([2, 2, 2])
        assert is_feasible(RankVector(fam, 2), shape, g)
        assert not is_feasible(
            RankVector(fam, {(1,): 4, (2,): 1, (3,): 1}), shape, g
        )

    def test_bbht_feasible(self):
        fam = bbht_family(4)
        g = build_tree(fam)
        assert is_feasible(RankVector(fam, 3), Shape([5] * 4), g)

    def test_paper_dimensions(self):
        fam = bbht_family(4)
        g = build_tree(fam)
        assert variety_dim(RankVector(fam, 3), Shape([5] * 4), g) == 69
        tk = tucker_family(4)
        gt = build_tree(tk)
        assert variety_dim(RankVector(tk, 3), Shape([5] * 4), gt) == 105
        f8 = bbht_family(8)
        g8 = build_tree(f8)
        assert variety_dim(RankVector(f8, 5), Shape([20] * 8), g8) == 1225

    def test_infeasible_dimension_rejected(self):
        fam = tucker_family(3)
        g = build_tree(fam)
        with pytest.raises(FamilyError):
            variety_dim(RankVector(fam, {(1,): 4, (2,): 1, (3,): 1}), Shape([2, 2, 2]), g)

    def test_dimension_monotone_in_ranks(self):
        fam = bbht_family(4)
        g = build_tree(fam)
        shape = Shape([5] * 4)
        base = {s: 2 for s in fam.subsets}
        d0 = variety_dim(RankVector(fam, base), shape, g)
        for s in fam.subsets:
            grown = dict(base)
            grown[s] = 3
            assert variety_dim(RankVector(fam, grown), shape, g) > d0


class TestBuilders:
    def test_bbht_exhaustive_and_tucker_not(self):
        assert is_exhaustive(bbht_family(4))
        assert not is_exhaustive(tucker_family(4))
        assert is_exhaustive(tucker_family(3))

    def test_bbht_sizes(self):
        for d in range(2, 9):
            fam = bbht_family(d)
            assert len(fam) == 2 * d - 3
            g = build_tree(fam)
            assert len(g.vertices) == max(2 * d - 2, 2)

    def test_bbht_minimizes_depth(self):
        g = build_tree(bbht_family(8))
        dist = {}
        for v in range(1, 9):
            _, dv = g.order_from(v)
            dist[v] = max(dv[w] for w in range(1, 9))
        assert max(dist.values()) <= 5  # balanced: ceil(log2 8) + ... paths stay short

    def test_json_roundtrip(self, tmp_path):
        fam = bbht_family(4)
        path = tmp_path / "fam.json"
        fam.save(path)
        assert Family.load(path) == fam

    def test_tree_json(self):
        g = build_tree(bbht_family(4))
        doc = g.to_json()
        assert doc["d"] == 4
        assert len(doc["edges"]) == 5
