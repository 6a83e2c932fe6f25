import numpy as np
import pytest

from sumrank.airls import (
    AirlsConfig,
    assemble_Fc,
    assemble_node_operator,
    branch_B,
    branch_H,
    node_update,
    path_operator,
    run_airls,
)
from sumrank.family import Family, bbht_family, build_tree, root_subset, tucker_family
from sumrank.irls import GammaSchedule
from sumrank.labeled import ZETA
from sumrank.network import (
    contract_full,
    gram_z,
    insertion_matrix,
    network_distance,
    orthonormalize,
    random_network,
)
from sumrank.objective import low_rank_weights, relaxed_f, scaling_constant, weights, what_matrix
from sumrank.operators import branch_messages, gaussian_decomposed, sampling
from sumrank.tensor import DenseTensor, Shape


SHAPE = Shape((3, 3, 3, 3))


def setup_instance(builder=bbht_family, seed=0, r=2, ell=11, op_rank=1, c=None):
    fam = builder(4)
    graph = build_tree(fam)
    rng = np.random.default_rng(seed)
    net = random_network(graph, {e: r for e in graph.edges}, SHAPE, int(rng.integers(2**63)))
    op = gaussian_decomposed(ell, SHAPE, graph, op_rank, int(rng.integers(2**63)))
    y = rng.standard_normal(ell)
    c = c if c is not None else max(graph.vertices)
    net = orthonormalize(net, c)
    return fam, graph, net, op, y, c


def dense_weight_matrix(w_lr, shape, subset):
    from sumrank.objective import _colex_columns

    n = shape.size()
    out = np.zeros((n, n))
    for idx in _colex_columns(shape.dims, subset.members):
        out[np.ix_(idx, idx)] += w_lr.dense()
    return out


class TestBranchRecursions:
    @pytest.mark.parametrize("builder", [bbht_family, tucker_family])
    def test_h_matches_gram(self, builder):
        fam, graph, net, op, y, c = setup_instance(builder, seed=3)
        hs = branch_H(net, c)
        for e in graph.edges:
            assert np.allclose(hs[e], gram_z(net, e), atol=1e-10)

    def test_tucker_star_b_equals_inverse_grams(self):
        fam, graph, net, op, y, c = setup_instance(tucker_family, seed=5, c=5)
        gamma = 0.4
        hs = branch_H(net, c)
        bs = branch_B(net, c, gamma, hs=hs)
        for e in graph.edges_of(c):
            expected = np.linalg.inv(hs[e] + gamma * np.eye(hs[e].shape[0]))
            assert np.allclose(bs[e], expected, atol=1e-10)

    @pytest.mark.parametrize("builder", [bbht_family, tucker_family])
    def test_b_recursion_sums_path_operators(self, builder):
        fam, graph, net, op, y, c = setup_instance(builder, seed=7)
        gamma = 0.3
        _, oriented, _ = root_subset(graph, c)
        hs = branch_H(net, c)
        bs = branch_B(net, c, gamma, hs=hs)
        total = assemble_node_operator(net, c, bs)
        summed = sum(path_operator(net, c, s, gamma, hs=hs) for s in oriented.values())
        assert np.allclose(total, summed, atol=1e-10 * np.linalg.norm(summed))

    def test_neigh_scope_truncation(self):
        fam, graph, net, op, y, c = setup_instance(bbht_family, seed=9, c=5)
        gamma = 0.2
        hs = branch_H(net, c, scope="neigh")
        bs = branch_B(net, c, gamma, hs=hs, scope="neigh")
        assert set(bs) == set(graph.edges_of(c))
        for e in graph.edges_of(c):
            expected = np.linalg.inv(hs[e] + gamma * np.eye(hs[e].shape[0]))
            assert np.allclose(bs[e], expected)

    def test_neigh_equals_full_at_tucker_center(self):
        fam, graph, net, op, y, c = setup_instance(tucker_family, seed=11, c=5)
        gamma = 0.6
        full = assemble_node_operator(net, c, branch_B(net, c, gamma))
        neigh = assemble_node_operator(
            net, c, branch_B(net, c, gamma, scope="neigh"), scope="neigh"
        )
        assert np.allclose(full, neigh)


class TestPathOperator:
    @pytest.mark.parametrize("builder", [bbht_family, tucker_family])
    @pytest.mark.parametrize("root_pick", [0, 1, 2])
    def test_against_dense_composition(self, builder, root_pick):
        fam, graph, net, op, y, _ = setup_instance(builder, seed=13 + root_pick)
        c = sorted(graph.vertices)[root_pick]
        net = orthonormalize(net, c)
        gamma = 0.37
        _, oriented, _ = root_subset(graph, c)
        n_map = insertion_matrix(net, c)
        lr = low_rank_weights(net, c, gamma)
        hs = branch_H(net, c)
        for e in graph.edges:
            s = oriented[e]
            fast = path_operator(net, c, s, gamma, hs=hs)
            dense = n_map.T @ dense_weight_matrix(lr[s], SHAPE, s) @ n_map
            assert np.linalg.norm(fast - dense) <= 1e-9 * max(np.linalg.norm(dense), 1e-12)

    def test_root_incident_edge_applies_inverse_gram(self):
        fam, graph, net, op, y, c = setup_instance(bbht_family, seed=17, c=5)
        gamma = 0.5
        hs = branch_H(net, c)
        e = sorted(graph.edges_of(c), key=sorted)[0]
        _, oriented, _ = root_subset(graph, c)
        a = path_operator(net, c, oriented[e], gamma, hs=hs)
        from sumrank.airls import embed_on_axis

        expected = embed_on_axis(
            net, c, e, np.linalg.inv(hs[e] + gamma * np.eye(hs[e].shape[0]))
        )
        assert np.allclose(a, expected, atol=1e-11)


class TestFc:
    def test_fc_matches_dense_composition(self):
        fam, graph, net, op, y, c = setup_instance(bbht_family, seed=19)
        cache = branch_messages(op, net, c)
        f = assemble_Fc(op, net, c, cache)
        dense = op.as_dense_matrix() @ insertion_matrix(net, c)
        assert np.allclose(f, dense, atol=1e-9 * np.linalg.norm(dense))

    def test_fc_with_sampling_matches_entry_evaluation(self):
        fam = tucker_family(4)
        graph = build_tree(fam)
        net = orthonormalize(
            random_network(graph, {e: 2 for e in graph.edges}, SHAPE, 21), 5
        )
        samp = sampling(9, SHAPE, 23)
        op = samp.as_decomposed(graph)
        f = assemble_Fc(op, net, 5, branch_messages(op, net, 5))
        vec = net.nodes[5].data.reshape(-1, order="F")
        assert np.allclose(f @ vec, samp.apply(contract_full(net)), atol=1e-10)

    def test_matrix_case_degenerate(self):
        fam = Family(2, [(1,)])
        graph = build_tree(fam)
        shape = Shape((4, 5))
        net = orthonormalize(random_network(graph, {e: 2 for e in graph.edges}, shape, 25), 1)
        op = gaussian_decomposed(6, shape, graph, 1, 27)
        f = assemble_Fc(op, net, 1, branch_messages(op, net, 1))
        dense = op.as_dense_matrix() @ insertion_matrix(net, 1)
        assert np.allclose(f, dense, atol=1e-10)

    def test_cache_flip_consistency(self):
        # after shifting the root one edge, only the flipped edge message
        # changes and the composition still matches the dense oracle
        fam, graph, net, op, y, c = setup_instance(bbht_family, seed=29, c=5)
        from sumrank.airls import AirlsState

        state = AirlsState(op, net, y, AirlsConfig(), np.random.default_rng(0))
        state.prepare()
        state.gamma = 1.0
        target = 6
        before = dict(state.s_cache)
        state.shift(target)
        changed = [
            e for e in graph.edges
            if e not in before or state.s_cache[e] is not before[e]
        ]
        assert frozenset((5, 6)) in set(changed)
        assert len(changed) == 1
        f = assemble_Fc(op, state.network, target, state.s_cache)
        dense = op.as_dense_matrix() @ insertion_matrix(state.network, target)
        assert np.allclose(f, dense, atol=1e-9 * np.linalg.norm(dense))


class TestNodeUpdate:
    @pytest.mark.parametrize("builder", [bbht_family, tucker_family])
    def test_switch_lemma_end_to_end(self, builder):
        fam, graph, net, op, y, c = setup_instance(builder, seed=31)
        gamma, c_l = 0.21, 0.05
        new_node, info = node_update(net, c, op, y, gamma, c_l)
        fast = new_node.data.reshape(-1, order="F")

        _, oriented, _ = root_subset(graph, c)
        working = Family(4, [s.members for s in oriented.values()])
        ws = weights(contract_full(net), working, gamma)
        n_map = insertion_matrix(net, c)
        f_dense = op.as_dense_matrix() @ n_map
        system = f_dense.T @ f_dense + c_l * gamma * (
            n_map.T @ what_matrix(ws, SHAPE) @ n_map
        )
        dense = np.linalg.solve(system, f_dense.T @ y)
        assert np.linalg.norm(fast - dense) <= 1e-8 * max(np.linalg.norm(dense), 1e-12)

    def test_plain_als_normal_equations(self):
        fam, graph, net, op, y, c = setup_instance(bbht_family, seed=37)
        config = AirlsConfig(reweight=False)
        new_node, info = node_update(net, c, op, y, 0.0, 0.0, config=config)
        f = assemble_Fc(op, net, c)
        expected, *_ = np.linalg.lstsq(f.T @ f, f.T @ y, rcond=None)
        assert np.allclose(new_node.data.reshape(-1, order="F"), expected, atol=1e-8)

    def test_minimizer_beats_previous_node(self):
        fam, graph, net, op, y, c = setup_instance(bbht_family, seed=41)
        gamma = 0.15
        c_l = scaling_constant(op, fam, SHAPE)
        new_node, _ = node_update(net, c, op, y, gamma, c_l)
        _, oriented, _ = root_subset(graph, c)
        working = Family(4, [s.members for s in oriented.values()])

        def objective(node):
            candidate = net.copy()
            candidate.nodes[c] = node
            x = contract_full(candidate)
            return relaxed_f(x, working, gamma, c_l, op, y)

        assert objective(new_node) <= objective(net.nodes[c]) + 1e-10

    def test_iterative_solver_matches_direct(self):
        fam, graph, net, op, y, c = setup_instance(bbht_family, seed=43)
        gamma, c_l = 0.3, 0.04
        direct, _ = node_update(net, c, op, y, gamma, c_l)
        config = AirlsConfig(sub_solver="iterative", iterative_tol=1e-12)
        iterative, info = node_update(net, c, op, y, gamma, c_l, config=config)
        assert info["cg_info"] == 0
        assert np.allclose(
            direct.data, iterative.data, atol=1e-8 * np.linalg.norm(direct.data)
        )

    def test_representation_independence(self):
        # re-gauging the network does not change the represented update
        fam, graph, net, op, y, c = setup_instance(bbht_family, seed=47)
        gamma, c_l = 0.25, 0.05
        node_a, _ = node_update(net, c, op, y, gamma, c_l)
        net_a = net.copy()
        net_a.nodes[c] = node_a

        gauged = net.copy()
        rng = np.random.default_rng(1)
        e = frozenset((5, 6))
        g_mat = rng.standard_normal((2, 2)) + 3 * np.eye(2)
        from sumrank.network import _push_matrix

        _push_matrix(gauged, g_mat, e, 5)
        _push_matrix(gauged, np.linalg.inv(g_mat).T, e, 6)
        gauged.ortho_root = None
        gauged = orthonormalize(gauged, c)
        node_b, _ = node_update(gauged, c, op, y, gamma, c_l)
        net_b = gauged.copy()
        net_b.nodes[c] = node_b
        xa, xb = contract_full(net_a), contract_full(net_b)
        assert np.linalg.norm(xa.array - xb.array) <= 1e-8 * max(xa.norm(), 1.0)


class TestSweepAndRun:
    def test_micro_step_monotone_objective(self):
        fam = bbht_family(4)
        graph = build_tree(fam)
        rng = np.random.default_rng(53)
        ref = random_network(graph, {e: 2 for e in graph.edges}, SHAPE, 3)
        op = gaussian_decomposed(25, SHAPE, graph, 1, 55)
        y = op.apply_to_network(ref)
        config = AirlsConfig(
            schedule=GammaSchedule(decline=1 / 1.2, mode="geometric"),
            rank_policy=("fixed", 2),
            max_sweeps=6,
            record_microsteps=True,
        )
        report = run_airls(config, op, y, fam, SHAPE, seed=57)
        c_l = scaling_constant(op, fam, SHAPE)
        values = []
        for gamma, vertex, x in report.iterates:
            _, oriented, _ = root_subset(graph, vertex)
            fam_s = Family(4, [s.members for s in oriented.values()])
            values.append(relaxed_f(x, fam_s, gamma, c_l, op, y))
        # F^{a,K^S} is complement-invariant, so consecutive micro-steps are
        # comparable directly
        for a, b in zip(values, values[1:]):
            assert b <= a + 1e-8 * max(1.0, abs(a))

    def test_recovery_small_instance(self):
        fam = bbht_family(4)
        graph = build_tree(fam)
        ref = random_network(graph, {e: 2 for e in graph.edges}, SHAPE, 11)
        op = gaussian_decomposed(60, SHAPE, graph, 1, 13)
        y = op.apply_to_network(ref)
        config = AirlsConfig(
            schedule=GammaSchedule(decline=1 / 1.2),
            rank_policy=("adaptive", 1, 3),
            max_sweeps=400,
        )
        report = run_airls(config, op, y, fam, SHAPE, reference=ref, seed=17)
        err = network_distance(report.final, ref)
        assert err <= 1e-4 * ref.frob_norm()

    def test_cache_consistency_after_sweeps(self):
        fam = bbht_family(4)
        graph = build_tree(fam)
        ref = random_network(graph, {e: 2 for e in graph.edges}, SHAPE, 19)
        op = gaussian_decomposed(30, SHAPE, graph, 1, 23)
        y = op.apply_to_network(ref)
        config = AirlsConfig(rank_policy=("fixed", 2), max_sweeps=3)
        report = run_airls(config, op, y, fam, SHAPE, seed=29)
        net = report.final
        c = net.ortho_root
        fresh = branch_messages(op, net, c)
        from sumrank.airls import AirlsState

        state = AirlsState(op, net, y, config, np.random.default_rng(0))
        state.prepare()
        for e, msg in fresh.items():
            assert np.allclose(msg.data, state.s_cache[e].transpose_to(msg.labels).data, atol=1e-10)

    def test_huge_gamma_sweep_stays_finite(self):
        fam = bbht_family(4)
        graph = build_tree(fam)
        ref = random_network(graph, {e: 2 for e in graph.edges}, SHAPE, 31)
        op = gaussian_decomposed(20, SHAPE, graph, 1, 37)
        y = op.apply_to_network(ref)
        config = AirlsConfig(
            schedule=GammaSchedule(gamma0=1e12, decline=1.0, mode="geometric"),
            rank_policy=("fixed", 2),
            max_sweeps=1,
        )
        report = run_airls(config, op, y, fam, SHAPE, seed=41)
        assert np.isfinite(report.final.frob_norm())

    def test_dense_operator_small_d_allowed(self):
        fam = bbht_family(4)
        from sumrank.operators import gaussian_dense

        op = gaussian_dense(30, SHAPE, 43)
        graph = build_tree(fam)
        ref = random_network(graph, {e: 2 for e in graph.edges}, SHAPE, 47)
        y = op.apply(contract_full(ref))
        config = AirlsConfig(rank_policy=("fixed", 2), max_sweeps=3)
        report = run_airls(config, op, y, fam, SHAPE, seed=53)
        assert report.meta["sweeps"] == 3

    def test_dense_operator_large_d_refused(self):
        from sumrank.airls import SolverError, _as_decomposed
        from sumrank.operators import DenseOperator

        fam = bbht_family(5)
        graph = build_tree(fam)
        shape = Shape([2] * 5)
        mat = np.random.default_rng(0).standard_normal((5, 32))
        op = DenseOperator(mat, shape, check_surjective=False)
        with pytest.raises(SolverError):
            _as_decomposed(op, graph, shape)

    def test_validation_rows_excluded_from_solve(self):
        fam = bbht_family(4)
        graph = build_tree(fam)
        ref = random_network(graph, {e: 2 for e in graph.edges}, SHAPE, 59)
        op = gaussian_decomposed(40, SHAPE, graph, 1, 61)
        y = op.apply_to_network(ref)
        config = AirlsConfig(
            rank_policy=("fixed", 2), max_sweeps=2, validation_fraction=0.25
        )
        from sumrank.airls import AirlsState

        state = AirlsState(op, ref, y, config, np.random.default_rng(3))
        assert state.val_rows.size == 10
        assert state.active_rows.size == 30
        assert not set(state.val_rows) & set(state.active_rows)

    def test_post_iteration_truncates(self):
        fam = bbht_family(4)
        graph = build_tree(fam)
        ref = random_network(graph, {e: 2 for e in graph.edges}, SHAPE, 67)
        op = gaussian_decomposed(60, SHAPE, graph, 1, 71)
        y = op.apply_to_network(ref)
        config = AirlsConfig(
            schedule=GammaSchedule(decline=1 / 1.2),
            rank_policy=("adaptive", 1, 3),
            max_sweeps=300,
            post_iteration=True,
        )
        report = run_airls(config, op, y, fam, SHAPE, reference=ref, seed=73)
        assert report.meta.get("post_iteration")
        assert max(report.meta["ranks"].values()) <= 3
