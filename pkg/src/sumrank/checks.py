"""Self-contained oracle suites comparing fast paths against brute force.

Every check returns (name, worst error, tolerance); the CLI prints one line
per check and the test suite asserts on the same numbers.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .airls import assemble_node_operator, branch_B, branch_H, node_update, path_operator
from .family import (
    Family,
    RankVector,
    bbht_family,
    build_tree,
    root_subset,
    tucker_family,
)
from .labeled import ZETA, alpha, beta
from .network import (
    branch_matrices,
    contract_full,
    contract_subset,
    gram_z,
    network_inner,
    orthonormalize,
    random_network,
    root_shift,
)
from .objective import (
    augmented,
    char_poly_coeffs,
    det_product,
    f_gamma,
    g_s,
    low_rank_weights,
    spectra_by_subset,
    weights,
    what_matrix,
)
from .operators import gaussian_decomposed, sampling
from .tensor import DenseTensor, Shape, dematricize, matricize


def _random_dense(shape, seed):
    rng = np.random.default_rng(seed)
    return DenseTensor(rng.standard_normal(shape))


def _relative(err, scale):
    return err / max(scale, 1e-300)


def check_matricize_roundtrip(seed=0):
    worst = 0.0
    rng = np.random.default_rng(seed)
    for dims in [(2, 3), (2, 3, 4), (3, 2, 2, 3)]:
        x = DenseTensor(rng.standard_normal(dims))
        d = len(dims)
        for size in range(1, d):
            for members in itertools.combinations(range(1, d + 1), size):
                m = matricize(x, members)
                back = dematricize(m, members, x.shape)
                worst = max(worst, float(np.max(np.abs(back.array - x.array))))
    return ("matricize-roundtrip", worst, 0.0)


def check_spectrum_symmetry(seed=1):
    worst = 0.0
    x = _random_dense((3, 4, 2, 3), seed)
    for size in range(1, 4):
        for members in itertools.combinations(range(1, 5), size):
            s1 = np.linalg.svd(matricize(x, members), compute_uv=False)
            comp = tuple(m for m in range(1, 5) if m not in members)
            s2 = np.linalg.svd(matricize(x, comp), compute_uv=False)
            k = min(s1.size, s2.size)
            worst = max(worst, _relative(float(np.max(np.abs(s1[:k] - s2[:k]))), s1[0]))
    return ("spectrum-symmetry", worst, 1e-10)


def check_network_branches(seed=2):
    """Y Z factorization of every edge against the dense matricization."""
    worst = 0.0
    for fam_builder in (bbht_family, tucker_family):
        fam = fam_builder(4)
        graph = build_tree(fam)
        shape = Shape([3] * 4)
        net = random_network(graph, {e: 2 for e in graph.edges}, shape, seed)
        x = contract_full(net)
        for e in graph.edges:
            y, z = branch_matrices(net, e)
            target = matricize(x, graph.edge_subset[e])
            err = float(np.linalg.norm(target - y @ z))
            worst = max(worst, _relative(err, x.norm()))
    return ("branch-factorization", worst, 1e-10)


def check_gram_recursion(seed=3):
    """Representation-side Z Z^T against the dense branch contraction."""
    worst = 0.0
    for fam_builder in (bbht_family, tucker_family):
        fam = fam_builder(4)
        graph = build_tree(fam)
        shape = Shape([3] * 4)
        net = random_network(graph, {e: 2 for e in graph.edges}, shape, seed)
        for c in sorted(graph.vertices):
            onet = orthonormalize(net, c)
            _, oriented, _ = root_subset(graph, c)
            for e in graph.edges:
                h = gram_z(onet, e)
                subset = oriented[e]
                x = contract_full(onet)
                mat = matricize(x, subset)
                y, z = _oriented_yz(onet, e, subset)
                dense_h = z @ z.T
                err = float(np.linalg.norm(h - dense_h))
                worst = max(worst, _relative(err, max(np.linalg.norm(dense_h), 1.0)))
    return ("gram-recursion", worst, 1e-10)


def _oriented_yz(net, e, subset):
    graph = net.graph
    v, w = tuple(e)
    far = v if graph.leaf_set(w, v) == subset else w
    near = w if far == v else v
    y_t = contract_subset(net, graph.branch(near, far))
    z_t = contract_subset(net, graph.branch(far, near))
    rows = [alpha(mu) for mu in subset.members]
    cols = [alpha(mu) for mu in subset.complement().members]
    return y_t.to_matrix(rows, [beta(e)]), z_t.to_matrix([beta(e)], cols)


def _dense_weight_matrix(w_lr, shape, subset):
    """Dense operator matrix of one low-rank weight on vectorized tensors."""
    from .objective import _colex_columns

    n = shape.size()
    out = np.zeros((n, n))
    cols = _colex_columns(shape.dims, subset.members)
    w = w_lr.dense()
    for idx in cols:
        out[np.ix_(idx, idx)] += w
    return out


def _dense_nmap(net, c):
    """Dense matrix of the hole-at-c insertion map."""
    from .network import insertion_matrix

    return insertion_matrix(net, c)


def check_path_operator(instances=25, seed=4):
    """Path evaluation matrices against dense brute-force composition."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    gamma = 0.37
    builders = [bbht_family, tucker_family]
    for i in range(instances):
        fam = builders[i % 2](4)
        graph = build_tree(fam)
        shape = Shape([3] * 4)
        net = random_network(graph, {e: 2 for e in graph.edges}, shape, rng.integers(2**63))
        c = sorted(graph.vertices)[i % len(graph.vertices)]
        net = orthonormalize(net, c)
        _, oriented, _ = root_subset(graph, c)
        n_map = _dense_nmap(net, c)
        lr = low_rank_weights(net, c, gamma)
        hs = branch_H(net, c)
        for e in graph.edges:
            subset = oriented[e]
            a_fast = path_operator(net, c, subset, gamma, hs=hs)
            w_dense = _dense_weight_matrix(lr[subset], shape, subset)
            a_dense = n_map.T @ w_dense @ n_map
            err = float(np.linalg.norm(a_fast - a_dense))
            worst = max(worst, _relative(err, max(np.linalg.norm(a_dense), 1e-10)))
        # accumulated blocks against the summed path operators
        bs = branch_B(net, c, gamma, hs=hs)
        a_sum = assemble_node_operator(net, c, bs)
        a_ref = sum(path_operator(net, c, oriented[e], gamma, hs=hs) for e in graph.edges)
        err = float(np.linalg.norm(a_sum - a_ref))
        worst = max(worst, _relative(err, np.linalg.norm(a_ref)))
    return ("path-operator", worst, 1e-9)


def check_switch_lemma(instances=25, seed=5):
    """Node updates under full-rank weights against the factored form."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    gamma = 0.21
    builders = [bbht_family, tucker_family]
    for i in range(instances):
        fam = builders[i % 2](4)
        graph = build_tree(fam)
        shape = Shape([3] * 4)
        net = random_network(graph, {e: 2 for e in graph.edges}, shape, rng.integers(2**63))
        c = sorted(graph.vertices)[(i + 1) % len(graph.vertices)]
        net = orthonormalize(net, c)
        op = gaussian_decomposed(11, shape, graph, 1, rng.integers(2**63))
        y = rng.standard_normal(11)
        c_l = 0.05

        new_node, info = node_update(net, c, op, y, gamma, c_l)
        fast = new_node.data.reshape(-1, order="F")

        # dense route with the full-rank ambient weights
        s_c, oriented, _ = root_subset(graph, c)
        working = Family(fam.d, list(oriented.values()))
        x = contract_full(net)
        ws = weights(x, working, gamma)
        what = what_matrix(ws, shape)
        n_map = _dense_nmap(net, c)
        l_mat = op.as_dense_matrix()
        f_dense = l_mat @ n_map
        system = f_dense.T @ f_dense + c_l * gamma * (n_map.T @ what @ n_map)
        rhs = f_dense.T @ y
        dense = np.linalg.solve(system, rhs)
        err = float(np.linalg.norm(fast - dense))
        worst = max(worst, _relative(err, max(np.linalg.norm(dense), 1e-10)))
    return ("switch-lemma", worst, 1e-8)


def check_identities(seed=6):
    """Augmented-objective identity and the complement shift of f."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    fam = bbht_family(4)
    shape = (2, 3, 2, 2)
    x = DenseTensor(rng.standard_normal(shape))
    for gamma in (0.1, 1.0, 10.0):
        ws = weights(x, fam, gamma)
        lhs = augmented(x, ws, fam, gamma)
        rhs = f_gamma(x, fam, gamma)
        worst = max(worst, _relative(abs(lhs - rhs), abs(rhs)))
        for s_count in (1, 2):
            replaced = fam.subsets[:s_count]
            from .family import complementary_family
            from .objective import pad_shift

            comp = complementary_family(fam, replaced)
            delta = f_gamma(x, comp, gamma) - f_gamma(x, fam, gamma)
            expected = pad_shift(fam, x.shape, replaced) * math.log(gamma)
            worst = max(worst, _relative(abs(delta - expected), max(abs(expected), 1.0)))
    return ("objective-identities", worst, 1e-8)


def check_det_expansion(seed=7):
    """Minor-sum expansion of the determinant product on tiny instances."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    # matrix case
    a = rng.standard_normal((3, 4))
    coeffs = char_poly_coeffs(a)
    sig = np.linalg.svd(a, compute_uv=False)
    for gamma in (0.1, 1.0, 10.0):
        direct = float(np.prod(sig**2 + gamma))
        expanded = sum(gamma ** (3 - k) * coeffs[k] for k in range(4))
        worst = max(worst, _relative(abs(direct - expanded), direct))
    # tensor case
    fam = tucker_family(3)
    x = DenseTensor(rng.standard_normal((2, 2, 2)))
    gvals = g_s(x, fam)
    n_sum = sum(x.shape.size(s.members) for s in fam.subsets)
    for gamma in (0.1, 1.0, 10.0):
        direct = det_product(x, fam, gamma)
        expanded = sum(gamma ** (n_sum - s) * gvals[s] for s in range(len(gvals)))
        worst = max(worst, _relative(abs(direct - expanded), direct))
    return ("det-expansion", worst, 1e-8)


def check_operator_adjoints(seed=8):
    """<L x, y> = <x, L* y> for all operator variants."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    shape = Shape((3, 3, 3, 3))
    fam = bbht_family(4)
    graph = build_tree(fam)
    from .operators import gaussian_dense

    ops = [
        gaussian_dense(10, shape, 1),
        sampling(10, shape, 2),
        gaussian_decomposed(10, shape, graph, 2, 3),
    ]
    for op in ops:
        x = DenseTensor(rng.standard_normal(shape.dims))
        yv = rng.standard_normal(op.ell)
        lhs = float(op.apply(x) @ yv)
        rhs = float(np.sum(op.apply_adjoint(yv).array * x.array))
        worst = max(worst, _relative(abs(lhs - rhs), abs(lhs) + 1.0))
    return ("operator-adjoints", worst, 1e-10)


def check_network_operator_composition(seed=9):
    """Composition of decomposed operators with networks against dense."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    fam = bbht_family(4)
    graph = build_tree(fam)
    shape = Shape((3, 3, 3, 3))
    net = random_network(graph, {e: 2 for e in graph.edges}, shape, seed)
    x = contract_full(net)
    op = gaussian_decomposed(9, shape, graph, 2, seed + 1)
    fast = op.apply_to_network(net)
    dense = op.as_dense_matrix() @ x.data
    worst = max(worst, _relative(float(np.linalg.norm(fast - dense)), float(np.linalg.norm(dense))))
    samp = sampling(9, shape, seed + 2)
    fast = samp.as_decomposed(graph).apply_to_network(net)
    dense = samp.apply(x)
    worst = max(worst, _relative(float(np.linalg.norm(fast - dense)), float(np.linalg.norm(dense)) + 1e-300))
    return ("operator-network-composition", worst, 1e-10)


ALL_CHECKS = [
    check_matricize_roundtrip,
    check_spectrum_symmetry,
    check_network_branches,
    check_gram_recursion,
    check_path_operator,
    check_switch_lemma,
    check_identities,
    check_det_expansion,
    check_operator_adjoints,
    check_network_operator_composition,
]


def run_suite(names=None):
    results = []
    for fn in ALL_CHECKS:
        name = fn.__name__.replace("check_", "").replace("_", "-")
        if names and name not in names:
            continue
        results.append(fn())
    return results
