"""Alternating solver on tree tensor networks.

Each micro-step solves the relaxed weighted least squares problem for one
node while all others stay fixed.  The operator composition, the Gram
matrices of the opposite branches and the accumulated weight blocks are all
maintained through branch recursions, so no ambient tensor is ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg

from .family import Family, build_tree, root_subset
from .tensor import as_subset
from .irls import GammaSchedule, RunReport, SolverError
from .labeled import ZETA, LTensor, alpha, beta, contract, from_vector
from .network import (
    Network,
    RankAdaptPolicy,
    _sandwich,
    _self_gram,
    contract_full,
    contract_subset,
    network_distance,
    node_labels,
    orthonormalize,
    random_network,
    root_shift,
)
from .objective import EPSILON_DEFAULT, rank_eps, scaling_constant
from .operators import (
    DecomposedOperator,
    DenseOperator,
    SamplingOperator,
    branch_messages,
    compose_with_network,
)
from .tensor import DenseTensor, Shape  # noqa: F401  (public signatures)


@dataclass
class AirlsConfig:
    schedule: GammaSchedule = field(default_factory=GammaSchedule)
    rank_policy: tuple = ("fixed", 3)  # ("fixed", r) | ("adaptive", r_min, r_max)
    initial_rank: int | None = None
    path_scope: str = "all"  # all | neigh
    validation_fraction: float = 0.0
    sub_solver: str = "auto"  # direct | iterative | auto
    iterative_tol: float = 1e-10
    iterative_threshold: int = 5000
    post_iteration: bool = False
    post_sweeps: int = 3
    max_sweeps: int = 3000
    stop_residual_rel: float = 1e-6
    reweight: bool = True  # False gives plain alternating least squares
    stagnation_patience: int = 25
    record_microsteps: bool = False


def leaf_sets_away(graph, c):
    """Oriented subset of every edge relative to root c."""
    _, oriented, _ = root_subset(graph, c)
    return oriented


def branch_H(network: Network, c, scope="all"):
    """Gram matrices of the root-side branches, oriented away from c.

    Root-incident edges come straight from the root node; farther edges
    follow by sandwiching through the path nodes (root-to-leaves order).
    """
    graph = network.graph
    hs = {}
    for e in graph.edges_of(c):
        hs[e] = _symmetrize(_self_gram(network.nodes[c], beta(e)))
    if scope == "neigh":
        return hs
    order, _ = graph.order_from(c)
    for v in reversed(order):  # root first
        if v == c:
            continue
        e_up = frozenset((v, graph.pred(c, v)))
        for b in graph.desc(c, v):
            e_dn = frozenset((v, b))
            hs[e_dn] = _symmetrize(
                _sandwich(network.nodes[v], hs[e_up], beta(e_up), beta(e_dn))
            )
    return hs


def _symmetrize(m):
    return 0.5 * (m + m.T)


def _regularized_inverse(h, gamma):
    m = h + gamma * np.eye(h.shape[0])
    return _symmetrize(np.linalg.inv(m))


def branch_B(network: Network, c, gamma, hs=None, scope="all"):
    """Accumulated weight blocks per edge, leaves-to-root.

    In "neigh" scope only the root-incident inverse Grams survive, which is
    the minimal weight set that still stabilizes rank adaption.
    """
    graph = network.graph
    if hs is None:
        hs = branch_H(network, c, scope=scope)
    if scope == "neigh":
        return {e: _regularized_inverse(hs[e], gamma) for e in graph.edges_of(c)}
    bs = {}
    order, _ = graph.order_from(c)
    for v in order:  # leaves first
        if v == c:
            continue
        e_up = frozenset((v, graph.pred(c, v)))
        b = _regularized_inverse(hs[e_up], gamma)
        for h in graph.desc(c, v):
            e_dn = frozenset((v, h))
            b = b + _sandwich(network.nodes[v], bs[e_dn], beta(e_dn), beta(e_up))
        bs[e_up] = _symmetrize(b)
    return bs


def path_operator(network: Network, c, subset, gamma, hs=None):
    """Dense matrix of the weighted normal operator for one oriented subset.

    The matrix acts on the colex-vectorized root node; it is the identity on
    every axis except the one of the first path edge, where the sandwiched
    inverse Gram applies.
    """
    graph = network.graph
    subset = as_subset(subset, graph.d)
    far = graph.vertex_for_edge_direction(c, subset)
    chain = graph.path_inclusive(c, far)
    e_hat = frozenset((chain[-2], chain[-1]))
    e_one = frozenset((chain[0], chain[1]))
    if hs is None or e_hat not in hs:
        hs = branch_H(network, c)
    m = _regularized_inverse(hs[e_hat], gamma)
    for j in range(len(chain) - 2, 0, -1):
        v = chain[j]
        e_far = frozenset((v, chain[j + 1]))
        e_near = frozenset((v, chain[j - 1]))
        m = _sandwich(network.nodes[v], m, beta(e_far), beta(e_near))
    return embed_on_axis(network, c, e_one, m)


def embed_on_axis(network: Network, c, edge, matrix):
    """Kronecker-embed an edge matrix into an operator on the root node."""
    labels = network.nodes[c].labels
    full = None
    for lab in labels:
        size = network.nodes[c].size_of(lab)
        if lab == beta(edge):
            factor = matrix
        else:
            factor = np.eye(size)
        full = factor if full is None else np.kron(factor, full)
    return full


def assemble_node_operator(network: Network, c, bs, scope="all"):
    """Sum of all path operators, assembled from the accumulated blocks."""
    graph = network.graph
    dim = network.node_dim(c)
    total = np.zeros((dim, dim))
    for v in sorted(graph.neigh(c)):
        e = frozenset((c, v))
        total += embed_on_axis(network, c, e, bs[e])
    return total


def assemble_Fc(op, network: Network, c, s_cache=None):
    """Operator-with-hole at c as an (ell x node dim) matrix."""
    if isinstance(op, DenseOperator):
        return _dense_Fc(op, network, c)
    graph = op.graph
    local = op.components[c]
    if s_cache is None:
        s_cache = branch_messages(op, network, c)
    for v in sorted(graph.neigh(c)):
        e = frozenset((c, v))
        local = contract(local, s_cache[e], batch=(ZETA,))
    labels = network.nodes[c].labels
    return local.to_matrix([ZETA], list(labels))


def _dense_Fc(op: DenseOperator, network: Network, c):
    from .network import insertion_matrix

    return op.matrix @ insertion_matrix(network, c)


def node_update(network: Network, c, op, y_active, gamma, c_l, s_cache=None,
                scope="all", config: AirlsConfig | None = None, rows=None):
    """Solve the regularized normal equations for the root node.

    Returns (new node, info dict with residual and conditioning data).
    """
    config = config or AirlsConfig()
    f_mat = assemble_Fc(op, network, c, s_cache)
    if rows is not None:
        f_act = f_mat[rows]
    else:
        f_act = f_mat
    y_active = np.asarray(y_active, dtype=float)
    rhs = f_act.T @ y_active
    dim = network.node_dim(c)
    use_weights = config.reweight and gamma > 0
    bs = None
    if use_weights:
        hs = branch_H(network, c, scope=scope)
        bs = branch_B(network, c, gamma, hs=hs, scope=scope)

    iterative = config.sub_solver == "iterative" or (
        config.sub_solver == "auto" and dim > config.iterative_threshold
    )
    info = {}
    if iterative and use_weights:
        sol, info = _solve_iterative(network, c, f_act, rhs, bs, gamma, c_l, config)
    else:
        system = f_act.T @ f_act
        if use_weights:
            system = system + (c_l * gamma) * assemble_node_operator(network, c, bs, scope)
            try:
                chol = cho_factor(system, lower=True, check_finite=False)
                sol = cho_solve(chol, rhs, check_finite=False)
            except np.linalg.LinAlgError:
                info["fallback"] = "lstsq"
                sol, *_ = np.linalg.lstsq(system, rhs, rcond=None)
        else:
            sol, *_ = np.linalg.lstsq(system, rhs, rcond=None)
        normal_res = np.linalg.norm(system @ sol - rhs)
        info["normal_residual"] = float(normal_res / max(np.linalg.norm(rhs), 1e-300))

    node = network.nodes[c]
    new_node = from_vector(sol, node.labels, node.data.shape)
    info["residual"] = float(np.linalg.norm(f_act @ sol - y_active))
    info["f_matrix"] = f_mat
    return new_node, info


def _solve_iterative(network, c, f_act, rhs, bs, gamma, c_l, config):
    node = network.nodes[c]
    dims = node.data.shape
    labels = node.labels

    def matvec(x):
        x = np.asarray(x, dtype=float).reshape(-1)
        out = f_act.T @ (f_act @ x)
        arr = x.reshape(dims, order="F")
        acc = np.zeros(dims)
        for v in sorted(network.graph.neigh(c)):
            e = frozenset((c, v))
            axis = labels.index(beta(e))
            moved = np.tensordot(bs[e], arr, axes=([1], [axis]))
            acc += np.moveaxis(moved, 0, axis)
        return out + (c_l * gamma) * acc.reshape(-1, order="F")

    operator = LinearOperator((rhs.size, rhs.size), matvec=matvec, dtype=float)
    sol, cg_info = cg(operator, rhs, rtol=config.iterative_tol, maxiter=10 * rhs.size)
    return sol, {"cg_info": int(cg_info), "normal_residual": float(
        np.linalg.norm(matvec(sol) - rhs) / max(np.linalg.norm(rhs), 1e-300)
    )}


class AirlsState:
    """Mutable solver state: the network, the S cache and bookkeeping."""

    def __init__(self, op, network: Network, y, config: AirlsConfig, rng):
        self.op = op
        self.network = network
        self.y = np.asarray(y, dtype=float)
        self.config = config
        self.rng = rng
        self.decomposed = not isinstance(op, DenseOperator)
        graph = network.graph
        interiors = sorted(v for v in graph.vertices if v > graph.d)
        self.home = interiors[0] if interiors else min(graph.vertices)
        self.tour = graph.euler_tour(self.home)
        self.s_cache = None
        self.sigma_by_edge = {}
        self.active_rows = None
        self.val_rows = None
        ell = self.y.size
        if config.validation_fraction > 0:
            count = int(round(config.validation_fraction * ell))
            perm = rng.permutation(ell)
            self.val_rows = np.sort(perm[:count])
            self.active_rows = np.sort(perm[count:])
        self.adapt = None
        self.gamma = 0.0
        if config.rank_policy[0] == "adaptive":
            _, r_min, r_max = config.rank_policy
            self.adapt = RankAdaptPolicy(r_min=r_min, r_max=r_max)

    def prepare(self):
        self.network = orthonormalize(self.network, self.home, inplace=True)
        if self.decomposed:
            self.s_cache = branch_messages(self.op, self.network, self.home)

    def shift(self, c_new, adapt=True):
        c_old = self.network.ortho_root
        collected = {}
        self.network = root_shift(
            self.network,
            c_old,
            c_new,
            adapt=self.adapt if adapt else None,
            gamma=self.gamma,
            inplace=True,
            rng=self.rng,
            collect_sigma=collected,
        )
        self.sigma_by_edge.update(collected)
        if self.decomposed:
            graph = self.network.graph
            chain = graph.path_inclusive(c_old, c_new)
            for u, w in zip(chain[:-1], chain[1:]):
                e = frozenset((u, w))
                local = contract(
                    self.op.components[u], self.network.nodes[u], batch=(ZETA,)
                )
                for h in graph.neigh(u) - {w}:
                    local = contract(local, self.s_cache[frozenset((u, h))], batch=(ZETA,))
                self.s_cache[e] = local

def _as_decomposed(op, graph, shape):
    if isinstance(op, SamplingOperator):
        return op.as_decomposed(graph)
    if isinstance(op, DecomposedOperator):
        if op.graph.edges != graph.edges:
            raise SolverError("decomposed operator lives on a different tree")
        return op
    if isinstance(op, DenseOperator):
        if graph.d >= 5:
            raise SolverError("dense operators are refused for d >= 5")
        return op
    raise SolverError(f"unsupported operator type {type(op)!r}")


def _initial_ranks(config: AirlsConfig, graph, shape):
    if config.rank_policy[0] == "fixed":
        r = config.rank_policy[1]
        if isinstance(r, dict):
            return {frozenset(e): v for e, v in r.items()}
        return {e: int(r) for e in graph.edges}
    _, r_min, r_max = config.rank_policy
    start = config.initial_rank if config.initial_rank is not None else max(r_min, 2)
    start = min(start, r_max)
    return {e: start for e in graph.edges}


def _clip_feasible(ranks, graph, shape):
    """Iteratively clip edge ranks to the per-vertex feasibility bounds."""
    ranks = dict(ranks)
    changed = True
    while changed:
        changed = False
        for v in graph.vertices:
            n_v = shape.dims[v - 1] if v <= graph.d else 1
            for e_hat in graph.edges_of(v):
                bound = n_v
                for e in graph.edges_of(v):
                    if e != e_hat:
                        bound *= ranks[e]
                if ranks[e_hat] > bound:
                    ranks[e_hat] = bound
                    changed = True
    return ranks


def run_airls(config: AirlsConfig, op, y, family: Family, shape: Shape,
              reference=None, seed=0, init_network=None) -> RunReport:
    """Alternating sweeps over the tree, one node solve per vertex visit."""
    y = np.asarray(y, dtype=float)
    graph = build_tree(family)
    op = _as_decomposed(op, graph, shape)
    rng = np.random.default_rng(seed)
    report = RunReport(family)

    if init_network is None:
        ranks = _clip_feasible(_initial_ranks(config, graph, shape), graph, shape)
        net = random_network(graph, ranks, shape, rng.integers(2**63))
        norm_est = _reference_scale(op, y, shape)
        cur = net.frob_norm()
        if cur > 0 and norm_est > 0:
            v0 = min(graph.vertices)
            net.nodes[v0] = LTensor(net.nodes[v0].data * (norm_est / cur), net.nodes[v0].labels)
    else:
        net = init_network.copy()

    state = AirlsState(op, net, y, config, rng)
    c_l = scaling_constant(op, family, shape)
    state.prepare()
    g0, gmin = config.schedule.resolve(state.network.frob_norm() ** 2)
    state.gamma = g0 if config.reweight else 0.0

    ref_is_network = isinstance(reference, Network)
    ref_norm = None
    if reference is not None:
        ref_norm = reference.frob_norm() if ref_is_network else reference.norm()

    y_norm = float(np.linalg.norm(y))
    rows = state.active_rows
    y_active = y if rows is None else y[rows]
    best_val = math.inf
    stale = 0
    last_residual = math.inf

    def current_error():
        if reference is None:
            return None
        if ref_is_network:
            return network_distance(state.network, reference)
        dense = contract_full(state.network)
        return float(np.linalg.norm(dense.array - reference.array))

    sweep_idx = 0
    termination = "max-sweeps"
    while sweep_idx < config.max_sweeps:
        sweep_idx += 1
        updated = set()
        prev_residual = last_residual
        residual = last_residual
        info = {}
        for pos, vertex in enumerate(state.tour):
            if pos > 0:
                state.shift(vertex, adapt=config.reweight)
            if vertex in updated:
                continue
            new_node, info = node_update(
                state.network, vertex, op, y_active, state.gamma, c_l,
                s_cache=state.s_cache, scope=config.path_scope, config=config,
                rows=rows,
            )
            state.network.nodes[vertex] = new_node
            updated.add(vertex)
            residual = info["residual"]
            if state.val_rows is not None:
                val_res = float(
                    np.linalg.norm(info["f_matrix"][state.val_rows] @ new_node.data.reshape(-1, order="F") - y[state.val_rows])
                )
                info["val_residual"] = val_res
            if config.record_microsteps:
                report.iterates.append(
                    (state.gamma, vertex, contract_full(state.network))
                )

        obj = _sweep_objective(state)
        ranks_eps = _sweep_eps_ranks(state, family)
        report.record(sweep_idx, state.gamma, obj, residual, ranks_eps)

        err = current_error()
        if err is not None and ref_norm and err <= config.stop_residual_rel * ref_norm:
            termination = "reference-reached"
            break

        if config.reweight:
            new_gamma = state.gamma * config.schedule.decline
            if config.schedule.cap_policy == "validation" and state.val_rows is not None:
                val_res = info.get("val_residual", None)
                if val_res is not None:
                    cap = config.schedule.cap_coeff * val_res**2 / max(state.val_rows.size, 1)
                    new_gamma = min(new_gamma, cap)
            elif config.schedule.cap_policy == "reference" and err is not None:
                # endgame polish only, once the iterate has locked on
                if ref_norm and err <= 1e-3 * ref_norm:
                    new_gamma = min(new_gamma, config.schedule.cap_coeff * err**2)
            state.gamma = max(new_gamma, 0.0)
            if state.gamma <= gmin:
                termination = "gamma-floor"
                break
        else:
            if residual <= 1e-12 * max(y_norm, 1e-300):
                termination = "residual-vanished"
                break

        if state.val_rows is not None:
            val = info.get("val_residual", math.inf)
            if val < best_val * (1 - 1e-10):
                best_val = val
                stale = 0
            else:
                stale += 1
            if stale >= config.stagnation_patience and not config.reweight:
                termination = "validation-stagnation"
                break
        elif not config.reweight:
            if abs(residual - prev_residual) <= 1e-13 * max(y_norm, 1e-300):
                stale += 1
            else:
                stale = 0
            if stale >= config.stagnation_patience:
                termination = "stagnation"
                break
        last_residual = residual

    if config.post_iteration and config.reweight:
        _post_iterate(state, op, y_active, c_l, rows, config, report)

    report.termination = termination
    report.final = state.network
    report.meta["gamma_final"] = state.gamma
    report.meta["sweeps"] = sweep_idx
    report.meta["ranks"] = {tuple(sorted(e)): r for e, r in state.network.ranks().items()}
    return report


def _post_iterate(state: AirlsState, op, y_active, c_l, rows, config, report):
    """Truncate once by the adaption rule, then sweep with frozen ranks."""
    gamma = max(state.gamma, 1e-300)
    truncate = RankAdaptPolicy(r_min=1, r_max=None, truncate_only=True)
    saved_adapt = state.adapt
    state.adapt = truncate
    for pos, vertex in enumerate(state.tour):
        if pos > 0:
            state.shift(vertex, adapt=True)
    state.adapt = None
    for _ in range(config.post_sweeps):
        updated = set()
        for pos, vertex in enumerate(state.tour):
            if pos > 0:
                state.shift(vertex, adapt=False)
            if vertex in updated:
                continue
            new_node, info = node_update(
                state.network, vertex, op, y_active, gamma, c_l,
                s_cache=state.s_cache, scope=config.path_scope, config=config,
                rows=rows,
            )
            state.network.nodes[vertex] = new_node
            updated.add(vertex)
    state.adapt = saved_adapt
    report.meta["post_iteration"] = True


def _reference_scale(op, y, shape: Shape) -> float:
    """Rough estimate of the solution norm from the measurement energy."""
    y = np.asarray(y, dtype=float)
    frob_sq = op.frob_norm_sq()
    if frob_sq <= 0:
        return float(np.linalg.norm(y))
    return float(np.linalg.norm(y) * math.sqrt(shape.size() / frob_sq))


def _sweep_objective(state: AirlsState) -> float:
    gamma = max(state.gamma, 1e-300)
    total = 0.0
    for sig in state.sigma_by_edge.values():
        total += float(np.sum(np.log1p(sig**2 / gamma)))
    return total


def _sweep_eps_ranks(state: AirlsState, family: Family, eps=EPSILON_DEFAULT):
    frob = state.network.frob_norm()
    out = {}
    for e, sig in state.sigma_by_edge.items():
        subset = state.network.graph.edge_subset[e]
        out[subset.members] = rank_eps(sig, frob, eps)
    return out
