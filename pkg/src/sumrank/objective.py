"""Objectives, weight operators and the evaluation functionals.

The driving quantity everywhere is the sum over the family of log-determinants
of regularized matricization Grams.  Spectra are zero-padded to the row count
n_J, so replacing a subset by its complement shifts the objective by an
explicit multiple of log(gamma).
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .family import Family
from .tensor import DenseTensor, Shape, dematricize, matricize, singular_values


def spectra_by_subset(x, family: Family, pad=True):
    """Map subset -> singular value array, padded to n_J when ``pad``.

    Accepts a dense tensor, or a tree network whose graph realizes exactly the
    subsets of the family (spectra then come from representation-side SVDs).
    """
    if isinstance(x, DenseTensor):
        return {
            s: singular_values(x, s, pad_to_rows=pad) for s in family.subsets
        }
    return _network_spectra(x, family, pad=pad)


def _network_spectra(network, family: Family, pad=True):
    from .labeled import beta
    from .network import orthonormalize, root_shift

    graph = network.graph
    subset_of_edge = {}
    for e, s in graph.edge_subset.items():
        for cand in (s, s.complement()):
            if cand in family:
                subset_of_edge[e] = family.key_of(cand)
    missing = set(family.subsets) - set(subset_of_edge.values())
    if missing:
        raise ValueError(
            f"network graph does not realize subsets {[s.members for s in missing]}"
        )
    c0 = min(graph.vertices)
    net = orthonormalize(network, c0)
    tour = graph.euler_tour(c0)
    sigmas = {}
    for u, w in zip(tour[:-1], tour[1:]):
        collected = {}
        net = root_shift(net, net.ortho_root, w, inplace=True, collect_sigma=collected)
        for e, sig in collected.items():
            sigmas.setdefault(e, sig)
    out = {}
    for e, s in subset_of_edge.items():
        sig = sigmas[e]
        if pad:
            rows = network.shape.size(s.members)
            if rows > sig.size:
                sig = np.concatenate([sig, np.zeros(rows - sig.size)])
        out[s] = sig
    return out


def f_gamma(x, family: Family, gamma) -> float:
    """Sum over the family of log prod_i (sigma_i^2 + gamma), padded to n_J."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    spectra = spectra_by_subset(x, family, pad=True)
    total = 0.0
    for s, sig in spectra.items():
        total += float(np.sum(np.log(sig**2 + gamma)))
    return total


def f_a_gamma(x, family: Family, gamma) -> float:
    """Shifted variant log prod (1 + sigma^2/gamma); nonnegative, pad-free."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    spectra = spectra_by_subset(x, family, pad=False)
    total = 0.0
    for sig in spectra.values():
        total += float(np.sum(np.log1p(sig**2 / gamma)))
    return total


def pad_shift(family: Family, shape: Shape, replaced) -> float:
    """Coefficient of log(gamma) between f over K^S and f over K."""
    total = 0
    for s in replaced:
        s = family.key_of(s)
        total += shape.size(s.complement().members) - shape.size(s.members)
    return total


class WeightSet:
    """Full-form weight matrices (X^[J] X^[J]^T + gamma I)^{-1} per subset.

    Stored through the eigendecomposition of the regularized Gram so that
    fractional powers come without further loss of accuracy.
    """

    def __init__(self, family: Family, gamma, eigs):
        self.family = family
        self.gamma = float(gamma)
        self.eigs = {family.key_of(k): v for k, v in eigs.items()}
        self.mats = {
            s: (vecs / vals) @ vecs.T for s, (vals, vecs) in self.eigs.items()
        }

    @classmethod
    def from_matrices(cls, family, gamma, mats):
        eigs = {}
        for k, m in mats.items():
            vals, vecs = np.linalg.eigh(np.linalg.inv(np.asarray(m, dtype=float)))
            eigs[k] = (vals, vecs)
        return cls(family, gamma, eigs)

    def __getitem__(self, subset):
        return self.mats[self.family.key_of(subset)]

    def half(self, subset):
        """W^{1/2} of one subset."""
        vals, vecs = self.eigs[self.family.key_of(subset)]
        return (vecs / np.sqrt(vals)) @ vecs.T

    def apply(self, x: DenseTensor, subset) -> DenseTensor:
        s = self.family.key_of(subset)
        return dematricize(self.mats[s] @ matricize(x, s), s, x.shape)

    def apply_sum(self, x: DenseTensor) -> DenseTensor:
        out = np.zeros(x.shape.dims)
        for s in self.family.subsets:
            out += self.apply(x, s).array
        return DenseTensor(out)


def weights(x: DenseTensor, family: Family, gamma) -> WeightSet:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    eigs = {}
    for s in family.subsets:
        m = matricize(x, s)
        gram = m @ m.T
        vals, vecs = np.linalg.eigh(gram)
        eigs[s] = (np.maximum(vals, 0.0) + gamma, vecs)
    return WeightSet(family, gamma, eigs)


def stack_weighted(weight_set: WeightSet, shape: Shape, columns) -> np.ndarray:
    """Rows of W^{1/2}-scaled matricizations of each column, stacked over J.

    ``columns`` holds colex-vectorized tensors as matrix columns; the result
    has one block of n_[d] rows per family subset.
    """
    columns = np.asarray(columns, dtype=float)
    single = columns.ndim == 1
    if single:
        columns = columns[:, None]
    n, m = columns.shape
    blocks = []
    for s in weight_set.family.subsets:
        cols = _colex_columns(shape.dims, s.members)  # (n_jc, n_j)
        n_jc, n_j = cols.shape
        perm = cols.reshape(-1)
        permuted = columns[perm].reshape(n_jc, n_j, m)
        half = weight_set.half(s)
        weighted = np.einsum("ij,cjm->cim", half, permuted, optimize=True)
        blocks.append(weighted.reshape(n_jc * n_j, m))
    out = np.concatenate(blocks, axis=0)
    return out[:, 0] if single else out


class LowRankWeight:
    """Factored weight Y (H + gamma I)^{-1} Y^T for one oriented subset."""

    def __init__(self, y, h, gamma):
        self.y = np.asarray(y, dtype=float)
        self.h = np.asarray(h, dtype=float)
        self.gamma = float(gamma)

    def dense(self):
        core = np.linalg.inv(self.h + self.gamma * np.eye(self.h.shape[0]))
        return self.y @ core @ self.y.T


def low_rank_weights(network, c, gamma):
    """Factored weights of the network's orthonormal branches away from c."""
    from .family import root_subset
    from .network import branch_matrices, gram_z

    if network.ortho_root != c:
        raise ValueError("network must be orthonormalized at c")
    _, oriented, _ = root_subset(network.graph, c)
    out = {}
    for e, subset in oriented.items():
        y, _ = _oriented_branch_y(network, e, subset)
        h = gram_z(network, e)
        out[subset] = LowRankWeight(y, h, gamma)
    return out


def _oriented_branch_y(network, e, subset):
    from .labeled import alpha, beta
    from .network import contract_subset

    graph = network.graph
    v, w = tuple(e)
    far = v if graph.leaf_set(w, v) == subset else w
    near = w if far == v else v
    branch = graph.branch(near, far)
    t = contract_subset(network, branch)
    rows = [alpha(mu) for mu in subset.members]
    return t.to_matrix(rows, [beta(frozenset(e))]), far


from functools import lru_cache


@lru_cache(maxsize=256)
def _colex_columns(dims, members):
    """Flat colex indices of each matricization column, one column per row."""
    shape = Shape(dims)
    probe = DenseTensor.from_flat(np.arange(shape.size(), dtype=float), shape)
    perm = matricize(probe, members).reshape(-1, order="F").astype(np.intp)
    n_j = shape.size(members)
    return perm.reshape(n_j, -1, order="F").T.copy()


@lru_cache(maxsize=256)
def _block_scatter(dims, members):
    """Flat indices of all weight-block entries; disjoint across columns."""
    shape = Shape(dims)
    n = shape.size()
    cols = _colex_columns(dims, members)
    return (cols[:, :, None] * n + cols[:, None, :]).reshape(-1)


def what_matrix(weight_set: WeightSet, shape: Shape) -> np.ndarray:
    """Dense matrix of the summed weight operator on colex-vectorized tensors."""
    n = shape.size()
    out = np.zeros(n * n)
    for s in weight_set.family.subsets:
        w = weight_set[s]
        flat = _block_scatter(shape.dims, s.members)
        n_jc = flat.size // w.size
        out[flat] += np.tile(w.reshape(-1), n_jc)
    return out.reshape(n, n)


def augmented(x: DenseTensor, weight_set: WeightSet, family: Family, gamma) -> float:
    """Augmented objective; equals f_gamma at the minimizing weights."""
    total = 0.0
    for s in family.subsets:
        w = weight_set[s]
        m = matricize(x, s)
        gram = m @ m.T
        gram[np.diag_indices_from(gram)] += gamma
        sign, logdet = np.linalg.slogdet(w)
        if sign <= 0:
            raise ValueError("weights must be positive definite")
        total += float(np.trace(w @ gram) - logdet - w.shape[0])
    return total


def augmented_shifted(x, weight_set, family, gamma, shape) -> float:
    """Augmented objective after the log(gamma) normalization shift."""
    pad = sum(shape.size(s.members) for s in family.subsets)
    return augmented(x, weight_set, family, gamma) - pad * math.log(gamma)


def relaxed(x, weight_set, family, gamma, c_l, op, y, omega=None, shape=None) -> float:
    """Relaxed objective: residual plus scaled, shifted augmented term."""
    omega_sq = gamma if omega is None else float(omega) ** 2
    shape = shape or x.shape
    res = op.apply(x) - np.asarray(y, dtype=float)
    return float(res @ res) + c_l * omega_sq * augmented_shifted(
        x, weight_set, family, gamma, shape
    )


def relaxed_f(x, family: Family, gamma, c_l, op, y) -> float:
    """Relaxed objective at the optimal weights (the F-functional)."""
    if isinstance(x, DenseTensor):
        res = op.apply(x) - np.asarray(y, dtype=float)
    else:
        res = op.apply_to_network(x) - np.asarray(y, dtype=float)
    return float(res @ res) + c_l * gamma * f_a_gamma(x, family, gamma)


def scaling_constant(op, family: Family, shape: Shape) -> float:
    """Default penalty scale: ||L||_F^2 / (4 |K| n_[d])."""
    return 0.25 * op.frob_norm_sq() / (len(family) * shape.size())


def gradient_f_gamma(x: DenseTensor, family: Family, gamma) -> DenseTensor:
    """Gradient of f_gamma: twice the summed weighted matricizations."""
    ws = weights(x, family, gamma)
    return DenseTensor(2.0 * ws.apply_sum(x).array)


# --- determinant expansion (combinatorial test oracle, size-capped) ----------

_ORACLE_CAP = 5


def det2_k(a, k) -> float:
    """Sum of squared k x k minors of a matrix (k = 0 gives 1)."""
    a = np.asarray(a, dtype=float)
    if k == 0:
        return 1.0
    m, n = a.shape
    if max(m, n) > 2 * _ORACLE_CAP or min(m, n) > _ORACLE_CAP:
        raise ValueError("minor oracle is capped to tiny matrices")
    if k > min(m, n):
        return 0.0
    total = 0.0
    for rows in itertools.combinations(range(m), k):
        sub = a[list(rows), :]
        for cols in itertools.combinations(range(n), k):
            total += float(np.linalg.det(sub[:, list(cols)])) ** 2
    return total


def char_poly_coeffs(a) -> np.ndarray:
    """Coefficients c_k with prod_i (sigma_i^2 + g) = sum_k g^(m-k) c_k."""
    a = np.asarray(a, dtype=float)
    m = a.shape[0]
    return np.array([det2_k(a, k) for k in range(m + 1)])


def g_s(x: DenseTensor, family: Family):
    """Coefficients of the gamma-expansion of the determinant product.

    Returns an array g with prod_J prod_i (sigma_i^2 + gamma) equal to
    sum_s gamma^(sum n_J - s) g[s].
    """
    poly = np.array([1.0])
    for s in family.subsets:
        coeffs = char_poly_coeffs(matricize(x, s))
        poly = np.convolve(poly, coeffs)
    return poly


def det_product(x, family: Family, gamma) -> float:
    """prod_J prod_{i<=n_J} (sigma_i^2 + gamma), padded to n_J."""
    spectra = spectra_by_subset(x, family, pad=True)
    log_total = 0.0
    for sig in spectra.values():
        log_total += float(np.sum(np.log(sig**2 + gamma)))
    return math.exp(log_total)


# --- evaluation functionals ---------------------------------------------------

EPSILON_DEFAULT = 1e-6


def rank_eps(sigma, frob, eps=EPSILON_DEFAULT) -> int:
    """Largest index with sigma_i > eps * ||A||_F (0 when none)."""
    sigma = np.asarray(sigma, dtype=float)
    mask = sigma > eps * frob
    return int(np.max(np.nonzero(mask)[0]) + 1) if np.any(mask) else 0


def log_det_eps(sigma, m, gamma, eps, frob) -> float:
    """log of det^2_{m,gamma,eps}: gamma^(m-r) prod_{i<=r} (sigma_i^2+gamma)."""
    r = rank_eps(sigma, frob, eps)
    out = (m - r) * math.log(gamma)
    out += float(np.sum(np.log(np.asarray(sigma[:r]) ** 2 + gamma)))
    return out


def det_eps(x, family: Family, gamma, eps=EPSILON_DEFAULT) -> float:
    """Regularized epsilon-rank determinant product over the family."""
    spectra = spectra_by_subset(x, family, pad=True)
    frob = _frob_of(x)
    log_total = 0.0
    for s, sig in spectra.items():
        rows = sig.size
        log_total += log_det_eps(sig, rows, gamma, eps, frob)
    return math.exp(0.5 * log_total)


def _frob_of(x):
    if isinstance(x, DenseTensor):
        return x.norm()
    return x.frob_norm()


def q_limit(x_alg, x_rs, family: Family, eps=EPSILON_DEFAULT) -> float:
    """Limit of the regularized determinant quotient for gamma to zero.

    Infinity when the algorithm output carries more epsilon-significant
    singular values than the reference, zero when fewer, otherwise the product
    of singular value ratios up to the epsilon-ranks.
    """
    spec_alg = spectra_by_subset(x_alg, family, pad=True)
    spec_rs = spectra_by_subset(x_rs, family, pad=True)
    frob_alg = _frob_of(x_alg)
    frob_rs = _frob_of(x_rs)
    s_alg = sum(rank_eps(sig, frob_alg, eps) for sig in spec_alg.values())
    s_rs = sum(rank_eps(sig, frob_rs, eps) for sig in spec_rs.values())
    if s_alg > s_rs:
        return math.inf
    if s_alg < s_rs:
        return 0.0
    log_q = 0.0
    for s in family.subsets:
        sig_a = spec_alg[s]
        sig_r = spec_rs[s]
        r_a = rank_eps(sig_a, frob_alg, eps)
        r_r = rank_eps(sig_r, frob_rs, eps)
        log_q += float(np.sum(np.log(sig_a[:r_a])))
        log_q -= float(np.sum(np.log(sig_r[:r_r])))
    return math.exp(log_q)
