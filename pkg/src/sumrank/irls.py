"""Full ambient-space solvers with switching weights.

The exact-constraint solver updates via the weighted image formula and falls
back to the numerically gentler kernel formula when conditioning degrades.
The relaxed solver trades the constraint for a residual term scaled against
the shifted log-det objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .family import Family
from .objective import (
    EPSILON_DEFAULT,
    f_a_gamma,
    rank_eps,
    scaling_constant,
    spectra_by_subset,
    weights,
    what_matrix,
)
from .operators import DenseOperator, KernelRep, SamplingOperator, kernel_basis
from .tensor import DenseTensor, Shape, pinv_solve


class SolverError(RuntimeError):
    pass


@dataclass
class GammaSchedule:
    """Gamma grid gamma0 * decline^j with two ways of stepping down.

    ``geometric`` steps once per iteration.  ``stationary`` holds gamma until
    the iterate is nearly stationary (the movement between consecutive
    iterates, a computable stand-in for the distance to the stationary set,
    falls under the gate) or the per-level iteration cap runs out; this keeps
    the decline slow exactly where the landscape reorganizes.
    """

    gamma0: float | None = None
    decline: float = 1.0 / 1.2
    gamma_min: float | None = None
    mode: str = "stationary"  # geometric | stationary
    gate_coeff: float = 0.03
    level_cap: int = 40
    cap_policy: str | None = None  # None | "reference" | "validation"
    cap_coeff: float = 0.1

    def resolve(self, x0_norm_sq):
        g0 = self.gamma0 if self.gamma0 is not None else max(x0_norm_sq, 1e-300)
        gmin = self.gamma_min if self.gamma_min is not None else 1e-14 * g0
        return g0, gmin

    def may_step(self, movement, frob, gamma, g0, level_iters):
        if self.mode == "geometric":
            return True
        if level_iters >= self.level_cap:
            return True
        next_gamma = gamma * self.decline
        gate = self.gate_coeff * math.sqrt(next_gamma / g0) * max(frob, 1e-300)
        return movement <= gate


@dataclass
class SolverConfig:
    schedule: GammaSchedule = field(default_factory=GammaSchedule)
    max_iters: int = 3000
    stop_residual_rel: float = 1e-6
    method: str = "image"  # image | kernel | relaxed
    switch_sets: object = None  # None, or callable i -> iterable of subsets
    record_iterates: bool = False
    # once the coarse rank pattern stays frozen across a full factor of two
    # in gamma, the iterate is committed and gamma is crashed to resolve it
    tail_acceleration: bool = True
    tail_window: int = 12
    tail_gamma_span: float = 2.0


@dataclass
class TraceRow:
    iteration: int
    gamma: float
    objective: float
    residual: float
    ranks: dict

    def as_dict(self):
        return {
            "iter": self.iteration,
            "gamma": self.gamma,
            "objective": self.objective,
            "residual": self.residual,
            "ranks": {"+".join(map(str, k)): v for k, v in self.ranks.items()},
        }


class RunReport:
    """Per-iteration trace plus the final iterate and termination reason."""

    def __init__(self, family: Family):
        self.family = family
        self.trace: list[TraceRow] = []
        self.final = None
        self.termination = "incomplete"
        self.iterates = []
        self.warnings = []
        self.meta = {}

    def record(self, iteration, gamma, objective, residual, ranks):
        self.trace.append(TraceRow(iteration, gamma, objective, residual, ranks))

    def to_json(self):
        return {
            "termination": self.termination,
            "warnings": self.warnings,
            "meta": self.meta,
            "trace": [row.as_dict() for row in self.trace],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    def write_trace_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,gamma,objective,residual,ranks\n")
            for row in self.trace:
                ranks = " ".join(
                    f"{'+'.join(map(str, k))}:{v}" for k, v in sorted(row.ranks.items())
                )
                fh.write(f"{row.iteration},{row.gamma},{row.objective},{row.residual},{ranks}\n")


def min_norm_init(op, y) -> DenseTensor:
    """Minimum-norm solution of the measurement constraint."""
    y = np.asarray(y, dtype=float)
    if isinstance(op, SamplingOperator):
        return op.apply_adjoint(y)
    matrix = op.as_dense_matrix()
    x = pinv_solve(matrix, y)
    residual = np.linalg.norm(matrix @ x - y)
    if residual > 1e-8 * max(np.linalg.norm(y), 1.0):
        raise SolverError("measurements are inconsistent with the operator")
    return DenseTensor.from_flat(x, op.shape)


def _weight_matrix_sum(x_prev, family, gamma):
    ws = weights(x_prev, family, gamma)
    return what_matrix(ws, x_prev.shape), ws


def image_update(x_prev: DenseTensor, op, y, family: Family, gamma,
                 what=None, cond_limit=1e12):
    """Weighted minimum: X = W^-1 L* (L W^-1 L*)^-1 y.

    Returns (tensor, condition estimate of the inner system).
    """
    y = np.asarray(y, dtype=float)
    matrix = op.as_dense_matrix()
    if what is None:
        what, _ = _weight_matrix_sum(x_prev, family, gamma)
    try:
        c = cho_factor(what, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"summed weight operator lost definiteness: {exc}")
    z = cho_solve(c, matrix.T, check_finite=False)
    gram = matrix @ z
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SolverError(f"image update ill-conditioned (cond={cond:.2e})")
    coeff = np.linalg.solve(gram, y)
    return DenseTensor.from_flat(z @ coeff, x_prev.shape), cond


def kernel_update(x0: DenseTensor, kernel: KernelRep, family: Family, gamma,
                  x_prev: DenseTensor, what=None):
    """Stable form X = X0 - K (K^T W K)^-1 K^T W X0 over the affine fiber."""
    if what is None:
        what, _ = _weight_matrix_sum(x_prev, family, gamma)
    k = kernel.basis
    if k.shape[1] == 0:
        return x0.copy()
    wk = what @ k
    inner = k.T @ wk
    rhs = wk.T @ x0.data
    coeff = np.linalg.solve(inner, rhs)
    return DenseTensor.from_flat(x0.data - k @ coeff, x0.shape)


def kernel_lsq_update(x0: DenseTensor, kernel: KernelRep, family: Family, gamma,
                      x_prev: DenseTensor, weight_set=None):
    """Kernel update computed as one least squares problem.

    Minimizing the stacked W^{1/2}-scaled matricizations over the affine
    fiber avoids squaring the weight conditioning, which matters once gamma
    sits many orders below the leading singular values.
    """
    from scipy.linalg import lstsq as _lstsq

    from .objective import stack_weighted

    if weight_set is None:
        weight_set = weights(x_prev, family, gamma)
    k = kernel.basis
    if k.shape[1] == 0:
        return x0.copy()
    a = stack_weighted(weight_set, x0.shape, k)
    b = stack_weighted(weight_set, x0.shape, x0.data)
    z, *_ = _lstsq(a, -b, lapack_driver="gelsd", check_finite=False)
    return DenseTensor.from_flat(x0.data + k @ z, x0.shape)


def relaxed_update(x_prev: DenseTensor, op, y, family: Family, gamma, c_l,
                   what=None):
    """Minimizer of the relaxed objective: (L*L + c_l gamma W) X = L* y."""
    y = np.asarray(y, dtype=float)
    matrix = op.as_dense_matrix()
    if c_l * gamma <= 0:
        return DenseTensor.from_flat(pinv_solve(matrix, y), x_prev.shape)
    if what is None:
        what, _ = _weight_matrix_sum(x_prev, family, gamma)
    system = matrix.T @ matrix + (c_l * gamma) * what
    rhs = matrix.T @ y
    try:
        c = cho_factor(system, lower=True, check_finite=False)
        sol = cho_solve(c, rhs, check_finite=False)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    return DenseTensor.from_flat(sol, x_prev.shape)


def fixed_point_residual(x: DenseTensor, op, y, family: Family, gamma) -> float:
    """Distance to the own-weight update; vanishes on stationary points."""
    x_next, _ = image_update(x, op, y, family, gamma, cond_limit=np.inf)
    return float(np.linalg.norm(x_next.array - x.array))


def _eps_ranks(x, family, eps=EPSILON_DEFAULT):
    spectra = spectra_by_subset(x, family, pad=False)
    frob = x.norm()
    return {s.members: rank_eps(sig, frob, eps) for s, sig in spectra.items()}


def run(config: SolverConfig, op, y, family: Family, reference=None,
        seed=None) -> RunReport:
    """Full-space solve loop: weights, update, gamma decline, stopping.

    ``reference`` enables the automatic stop once the relative distance to it
    falls below the configured threshold; with the reference cap policy it
    also bounds gamma by the squared distance.
    """
    y = np.asarray(y, dtype=float)
    report = RunReport(family)
    x = min_norm_init(op, y)
    x0 = x.copy()
    g0, gmin = config.schedule.resolve(x.norm() ** 2)
    gamma = g0
    method = config.method
    kernel = None
    c_l = scaling_constant(op, family, x.shape) if method == "relaxed" else None
    ref_norm = reference.norm() if reference is not None else None
    coarse_prev = None
    stable = 0
    gamma_at_pattern = gamma
    level_iters = 0

    for i in range(1, config.max_iters + 1):
        x_prev = x
        switch = set()
        if config.switch_sets is not None:
            switch = {family.key_of(s) for s in config.switch_sets(i - 1)}
        working = Family(
            family.d,
            [s.complement() if s in switch else s for s in family.subsets],
        )
        if method == "image":
            # the image form squares the weight conditioning; hand over to the
            # least-squares kernel form once accuracy would drop below ~1e-8
            w_cond = (max(x.norm() ** 2, gamma) + gamma) / gamma
            if w_cond > 1e8:
                report.warnings.append(
                    f"iter {i}: weight condition {w_cond:.2e}; "
                    "switching to kernel least squares"
                )
                method = "kernel-lsq"
                kernel = kernel_basis(op) if kernel is None else kernel
        what = None
        if method in ("image", "kernel", "relaxed"):
            what, _ = _weight_matrix_sum(x, working, gamma)

        if method == "image":
            try:
                x_new, cond = image_update(x, op, y, working, gamma, what=what)
            except SolverError as exc:
                report.warnings.append(
                    f"iter {i}: {exc}; switching to kernel least squares"
                )
                method = "kernel-lsq"
                kernel = kernel_basis(op) if kernel is None else kernel
                x_new = kernel_lsq_update(x0, kernel, working, gamma, x)
        elif method == "kernel":
            kernel = kernel_basis(op) if kernel is None else kernel
            x_new = kernel_update(x0, kernel, working, gamma, x, what=what)
        elif method == "kernel-lsq":
            kernel = kernel_basis(op) if kernel is None else kernel
            x_new = kernel_lsq_update(x0, kernel, working, gamma, x)
        elif method == "relaxed":
            x_new = relaxed_update(x, op, y, working, gamma, c_l, what=what)
        else:
            raise ValueError(f"unknown method {method!r}")

        x = x_new
        residual = float(np.linalg.norm(op.apply(x) - y))
        movement = float(np.linalg.norm(x.array - x_prev.array))
        spectra = spectra_by_subset(x, family, pad=False)
        objective = float(
            sum(np.sum(np.log1p(sig**2 / gamma)) for sig in spectra.values())
        )
        frob = x.norm()
        ranks = {s.members: rank_eps(sig, frob, EPSILON_DEFAULT)
                 for s, sig in spectra.items()}
        report.record(i, gamma, objective, residual, ranks)
        if config.record_iterates:
            report.iterates.append(x.copy())

        if reference is not None:
            err = float(np.linalg.norm(x.array - reference.array))
            if err <= config.stop_residual_rel * ref_norm:
                report.termination = "reference-reached"
                break

        coarse = tuple(rank_eps(sig, frob, 1e-3) for sig in spectra.values())
        if coarse == coarse_prev:
            stable += 1
        else:
            stable = 0
            gamma_at_pattern = gamma
        coarse_prev = coarse
        lead_min = min(
            (float(sig[r - 1]) for sig, r in zip(spectra.values(), coarse) if r > 0),
            default=0.0,
        )
        committed = (
            stable >= config.tail_window
            and gamma_at_pattern / max(gamma, 1e-300) >= config.tail_gamma_span
            and lead_min**2 >= 100.0 * gamma
        )

        # gamma step
        level_iters += 1
        if config.schedule.may_step(movement, frob, gamma, g0, level_iters):
            gamma = gamma * config.schedule.decline
            level_iters = 0
            if config.tail_acceleration and committed:
                gamma *= 1e-2
            if config.schedule.cap_policy == "reference" and reference is not None:
                # endgame polish only: crash gamma once the run has locked on
                err = float(np.linalg.norm(x.array - reference.array))
                if err <= 1e-3 * ref_norm:
                    gamma = min(gamma, config.schedule.cap_coeff * err**2)
        if gamma <= gmin:
            report.termination = "gamma-floor"
            break
    else:
        report.termination = "max-iters"

    report.final = x
    report.meta["method"] = method
    report.meta["gamma_final"] = gamma
    return report
