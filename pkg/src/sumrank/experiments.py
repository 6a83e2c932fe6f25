"""Experiment harness: reference generators, trial classification, presets.

Each experiment cell fixes a reference kind, an operator kind, a measurement
count and a solution method; trials draw seeded instances, run the solver
through the decline-rate sensitivity loop and classify the outcome against
the reference by the regularized determinant quotient.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .airls import AirlsConfig, run_airls
from .family import Family, bbht_family, build_tree, tucker_family
from .irls import GammaSchedule, SolverConfig, run
from .network import (
    Network,
    contract_full,
    cp_tensor,
    network_distance,
    orthonormalize,
    random_network,
)
from .labeled import beta, from_matrix
from .objective import EPSILON_DEFAULT, q_limit
from .operators import (
    DecomposedOperator,
    DenseOperator,
    SamplingOperator,
    gaussian_decomposed,
    gaussian_dense,
    sampling,
)
from .tensor import DenseTensor, Shape

SIGMA_MIN_EXPDEC = 1e-4


@dataclass
class ExperimentSpec:
    """One experiment cell; presets build lists of these."""

    d: int = 4
    n_bar: int = 5
    r_rs: int = 3
    reference: str = "bbht"  # tucker | bbht | expdec-bbht | cp
    operator: str = "gaussian-dense"  # gaussian-dense | gaussian-decomposed | sampling
    operator_rank: int = 1
    ell: int = 70
    method: str = "full-image"  # full-image | full-relaxed | airls | airls-neigh | plain-als
    trials: int = 100
    k_max: int = 10
    seed: int = 0
    fixed_nu: float | None = None  # overrides the sensitivity loop
    s_expfac: float = 1.0 / 3.0
    rank_fixed: int | None = None  # fixed solver rank (airls / plain ALS)
    rank_max: int | None = None  # adaptive solver rank bound (airls)
    validation_fraction: float = 0.0
    gamma_cap: str | None = None  # None | reference | validation
    post_iteration: bool = False
    max_iters: int = 3000
    max_sweeps: int = 3000
    cell: str = ""

    def shape(self):
        return Shape([self.n_bar] * self.d)

    def family(self):
        if self.reference == "cp":
            subs = []
            for size in range(1, self.d):
                subs.extend(itertools.combinations(range(1, self.d + 1), size))
            return Family(self.d, subs)
        if self.reference == "tucker":
            return tucker_family(self.d)
        return bbht_family(self.d)

    def cell_id(self):
        if self.cell:
            return self.cell
        return f"{self.reference}-{self.operator}-l{self.ell}-{self.method}"


@dataclass
class Classification:
    tag: str  # improvement | success-recovery | success-no-recovery | weak-failure | strong-failure
    q: float
    residual_rel: float
    recovery_rel: float

    @property
    def is_failure(self):
        return self.tag in ("weak-failure", "strong-failure")

    @property
    def is_success(self):
        return self.tag in ("success-recovery", "success-no-recovery")

    def as_dict(self):
        return {
            "tag": self.tag,
            "q": None if math.isinf(self.q) else self.q,
            "residual_rel": self.residual_rel,
            "recovery_rel": self.recovery_rel,
        }


def gen_reference(spec: ExperimentSpec, seed):
    """Reference solution plus the family it is judged against.

    Returns (dense tensor or network, family, tree graph or None).
    """
    rng = np.random.default_rng(seed)
    shape = spec.shape()
    family = spec.family()
    if spec.reference == "cp":
        factors = [rng.standard_normal((n, spec.r_rs)) for n in shape.dims]
        return cp_tensor(factors), family, None
    graph = build_tree(family)
    ranks = {e: spec.r_rs for e in graph.edges}
    net = random_network(graph, ranks, shape, rng.integers(2**63))
    if spec.reference == "expdec-bbht":
        net = _exponential_spectrum(net, spec.s_expfac, SIGMA_MIN_EXPDEC, rng)
    return net, family, graph


def _exponential_spectrum(net: Network, s_expfac, sigma_min, rng):
    """Replace every edge spectrum by sorted draws of s^x, x standard normal."""
    graph = net.graph
    home = min(v for v in graph.vertices)
    net = orthonormalize(net, home)
    tour = graph.euler_tour(home)
    done = set()
    for u, w in zip(tour[:-1], tour[1:]):
        e = frozenset((u, w))
        cur = net.ortho_root
        node = net.nodes[cur]
        rest = [l for l in node.labels if l != beta(e)]
        mat = node.to_matrix(rest, [beta(e)])
        u_mat, sigma, vt = np.linalg.svd(mat, full_matrices=False)
        if e not in done:
            draws = np.maximum(sigma_min, s_expfac ** rng.standard_normal(sigma.size))
            sigma = np.sort(draws)[::-1]
            done.add(e)
        shape_rest = [node.size_of(l) for l in rest]
        net.nodes[cur] = from_matrix(u_mat, rest, shape_rest, [beta(e)], [u_mat.shape[1]])
        push = sigma[:, None] * vt
        from .network import _push_matrix

        _push_matrix(net, push, e, w)
        net.ortho_root = w
    return net


def make_operator(spec: ExperimentSpec, shape: Shape, graph, seed):
    if spec.operator == "gaussian-dense":
        return gaussian_dense(spec.ell, shape, seed)
    if spec.operator == "gaussian-decomposed":
        if graph is None:
            raise ValueError("decomposed operators need a tree family")
        return gaussian_decomposed(spec.ell, shape, graph, spec.operator_rank, seed)
    if spec.operator == "sampling":
        return sampling(spec.ell, shape, seed)
    raise ValueError(f"unknown operator kind {spec.operator!r}")


def _residual(x_alg, op, y):
    if isinstance(x_alg, Network):
        if isinstance(op, (DecomposedOperator, SamplingOperator)):
            applied = (
                op.apply_to_network(x_alg)
                if isinstance(op, DecomposedOperator)
                else op.as_decomposed(x_alg.graph).apply_to_network(x_alg)
            )
        else:
            applied = op.apply(contract_full(x_alg))
    else:
        applied = op.apply(x_alg)
    return float(np.linalg.norm(applied - np.asarray(y, dtype=float)))


def _recovery_error(x_alg, x_rs):
    if isinstance(x_alg, Network) and isinstance(x_rs, Network):
        return network_distance(x_alg, x_rs), x_rs.frob_norm()
    dense_alg = contract_full(x_alg) if isinstance(x_alg, Network) else x_alg
    dense_rs = contract_full(x_rs) if isinstance(x_rs, Network) else x_rs
    return (
        float(np.linalg.norm(dense_alg.array - dense_rs.array)),
        dense_rs.norm(),
    )


def classify(x_alg, x_rs, op, y, family: Family, eps=EPSILON_DEFAULT,
             refine=None) -> Classification:
    """Bucket an output by residual, determinant quotient and recovery.

    ``refine`` is an optional callable applied to improvement candidates
    before the final quotient is taken at a tightened epsilon.
    """
    y = np.asarray(y, dtype=float)
    y_norm = float(np.linalg.norm(y))
    residual = _residual(x_alg, op, y)
    residual_rel = residual / y_norm if y_norm > 0 else residual
    err, ref_norm = _recovery_error(x_alg, x_rs)
    recovery_rel = err / ref_norm if ref_norm > 0 else err

    q = q_limit(x_alg, x_rs, family, eps=eps)
    if q <= 0.98 and refine is not None:
        refined = refine(x_alg)
        q_ref = q_limit(refined, x_rs, family, eps=1e-10)
        if q_ref > 0.98:
            q = q_ref
            residual = _residual(refined, op, y)
            residual_rel = residual / y_norm if y_norm > 0 else residual

    if residual_rel > 1e-6 or math.isinf(q):
        tag = "strong-failure"
    elif q >= 1.005:
        tag = "weak-failure"
    elif q > 0.98:
        tag = "success-recovery" if recovery_rel <= 1e-4 else "success-no-recovery"
    else:
        tag = "improvement"
    return Classification(tag, q, residual_rel, recovery_rel)


def nu_sequence(k_max, nu0=1.2):
    """nu_0 = 1.2, nu_k = sqrt(nu_{k-1})."""
    out = [nu0]
    for _ in range(k_max):
        out.append(math.sqrt(out[-1]))
    return out


def sensitivity_loop(run_and_classify, k_max, nu0=1.2):
    """Rerun with slower decline until the result is not a failure.

    ``run_and_classify(k, nu)`` produces a Classification; the loop stops at
    the first non-failure or returns the k_max result.
    """
    nus = nu_sequence(k_max, nu0)
    result = None
    for k, nu in enumerate(nus):
        result = run_and_classify(k, nu)
        if not result.is_failure:
            return result, k
    return result, k_max


@dataclass
class TrialResult:
    trial: int
    classification: Classification
    k_used: int
    iterations: int
    termination: str

    def as_dict(self):
        out = {"trial": self.trial, "k_used": self.k_used,
               "iterations": self.iterations, "termination": self.termination}
        out.update(self.classification.as_dict())
        return out


def _trial_seeds(spec: ExperimentSpec, trial):
    base = np.random.default_rng(spec.seed ^ trial)
    return {
        "reference": int(base.integers(2**63)),
        "operator": int(base.integers(2**63)),
        "init": int(base.integers(2**63)),
    }


def _solver_schedule(spec: ExperimentSpec, nu):
    return GammaSchedule(
        decline=1.0 / nu,
        cap_policy=spec.gamma_cap,
    )


def _run_method(spec: ExperimentSpec, op, y, family, reference, graph, nu, init_seed):
    shape = spec.shape()
    if spec.method in ("full-image", "full-relaxed"):
        config = SolverConfig(
            schedule=_solver_schedule(spec, nu),
            max_iters=spec.max_iters,
            method="image" if spec.method == "full-image" else "relaxed",
        )
        dense_ref = (
            contract_full(reference) if isinstance(reference, Network) else reference
        )
        report = run(config, op, y, family, reference=dense_ref)
        return report.final, report
    if spec.method in ("airls", "airls-neigh", "plain-als"):
        if spec.method == "plain-als":
            rank = spec.rank_fixed if spec.rank_fixed is not None else spec.r_rs
            config = AirlsConfig(
                schedule=_solver_schedule(spec, nu),
                rank_policy=("fixed", rank),
                reweight=False,
                max_sweeps=spec.max_sweeps,
                validation_fraction=spec.validation_fraction,
            )
        else:
            if spec.rank_fixed is not None:
                policy = ("fixed", spec.rank_fixed)
            else:
                policy = ("adaptive", 1, spec.rank_max or spec.r_rs + 2)
            cap = spec.gamma_cap
            if cap == "validation" and spec.validation_fraction <= 0:
                cap = "reference"
            config = AirlsConfig(
                schedule=GammaSchedule(decline=1.0 / nu, cap_policy=cap),
                rank_policy=policy,
                path_scope="neigh" if spec.method == "airls-neigh" else "all",
                validation_fraction=spec.validation_fraction,
                post_iteration=spec.post_iteration,
                max_sweeps=spec.max_sweeps,
            )
        report = run_airls(
            config, op, y, family, shape, reference=reference, seed=init_seed
        )
        return report.final, report
    raise ValueError(f"unknown method {spec.method!r}")


def run_trial(spec: ExperimentSpec, trial) -> TrialResult:
    seeds = _trial_seeds(spec, trial)
    reference, family, graph = gen_reference(spec, seeds["reference"])
    shape = spec.shape()
    op = make_operator(spec, shape, graph, seeds["operator"])

    dense_scale_ok = shape.size() <= 10**6
    if isinstance(reference, Network) and dense_scale_ok and not isinstance(
        op, (DecomposedOperator, SamplingOperator)
    ):
        y = op.apply(contract_full(reference))
    elif isinstance(reference, Network):
        if isinstance(op, DecomposedOperator):
            y = op.apply_to_network(reference)
        elif isinstance(op, SamplingOperator):
            y = op.as_decomposed(reference.graph).apply_to_network(reference)
        else:
            y = op.apply(contract_full(reference))
    else:
        y = op.apply(reference)

    refine = None
    if dense_scale_ok and spec.method.startswith("full"):
        refine = _make_refiner(op, y, family)

    last = {"report": None}

    def run_and_classify(k, nu):
        x_alg, report = _run_method(
            spec, op, y, family, reference, graph, nu, seeds["init"] + k
        )
        last["report"] = report
        return classify(x_alg, reference, op, y, family, refine=refine)

    k_max = 0 if spec.fixed_nu is not None else spec.k_max
    nu0 = spec.fixed_nu if spec.fixed_nu is not None else 1.2
    classification, k_used = sensitivity_loop(run_and_classify, k_max, nu0=nu0)
    report = last["report"]
    return TrialResult(
        trial=trial,
        classification=classification,
        k_used=k_used,
        iterations=len(report.trace),
        termination=report.termination,
    )


def _make_refiner(op, y, family):
    """Post-iteration stand-in: continue with gamma pushed to machine scale."""
    from .irls import kernel_update, min_norm_init
    from .objective import weights, what_matrix
    from .operators import kernel_basis

    def refine(x_alg):
        if isinstance(x_alg, Network):
            return x_alg
        x = x_alg
        try:
            kernel = kernel_basis(op)
        except Exception:
            return x_alg
        x0 = min_norm_init(op, y)
        gamma = max(x.norm() ** 2, 1e-300) * 1e-12
        for _ in range(12):
            try:
                x = kernel_update(x0, kernel, family, gamma, x)
            except np.linalg.LinAlgError:
                break
            gamma *= 1e-2
        return x

    return refine


def _run_trial_task(payload):
    spec, trial = payload
    return run_trial(spec, trial)


def run_cell(spec: ExperimentSpec, workers=None):
    """All trials of one cell; a process pool is used when workers > 1."""
    workers = workers if workers is not None else (os.cpu_count() or 1)
    trials = list(range(spec.trials))
    if workers > 1 and spec.trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_trial_task, [(spec, t) for t in trials]))
    else:
        results = [run_trial(spec, t) for t in trials]
    return results


def _pct(count, total):
    return int(math.floor(100.0 * count / total + 0.5)) if total else 0


def aggregate(results):
    tags = [r.classification.tag for r in results]
    n = len(results)
    return {
        "trials": n,
        "improvement_pct": _pct(tags.count("improvement"), n),
        "success_recovery_pct": _pct(tags.count("success-recovery"), n),
        "success_no_recovery_pct": _pct(tags.count("success-no-recovery"), n),
        "weak_fail_pct": _pct(tags.count("weak-failure"), n),
        "strong_fail_pct": _pct(tags.count("strong-failure"), n),
        "mean_k_used": float(np.mean([r.k_used for r in results])) if results else 0.0,
    }


def run_experiment(specs, workers=None, progress=None):
    """Run a list of cells and assemble the aggregate report."""
    if isinstance(specs, ExperimentSpec):
        specs = [specs]
    report = {
        "nu_interpretation": "per-iteration gamma factor is 1/nu_k",
        "cells": {},
        "rows": {},
    }
    for spec in specs:
        cell = spec.cell_id()
        results = run_cell(spec, workers=workers)
        report["cells"][cell] = aggregate(results)
        report["rows"][cell] = [r.as_dict() for r in results]
        if progress is not None:
            progress(cell, report["cells"][cell])
    return report


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    with open(os.path.join(out_dir, "table.csv"), "w") as fh:
        fh.write(
            "cell,improvement_pct,success_recovery_pct,success_no_recovery_pct,"
            "weak_fail_pct,strong_fail_pct,mean_k_used\n"
        )
        for cell, agg in report["cells"].items():
            fh.write(
                f"{cell},{agg['improvement_pct']},{agg['success_recovery_pct']},"
                f"{agg['success_no_recovery_pct']},{agg['weak_fail_pct']},"
                f"{agg['strong_fail_pct']},{agg['mean_k_used']:.2f}\n"
            )


# --- presets -------------------------------------------------------------------


def preset(name, trials=None, seed=7, **overrides):
    """Desk-scale parameter grids mirroring the reported experiment setups."""
    specs = []
    if name == "exp00":
        for ell in (68, 69, 70):
            specs.append(ExperimentSpec(
                d=4, n_bar=5, r_rs=3, reference="bbht", operator="gaussian-dense",
                ell=ell, method="full-image", trials=trials or 100, k_max=10,
                seed=seed, cell=f"bbht-gaussian-l{ell}",
            ))
    elif name == "exp0":
        for ell, op_kind in itertools.product((83, 111, 138), ("sampling", "gaussian-dense")):
            specs.append(ExperimentSpec(
                d=4, n_bar=5, r_rs=3, reference="bbht", operator=op_kind, ell=ell,
                method="full-image", trials=trials or 100, k_max=8, seed=seed,
                cell=f"bbht-{op_kind}-l{ell}",
            ))
        for ell, op_kind in itertools.product((62, 82, 102), ("sampling", "gaussian-dense")):
            specs.append(ExperimentSpec(
                d=4, n_bar=5, r_rs=3, reference="cp", operator=op_kind, ell=ell,
                method="full-image", trials=trials or 100, k_max=8, seed=seed,
                cell=f"cp-{op_kind}-l{ell}",
            ))
    elif name == "exp0_":
        methods = (
            ("full-image", {}),
            ("full-relaxed", {}),
            ("airls", {"rank_fixed": 5}),
            ("airls", {"rank_max": 5, "cell_suffix": "adaptive"}),
        )
        for ell, (method, extra) in itertools.product((69, 83, 111, 138), methods):
            extra = dict(extra)
            suffix = extra.pop("cell_suffix", method)
            specs.append(ExperimentSpec(
                d=4, n_bar=5, r_rs=3, reference="bbht", operator="sampling", ell=ell,
                method=method, trials=trials or 100, k_max=8, seed=seed,
                cell=f"bbht-sampling-l{ell}-{suffix}", **extra,
            ))
    elif name == "exp1":
        methods = (
            ("full-image", {}),
            ("airls", {"rank_fixed": 5, "cell_suffix": "airls-fixed"}),
            ("airls", {"rank_max": 5, "cell_suffix": "airls-adaptive"}),
            ("plain-als", {"rank_fixed": 3}),
        )
        for ell, op_kind, (method, extra) in itertools.product(
            (126, 168, 210), ("sampling", "gaussian-decomposed"), methods
        ):
            extra = dict(extra)
            suffix = extra.pop("cell_suffix", method)
            specs.append(ExperimentSpec(
                d=4, n_bar=5, r_rs=3, reference="tucker", operator=op_kind,
                operator_rank=1, ell=ell, method=method, trials=trials or 100,
                k_max=0, fixed_nu=1.002, gamma_cap="reference", seed=seed,
                cell=f"tucker-{op_kind}-l{ell}-{suffix}", **extra,
            ))
    elif name == "exp2":
        op_kinds = (("sampling", 1), ("gaussian-decomposed", 1), ("gaussian-decomposed", 2))
        for ell, (op_kind, r_l), ref, scope in itertools.product(
            (6500, 13000, 19500, 26000), op_kinds, ("bbht", "expdec-bbht"), ("airls", "airls-neigh")
        ):
            specs.append(ExperimentSpec(
                d=8, n_bar=20, r_rs=5, reference=ref, operator=op_kind,
                operator_rank=r_l, ell=ell, method=scope, rank_max=8,
                validation_fraction=0.1, gamma_cap="validation",
                trials=trials or 100, k_max=5, seed=seed,
                cell=f"{ref}-{op_kind}{r_l}-l{ell}-{scope}",
            ))
    elif name == "exp2-smoke":
        from .family import RankVector, variety_dim

        d, n_bar, r_rs = 8, 8, 3
        fam = bbht_family(d)
        graph = build_tree(fam)
        dim = variety_dim(RankVector(fam, r_rs), Shape([n_bar] * d), graph)
        specs.append(ExperimentSpec(
            d=d, n_bar=n_bar, r_rs=r_rs, reference="bbht", operator="sampling",
            ell=2 * dim, method="airls", rank_max=5, validation_fraction=0.1,
            gamma_cap="validation", trials=trials or 1, k_max=2, seed=seed,
            cell=f"smoke-sampling-l{2 * dim}",
        ))
    else:
        raise ValueError(f"unknown preset {name!r}")
    if overrides:
        specs = [replace(s, **overrides) for s in specs]
    if trials is not None:
        specs = [replace(s, trials=trials) for s in specs]
    return specs
