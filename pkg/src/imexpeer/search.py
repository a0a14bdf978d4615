"""Derivative-free search for super-convergent IMEX-Peer tableaus.

The search runs in two phases.  The implicit phase optimizes nodes,
``gamma``, ``R`` and ``P`` for A-stability and small error constants; the
extrapolation phase then optimizes ``S2`` for large stability regions of
the IMEX scheme.  Both super-convergence conditions enter the objectives as
penalties and are polished to round-off before certification.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg, stability
from .tableau import (MethodTableau, TableauError, certify, defect_d, extrap_defect_l,
                      CertificationReport)

PARAMETERIZATIONS = ("optimal-zero-stable", "general-zero-stable")
INVALID_PENALTY = 1e6
MIN_NODE_GAP = 1e-3

IMPLICIT_WEIGHTS = {"a_stability": 1e3, "rho": 1.0, "norms": 0.01, "defect": 1.0,
                    "superconv": 1e2, "zero_stability": 1e3}
EXPLICIT_WEIGHTS = {"area_e": 1.0, "area_alpha": 1.0, "extrap_norms": 0.01,
                    "extrap_defect": 0.1, "superconv_explicit": 1e2}


class SearchError(ValueError):
    pass


# -- simplex method ----------------------------------------------------------

@dataclass(frozen=True)
class SimplexOptions:
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5
    xtol: float = 1e-8
    ftol: float = 0.0
    max_evals: int = 4000
    initial_step: float = 0.05

    def __post_init__(self):
        if not (self.reflection > 0 and self.expansion > max(1.0, self.reflection)
                and 0 < self.contraction < 1 and 0 < self.shrink < 1):
            raise SearchError("simplex coefficients need rho > 0, chi > max(1, rho), 0 < gamma, sigma < 1")
        if self.max_evals < 1:
            raise SearchError("max_evals must be positive")


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    evals: int
    converged: bool

    @property
    def budget_exhausted(self) -> bool:
        return not self.converged

    def __iter__(self):
        return iter((self.x, self.fun, self.evals))


def nelder_mead(objective, x0, options: SimplexOptions | None = None) -> SimplexResult:
    """Minimize ``objective`` from ``x0`` with the Nelder-Mead simplex method.

    Stops when the simplex diameter drops below ``xtol``, when the spread of
    vertex values is at most ``ftol``, or when the evaluation budget is spent.
    Non-finite values count as ``+inf``.
    """
    opt = options or SimplexOptions()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    n = x0.size
    evals = 0

    def f(x):
        nonlocal evals
        evals += 1
        val = float(objective(x))
        return val if math.isfinite(val) else math.inf

    f0 = f(x0)
    if not math.isfinite(f0):
        raise SearchError("objective is not finite at the start point")
    simplex = [x0]
    values = [f0]
    for i in range(n):
        if evals >= opt.max_evals:
            break
        x = x0.copy()
        x[i] = x[i] + (opt.initial_step * x[i] if x[i] != 0.0 else 0.00025)
        simplex.append(x)
        values.append(f(x))
    if len(simplex) < n + 1:
        return SimplexResult(x0, f0, evals, False)
    simplex = np.array(simplex)
    values = np.array(values)

    converged = False
    while True:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        diam = float(np.max(np.abs(simplex[1:] - simplex[0]))) if n else 0.0
        if diam < opt.xtol or values[-1] - values[0] <= opt.ftol:
            converged = True
            break
        if evals >= opt.max_evals:
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + opt.reflection * (centroid - worst)
        fr = f(xr)
        if fr < values[0]:
            xe = centroid + opt.expansion * (xr - centroid)
            fe = f(xe)
            simplex[-1], values[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-1]:
            xc = centroid + opt.contraction * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], values[-1] = xc, fc
                continue
        else:
            xc = centroid + opt.contraction * (worst - centroid)
            fc = f(xc)
            if fc < values[-1]:
                simplex[-1], values[-1] = xc, fc
                continue
        for k in range(1, n + 1):
            if evals >= opt.max_evals:
                break
            simplex[k] = simplex[0] + opt.shrink * (simplex[k] - simplex[0])
            values[k] = f(simplex[k])
    k = int(np.argmin(values))
    if values[k] > f0:  # cannot happen with a stable sort, kept as a guard
        return SimplexResult(x0, f0, evals, converged)
    return SimplexResult(simplex[k].copy(), float(values[k]), evals, converged)


# -- parameterization ---------------------------------------------------------

@dataclass(frozen=True)
class SearchSpec:
    """Parameterization, objective weights and optimizer settings of one search."""

    s: int
    parameterization: str = "optimal-zero-stable"
    weights: dict = field(default_factory=lambda: dict(IMPLICIT_WEIGHTS))
    explicit_weights: dict = field(default_factory=lambda: dict(EXPLICIT_WEIGHTS))
    multistart: int = 8
    seed: int = 0
    simplex: SimplexOptions = field(default_factory=SimplexOptions)
    max_evals: int = 100_000
    candidates: int = 3
    explicit_starts: int = 2
    start_near: MethodTableau | None = None
    spread: float = 0.05
    superconv_tol: float = 1e-7
    search_grid: int = 80
    final_grid: int = 400
    workers: int = 1

    def __post_init__(self):
        if self.s < 2:
            raise SearchError("s must be at least 2")
        if self.parameterization not in PARAMETERIZATIONS:
            raise SearchError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if self.multistart < 1:
            raise SearchError("multistart must be at least 1")
        if self.candidates < 1 or self.explicit_starts < 1:
            raise SearchError("candidates and explicit_starts must be at least 1")
        for w in (self.weights, self.explicit_weights):
            if any(not (val >= 0.0) for val in w.values()):
                raise SearchError("weights must be nonnegative")
        if self.start_near is not None and self.start_near.s != self.s:
            raise SearchError("start_near has a different stage count")

    @property
    def node_interval(self) -> tuple[float, float]:
        return (0.0, 1.0) if self.parameterization == "optimal-zero-stable" else (-1.0, 1.0)

    @property
    def n_implicit(self) -> int:
        s = self.s
        tail = s - 1 if self.parameterization == "optimal-zero-stable" else s * (s - 1)
        return (s - 1) + 1 + s * (s - 1) // 2 + tail

    @property
    def n_explicit(self) -> int:
        return self.s * (self.s - 1) // 2


def preset(name: str) -> SearchSpec:
    """Default settings per stage count: ``s2``, ``s3`` or ``s4``."""
    presets = {
        "s2": SearchSpec(2),
        "s3": SearchSpec(3, multistart=50),
        "s4": SearchSpec(4, parameterization="general-zero-stable", multistart=50,
                         weights={**IMPLICIT_WEIGHTS, "norms": 0.001}),
    }
    try:
        return presets[name]
    except KeyError:
        raise SearchError(f"unknown preset {name!r}; choose from {sorted(presets)}") from None


def _lower(s: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tril_indices(s, -1)


def decode(x, spec: SearchSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(c, P, R)`` from an implicit-phase parameter vector."""
    s = spec.s
    x = np.asarray(x, dtype=float)
    k = s - 1
    c = np.append(x[:k], 1.0)
    gamma = x[k]
    k += 1
    R = np.diag(np.full(s, gamma))
    m = s * (s - 1) // 2
    R[_lower(s)] = x[k:k + m]
    k += m
    if spec.parameterization == "optimal-zero-stable":
        v = np.append(x[k:], 1.0 - x[k:].sum())
        P = np.outer(np.ones(s), v)
    else:
        P = np.empty((s, s))
        P[:, :-1] = x[k:].reshape(s, s - 1)
        P[:, -1] = 1.0 - P[:, :-1].sum(axis=1)
    return c, P, R


def encode(tab: MethodTableau, spec: SearchSpec) -> np.ndarray:
    """Implicit-phase parameter vector of ``tab``."""
    s = tab.s
    parts = [tab.c[:-1], [tab.gamma], tab.R[_lower(s)]]
    if spec.parameterization == "optimal-zero-stable":
        parts.append(tab.P[0, :-1])
    else:
        parts.append(tab.P[:, :-1].ravel())
    return np.concatenate(parts)


def decode_s2(y, s: int) -> np.ndarray:
    S2 = np.zeros((s, s))
    S2[_lower(s)] = np.asarray(y, dtype=float)
    return S2


def _build(x, spec: SearchSpec) -> MethodTableau | None:
    c, P, R = decode(x, spec)
    lo, hi = spec.node_interval
    if not np.all(np.isfinite(x)) or R[0, 0] <= 0.0:
        return None
    if np.any(c <= lo) or np.any(c > hi):
        return None
    cs = np.sort(c)
    if np.min(np.diff(cs)) < MIN_NODE_GAP:
        return None
    try:
        return MethodTableau.from_coefficients(c, P, R, label="candidate")
    except (TableauError, linalg.SingularMatrixError, ValueError):
        return None


def _zero_stability_excess(P) -> float:
    lam = linalg.eigenvalues(P)
    k = int(np.argmin(np.abs(lam - 1.0)))
    rest = np.abs(np.delete(lam, k))
    return float(np.maximum(0.0, rest - 1.0 + 1e-6).sum())


# -- objectives ----------------------------------------------------------------

def implicit_terms(tab: MethodTableau, spec: SearchSpec) -> dict:
    s = tab.s
    _, _, worst = stability.is_a_stable(tab, stability.COARSE_A_SAMPLING)
    d = defect_d(s + 1, tab)
    fro = lambda A: float(np.linalg.norm(A))  # noqa: E731
    terms = {
        "a_stability": max(0.0, worst - 1.0) if math.isfinite(worst) else INVALID_PENALTY,
        "rho": min(stability_limit(tab), INVALID_PENALTY),
        "norms": fro(tab.P) + fro(tab.Q) + fro(tab.R),
        "defect": float(np.linalg.norm(d)),
        "superconv": float(abs(tab.v @ d)),
    }
    if spec.parameterization == "general-zero-stable":
        terms["zero_stability"] = _zero_stability_excess(tab.P)
    return terms


def stability_limit(tab: MethodTableau) -> float:
    try:
        return linalg.spectral_radius(linalg.lu_solve(tab.R, tab.Q))
    except linalg.SingularMatrixError:
        return math.inf


def implicit_objective(params, spec: SearchSpec) -> float:
    """Weighted design criteria of the implicit method; invalid points get a large penalty."""
    tab = _build(params, spec)
    if tab is None:
        return INVALID_PENALTY * (1.0 + float(np.linalg.norm(np.nan_to_num(params))))
    terms = implicit_terms(tab, spec)
    return float(sum(spec.weights.get(k, 0.0) * val for k, val in terms.items()))


def _search_scan(spec: SearchSpec, n: int | None = None) -> stability.StabilityScan:
    n = n or spec.search_grid
    if n == spec.final_grid:
        return stability.StabilityScan(nx=n, ny=n)
    return stability.StabilityScan(nx=n, ny=n, sector=stability.SectorSampling(n_radii=24))


def explicit_terms(params_s2, base: MethodTableau, spec: SearchSpec,
                   scan: stability.StabilityScan | None = None) -> dict:
    tab = base.replace(S2=decode_s2(params_s2, base.s))
    scan = scan or _search_scan(spec)
    Rl = tab.R @ extrap_defect_l(tab)
    return {
        "area_e": -stability.region_area(tab, scan, "explicit"),
        "area_alpha": -stability.region_area(tab, scan, "alpha"),
        "extrap_norms": float(np.linalg.norm(tab.S1) + np.linalg.norm(tab.S2)),
        "extrap_defect": float(np.linalg.norm(Rl)),
        "superconv_explicit": float(abs(tab.v @ Rl)),
    }


def explicit_objective(params_s2, base: MethodTableau, spec: SearchSpec,
                       scan: stability.StabilityScan | None = None) -> float:
    """Weighted extrapolation criteria for the strictly lower ``S2`` entries."""
    if not np.all(np.isfinite(params_s2)):
        return INVALID_PENALTY
    terms = explicit_terms(params_s2, base, spec, scan)
    return float(sum(spec.explicit_weights.get(k, 0.0) * val for k, val in terms.items()))


# -- polishing of the super-convergence conditions ------------------------------

def _superconv_implicit(x, spec) -> float:
    tab = _build(x, spec)
    if tab is None:
        return math.nan
    return float(tab.v @ defect_d(spec.s + 1, tab))


def polish_implicit(x, spec: SearchSpec, tol: float = 1e-14, max_iters: int = 20) -> np.ndarray | None:
    """Minimum-norm Newton steps on ``v^T d_{s+1} = 0``; ``None`` if it fails."""
    x = np.asarray(x, dtype=float).copy()
    for _ in range(max_iters):
        g = _superconv_implicit(x, spec)
        if not math.isfinite(g):
            return None
        if abs(g) <= tol:
            return x
        grad = np.empty_like(x)
        for i in range(x.size):
            h = 1e-7 * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            grad[i] = (_superconv_implicit(xp, spec) - _superconv_implicit(xm, spec)) / (2 * h)
        nrm2 = float(grad @ grad)
        if not (math.isfinite(nrm2) and nrm2 > 0.0):
            return None
        x = x - g * grad / nrm2
    g = _superconv_implicit(x, spec)
    return x if math.isfinite(g) and abs(g) <= 1e3 * tol else None


def polish_explicit(y, base: MethodTableau) -> np.ndarray:
    """Exact minimum-norm correction of ``S2`` for ``v^T R l_s = 0`` (the condition is affine)."""
    s = base.s
    y = np.asarray(y, dtype=float).copy()

    def g(y_):
        tab = base.replace(S2=decode_s2(y_, s))
        return float(tab.v @ tab.R @ extrap_defect_l(tab))

    if y.size == 0:
        return y
    g0 = g(np.zeros_like(y))
    a = np.array([g(np.eye(y.size)[i]) - g0 for i in range(y.size)])
    for _ in range(3):
        r = g(y)
        if r == 0.0:
            break
        y = y - r * a / float(a @ a)
    return y


# -- driver --------------------------------------------------------------------

@dataclass
class Candidate:
    tableau: MethodTableau
    report: CertificationReport
    area_alpha: float
    area_e: float
    implicit_value: float
    explicit_value: float

    @property
    def quality(self) -> float:
        return self.area_alpha + self.area_e


@dataclass
class SearchResult:
    candidates: list[Candidate]
    evals: int
    diagnostics: list[str]


class _Budget:
    def __init__(self, total: int):
        self.total = total
        self.used = 0

    def take(self, n: int) -> int:
        return max(0, min(n, self.total - self.used))


def _random_start(rng: np.random.Generator, spec: SearchSpec) -> np.ndarray:
    s = spec.s
    if spec.start_near is not None:
        base = encode(spec.start_near, spec)
        return base + spec.spread * rng.standard_normal(base.size) * np.maximum(1.0, np.abs(base))
    lo, hi = spec.node_interval
    c = np.sort(rng.uniform(lo, hi, s - 1))
    gamma = rng.uniform(0.2, 1.2)
    r = rng.normal(0.0, 0.5, s * (s - 1) // 2)
    if spec.parameterization == "optimal-zero-stable":
        tail = rng.normal(0.0, 1.0, s - 1)
    else:
        P = rng.normal(0.0, 0.5, (s, s)) + np.eye(s) * 0.5
        tail = P[:, :-1].ravel()
    return np.concatenate([c, [gamma], r, tail])


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def run_search(spec: SearchSpec) -> SearchResult:
    """Two-phase search; returns certified tableaus sorted by stability-region size.

    Deterministic for a given spec: random starts are drawn up front from
    ``seed`` and the parallel sets preserve their input order.
    """
    rng = np.random.default_rng(spec.seed)
    starts = []
    for _ in range(spec.multistart):
        for _ in range(1000):
            x0 = _random_start(rng, spec)
            if _build(x0, spec) is not None:
                break
        starts.append(x0)
    diagnostics = []
    budget = _Budget(spec.max_evals)
    per_start = budget.take(min(spec.simplex.max_evals, spec.max_evals // (2 * spec.multistart) or 1))

    def implicit_run(x0):
        opts = replace(spec.simplex, max_evals=max(per_start, 1))
        return nelder_mead(lambda x: implicit_objective(x, spec), x0, opts)

    runs = _map(implicit_run, starts, spec.workers)
    budget.used += sum(r.evals for r in runs)

    pool = []
    for k, run in enumerate(runs):
        x = polish_implicit(run.x, spec)
        tab = None if x is None else _build(x, spec)
        if tab is None:
            diagnostics.append(f"start {k}: polishing of the implicit super-convergence condition failed")
            continue
        ok, _, worst = stability.is_a_stable(tab)
        if not ok:
            diagnostics.append(f"start {k}: not A-stable (rho = {worst:.3g})")
            continue
        if spec.parameterization == "general-zero-stable" and _zero_stability_excess(tab.P) > 0.0:
            diagnostics.append(f"start {k}: not zero-stable")
            continue
        pool.append((implicit_objective(x, spec), k, tab))
    pool.sort(key=lambda item: (item[0], item[1]))
    # near-duplicates of the same local minimum are dropped
    chosen = []
    for val, k, tab in pool:
        if all(np.max(np.abs(tab.c - other.c)) > 1e-6 or abs(tab.gamma - other.gamma) > 1e-6
               for _, _, other in chosen):
            chosen.append((val, k, tab))
        if len(chosen) == spec.candidates:
            break

    n_ex = spec.n_explicit
    ex_starts = [np.zeros(n_ex)] + [rng.normal(0.0, 1.0, n_ex) for _ in range(spec.explicit_starts - 1)]
    remaining = budget.total - budget.used
    per_ex = max(1, min(spec.simplex.max_evals, remaining // max(1, len(chosen) * len(ex_starts))))
    scan = _search_scan(spec)

    def explicit_run(job):
        base, y0 = job
        y0 = polish_explicit(y0, base)
        if n_ex == 1:
            return SimplexResult(y0, explicit_objective(y0, base, spec, scan), 1, True)
        opts = replace(spec.simplex, max_evals=per_ex, xtol=1e-6)
        return nelder_mead(lambda y: explicit_objective(y, base, spec, scan), y0, opts)

    jobs = [(tab, y0) for _, _, tab in chosen for y0 in ex_starts]
    ex_runs = _map(explicit_run, jobs, spec.workers)
    budget.used += sum(r.evals for r in ex_runs)

    final_scan = _search_scan(spec, spec.final_grid)
    results = []
    for i, (val, k, tab) in enumerate(chosen):
        best = min(ex_runs[i * len(ex_starts):(i + 1) * len(ex_starts)], key=lambda r: r.fun)
        y = polish_explicit(best.x, tab)
        full = tab.replace(S2=decode_s2(y, spec.s), label=f"search-s{spec.s}-seed{spec.seed}-{len(results) + 1}")
        report = certify(full)
        failures = [f for f in report.failures() if not f.startswith("super-convergence")]
        sc = max(report.superconv_implicit, report.superconv_explicit)
        if failures or not sc < spec.superconv_tol:
            diagnostics.append(f"start {k}: certification failed ({', '.join(failures) or 'super-convergence'})")
            continue
        a_alpha = stability.region_area(full, final_scan, "alpha")
        a_e = stability.region_area(full, final_scan, "explicit")
        results.append(Candidate(full, report, a_alpha, a_e, val, best.fun))
    results.sort(key=lambda cand: -cand.quality)
    for j, cand in enumerate(results):
        label = f"search-s{spec.s}-seed{spec.seed}-{j + 1}"
        cand.tableau = MethodTableau.from_coefficients(cand.tableau.c, cand.tableau.P, cand.tableau.R,
                                                       cand.tableau.S2, label=label)
        cand.report.label = label
    if not results:
        diagnostics.append("no feasible candidate")
    return SearchResult(results, budget.used, diagnostics)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
