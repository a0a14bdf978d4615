"""Convergence experiments: Prothero-Robinson and linear advection-reaction."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .integrator import (IntegrationError, NewtonOptions, SplitOdeProblem, integrate)
from .methods import builtin, resolve
from .tableau import MethodTableau

log = logging.getLogger(__name__)

PR_STEPS = tuple(5.0 / (100 + 60 * i) for i in range(9))
AR_STEPS = tuple(x * 1e-3 for x in (4, 2, 1, 0.5, 0.25, 0.1, 0.05, 0.025))
AR_MID_STEPS = tuple(x * 1e-3 for x in (2, 1, 0.5, 0.25, 0.1))


# -- problems ---------------------------------------------------------------

def prothero_robinson(t_end: float = 5.0) -> SplitOdeProblem:
    """Stiff Prothero-Robinson pair with exact solution ``(cos t, sin t)``."""

    def f0(t, y):
        return np.array([0.0, y[0] + y[1] - math.sin(t)])

    def f1(t, y):
        return np.array([-1e6 * (y[0] - math.cos(t)) + 1e3 * (y[1] - math.sin(t)) - math.sin(t), 0.0])

    J1 = np.array([[-1e6, 1e3], [0.0, 0.0]])
    J0 = np.array([[0.0, 0.0], [1.0, 1.0]])

    def exact(t):
        return np.array([math.cos(t), math.sin(t)])

    return SplitOdeProblem(f0=f0, f1=f1, jac_f1=lambda t, y: J1, jac_f0=lambda t, y: J0,
                           u0=exact(0.0), t0=0.0, t_end=t_end, exact=exact,
                           stiffness=1.001e6, name="prothero-robinson")


@dataclass(frozen=True)
class AdvectionReaction:
    """Method-of-lines form of the linear advection-reaction system on (0, 1].

    Nodes ``x_j = j/m``, ``j = 1..m``; ``u`` is advected with speed 1 and
    inflow ``u(0,t) = 1 - sin(12t)^4``, ``v`` is not advected.  The state
    vector is ``[u_1..u_m, v_1..v_m]``.
    """

    m: int = 400
    k1: float = 1e6
    k2: float = 2e6
    s1: float = 0.0
    s2: float = 1.0
    speed: float = 1.0

    @property
    def h(self) -> float:
        return 1.0 / self.m

    @property
    def x(self) -> np.ndarray:
        return np.arange(1, self.m + 1) * self.h

    @staticmethod
    def inflow(t):
        return 1.0 - math.sin(12.0 * t) ** 4

    def ddx(self, u, u_left):
        """Fourth-order central differences inside, third-order upwind-biased near the ends."""
        h = self.h
        d = np.empty_like(u)
        d[2:-2] = (u[:-4] - 8.0 * u[1:-3] + 8.0 * u[3:-1] - u[4:]) / (12.0 * h)
        d[0] = (-2.0 * u_left - 3.0 * u[0] + 6.0 * u[1] - u[2]) / (6.0 * h)
        d[1] = (u_left - 6.0 * u[0] + 3.0 * u[1] + 2.0 * u[2]) / (6.0 * h)
        d[-2] = (u[-4] - 6.0 * u[-3] + 3.0 * u[-2] + 2.0 * u[-1]) / (6.0 * h)
        d[-1] = (-2.0 * u[-4] + 9.0 * u[-3] - 18.0 * u[-2] + 11.0 * u[-1]) / (6.0 * h)
        return d

    def f0(self, t, y):
        m = self.m
        out = np.empty_like(y)
        out[:m] = -self.speed * self.ddx(y[:m], self.inflow(t)) + self.s1
        out[m:] = self.s2
        return out

    def f1(self, t, y):
        m = self.m
        u, v = y[:m], y[m:]
        r = self.k1 * u - self.k2 * v
        return np.concatenate([-r, r])

    def jac_f1(self, t=None, y=None):
        m = self.m
        eye = sp.identity(m, format="csc")
        return sp.bmat([[-self.k1 * eye, self.k2 * eye], [self.k1 * eye, -self.k2 * eye]], format="csc")

    def initial(self) -> np.ndarray:
        u = 1.0 + self.s2 * self.x
        v = self.k1 / self.k2 * u + self.s2 / self.k2
        return np.concatenate([u, v])

    def problem(self, t_end: float = 1.0) -> SplitOdeProblem:
        J = self.jac_f1()
        return SplitOdeProblem(
            f0=self.f0, f1=self.f1, jac_f1=lambda t, y: J, u0=self.initial(), t0=0.0,
            t_end=t_end, stiffness=self.k1 + self.k2 + 7.0 * self.speed / self.h,
            name=f"advection-reaction(m={self.m})")


def advection_reaction(m: int = 48, t_end: float = 1.0) -> SplitOdeProblem:
    if m < 8:
        raise ValueError("advection-reaction needs at least 8 nodes")
    return AdvectionReaction(m=m).problem(t_end)


# -- error measures ---------------------------------------------------------

def scaled_max_error(y, y_ref) -> float:
    """``max_i |y_i - ref_i| / (1 + |ref_i|)``."""
    y, y_ref = np.asarray(y), np.asarray(y_ref)
    if y.shape != y_ref.shape:
        raise ValueError("shape mismatch")
    return float(np.max(np.abs(y - y_ref) / (1.0 + np.abs(y_ref))))


def l2_error(y, y_ref) -> float:
    """Unweighted Euclidean norm of the difference."""
    y, y_ref = np.asarray(y), np.asarray(y_ref)
    if y.shape != y_ref.shape:
        raise ValueError("shape mismatch")
    return float(np.linalg.norm(y - y_ref))


class InsufficientDataError(ValueError):
    pass


def convergence_order(step_sizes, errors) -> float:
    """Least-squares slope of ``log(err)`` against ``log(dt)``."""
    dt = np.asarray(step_sizes, dtype=float)
    err = np.asarray(errors, dtype=float)
    ok = (dt > 0) & (err > 0) & np.isfinite(err)
    if ok.sum() < 3:
        raise InsufficientDataError(f"need >= 3 positive (dt, err) pairs, got {int(ok.sum())}")
    slope, _ = np.polyfit(np.log(dt[ok]), np.log(err[ok]), 1)
    return float(slope)


# -- experiment driver --------------------------------------------------------

@dataclass
class ExperimentResult:
    method: str
    step_sizes: list[float]
    errors: list[float]
    failed: list[bool]
    norm: str
    fitted_order: float | None = None
    notes: list[str] = field(default_factory=list)

    def fit(self, subset=None) -> float:
        """Order over successful runs, optionally restricted to step sizes in ``subset``."""
        pairs = [(h, e) for h, e, f in zip(self.step_sizes, self.errors, self.failed) if not f]
        if subset is not None:
            keep = [float(h) for h in subset]
            pairs = [(h, e) for h, e in pairs if any(math.isclose(h, k, rel_tol=1e-9) for k in keep)]
        return convergence_order([p[0] for p in pairs], [p[1] for p in pairs])


EXPERIMENTS = ("prothero-robinson", "advection-reaction")


def _run_one(tab, problem, dt, error_fn, reference, fail_above, options):
    try:
        res = integrate(tab, problem, dt, "imex", options)
    except (IntegrationError, ValueError, FloatingPointError) as exc:
        log.info("%s dt=%g failed: %s", tab.label, dt, exc)
        return math.nan, True
    err = error_fn(res.y, reference)
    if not math.isfinite(err) or err > fail_above:
        return err, True
    return err, False


def ar_reference(problem: SplitOdeProblem, dt_ref: float, method: str = "imex-peer3s",
                 options: NewtonOptions | None = None) -> np.ndarray:
    """Reference state at ``t_end`` from a fine self-consistent run."""
    options = options or NewtonOptions(jacobian_reuse=True)
    return integrate(builtin(method), problem, dt_ref, "imex", options).y


def _ar_error_fn(m: int, quantity: str):
    if quantity == "total":
        return lambda y, ref: l2_error(y[:m] + y[m:], ref[:m] + ref[m:])
    if quantity == "full":
        return l2_error
    raise ValueError("quantity must be 'total' or 'full'")


def run_experiment(name: str, methods=None, step_sizes=None, *, m: int = 48,
                   reference_method: str = "imex-peer3s", reference_factor: int = 8,
                   reference: np.ndarray | None = None, quantity: str = "total",
                   workers: int = 1, fit_steps=None, fail_above: float = 1.0) -> list[ExperimentResult]:
    """Errors at the final time for each method and step size.

    Prothero-Robinson is measured against the analytic solution in the
    scaled maximum norm; advection-reaction against a reference run with
    ``reference_method`` at ``min(step_sizes)/reference_factor`` in the l2
    norm of ``u + v`` (``quantity='full'`` for the whole state).  Runs that
    blow up are flagged as failures, not raised.
    """
    methods = list(methods or ("imex-peer2s", "imex-peer3s", "imex-peer4s"))
    tabs = [m_ if isinstance(m_, MethodTableau) else resolve(m_) for m_ in methods]
    if name == "prothero-robinson":
        problem = prothero_robinson()
        steps = list(step_sizes or PR_STEPS)
        ref = problem.exact(problem.t_end)
        error_fn, norm = scaled_max_error, "scaled-max"
        options = NewtonOptions()
    elif name == "advection-reaction":
        problem = advection_reaction(m)
        steps = list(step_sizes or AR_STEPS)
        options = NewtonOptions(jacobian_reuse=True)
        if reference is None:
            reference = ar_reference(problem, min(steps) / reference_factor, reference_method, options)
        ref = reference
        error_fn = _ar_error_fn(m, quantity)
        norm = "l2-total" if quantity == "total" else "l2"
    else:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")

    jobs = [(tab, dt) for tab in tabs for dt in steps]

    def work(job):
        return _run_one(job[0], problem, job[1], error_fn, ref, fail_above, options)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(work, jobs))
    else:
        outcomes = [work(j) for j in jobs]

    results = []
    for k, tab in enumerate(tabs):
        chunk = outcomes[k * len(steps):(k + 1) * len(steps)]
        r = ExperimentResult(tab.label, list(steps), [e for e, _ in chunk], [f for _, f in chunk], norm)
        try:
            r.fitted_order = r.fit(fit_steps)
        except InsufficientDataError as exc:
            r.notes.append(str(exc))
        results.append(r)
    return results


def write_results_csv(results: list[ExperimentResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "dt", "error", "failed", "fitted_order"])
        for r in results:
            order = "" if r.fitted_order is None else f"{r.fitted_order:.17g}"
            for dt, err, failed in zip(r.step_sizes, r.errors, r.failed):
                w.writerow([r.method, f"{dt:.17g}", f"{err:.17g}", int(failed), order])
