"""Constant-step IMEX-Peer integration of split systems ``u' = f0(t,u) + f1(t,u)``.

One step maps the stage block ``w_{n-1}`` to ``w_n``:

    w_n = P w_{n-1} + dt Qhat f0(w_{n-1}) + dt Rhat f0(w_n)
                    + dt Q    f1(w_{n-1}) + dt R    f1(w_n).

``Rhat`` is strictly lower triangular and ``R`` lower triangular with
diagonal ``gamma``, so the stages are solved one after another, each from
``w - dt*gamma*f1(t_i, w) = rhs_i`` by Newton's method.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import linalg
from .tableau import MethodTableau

log = logging.getLogger(__name__)

Rhs = Callable[[float, np.ndarray], np.ndarray]


class IntegrationError(RuntimeError):
    pass


class NewtonError(IntegrationError):
    def __init__(self, message, stage=None, iterations=None, residual=None):
        super().__init__(message)
        self.stage = stage
        self.iterations = iterations
        self.residual = residual


class StepError(IntegrationError):
    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


def _zero(t, u):
    return np.zeros_like(u)


@dataclass
class SplitOdeProblem:
    """``u' = f0(t,u) + f1(t,u)`` with ``f0`` explicit and ``f1`` implicit.

    ``jac_f1`` may return a dense array or a scipy sparse matrix.
    ``stiffness`` is an upper bound on the Lipschitz constant of the full
    right-hand side, used to size the explicit substeps of the starting
    procedure.
    """

    f0: Rhs
    f1: Rhs
    jac_f1: Callable
    u0: np.ndarray
    t0: float
    t_end: float
    exact: Callable[[float], np.ndarray] | None = None
    jac_f0: Callable | None = None
    stiffness: float | None = None
    name: str = "problem"

    def __post_init__(self):
        self.u0 = np.asarray(self.u0)

    @property
    def dim(self) -> int:
        return self.u0.size

    def rhs(self, t, u):
        return self.f0(t, u) + self.f1(t, u)

    def jac(self, t, u):
        """Jacobian of the full right-hand side (finite differences for ``f0`` if not given)."""
        J1 = self.jac_f1(t, u)
        J0 = self.jac_f0(t, u) if self.jac_f0 is not None else fd_jacobian(self.f0, t, u)
        if sp.issparse(J0) or sp.issparse(J1):
            return sp.csc_matrix(J0) + sp.csc_matrix(J1)
        return np.asarray(J0) + np.asarray(J1)

    def all_implicit(self) -> "SplitOdeProblem":
        return replace(self, f0=_zero, f1=self.rhs, jac_f1=self.jac, jac_f0=None,
                       name=f"{self.name} (implicit)")

    def all_explicit(self) -> "SplitOdeProblem":
        return replace(self, f0=self.rhs, f1=_zero, jac_f1=_zero_jac, jac_f0=None,
                       name=f"{self.name} (explicit)")


def _zero_jac(t, u):
    return np.zeros((u.size, u.size), dtype=u.dtype)


def fd_jacobian(f: Rhs, t, u, eps: float = 1e-7) -> np.ndarray:
    """Forward-difference Jacobian; good to about sqrt(machine eps)."""
    u = np.asarray(u)
    f_u = f(t, u)
    J = np.empty((f_u.size, u.size), dtype=np.result_type(u, f_u, float))
    for k in range(u.size):
        h = eps * max(1.0, abs(u[k]))
        du = u.copy()
        du[k] += h
        J[:, k] = (f(t, du) - f_u) / h
    return J


@dataclass
class NewtonOptions:
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_iters: int = 25
    jacobian_reuse: bool = False

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("Newton tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class NewtonResult:
    w: np.ndarray
    f1: np.ndarray
    iterations: int
    residuals: list[float]


class _Factorization:
    """Factorized Newton matrix ``I - dt*gamma*J``, dense or sparse."""

    def __init__(self, J, scale: float):
        if sp.issparse(J):
            n = J.shape[0]
            M = (sp.identity(n, dtype=J.dtype, format="csc") - scale * J).tocsc()
            try:
                self._lu = spla.splu(M)
            except RuntimeError as exc:
                raise linalg.SingularMatrixError(str(exc)) from exc
            self.solve = self._lu.solve
        else:
            J = np.atleast_2d(np.asarray(J))
            self.solve = linalg.LUFactor(np.eye(J.shape[0]) - scale * J).solve
        self.scale = scale


class NewtonCache:
    """Keeps one factorization alive across stages when Jacobian reuse is on."""

    def __init__(self):
        self.fact: _Factorization | None = None


def newton_solve_stage(gamma: float, dt: float, rhs: np.ndarray, problem: SplitOdeProblem,
                       t_stage: float, guess: np.ndarray | None = None,
                       options: NewtonOptions | None = None,
                       cache: NewtonCache | None = None, stage: int | None = None) -> NewtonResult:
    """Solve ``w - dt*gamma*f1(t_stage, w) = rhs``.

    Converged when ``||residual||_inf <= abs_tol + rel_tol*||rhs||_inf``;
    the ``f1`` value at the returned ``w`` comes back for free.
    """
    options = options or NewtonOptions()
    rhs = np.asarray(rhs)
    if not np.all(np.isfinite(rhs)):
        raise NewtonError("non-finite stage right-hand side", stage=stage, iterations=0)
    scale = dt * gamma
    w = np.array(rhs if guess is None else guess, dtype=np.result_type(rhs, guess if guess is not None else rhs, float))
    tol = options.abs_tol + options.rel_tol * float(np.abs(rhs).max(initial=0.0))
    residuals = []
    reuse = options.jacobian_reuse and cache is not None
    for it in range(options.max_iters + 1):
        f = np.asarray(problem.f1(t_stage, w))
        G = w - scale * f - rhs
        res = float(np.abs(G).max(initial=0.0))
        residuals.append(res)
        if not math.isfinite(res):
            raise NewtonError("Newton iterate became non-finite", stage=stage, iterations=it, residual=res)
        # at least one correction: an accepted initial guess leaves a residual
        # of order tol in every stage, which accumulates over the steps
        if res <= tol and (it > 0 or res == 0.0):
            return NewtonResult(w, f, it, residuals)
        if it == options.max_iters:
            break
        if reuse and cache.fact is not None and cache.fact.scale == scale:
            fact = cache.fact
        else:
            try:
                fact = _Factorization(problem.jac_f1(t_stage, w), scale)
            except linalg.SingularMatrixError as exc:
                raise NewtonError(f"singular Newton matrix: {exc}", stage=stage,
                                  iterations=it, residual=res) from exc
            if reuse:
                cache.fact = fact
        w = w - fact.solve(G)
    raise NewtonError(f"Newton did not converge in {options.max_iters} iterations "
                      f"(residual {residuals[-1]:.3e}, tolerance {tol:.3e})",
                      stage=stage, iterations=options.max_iters, residual=residuals[-1])


@dataclass
class StageBlock:
    """Stage values ``w[i] ~ u(t + c_i*dt)`` with cached right-hand sides."""

    t: float
    dt: float
    w: np.ndarray
    f0: np.ndarray
    f1: np.ndarray
    newton_iterations: int = 0
    max_residual: float = 0.0

    @classmethod
    def from_stages(cls, tab: MethodTableau, problem: SplitOdeProblem, t: float, dt: float,
                    w) -> "StageBlock":
        w = np.array(w)
        if w.ndim == 1:
            w = w[:, None]
        times = t + tab.c * dt
        f0 = np.array([problem.f0(ti, wi) for ti, wi in zip(times, w)])
        f1 = np.array([problem.f1(ti, wi) for ti, wi in zip(times, w)])
        return cls(t, dt, w, f0, f1)

    def stage_times(self, tab: MethodTableau) -> np.ndarray:
        return self.t + tab.c * self.dt


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise IntegrationError(f"non-finite {what}")


def apply_p(P: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``P @ W`` written as ``W[-1] + P[:, :-1] @ (W[:-1] - W[-1])``.

    Exact for constant stage vectors given ``P e = e``, and rounding acts on
    stage differences, which are O(dt).
    """
    return W[-1] + P[:, :-1] @ (W[:-1] - W[-1])


def imex_step(tab: MethodTableau, problem: SplitOdeProblem, block: StageBlock,
              options: NewtonOptions | None = None, cache: NewtonCache | None = None) -> StageBlock:
    options = options or NewtonOptions()
    dt = block.dt
    t = block.t + dt
    s, c = tab.s, tab.c
    base = apply_p(tab.P, block.w) + dt * (tab.Qhat @ block.f0 + tab.Q @ block.f1)
    dtype = np.result_type(base, block.f0, block.f1)
    W = np.empty_like(block.w, dtype=dtype)
    F0 = np.empty_like(W)
    F1 = np.empty_like(W)
    iters = 0
    worst = 0.0
    for i in range(s):
        ti = t + c[i] * dt
        rhs = base[i] + dt * (tab.Rhat[i, :i] @ F0[:i] + tab.R[i, :i] @ F1[:i])
        res = newton_solve_stage(tab.gamma, dt, rhs, problem, ti, block.w[i], options, cache, stage=i)
        W[i] = res.w
        # f1 taken from the stage equation, so rounding in f1 is not amplified by the stiffness
        F1[i] = (res.w - rhs) / (dt * tab.gamma)
        F0[i] = problem.f0(ti, res.w)
        iters += res.iterations
        worst = max(worst, res.residuals[-1])
    _check_finite(F0, "explicit right-hand side")
    return StageBlock(t, dt, W, F0, F1, iters, worst)


def implicit_step(tab, problem, block, options=None, cache=None) -> StageBlock:
    """Peer step with the whole right-hand side treated implicitly."""
    merged = StageBlock(block.t, block.dt, block.w, np.zeros_like(block.f0), block.f0 + block.f1)
    return imex_step(tab, problem.all_implicit(), merged, options, cache)


def explicit_step(tab: MethodTableau, problem: SplitOdeProblem, block: StageBlock) -> StageBlock:
    """Explicit companion step: no nonlinear solves."""
    dt = block.dt
    t = block.t + dt
    F_prev = block.f0 + block.f1
    base = apply_p(tab.P, block.w) + dt * (tab.Qhat @ F_prev)
    W = np.empty_like(base)
    F = np.empty_like(base)
    for i in range(tab.s):
        W[i] = base[i] + dt * (tab.Rhat[i, :i] @ F[:i])
        F[i] = problem.rhs(t + tab.c[i] * dt, W[i])
    _check_finite(F, "right-hand side")
    return StageBlock(t, dt, W, F, np.zeros_like(F))


# -- starting procedure -----------------------------------------------------

def _rk4_to(f, t, u, t_target, hmax):
    n = max(1, math.ceil(abs(t_target - t) / hmax - 1e-12))
    h = (t_target - t) / n
    for k in range(n):
        tk = t + k * h
        k1 = f(tk, u)
        k2 = f(tk + 0.5 * h, u + 0.5 * h * k1)
        k3 = f(tk + 0.5 * h, u + 0.5 * h * k2)
        k4 = f(tk + h, u + h * k3)
        u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return u


def _rk4_sweep(f, t0, u0, times, hmax):
    """States at each of ``times`` (all >= t0) from one forward RK4 sweep."""
    out = {}
    t, u = t0, np.array(u0, dtype=float)
    for tt in sorted(set(times)):
        u = _rk4_to(f, t, u, tt, hmax)
        t = tt
        out[tt] = u
    return np.array([out[tt] for tt in times])


def starting_base_time(tab: MethodTableau, problem: SplitOdeProblem, dt: float) -> float:
    """Time ``t`` of the first stage block.

    With an exact solution, or all nodes non-negative, this is ``t0``.
    Otherwise the block is placed one step later so that every stage time
    ``t0 + dt + c_i*dt`` lies at or after ``t0`` (nodes satisfy c_i > -1):
    integrating a stiff problem backwards from ``t0`` is unstable.
    """
    if problem.exact is not None or tab.c.min() >= 0.0:
        return problem.t0
    if tab.c.min() <= -1.0:
        raise ValueError("nodes <= -1 need an exact solution for the starting stages")
    return problem.t0 + dt


def generate_starting_stages(tab: MethodTableau, problem: SplitOdeProblem, dt: float,
                             substeps: int = 50) -> StageBlock:
    """Stage block of order >= s+1 at :func:`starting_base_time`.

    Uses ``problem.exact`` when present; otherwise classical RK4 on the
    unsplit system with substep ``min(dt/substeps, 0.5/stiffness)``, and a
    Richardson-extrapolated second pass for ``s >= 4``.
    """
    if not dt > 0:
        raise ValueError("step size must be positive")
    tb = starting_base_time(tab, problem, dt)
    times = tb + tab.c * dt
    if problem.exact is not None:
        W = np.array([np.asarray(problem.exact(ti)) for ti in times])
    else:
        hmax = dt / substeps
        if problem.stiffness:
            hmax = min(hmax, 0.5 / problem.stiffness)
        try:
            W = _rk4_sweep(problem.rhs, problem.t0, problem.u0, times, hmax)
            if tab.s >= 4:
                W2 = _rk4_sweep(problem.rhs, problem.t0, problem.u0, times, 0.5 * hmax)
                W = W2 + (W2 - W) / 15.0
        except FloatingPointError as exc:
            raise IntegrationError(f"starting procedure failed: {exc}") from exc
        if not np.all(np.isfinite(W)):
            raise IntegrationError("starting procedure produced non-finite values")
    return StageBlock.from_stages(tab, problem, tb, dt, W)


# -- driver -----------------------------------------------------------------

@dataclass
class IntegrationResult:
    block: StageBlock
    steps: int
    newton_iterations: int
    residuals: list[float] = field(default_factory=list)

    @property
    def t(self) -> float:
        return self.block.t + self.block.dt  # c_s = 1: last stage sits on the grid

    @property
    def y(self) -> np.ndarray:
        return self.block.w[-1]


MODES = ("imex", "implicit", "explicit")


def step_count(t0: float, t_end: float, dt: float) -> int:
    ratio = (t_end - t0) / dt
    n = round(ratio)
    if abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
        raise ValueError(f"(t_end - t0)/dt = {ratio!r} is not an integer; constant steps only")
    if n < 0:
        raise ValueError("t_end must not precede t0")
    return n


def integrate(tab: MethodTableau, problem: SplitOdeProblem, dt: float, mode: str = "imex",
              options: NewtonOptions | None = None, start: StageBlock | None = None,
              trace=None) -> IntegrationResult:
    """Integrate from ``t0`` to ``t_end`` with constant step ``dt``.

    The returned block's last stage approximates ``u(t_end)``.  ``trace`` is
    an optional path or text stream receiving one CSV row per step.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    options = options or NewtonOptions()
    n_total = step_count(problem.t0, problem.t_end, dt)
    block = start if start is not None else generate_starting_stages(tab, problem, dt)
    # stages sit at block.t + c_i*dt, so the last one (c_s = 1) is already at block.t + dt
    done = step_count(problem.t0, block.t, dt) + 1
    n_steps = n_total - done
    if n_steps < 0:
        if n_total == 0 and block.t == problem.t0:
            return IntegrationResult(block, 0, 0, [])
        raise ValueError("integration interval shorter than the starting procedure")

    view = {"imex": problem, "implicit": problem.all_implicit(),
            "explicit": problem.all_explicit()}[mode]
    if mode == "implicit":
        block = StageBlock(block.t, block.dt, block.w, np.zeros_like(block.f0), block.f0 + block.f1)
    elif mode == "explicit":
        block = StageBlock(block.t, block.dt, block.w, block.f0 + block.f1, np.zeros_like(block.f1))

    cache = NewtonCache()
    writer, fh, own = _open_trace(trace)
    total_iters = 0
    residuals = []
    t0_block = block.t
    try:
        for k in range(1, n_steps + 1):
            try:
                if mode == "explicit":
                    nxt = explicit_step(tab, view, block)
                else:
                    nxt = imex_step(tab, view, block, options, cache)
            except (IntegrationError, linalg.SingularMatrixError, FloatingPointError) as exc:
                raise StepError(f"step {k} failed at t={block.t + dt:.17g}: {exc}",
                                step=k, time=block.t + dt) from exc
            # recompute the base time from the step index to avoid drift
            nxt.t = t0_block + k * dt
            block = nxt
            total_iters += block.newton_iterations
            residuals.append(block.max_residual)
            if writer is not None:
                writer.writerow([k, f"{block.t + dt:.17g}", block.newton_iterations,
                                 f"{block.max_residual:.17g}"])
    finally:
        if own:
            fh.close()
    return IntegrationResult(block, n_steps, total_iters, residuals)


def _open_trace(trace):
    if trace is None:
        return None, None, False
    if hasattr(trace, "write"):
        fh, own = trace, False
    else:
        fh, own = open(trace, "w", newline=""), True
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["step", "time", "newton_iterations", "max_stage_residual"])
    return writer, fh, own
