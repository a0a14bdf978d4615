"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture.

Run alone with ``pytest -v -m acceptance tests/test_acceptance.py``.  The
whole file takes roughly ten minutes on one core, dominated by the m=400
advection-reaction ladder.
"""

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from imexpeer import experiments, integrator as it, methods, search, stability
from imexpeer.integrator import NewtonOptions, SplitOdeProblem, StageBlock
from imexpeer.tableau import (defect_d, error_constants, extrap_defect_l, rho_r_inv_q,
                              zero_stability)

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

NAMES = methods.BUILTIN_NAMES
RHO = dict(zip(NAMES, (0.128, 0.552, 0.542)))
C_IM = dict(zip(NAMES, (0.237, 0.124, 0.0642)))
C_EX = dict(zip(NAMES, (0.323, 0.168, 0.117)))
AREA_E = dict(zip(NAMES, (4.47, 6.11, 4.39)))
AREA_ALPHA = dict(zip(NAMES, (2.15, 2.67, 1.07)))
X_MAX = dict(zip(NAMES, (-1.41, -1.58, -1.45)))
Y_MAX = dict(zip(NAMES, (1.21, 1.69, 1.00)))
PR_BANDS = dict(zip(NAMES, ((2.9, 3.2), (3.7, 4.2), (4.8, 5.5))))


@pytest.fixture
def report(capsys):
    """Print the verdict line for a criterion, then fail with the details if needed."""

    def emit(n, title, checks, elapsed, limit):
        failures = [msg for ok, msg in checks if not ok]
        if elapsed > limit:
            failures.append(f"runtime {elapsed:.1f}s > {limit:g}s")
        verdict = "PASS" if not failures else "FAIL"
        with capsys.disabled():
            print(f"\n{verdict} criterion {n}: {title} ({elapsed:.1f}s)")
            for msg in failures:
                print(f"    {msg}")
        assert not failures, "; ".join(failures)

    return emit


def within(value, target, rel=None, abs_=None):
    tol = rel * abs(target) if rel is not None else abs_
    return abs(value - target) <= tol


def test_criterion_1_certification(report):
    t0 = time.perf_counter()
    checks = []
    for name in NAMES:
        tab = methods.builtin(name)
        s = tab.s
        d = max(np.abs(defect_d(j, tab)).max() for j in range(1, s + 1))
        sc_im = abs(tab.v @ defect_d(s + 1, tab))
        sc_ex = abs(tab.v @ tab.R @ extrap_defect_l(tab))
        pre = np.abs(tab.P.sum(axis=1) - 1.0).max()
        zs, optimal, lam = zero_stability(tab.P)
        expect_optimal = s < 4
        checks += [
            (d < 1e-10, f"{name}: max ||d_j|| = {d:.2e}"),
            (sc_im < 1e-9, f"{name}: |v d_(s+1)| = {sc_im:.2e}"),
            (sc_ex < 1e-9, f"{name}: |v R l_s| = {sc_ex:.2e}"),
            (pre < 1e-12, f"{name}: |P e - e| = {pre:.2e}"),
            (zs and optimal == expect_optimal, f"{name}: eig(P) = {np.round(lam, 6)}"),
        ]
    report(1, "tableau certification", checks, time.perf_counter() - t0, 1.0)


def test_criterion_2_spectral_radii(report):
    t0 = time.perf_counter()
    checks = []
    for name in NAMES:
        rho = rho_r_inv_q(methods.builtin(name))
        checks.append((within(rho, RHO[name], rel=0.005), f"{name}: rho = {rho:.5f}, want {RHO[name]}"))
    report(2, "spectral radii of R^-1 Q", checks, time.perf_counter() - t0, 1.0)


def test_criterion_3_error_constants(report):
    t0 = time.perf_counter()
    checks = []
    for name in NAMES:
        c_im, c_ex = error_constants(methods.builtin(name))
        checks += [
            (within(c_im, C_IM[name], rel=0.01), f"{name}: c_im = {c_im:.5f}, want {C_IM[name]}"),
            (within(c_ex, C_EX[name], rel=0.01), f"{name}: c_ex = {c_ex:.5f}, want {C_EX[name]}"),
        ]
    report(3, "error constants", checks, time.perf_counter() - t0, 1.0)


def test_criterion_4_a_stability(report):
    t0 = time.perf_counter()
    checks = []
    for name in NAMES:
        tab = methods.builtin(name)
        ok, z, rho = stability.is_a_stable(tab)
        lim = rho_r_inv_q(tab)
        checks.append((ok and lim <= 1.0, f"{name}: worst rho {rho:.6f} at {z}, limit {lim:.4f}"))
    base = methods.builtin("imex-peer2s")
    flipped = type(base).from_coefficients(base.c, base.P, -base.R, base.S2, validate=False)
    ok, _, rho = stability.is_a_stable(flipped)
    checks.append((not ok, f"gamma-flipped control accepted (worst rho {rho:.3f})"))
    report(4, "A-stability", checks, time.perf_counter() - t0, 5.0)


def test_criterion_5_regions(report):
    t0 = time.perf_counter()
    scan = stability.StabilityScan(alpha=90.0, nx=400, ny=400)
    with ThreadPoolExecutor(max_workers=search.default_workers()) as pool:
        rows = list(pool.map(lambda n: stability.region_summary(methods.builtin(n), scan), NAMES))
    checks = []
    for name, row in zip(NAMES, rows):
        checks += [
            (within(row["area_e"], AREA_E[name], rel=0.05), f"{name}: |S_E| = {row['area_e']:.4f}, want {AREA_E[name]}"),
            (within(row["area_alpha"], AREA_ALPHA[name], rel=0.05),
             f"{name}: |S_alpha| = {row['area_alpha']:.4f}, want {AREA_ALPHA[name]}"),
            (within(row["x_max"], X_MAX[name], abs_=0.05), f"{name}: x_max = {row['x_max']:.4f}, want {X_MAX[name]}"),
            (within(row["y_max"], Y_MAX[name], abs_=0.03), f"{name}: y_max = {row['y_max']:.4f}, want {Y_MAX[name]}"),
        ]
    report(5, "stability regions at 400x400", checks, time.perf_counter() - t0, 120.0)


def test_criterion_6_prothero_robinson(report):
    t0 = time.perf_counter()
    results = experiments.run_experiment("prothero-robinson", NAMES, workers=search.default_workers())
    checks = []
    for r in results:
        lo, hi = PR_BANDS[r.method]
        q = r.fitted_order
        checks.append((q is not None and lo <= q <= hi, f"{r.method}: order {q}, want [{lo}, {hi}]"))
    report(6, "Prothero-Robinson orders", checks, time.perf_counter() - t0, 30.0)


def test_criterion_7_advection_reaction(report):
    t0 = time.perf_counter()
    m, mid, small = 400, experiments.AR_MID_STEPS, 2.5e-5
    problem = experiments.advection_reaction(m)
    ref = experiments.ar_reference(problem, small / 8)
    workers = search.default_workers()
    results = experiments.run_experiment("advection-reaction", NAMES[:2], mid, m=m, reference=ref,
                                         workers=workers)
    results += experiments.run_experiment("advection-reaction", NAMES[2:], mid + (small,), m=m,
                                          reference=ref, workers=workers, fit_steps=mid)
    checks = []
    for r, tab in zip(results, map(methods.builtin, NAMES)):
        q, want = r.fitted_order, tab.s + 1
        errs = ", ".join(f"{e:.2e}" for e in r.errors)
        checks.append((q is not None and abs(q - want) <= 0.4,
                       f"{r.method}: order {q if q is None else round(q, 3)}, want {want} +- 0.4 (errors {errs})"))
    e_small = results[2].errors[-1]
    checks.append((e_small <= 1e-8, f"imex-peer4s: error {e_small:.2e} at dt=2.5e-5, want <= 1e-8"))
    report(7, "advection-reaction orders at m=400", checks, time.perf_counter() - t0, 600.0)


def dahlquist(z0, z1, t_end):
    return SplitOdeProblem(lambda t, u: z0 * u, lambda t, u: z1 * u, lambda t, u: np.array([[z1]]),
                           np.array([1.0 + 0j]), 0.0, t_end)


def test_criterion_8_cross_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    options = NewtonOptions(abs_tol=1e-300, rel_tol=1e-15)
    checks = []
    for name in NAMES:
        tab = methods.builtin(name)
        worst = 0.0
        for _ in range(50):
            z0 = complex(-3 * rng.random(), 3 * rng.uniform(-1, 1))
            z1 = complex(-200 * rng.random(), 200 * rng.uniform(-1, 1))
            prob = dahlquist(z0, z1, 21.0)
            w0 = rng.standard_normal((tab.s, 1)) + 1j * rng.standard_normal((tab.s, 1))
            start = StageBlock.from_stages(tab, prob, 0.0, 1.0, w0)
            res = it.integrate(tab, prob, 1.0, start=start, options=options)
            want = np.linalg.matrix_power(stability.m_imex(tab, z0, z1), res.steps) @ w0[:, 0]
            scale = max(1.0, np.abs(want).max())
            worst = max(worst, np.abs(res.block.w[:, 0] - want).max() / scale)
            assert res.steps == 20
        checks.append((worst <= 1e-10, f"{name}: worst relative deviation {worst:.2e}"))
    report(8, "integrator against M(z0, z1)^n", checks, time.perf_counter() - t0, 60.0)


def test_criterion_9_search(report):
    t0 = time.perf_counter()
    spec = search.preset("s2")
    res = search.run_search(spec)
    checks = [(res.evals <= 100_000, f"{res.evals} objective evaluations"),
              (bool(res.candidates), f"no candidate: {res.diagnostics}")]
    for cand in res.candidates:
        ok, _, rho = stability.is_a_stable(cand.tableau)
        t = cand.tableau
        sc_im = abs(t.v @ defect_d(3, t))
        sc_ex = abs(t.v @ t.R @ extrap_defect_l(t))
        checks += [(ok, f"{t.label}: A-stability sampling fails (rho {rho:.4f})"),
                   (sc_im < 1e-7 and sc_ex < 1e-7, f"{t.label}: residuals {sc_im:.1e}, {sc_ex:.1e}")]
    report(9, f"seeded s=2 search ({len(res.candidates)} candidates, {res.evals} evaluations)",
           checks, time.perf_counter() - t0, 300.0)


def test_criterion_10_newton(report):
    t0 = time.perf_counter()
    cubic = SplitOdeProblem(lambda t, u: 0 * u, lambda t, u: -u**3, lambda t, u: np.diag(-3 * u**2),
                            np.array([1.0]), 0.0, 1.0)
    res = it.newton_solve_stage(1.0, 1.0, np.array([1.0]), cubic, 0.0,
                                options=NewtonOptions(abs_tol=1e-15, rel_tol=1e-15))
    r = res.residuals
    ratios = [r[k + 1] / r[k] ** 2 for k in range(1, len(r) - 1) if r[k + 1] > 1e-15]
    lam, gamma, dt, rhs = -1e6, 0.4, 0.01, np.array([0.7])
    linear = SplitOdeProblem(lambda t, u: 0 * u, lambda t, u: lam * u, lambda t, u: np.array([[lam]]),
                             np.array([1.0]), 0.0, 1.0)
    w = it.newton_solve_stage(gamma, dt, rhs, linear, 0.0, guess=np.array([0.3])).w[0]
    exact = rhs[0] / (1 - dt * gamma * lam)
    rel = abs(w - exact) / abs(exact)
    checks = [(bool(ratios) and max(ratios) < 10.0, f"residuals {r} are not quadratically contracting"),
              (rel <= 1e-13, f"linear stiff scalar: relative error {rel:.2e}")]
    report(10, "Newton stage solver", checks, time.perf_counter() - t0, 1.0)
