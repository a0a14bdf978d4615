import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imexpeer import integrator, linalg, methods, stability
from imexpeer.stability import StabilityScan


def test_m_implicit_at_zero_is_p(builtin_tab):
    np.testing.assert_allclose(stability.m_implicit(builtin_tab, 0.0), builtin_tab.P, atol=1e-15)
    assert linalg.spectral_radius(stability.m_implicit(builtin_tab, 0.0)) == pytest.approx(1.0, abs=1e-9)


def test_m_implicit_limit(peer2s):
    M = stability.m_implicit(peer2s, math.inf)
    np.testing.assert_allclose(M, -np.linalg.solve(peer2s.R, peer2s.Q), atol=1e-14)
    assert linalg.spectral_radius(M) == pytest.approx(0.128, abs=0.0005)
    far = stability.m_implicit(peer2s, -1e9)
    np.testing.assert_allclose(far, M, atol=1e-7)


def test_m_implicit_stable_at_minus_one(peer2s):
    assert linalg.spectral_radius(stability.m_implicit(peer2s, -1.0)) < 1.0


def test_m_imex_degenerate_cases(builtin_tab):
    tab = builtin_tab
    np.testing.assert_allclose(stability.m_imex(tab, 0, 0), tab.P, atol=1e-15)
    z = -0.3 + 0.7j
    explicit = np.linalg.solve(np.eye(tab.s) - z * tab.R @ tab.S2, tab.P + z * tab.Q + z * tab.R @ tab.S1)
    np.testing.assert_allclose(stability.m_imex(tab, z, 0), explicit, atol=1e-13)
    np.testing.assert_allclose(stability.m_explicit(tab, z), explicit, atol=1e-13)
    np.testing.assert_allclose(stability.m_imex(tab, 0, z), stability.m_implicit(tab, z), atol=1e-13)


def test_rho_imex_vectorized(peer2s, rng):
    z0 = rng.uniform(-3, 0, 20) + 1j * rng.uniform(-2, 2, 20)
    z1 = rng.uniform(-50, 0, 20) + 1j * rng.uniform(-20, 20, 20)
    got = stability.rho_imex(peer2s, z0, z1)
    want = [linalg.spectral_radius(stability.m_imex(peer2s, a, b)) for a, b in zip(z0, z1)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_builtins_are_a_stable(builtin_tab):
    ok, _, rho = stability.is_a_stable(builtin_tab)
    assert ok and rho <= 1.0 + 1e-8


def test_flipped_gamma_is_not_a_stable(peer2s):
    # R -> -R keeps the structure checks out of the way and breaks stability on the real axis
    flipped = type(peer2s).from_coefficients(peer2s.c, peer2s.P, -peer2s.R, peer2s.S2, validate=False)
    ok, _, rho = stability.is_a_stable(flipped)
    assert not ok and rho > 1.0


def test_sampling_includes_axis_rays_and_real_line():
    pts = stability.ASampling().points()
    assert np.any(pts.real == 0) and np.any((pts.real < 0) & (pts.imag == 0))
    assert np.all(pts.real <= 0)


def test_sector_points_inside_sector():
    pts = stability.SectorSampling().points(60.0)
    nz = pts[pts != 0]
    angle = np.degrees(np.abs(np.angle(-nz)))
    assert np.all(angle <= 60.0 + 1e-9)
    assert pts[0] == 0


@pytest.mark.parametrize("z0", [-0.5, -0.2 + 0.3j, -1.0 + 0.1j])
def test_conjugate_symmetry(builtin_tab, z0):
    z1 = -3.0 + 2.0j
    a = stability.rho_imex(builtin_tab, z0, z1)
    b = stability.rho_imex(builtin_tab, np.conj(z0), np.conj(z1))
    assert abs(a - b) < 1e-12


def test_sector_monotone_and_inside_explicit(builtin_tab):
    scan = StabilityScan(nx=60, ny=30)
    xs, ys = scan.centers()
    Z = xs[None, :] + 1j * ys[:, None]
    s90 = stability.region_member(builtin_tab, Z, "alpha", 90.0)
    s45 = stability.region_member(builtin_tab, Z, "alpha", 45.0)
    se = stability.region_member(builtin_tab, Z, "explicit")
    assert np.all(s45 | ~s90)
    assert np.all(se | ~s45)


def test_area_converges_with_grid(peer2s):
    coarse = stability.region_area(peer2s, StabilityScan(nx=200, ny=200), "explicit")
    fine = stability.region_area(peer2s, StabilityScan(nx=400, ny=400), "explicit")
    assert abs(coarse - fine) / fine < 0.02


def test_two_stage_explicit_region(peer2s):
    scan = stability.scan_region(peer2s, StabilityScan(), "explicit")
    assert scan.area == pytest.approx(4.47, rel=0.05)
    assert scan.y_max == pytest.approx(1.21, abs=0.02)


@pytest.mark.slow
def test_two_stage_sector_region(peer2s):
    scan = stability.scan_region(peer2s, StabilityScan(), "alpha")
    assert scan.area == pytest.approx(2.15, rel=0.05)
    assert scan.x_max == pytest.approx(-1.41, abs=0.03)


def test_explicit_membership_gives_bounded_iterates(peer2s):
    scan = stability.scan_region(peer2s, StabilityScan(nx=100, ny=40), "explicit")
    z = 0.9 * scan.x_max
    assert stability.region_member(peer2s, np.array([z + 0j]), "explicit")[0]
    lam, dt = z, 1.0
    prob = integrator.SplitOdeProblem(lambda t, u: lam * u, lambda t, u: 0 * u,
                                      lambda t, u: np.zeros((1, 1)), np.array([1.0]), 0.0, 2000.0)
    start = integrator.StageBlock.from_stages(peer2s, prob, 0.0, dt, np.exp(lam * peer2s.c)[:, None])
    res = integrator.integrate(peer2s, prob, dt, mode="explicit", start=start)
    assert np.abs(res.block.w).max() < 10.0


def test_max_alpha_of_builtin(peer2s):
    assert stability.max_alpha(peer2s, StabilityScan(nx=40, ny=20)) == 90.0


def test_scan_kind_validated(peer2s):
    with pytest.raises(ValueError):
        stability.region_member(peer2s, np.array([-1.0 + 0j]), "bogus")


def test_grid_csv(tmp_path, peer2s):
    scan = stability.scan_region(peer2s, StabilityScan(nx=8, ny=4), "explicit")
    path = tmp_path / "grid.csv"
    stability.write_grid_csv(scan, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 8 * 4


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 0), st.floats(0, 5), st.floats(-100, 0), st.floats(-100, 100))
def test_conjugation_invariance_property(x0, y0, x1, y1):
    tab = methods.builtin("imex-peer3s")
    a = stability.rho_imex(tab, complex(x0, y0), complex(x1, y1))
    b = stability.rho_imex(tab, complex(x0, -y0), complex(x1, -y1))
    assert abs(a - b) <= 1e-12 * max(1.0, a)
