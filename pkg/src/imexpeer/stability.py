"""Linear stability of IMEX-Peer methods on the split Dahlquist equation.

For ``y' = lambda0 y + lambda1 y`` one step maps the stage vector through

    M(z0, z1) = (I - z0 R S2 - z1 R)^{-1} (P + z0 (Q + R S1) + z1 Q),

with ``z_k = dt * lambda_k``.  ``M(0, z)`` is the implicit method's
``M_im(z)`` and ``M(z, 0)`` the explicit companion's.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .tableau import MethodTableau

MEMBER_TOL = 1e-10
A_STABLE_TOL = 1e-8


def m_implicit(tab: MethodTableau, z: complex) -> np.ndarray:
    """``(I - zR)^{-1}(P + zQ)``; ``z = inf`` gives the limit ``-R^{-1} Q``.

    The sign of the limit does not affect its spectral radius ``rho(R^{-1} Q)``.
    """
    if np.isinf(z):
        return -linalg.lu_solve(tab.R, tab.Q).astype(complex)
    I = np.eye(tab.s)
    return linalg.lu_solve(I - z * tab.R, tab.P + z * tab.Q)


def m_imex(tab: MethodTableau, z0: complex, z1: complex) -> np.ndarray:
    I = np.eye(tab.s)
    RS2 = tab.R @ tab.S2
    A = I - z0 * RS2 - z1 * tab.R
    B = tab.P + z0 * (tab.Q + tab.R @ tab.S1) + z1 * tab.Q
    return linalg.lu_solve(A, B.astype(complex))


def m_explicit(tab: MethodTableau, z: complex) -> np.ndarray:
    return m_imex(tab, z, 0.0)


def rho_imex(tab: MethodTableau, z0, z1) -> np.ndarray:
    """Vectorized ``rho(M(z0, z1))`` over broadcastable arrays of ``z0`` and ``z1``."""
    z0 = np.asarray(z0, dtype=complex)[..., None, None]
    z1 = np.asarray(z1, dtype=complex)[..., None, None]
    I = np.eye(tab.s)
    A = I - z0 * (tab.R @ tab.S2) - z1 * tab.R
    B = tab.P + z0 * (tab.Q + tab.R @ tab.S1) + z1 * tab.Q
    A, B = np.broadcast_arrays(A, B)
    return linalg.batched_spectral_radius(A, B)


@dataclass(frozen=True)
class ASampling:
    """Sample set for the implicit method's A-stability test.

    ``rho(M_im(z))`` is subharmonic on the closed left half-plane, so its
    maximum sits on the imaginary axis or at infinity; the interior rays
    only guard against a careless boundary sample.
    """

    y_linear_max: float = 20.0
    n_linear: int = 2001
    y_log_max: float = 1e6
    n_log: int = 300
    ray_angles_deg: tuple[float, ...] = (15.0, 30.0, 45.0, 60.0, 75.0)
    ray_radii: tuple[float, ...] = tuple(np.logspace(-3, 6, 60))

    def points(self) -> np.ndarray:
        y = np.concatenate([np.linspace(0.0, self.y_linear_max, self.n_linear),
                            np.logspace(math.log10(self.y_linear_max), math.log10(self.y_log_max),
                                        self.n_log)])
        pts = [1j * y]
        r = np.asarray(self.ray_radii)
        for a in self.ray_angles_deg:
            pts.append(-r * np.exp(1j * np.deg2rad(a)))
        pts.append(-r)
        return np.concatenate(pts)


COARSE_A_SAMPLING = ASampling(n_linear=201, n_log=40, ray_radii=tuple(np.logspace(-2, 4, 10)))


def is_a_stable(tab: MethodTableau, sampling: ASampling | None = None) -> tuple[bool, complex, float]:
    """``(flag, worst_z, worst_rho)``; ``worst_z`` is ``inf`` if the limit ``R^{-1}Q`` dominates."""
    sampling = sampling or ASampling()
    z = sampling.points()
    rho = rho_imex(tab, np.zeros_like(z), z)
    k = int(np.argmax(rho))
    worst_z, worst_rho = complex(z[k]), float(rho[k])
    try:
        rho_inf = linalg.spectral_radius(linalg.lu_solve(tab.R, tab.Q))
    except linalg.SingularMatrixError:
        rho_inf = math.inf
    if rho_inf > worst_rho:
        worst_z, worst_rho = complex(math.inf), rho_inf
    return bool(worst_rho <= 1.0 + A_STABLE_TOL), worst_z, worst_rho


@dataclass(frozen=True)
class SectorSampling:
    """z1 samples for the sector ``|Im z1| <= -tan(alpha) Re z1``.

    Rays at fractions of ``alpha`` on both sides of the negative real axis,
    log-spaced radii, plus ``z1 = 0``; the limit ``|z1| -> inf`` is tested
    analytically through ``rho(R^{-1} Q)``.
    """

    fractions: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    r_min: float = 1e-3
    r_max: float = 1e6
    n_radii: int = 72

    def points(self, alpha_deg: float) -> np.ndarray:
        radii = np.logspace(math.log10(self.r_min), math.log10(self.r_max), self.n_radii)
        angles = sorted({f * alpha_deg for f in self.fractions} | {-f * alpha_deg for f in self.fractions})
        # widest angles first: they are the most likely to reject a point
        angles = sorted(angles, key=lambda a: -abs(a))
        pts = [np.zeros(1, dtype=complex)]
        for a in angles:
            pts.append(-radii[::-1] * np.exp(1j * np.deg2rad(a)))
        return np.concatenate(pts)


@dataclass
class StabilityScan:
    """Grid over the upper half of the z0-plane and the filled-in region data.

    Areas count only cells in the left half-plane and are doubled for the
    mirror image (``rho`` is invariant under conjugating both arguments).
    """

    alpha: float = 90.0
    x_lo: float = -12.0
    x_hi: float = 0.5
    y_lo: float = 0.0
    y_hi: float = 5.0
    nx: int = 400
    ny: int = 400
    axis_points: int = 4001
    sector: SectorSampling = field(default_factory=SectorSampling)
    kind: str | None = None
    member: np.ndarray | None = None
    area: float | None = None
    x_max: float | None = None
    y_max: float | None = None
    limit_ok: bool | None = None

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.nx

    @property
    def dy(self) -> float:
        return (self.y_hi - self.y_lo) / self.ny

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.x_lo + (np.arange(self.nx) + 0.5) * self.dx
        ys = self.y_lo + (np.arange(self.ny) + 0.5) * self.dy
        return xs, ys

    def copy_params(self, **changes) -> "StabilityScan":
        kw = dict(alpha=self.alpha, x_lo=self.x_lo, x_hi=self.x_hi, y_lo=self.y_lo,
                  y_hi=self.y_hi, nx=self.nx, ny=self.ny, axis_points=self.axis_points,
                  sector=self.sector)
        kw.update(changes)
        return StabilityScan(**kw)


def _membership(tab: MethodTableau, z0: np.ndarray, kind: str, alpha: float,
                sector: SectorSampling) -> np.ndarray:
    z0 = np.asarray(z0, dtype=complex)
    flat = z0.ravel()
    keep = rho_imex(tab, flat, 0.0) < 1.0 - MEMBER_TOL
    if kind == "alpha":
        for z1 in sector.points(alpha)[1:]:
            idx = np.flatnonzero(keep)
            if idx.size == 0:
                break
            keep[idx] = rho_imex(tab, flat[idx], z1) < 1.0 - MEMBER_TOL
    elif kind != "explicit":
        raise ValueError(f"kind must be 'alpha' or 'explicit', got {kind!r}")
    return keep.reshape(z0.shape)


def limit_ok(tab: MethodTableau) -> bool:
    try:
        return linalg.spectral_radius(linalg.lu_solve(tab.R, tab.Q)) < 1.0 - MEMBER_TOL
    except linalg.SingularMatrixError:
        return False


def region_member(tab: MethodTableau, z0, kind: str = "alpha", alpha: float = 90.0,
                  sector: SectorSampling | None = None) -> np.ndarray:
    """Boolean membership of ``z0`` points in ``S_alpha`` (kind='alpha') or ``S_E``."""
    sector = sector or SectorSampling()
    if kind == "alpha" and not limit_ok(tab):
        return np.zeros(np.shape(z0), dtype=bool)
    return _membership(tab, z0, kind, alpha, sector)


def _grid_area(tab: MethodTableau, scan: StabilityScan, kind: str) -> tuple[np.ndarray, float]:
    xs, ys = scan.centers()
    Z = xs[None, :] + 1j * ys[:, None]
    member = region_member(tab, Z, kind, scan.alpha, scan.sector)
    return member, 2.0 * scan.dx * scan.dy * int(member[:, xs <= 0.0].sum())


def region_area(tab: MethodTableau, scan: StabilityScan | None = None, kind: str = "alpha") -> float:
    """Area of ``S_alpha`` or ``S_E`` on the grid of ``scan``, without the axis scans."""
    return _grid_area(tab, scan or StabilityScan(), kind)[1]


def scan_region(tab: MethodTableau, scan: StabilityScan | None = None,
                kind: str = "alpha") -> StabilityScan:
    """Fill ``scan`` with membership, area and axis extents of ``S_alpha`` or ``S_E``."""
    scan = (scan or StabilityScan()).copy_params()
    scan.kind = kind
    scan.limit_ok = limit_ok(tab)
    scan.member, scan.area = _grid_area(tab, scan, kind)
    # axis extents on dedicated fine lines, the origin itself excluded
    n = scan.axis_points
    xr = -np.linspace(0.0, -scan.x_lo, n)[1:]
    on_x = region_member(tab, xr + 0j, kind, scan.alpha, scan.sector)
    scan.x_max = float(xr[on_x].min()) if on_x.any() else 0.0
    yr = np.linspace(0.0, scan.y_hi, n)[1:]
    on_y = region_member(tab, 1j * yr, kind, scan.alpha, scan.sector)
    scan.y_max = float(yr[on_y].max()) if on_y.any() else 0.0
    return scan


def region_summary(tab: MethodTableau, scan: StabilityScan | None = None) -> dict:
    """One row of the stability summary table: alpha, |S_alpha|, x_max, rho(R^-1 Q), |S_E|, y_max."""
    from .tableau import error_constants, rho_r_inv_q

    sa = scan_region(tab, scan, "alpha")
    se = scan_region(tab, scan, "explicit")
    c_im, c_ex = error_constants(tab)
    return {
        "method": tab.label,
        "alpha": sa.alpha,
        "area_alpha": sa.area,
        "x_max": sa.x_max,
        "rho_r_inv_q": rho_r_inv_q(tab),
        "area_e": se.area,
        "y_max": se.y_max,
        "c_im": c_im,
        "c_ex": c_ex,
        "_scans": (sa, se),
    }


def max_alpha(tab: MethodTableau, scan: StabilityScan | None = None, tol: float = 0.1) -> float:
    """Largest sector angle (degrees) for which ``S_alpha`` is non-empty on the grid."""
    scan = scan or StabilityScan(nx=80, ny=80)
    xs, ys = scan.centers()
    Z = (xs[None, :] + 1j * ys[:, None])[:, xs <= 0.0]

    def nonempty(alpha):
        return bool(region_member(tab, Z, "alpha", alpha, scan.sector).any())

    if nonempty(90.0):
        return 90.0
    if not nonempty(0.0):
        return 0.0
    lo, hi = 0.0, 90.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if nonempty(mid) else (lo, mid)
    return lo


def write_grid_csv(scan: StabilityScan, path) -> None:
    xs, ys = scan.centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "member"])
        for j, y in enumerate(ys):
            for i, x in enumerate(xs):
                w.writerow([f"{x:.17g}", f"{y:.17g}", int(scan.member[j, i])])
