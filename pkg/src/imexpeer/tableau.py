"""Coefficient sets of s-stage IMEX-Peer methods and their certification.

A method is fixed by its nodes ``c``, the matrices ``P`` and ``R`` (lower
triangular, constant diagonal ``gamma``) and the strictly lower triangular
extrapolation matrix ``S2``.  Everything else is derived:

* ``Q`` from the stage-order-s conditions,
* ``S1`` from the order-s extrapolation conditions,
* ``Qhat = Q + R S1`` and ``Rhat = R S2`` for the explicit companion,
* ``v`` with ``(I - P^T) v = 0``, ``v^T e = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg

NODE_SEP = 1e-12
STRUCT_TOL = 1e-12


class TableauError(ValueError):
    """Structural invariant of a tableau is violated."""


class TableauFormatError(TableauError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        super().__init__(f"{', '.join(loc)}: {message}" if loc else message)
        self.line = line
        self.field = field


def vandermonde_pair(c) -> tuple[np.ndarray, np.ndarray]:
    """``V0 = (c_i^(j-1))`` and ``V1 = ((c_i - 1)^(j-1))``, with 0**0 = 1."""
    c = np.asarray(c, dtype=float)
    s = c.size
    powers = np.arange(s)
    return c[:, None] ** powers, (c - 1.0)[:, None] ** powers


def compute_q(P, R, c) -> np.ndarray:
    """The unique ``Q`` giving stage order s for the given ``P``, ``R``, ``c``."""
    P = np.asarray(P, dtype=float)
    R = np.asarray(R, dtype=float)
    c = np.asarray(c, dtype=float)
    s = c.size
    V0, V1 = vandermonde_pair(c)
    C = np.diag(c)
    D = np.diag(np.arange(1.0, s + 1.0))
    lhs = C @ V0 - P @ (C - np.eye(s)) @ V1 - R @ V0 @ D
    # Q (V1 D) = lhs  <=>  (V1 D)^T Q^T = lhs^T
    return linalg.lu_solve((V1 @ D).T, lhs.T).T


def compute_s1(S2, c) -> np.ndarray:
    """``S1 = (I - S2) V0 V1^{-1}``."""
    S2 = np.asarray(S2, dtype=float)
    V0, V1 = vandermonde_pair(c)
    lhs = (np.eye(S2.shape[0]) - S2) @ V0
    return linalg.lu_solve(V1.T, lhs.T).T


def _defect(j, c, P, Q, R) -> np.ndarray:
    e = np.ones_like(c)
    return (c**j - P @ (c - e) ** j - j * (Q @ (c - e) ** (j - 1))
            - j * (R @ c ** (j - 1))) / math.factorial(j)


def _extrap_defect(j, c, S1, S2) -> np.ndarray:
    return ((np.eye(c.size) - S2) @ c**j - S1 @ (c - 1.0) ** j) / math.factorial(j)


def left_eigvec(P, tol: float = 1e-8) -> np.ndarray:
    """Left eigenvector of ``P`` for eigenvalue 1, normalized to ``v^T e = 1``."""
    P = np.asarray(P, dtype=float)
    v = linalg.null_vector(np.eye(P.shape[0]) - P.T, tol=tol)
    total = v.sum()
    if abs(total) < tol * np.abs(v).max():
        raise TableauError("left eigenvector of P is orthogonal to e; cannot normalize")
    return v / total


@dataclass(frozen=True, eq=False)
class MethodTableau:
    """All coefficients of one s-stage IMEX-Peer method.

    Build with :meth:`from_coefficients`; the derived matrices are never
    supplied by hand.
    """

    label: str
    c: np.ndarray
    P: np.ndarray
    R: np.ndarray
    S2: np.ndarray
    Q: np.ndarray
    S1: np.ndarray
    Qhat: np.ndarray
    Rhat: np.ndarray
    v: np.ndarray | None
    warnings: tuple[str, ...] = field(default=())

    @property
    def s(self) -> int:
        return self.c.size

    @property
    def gamma(self) -> float:
        return float(self.R[0, 0])

    @classmethod
    def from_coefficients(cls, c, P, R, S2=None, label: str = "custom",
                          validate: bool = True) -> "MethodTableau":
        c = np.array(c, dtype=float)
        s = c.size
        P = np.array(P, dtype=float).reshape(s, s)
        R = np.array(R, dtype=float).reshape(s, s)
        S2 = np.zeros((s, s)) if S2 is None else np.array(S2, dtype=float).reshape(s, s)
        warnings = check_structure(c, P, R, S2) if validate else ()
        if validate:
            # Rows of P sum to 1 only to the printed digits; a residual of 1e-15
            # per step accumulates linearly in the global error.
            P[:, -1] = 1.0 - P[:, :-1].sum(axis=1)
        Q = compute_q(P, R, c)
        S1 = compute_s1(S2, c)
        try:
            v = left_eigvec(P)
        except (ValueError, linalg.SingularMatrixError):
            if validate:
                raise
            v = None
        for a in (c, P, R, S2, Q, S1):
            a.setflags(write=False)
        Qhat = Q + R @ S1
        Rhat = R @ S2
        Qhat.setflags(write=False)
        Rhat.setflags(write=False)
        if v is not None:
            v.setflags(write=False)
        return cls(label, c, P, R, S2, Q, S1, Qhat, Rhat, v, tuple(warnings))

    def replace(self, **changes) -> "MethodTableau":
        """Rebuild with some of the free coefficients replaced."""
        kw = dict(c=self.c, P=self.P, R=self.R, S2=self.S2, label=self.label)
        kw.update(changes)
        return MethodTableau.from_coefficients(**kw)

    def defect_d(self, j: int) -> np.ndarray:
        return defect_d(j, self)

    def extrap_defect_l(self) -> np.ndarray:
        return extrap_defect_l(self)


def check_structure(c, P, R, S2) -> list[str]:
    """Raise :class:`TableauError` on invariant violations; return soft warnings."""
    s = c.size
    if not 2 <= s <= 8:
        raise TableauError(f"stage count {s} outside supported range 2..8")
    for name, A in (("c", c), ("P", P), ("R", R), ("S2", S2)):
        if not np.all(np.isfinite(A)):
            raise TableauError(f"{name} has non-finite entries")
    gaps = np.abs(c[:, None] - c[None, :]) + np.eye(s)
    if gaps.min() < NODE_SEP:
        i, j = np.argwhere(gaps < NODE_SEP)[0]
        raise TableauError(f"nodes c[{i}] and c[{j}] coincide ({float(c[i])!r})")
    if abs(c[-1] - 1.0) > STRUCT_TOL:
        raise TableauError(f"last node must be 1, got {float(c[-1])!r}")
    if np.any(np.triu(R, 1) != 0.0):
        raise TableauError("R must be lower triangular")
    gamma = R[0, 0]
    if not gamma > 0.0:
        raise TableauError(f"diagonal gamma of R must be positive, got {gamma!r}")
    if np.any(np.abs(np.diag(R) - gamma) > STRUCT_TOL * max(1.0, abs(gamma))):
        raise TableauError("R must have a constant diagonal")
    if np.any(np.triu(S2) != 0.0):
        raise TableauError("S2 must be strictly lower triangular")
    if np.abs(P.sum(axis=1) - 1.0).max() > STRUCT_TOL * max(1.0, np.abs(P).max()):
        raise TableauError("P is not pre-consistent (P e != e)")
    warnings = []
    lo = 0.0 if s <= 3 else -1.0
    if np.any(c <= lo) or np.any(c > 1.0):
        warnings.append(f"nodes outside the customary interval ({lo:g}, 1] for s={s}")
    return warnings


def defect_d(j: int, tab: MethodTableau) -> np.ndarray:
    """Stage-order defect vector ``d_j``."""
    if j < 1:
        raise ValueError("defect index must be >= 1")
    return _defect(j, tab.c, tab.P, tab.Q, tab.R)


def extrap_defect_l(tab: MethodTableau) -> np.ndarray:
    """Leading extrapolation defect ``l_s``."""
    return _extrap_defect(tab.s, tab.c, tab.S1, tab.S2)


NORMS = {"euclidean": 2, "max": np.inf}
# Matches the reference error constants of all three builtin methods.
ERROR_CONSTANT_NORM = "euclidean"


def error_constants(tab: MethodTableau, norm: str = ERROR_CONSTANT_NORM) -> tuple[float, float]:
    """``(c_im, c_ex) = (||d_{s+1}||, ||R l_s||)``."""
    ord_ = NORMS[norm]
    return (float(np.linalg.norm(defect_d(tab.s + 1, tab), ord_)),
            float(np.linalg.norm(tab.R @ extrap_defect_l(tab), ord_)))


def rho_r_inv_q(tab: MethodTableau) -> float:
    return linalg.spectral_radius(linalg.lu_solve(tab.R, tab.Q))


@dataclass
class CertificationReport:
    label: str
    s: int
    stage_order_defects: list[float]
    superconv_implicit: float
    superconv_explicit: float
    preconsistency: float
    eig_p: list[complex]
    zero_stable: bool
    optimally_zero_stable: bool
    a_stable: bool
    a_stable_worst_z: complex
    a_stable_worst_rho: float
    rho_r_inv_q: float
    c_im: float
    c_ex: float
    norm: str
    p_power_defect: float
    extrap_order_residual: float
    warnings: list[str] = field(default_factory=list)

    stage_order_tol: float = 1e-10
    superconv_tol: float = 1e-9

    @property
    def stage_order_ok(self) -> bool:
        return max(self.stage_order_defects[: self.s]) < self.stage_order_tol

    @property
    def superconvergent(self) -> bool:
        return (self.superconv_implicit < self.superconv_tol
                and self.superconv_explicit < self.superconv_tol)

    @property
    def passed(self) -> bool:
        return (self.stage_order_ok and self.superconvergent and self.zero_stable
                and self.a_stable and self.preconsistency < 1e-12)

    def failures(self) -> list[str]:
        out = []
        if not self.stage_order_ok:
            out.append("stage order")
        if self.superconv_implicit >= self.superconv_tol:
            out.append("super-convergence (implicit)")
        if self.superconv_explicit >= self.superconv_tol:
            out.append("super-convergence (explicit)")
        if self.preconsistency >= 1e-12:
            out.append("pre-consistency")
        if not self.zero_stable:
            out.append("zero-stability")
        if not self.a_stable:
            out.append("A-stability")
        return out

    def rows(self) -> list[tuple[str, str]]:
        g = lambda x: f"{x:.17g}"  # noqa: E731
        rows = [("label", self.label), ("s", str(self.s))]
        rows += [(f"d{j + 1}_inf", g(x)) for j, x in enumerate(self.stage_order_defects)]
        rows += [
            ("superconv_implicit", g(self.superconv_implicit)),
            ("superconv_explicit", g(self.superconv_explicit)),
            ("preconsistency", g(self.preconsistency)),
            ("eig_p", " ".join(f"{z.real:.6g}{z.imag:+.6g}j" for z in self.eig_p)),
            ("zero_stable", str(self.zero_stable).lower()),
            ("optimally_zero_stable", str(self.optimally_zero_stable).lower()),
            ("a_stable", str(self.a_stable).lower()),
            ("alpha_deg", "90" if self.a_stable else "<90"),
            ("a_stable_worst_rho", g(self.a_stable_worst_rho)),
            ("rho_r_inv_q", g(self.rho_r_inv_q)),
            ("c_im", g(self.c_im)),
            ("c_ex", g(self.c_ex)),
            ("norm", self.norm),
            ("p_power_defect", g(self.p_power_defect)),
            ("extrap_order_residual", g(self.extrap_order_residual)),
            ("passed", str(self.passed).lower()),
        ]
        return rows


def zero_stability(P, tol: float = 1e-9) -> tuple[bool, bool, np.ndarray]:
    """``(zero_stable, optimally_zero_stable, eigenvalues)`` of ``P``."""
    lam = linalg.eigenvalues(P)
    order = np.argsort(np.abs(lam - 1.0))
    lam = lam[order]
    unit = abs(lam[0] - 1.0) < 1e-8
    rest = np.abs(lam[1:])
    zero_stable = bool(unit and np.all(rest < 1.0 - tol))
    optimal = bool(zero_stable and np.all(rest < 1e-7))
    return zero_stable, optimal, lam


def certify(tab: MethodTableau, sampling=None, norm: str = ERROR_CONSTANT_NORM) -> CertificationReport:
    """Evaluate every accuracy and stability property of ``tab``."""
    from . import stability

    s = tab.s
    defects = [float(np.abs(defect_d(j, tab)).max()) for j in range(1, s + 2)]
    d_next = defect_d(s + 1, tab)
    Rl = tab.R @ extrap_defect_l(tab)
    zs, ozs, lam = zero_stability(tab.P)
    if tab.v is not None:
        sc_im = float(abs(tab.v @ d_next))
        sc_ex = float(abs(tab.v @ Rl))
    else:
        sc_im = sc_ex = math.inf
    a_ok, worst_z, worst_rho = stability.is_a_stable(tab, sampling)
    c_im, c_ex = error_constants(tab, norm)
    e = np.ones(s)
    extrap_res = max(float(np.abs(_extrap_defect(j, tab.c, tab.S1, tab.S2)).max())
                     * math.factorial(j) for j in range(s))
    return CertificationReport(
        label=tab.label,
        s=s,
        stage_order_defects=defects,
        superconv_implicit=sc_im,
        superconv_explicit=sc_ex,
        preconsistency=float(np.abs(tab.P @ e - e).max()),
        eig_p=[complex(z) for z in lam],
        zero_stable=zs,
        optimally_zero_stable=ozs,
        a_stable=a_ok,
        a_stable_worst_z=worst_z,
        a_stable_worst_rho=worst_rho,
        rho_r_inv_q=rho_r_inv_q(tab),
        c_im=c_im,
        c_ex=c_ex,
        norm=norm,
        p_power_defect=float(np.abs(np.linalg.matrix_power(tab.P, s - 1) @ d_next).max()),
        extrap_order_residual=extrap_res,
        warnings=list(tab.warnings),
    )


# -- plain-text serialization ------------------------------------------------

def _fmt(xs) -> str:
    return ", ".join(f"{float(x):.17g}" for x in xs)


def serialize(tab: MethodTableau) -> str:
    """Key-value text form; ``Q``, ``S1``, ``Qhat``, ``Rhat`` are not stored."""
    low = np.tril_indices(tab.s, -1)
    return "\n".join([
        "# IMEX-Peer tableau",
        f"label = {tab.label}",
        f"s = {tab.s}",
        f"c = {_fmt(tab.c)}",
        f"gamma = {tab.gamma:.17g}",
        f"P = {_fmt(tab.P.ravel())}",
        f"R = {_fmt(tab.R[low])}",
        f"S2 = {_fmt(tab.S2[low])}",
        "",
    ])


def parse(text: str, validate: bool = True) -> MethodTableau:
    """Inverse of :func:`serialize`.  ``R`` and ``S2`` list strictly-lower entries row by row."""
    fields: dict[str, tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TableauFormatError("expected 'key = value'", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        key_n = key.lower()
        if key_n not in {"label", "s", "c", "gamma", "p", "r", "s2"}:
            raise TableauFormatError(f"unknown key {key!r}", lineno, key)
        if key_n in fields:
            raise TableauFormatError("duplicate key", lineno, key)
        fields[key_n] = (lineno, value)
    for req in ("s", "c", "gamma", "p"):
        if req not in fields:
            raise TableauFormatError("missing required field", None, req)

    def numbers(key, *counts):
        lineno, value = fields.get(key, (None, ""))
        parts = value.replace(",", " ").split()
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise TableauFormatError(f"not a number: {exc}", lineno, key) from None
        if len(vals) not in counts:
            want = " or ".join(str(n) for n in counts)
            raise TableauFormatError(f"expected {want} values, got {len(vals)}", lineno, key)
        return np.array(vals)

    def lower(key, diag):
        # strictly-lower entries row by row, or a full row-major s x s matrix
        A = diag * np.eye(s)
        if key not in fields:
            return A
        vals = numbers(key, nlow, s * s)
        if vals.size == s * s and s * s != nlow:
            return vals.reshape(s, s)
        A[np.tril_indices(s, -1)] = vals
        return A

    lineno, sval = fields["s"]
    try:
        s = int(sval)
    except ValueError:
        raise TableauFormatError("stage count must be an integer", lineno, "s") from None
    if s < 2:
        raise TableauFormatError("stage count must be >= 2", lineno, "s")
    nlow = s * (s - 1) // 2
    c = numbers("c", s)
    (gamma,) = numbers("gamma", 1)
    P = numbers("p", s * s).reshape(s, s)
    R = lower("r", gamma)
    S2 = lower("s2", 0.0)
    label = fields.get("label", (None, "custom"))[1]
    return MethodTableau.from_coefficients(c, P, R, S2, label=label, validate=validate)
