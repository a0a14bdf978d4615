"""The three builtin super-convergent IMEX-Peer methods, and tableau files."""

from __future__ import annotations

import functools
from pathlib import Path

import numpy as np

from .tableau import MethodTableau, TableauError, certify, parse


def _lower(s, gamma, strict):
    A = gamma * np.eye(s)
    A[np.tril_indices(s, -1)] = strict
    return A


# c, gamma, strictly-lower R (row by row), strictly-lower S2, P (row-major)
_COEFFS = {
    "imex-peer2s": dict(
        c=[0.591977499693304, 1.0],
        gamma=0.969486340522434,
        r=[-1.007885680522306],
        s2=[0.819167640511257],
        P=[[-1.082167419515352, 2.082167419515352],
           [-1.082167419515352, 2.082167419515352]],
    ),
    "imex-peer3s": dict(
        c=[0.173922498101250, 0.584759944717930, 1.0],
        gamma=0.456150901216430,
        r=[0.271188675194957, 0.099808771568803, 0.395734854902157],
        s2=[1.5, 0.204731875658678, 1.32],
        P=[[-0.516269158723393, 2.301256858880021, -0.784987700156628]] * 3,
    ),
    "imex-peer4s": dict(
        c=[-0.926697334544583, 0.180751924024702, 0.850343633101352, 1.0],
        gamma=0.413154106969917,
        r=[1.186201415903827, 1.327861645060559, 0.525143168803633,
           1.324984727912657, 0.576558985833141, 0.071014878172581],
        s2=[3.884803988586850, -3.053336552626494, 2.821635541838257,
            -3.555025951383727, 2.895140468767150, 0.162040780709875],
        P=[[0.164346920652337, 1.941408294648193, -2.764059964877189, 1.658304749576660],
           [0.424734281438207, 1.133423589655944, -0.792340606563880, 0.234182735469729],
           [0.562642125818718, 0.131525283967289, 2.162128869126546, -1.856296278912553],
           [0.589388877693458, -0.169092459871472, 3.071031564759426, -2.491327982581412]],
    ),
}

BUILTIN_NAMES = tuple(_COEFFS)


class UnknownMethodError(KeyError):
    pass


def builtin(name: str) -> MethodTableau:
    """One of ``imex-peer2s``, ``imex-peer3s``, ``imex-peer4s`` (case-insensitive)."""
    key = name.lower()
    if key not in _COEFFS:
        raise UnknownMethodError(f"unknown method {name!r}; builtins are {', '.join(BUILTIN_NAMES)}")
    return _build(key)


@functools.cache
def _build(key: str) -> MethodTableau:
    d = _COEFFS[key]
    s = len(d["c"])
    return MethodTableau.from_coefficients(
        d["c"], d["P"], _lower(s, d["gamma"], d["r"]), _lower(s, 0.0, d["s2"]), label=key)


def load_tableau(source: str, with_report: bool = True):
    """Parse tableau text; returns ``(tableau, report)`` (report is None if not requested)."""
    tab = parse(source)
    return tab, (certify(tab) if with_report else None)


def resolve(spec: str) -> MethodTableau:
    """A builtin name or a path to a tableau file."""
    if spec.lower() in _COEFFS:
        return builtin(spec)
    path = Path(spec)
    if not path.exists():
        raise UnknownMethodError(f"{spec!r} is neither a builtin method nor an existing file")
    return parse(path.read_text())


__all__ = ["BUILTIN_NAMES", "UnknownMethodError", "builtin", "load_tableau", "resolve",
           "MethodTableau", "TableauError"]
