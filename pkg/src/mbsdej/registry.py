"""Named building blocks selectable from config files.

Every entry is a builder taking a parameter dict (already typed) plus the
context it needs (grid or mark space) and returning the constructed object.
Registered items carry the Lipschitz/monotonicity metadata the validators
need, which is why the config layer points at this registry instead of
parsing expressions.
"""

from __future__ import annotations

import numpy as np

from .bsde import DriverSpec, TerminalSpec
from .errors import UnknownName
from .monotone import GrowthEnvelope, MonotoneFamily
from .scenario import MarkSpace, TimeGrid

__all__ = [
    "FAMILIES", "ENVELOPES", "DRIVERS", "TERMINALS",
    "make_family", "make_envelope", "make_driver", "make_terminal",
]


# -- families -----------------------------------------------------------------


def _family_reflect_at(params: dict, grid: TimeGrid) -> MonotoneFamily:
    a = float(params.get("a", 0.0))
    return MonotoneFamily(
        body=lambda t, x: np.zeros_like(x),
        boundary=lambda t: a,
        boundary_in_domain=lambda t: True,
        left_body=lambda t, x: np.zeros_like(x),
        sign="negative",
        name=f"reflect_at(a={a:g})")


def _family_constant(params: dict, grid: TimeGrid) -> MonotoneFamily:
    c = float(params.get("c", -1.0))
    sign = "negative" if c <= 0 else "real"
    return MonotoneFamily(
        body=lambda t, x: np.full_like(x, c),
        boundary=lambda t: -np.inf,
        left_body=lambda t, x: np.full_like(x, c),
        sign=sign,
        name=f"constant(c={c:g})")


def _family_min_zero(params: dict, grid: TimeGrid) -> MonotoneFamily:
    return MonotoneFamily(
        body=lambda t, x: np.minimum(x, 0.0),
        boundary=lambda t: -np.inf,
        left_body=lambda t, x: np.minimum(x, 0.0),
        sign="negative",
        name="min_zero")


def _family_neg_exp(params: dict, grid: TimeGrid) -> MonotoneFamily:
    return MonotoneFamily(
        body=lambda t, x: -np.exp(-x),
        boundary=lambda t: -np.inf,
        left_body=lambda t, x: -np.exp(-x),
        sign="negative",
        name="neg_exp")


def _family_step(params: dict, grid: TimeGrid) -> MonotoneFamily:
    at = float(params.get("at", 1.0))
    lo = float(params.get("lo", -1.0))
    hi = float(params.get("hi", 0.0))
    if lo > hi:
        raise ValueError("step family needs lo <= hi")
    sign = "negative" if hi <= 0 else "real"

    def body(t, x):
        return np.where(x < at, lo, hi)

    def left(t, x):
        return np.where(x <= at, lo, hi)

    return MonotoneFamily(body=body, boundary=lambda t: -np.inf,
                          left_body=left, sign=sign,
                          name=f"step(at={at:g})")


def _family_linear_decay(params: dict, grid: TimeGrid) -> MonotoneFamily:
    """k(t, x) = (T - t) x, the real-valued example with envelope (T-t)(1+x+)."""
    horizon = grid.horizon
    scale = float(params.get("scale", 1.0))

    def body(t, x):
        return scale * (horizon - t) * x

    return MonotoneFamily(body=body, boundary=lambda t: -np.inf,
                          left_body=body, sign="real",
                          name=f"linear_decay(scale={scale:g})")


def _family_blowup_near_terminal(params: dict, grid: TimeGrid) -> MonotoneFamily:
    """Negative control: k(t, x) = -1/(T-t), violating (B.2) at every z."""
    horizon = grid.horizon

    def body(t, x):
        return np.full_like(x, -1.0 / max(horizon - t, 1e-300))

    return MonotoneFamily(body=body, boundary=lambda t: -np.inf,
                          left_body=body, sign="negative",
                          name="blowup_near_terminal")


FAMILIES = {
    "reflect_at": _family_reflect_at,
    "constant": _family_constant,
    "min_zero": _family_min_zero,
    "neg_exp": _family_neg_exp,
    "step": _family_step,
    "linear_decay": _family_linear_decay,
    "blowup_near_terminal": _family_blowup_near_terminal,
}


# -- envelopes ----------------------------------------------------------------


def _envelope_linear_decay(params: dict, grid: TimeGrid) -> GrowthEnvelope:
    """ell(t, x) = (T - t)(1 + x+)."""
    horizon = grid.horizon
    scale = float(params.get("scale", 1.0))

    def ell(t, x):
        return scale * (horizon - t) * (1.0 + np.maximum(x, 0.0))

    return GrowthEnvelope(ell, linear_growth_constant=scale * max(horizon, 1.0),
                          name="linear_decay")


def _envelope_bad_terminal(params: dict, grid: TimeGrid) -> GrowthEnvelope:
    """Negative control: ell(T, .) = 0.1 != 0."""
    return GrowthEnvelope(lambda t, x: np.full_like(x, 0.1),
                          linear_growth_constant=1.0, name="bad_terminal")


ENVELOPES = {
    "linear_decay": _envelope_linear_decay,
    "bad_terminal": _envelope_bad_terminal,
}


# -- drivers ------------------------------------------------------------------


def _gamma_of(params: dict, marks: MarkSpace) -> np.ndarray:
    gamma = params.get("gamma")
    if gamma is None:
        return np.zeros(marks.n_marks)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if gamma.size == 1 and marks.n_marks > 1:
        gamma = np.full(marks.n_marks, gamma[0])
    return gamma


def _driver_zero(params: dict, marks: MarkSpace) -> DriverSpec:
    return DriverSpec(shape=lambda t, s, y, z, q: np.zeros_like(y),
                      gamma=_gamma_of(params, marks), lipschitz_c=0.0,
                      name="zero")


def _driver_constant(params: dict, marks: MarkSpace) -> DriverSpec:
    c = float(params.get("c", 1.0))
    return DriverSpec(shape=lambda t, s, y, z, q: np.full_like(y, c),
                      gamma=_gamma_of(params, marks), lipschitz_c=0.0,
                      name=f"constant(c={c:g})")


def _driver_linear(params: dict, marks: MarkSpace) -> DriverSpec:
    a = float(params.get("a", 0.0))
    b = float(params.get("b", 0.0))
    return DriverSpec(shape=lambda t, s, y, z, q: a * y + b,
                      gamma=_gamma_of(params, marks), lipschitz_c=abs(a),
                      name=f"linear(a={a:g},b={b:g})")


def _driver_mixed(params: dict, marks: MarkSpace) -> DriverSpec:
    """h = a y + bz z + qc q with qc >= 0 (nondecreasing in the aggregate)."""
    a = float(params.get("a", 0.0))
    bz = float(params.get("bz", 0.0))
    qc = float(params.get("qc", 1.0))
    if qc < 0:
        raise ValueError("mixed driver needs qc >= 0 for monotonicity in q")

    def shape(t, s, y, z, q):
        return a * y + bz * z + qc * q

    return DriverSpec(shape=shape, gamma=_gamma_of(params, marks),
                      lipschitz_c=abs(a) + abs(bz),
                      name=f"mixed(a={a:g},bz={bz:g},qc={qc:g})")


DRIVERS = {
    "zero": _driver_zero,
    "constant": _driver_constant,
    "linear": _driver_linear,
    "mixed": _driver_mixed,
}


# -- terminals ----------------------------------------------------------------


def _terminal_brownian(params, marks, grid) -> TerminalSpec:
    shift = float(params.get("shift", 0.0))
    return TerminalSpec(lambda state: state.w + shift,
                        lower_bound_check=bool(params.get("lower_bound_check", False)),
                        name=f"brownian(shift={shift:g})")


def _terminal_brownian_positive(params, marks, grid) -> TerminalSpec:
    """(W_T)+ + shift; with shift >= 1 the reflected-at-0 constraint is slack."""
    shift = float(params.get("shift", 1.0))
    return TerminalSpec(lambda state: np.maximum(state.w, 0.0) + shift,
                        lower_bound_check=bool(params.get("lower_bound_check", False)),
                        name=f"brownian_positive(shift={shift:g})")


def _terminal_compensated_jumps(params, marks, grid) -> TerminalSpec:
    """xi = sum_j weight_j * (N_T(e_j) - lambda_j T)."""
    weights = params.get("weights")
    if weights is None:
        w = np.ones(marks.n_marks)
    else:
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        if w.size == 1 and marks.n_marks > 1:
            w = np.full(marks.n_marks, w[0])
    return TerminalSpec(lambda state: state.ntilde @ w,
                        name="compensated_jumps")


def _terminal_zero(params, marks, grid) -> TerminalSpec:
    return TerminalSpec(lambda state: np.zeros_like(state.w), name="zero")


def _terminal_call(params, marks, grid) -> TerminalSpec:
    strike = float(params.get("strike", 0.0))
    return TerminalSpec(lambda state: np.maximum(state.w - strike, 0.0),
                        name=f"call(strike={strike:g})")


TERMINALS = {
    "brownian": _terminal_brownian,
    "brownian_positive": _terminal_brownian_positive,
    "compensated_jumps": _terminal_compensated_jumps,
    "zero": _terminal_zero,
    "call": _terminal_call,
}


def _lookup(table: dict, kind: str, name: str):
    try:
        return table[name]
    except KeyError:
        raise UnknownName(f"unknown {kind} '{name}'; "
                          f"known: {', '.join(sorted(table))}") from None


def make_family(name: str, params: dict, grid: TimeGrid) -> MonotoneFamily:
    return _lookup(FAMILIES, "family", name)(params, grid)


def make_envelope(name: str, params: dict, grid: TimeGrid) -> GrowthEnvelope:
    return _lookup(ENVELOPES, "envelope", name)(params, grid)


def make_driver(name: str, params: dict, marks: MarkSpace) -> DriverSpec:
    return _lookup(DRIVERS, "driver", name)(params, marks)


def make_terminal(name: str, params: dict, marks: MarkSpace,
                  grid: TimeGrid) -> TerminalSpec:
    return _lookup(TERMINALS, "terminal", name)(params, marks, grid)
