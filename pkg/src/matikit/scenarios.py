"""Built-in closed-loop scenarios.

Two plant/controller loops are wired here, each with two network links
(one per measured state), selectable scheduling protocol, and either
hold-last-value or model-based inter-update estimation:

  example1     two-state nonlinear loop with constant link delay; the
               delayed measurement channel shares its delay with the
               plant's internal delay.
  example2     inverted pendulum with a constant link delay.
  example2-tv  inverted pendulum with a sinusoidal link delay whose
               slope is bounded by 0.5.

The error flows are driven by the loop matrices; with the model-based
estimator the delayed-error feed-through cancels exactly, which is why
those scenarios certify against a zero comparison delay.

Configured gains: example1 uses the loop's constant-delay inner-output
gain 18.7051 (valid for every delay value) and detectability gains
3.5884 / 7.9597 for zero/positive delay with a target gain of 50.  The
pendulum family's gains are configuration inputs chosen above empirical
lower-bound measurements (no certified gain computation is wired for it)
with a target gain of 15.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .core import DelayProfile, ErrorSystemParams, Scenario, make_delay_profile
from .protocols import make_round_robin, make_tod

__all__ = [
    "GainUnavailableError",
    "ScenarioFamily",
    "build_example1",
    "build_example2",
    "catalog",
    "error_params_for",
    "protocol_for",
    "EX1", "EX2",
]


class GainUnavailableError(KeyError):
    """No configured inner-output gain for the requested case."""


def _mat(rows):
    return np.array(rows, dtype=float)


# loop matrices, first example
EX1 = {
    "A1": _mat([[-0.5, 1.0], [-2.0, -1.0]]),
    "A2": _mat([[0.0, 0.0], [0.0, -0.3]]),
    "BN": _mat([[-0.25, 0.0], [1.0, 0.0]]),
    "B":  _mat([[0.0, 0.0], [-2.0, -2.0]]),
    "C1": _mat([[0.5, -1.0], [0.0, 0.0]]),
    "C2": _mat([[0.0, 0.0], [2.0, 2.0]]),
    "C3": _mat([[0.0, 0.0], [0.0, 0.3]]),
    "C4": _mat([[0.25, 0.0], [0.0, 0.0]]),
    "C5": _mat([[0.0, 0.0], [-1.0, 0.0]]),
    "C6": _mat([[-1.0, 0.0], [0.0, 0.0]]),
    "C7": _mat([[0.0, 0.0], [0.0, -1.0]]),
    "S1": _mat([[1.0, 0.0], [0.0, 0.0]]),
    "S2": _mat([[0.0, 0.0], [0.0, 1.0]]),
    "gamma_h_tod": 18.7051,
    "gamma_d": {"zero": 3.5884, "pos": 7.9597},
    "gamma_des": 50.0,
}

# pendulum constants, second example
_G = 9.8
_LEN = 2.0
_K = 50.0
_LAM = 1.0
EX2 = {
    "A1": _mat([[0.0, 1.0], [-_K * _LAM / _LEN, -1.0]]),
    "A2": _mat([[0.0, 0.0], [0.0, -_K / _LEN - _LAM * _LEN]]),
    "B":  _mat([[0.0, 0.0], [-_K * _LAM / _LEN, -_K / _LEN - _LAM * _LEN]]),
    "B1": _mat([[0.0, -1.0], [0.0, 0.0]]),
    "B2": _mat([[0.0, 0.0], [_K * _LAM / _LEN, 0.0]]),
    "B3": _mat([[0.0, 0.0], [0.0, _K / _LEN + _LAM * _LEN]]),
    "C1": _mat([[-1.0, 0.0], [0.0, 0.0]]),
    "C2": _mat([[0.0, 0.0], [0.0, -1.0]]),
    "S1": _mat([[1.0, 0.0], [0.0, 0.0]]),
    "S2": _mat([[0.0, 0.0], [0.0, 1.0]]),
    # configuration inputs (see module docstring): inner-output gains per
    # (delay kind, estimator, delay zone), detectability gains, target
    "gamma_h_tod": {
        ("const", "zoh", "zero"): 12.0,
        ("const", "model", "zero"): 12.0,
        ("const", "zoh", "pos"): 24.0,
        ("const", "model", "pos"): 24.0,
        ("tv", "zoh", "zero"): 12.0,
        ("tv", "model", "zero"): 12.0,
        ("tv", "zoh", "pos"): 30.0,
        ("tv", "model", "pos"): 30.0,
    },
    "gamma_d": {"zero": 6.0, "pos": 9.0},
    "gamma_des": 15.0,
}


def _spectral_norm(m) -> float:
    return float(np.linalg.norm(m, 2))


def _apply(m, v):
    # v is (batch, n); returns (batch, n)
    return v @ m.T


def build_example1(d: float, protocol: str = "tod", estimator: str = "zoh",
                   mode: str = "LP_STABLE", k_nu: float = 0.0) -> Scenario:
    """Two-state loop with constant link delay ``d`` (seconds).

    Link 1 carries the first state's measurement without delay; link 2
    carries the second state's measurement delayed by ``d``, which also
    equals the plant's own delay.  The growth constant is ||B|| for the
    largest-error-first protocol and sqrt(l)||B|| for round robin.
    """
    if d < 0:
        raise ValueError("delay must be nonnegative")
    m = EX1
    sqrt_l = math.sqrt(2.0)
    scale = 1.0 if protocol == "tod" else sqrt_l
    norm_b = _spectral_norm(m["B"])
    growth_l = norm_b * scale
    est = estimator == "model"
    delay = None if d == 0 else make_delay_profile("constant", d, 0.0)

    A1, A2, BN, B = m["A1"], m["A2"], m["BN"], m["B"]
    C1, C2, C3, C4 = m["C1"], m["C2"], m["C3"], m["C4"]
    C5, C6, C7 = m["C5"], m["C6"], m["C7"]
    S1, S2 = m["S1"], m["S2"]

    def sector(x, e, x_dp):
        # coupling nonlinearity: bounded factor in [-1, 1]
        u_hat = -2.0 * (x[:, 0] + e[:, 0]) - 2.0 * (x_dp[:, 1] + e[:, 1])
        return np.sin(u_hat * x_dp[:, 1])

    def reads(view, t):
        if d == 0:
            x = view.x
            return x, x, x, view.e, view.omega(t)
        x_d = view.x_at(t - d)
        x_2d = view.x_at(t - 2 * d)
        e_d = view.e_at(t - d)
        w_d = view.omega(t - d)
        return view.x, x_d, x_2d, e_d, w_d

    def flow_x(view):
        t = view.t
        x, x_d, x_2d, e_d, w_d = reads(view, t)
        n_now = sector(x, view.e, x_d)
        return (_apply(A1, x) + _apply(A2, x_d)
                + _apply(BN, x) * n_now[:, None]
                + _apply(B, view.e) + view.omega(t))

    def flow_e(view):
        t = view.t
        x, x_d, x_2d, e_d, w_d = reads(view, t)
        n_now = sector(x, view.e, x_d)
        n_del = sector(x_d, e_d, x_2d)
        de = (-_apply(B, e_d) + _apply(C1, x) + _apply(C2, x_d)
              + _apply(C3, x_2d) + _apply(C4, x) * n_now[:, None]
              + _apply(C5, x_d) * n_del[:, None]
              + _apply(C6, view.omega(t)) + _apply(C7, w_d))
        if est:
            de = de + _apply(B, e_d + _apply(S1, x_d) + _apply(S2, x_2d))
        return de

    if est:
        CXD = C2 + B @ S1
        CX2D = C3 + B @ S2
    else:
        CXD, CX2D = C2, C3

    def h_norm(view):
        t = view.t
        x, x_d, x_2d, e_d, w_d = reads(view, t)
        core = (_apply(C1, x) + _apply(CXD, x_d) + _apply(CX2D, x_2d)
                + _apply(C6, view.omega(t)) + _apply(C7, w_d))
        return scale * (np.linalg.norm(core, axis=1)
                        + np.linalg.norm(_apply(C4, x), axis=1)
                        + np.linalg.norm(_apply(C5, x_d), axis=1))

    gamma_h = m["gamma_h_tod"] * scale
    zone = "zero" if d == 0 else "pos"
    return Scenario(
        name=f"example1[{protocol},{estimator},d={d:g}]",
        n_x=2, n_e=2, n_omega=2, link_sizes=(1, 1),
        flow_x=flow_x, flow_e=flow_e, h_norm=h_norm,
        growth_l=growth_l, gamma_h=gamma_h,
        gamma_d=m["gamma_d"][zone], gamma_des=m["gamma_des"],
        delay=delay, d_plant=d, estimator=estimator, k_nu=k_nu,
        comparison_d_max=0.0 if (est or d == 0) else d,
        history_span=2 * d,
        notes="delayed measurement channel shares the plant delay")


def build_example2(d_max: float, d_rate_max: float = 0.0, protocol: str = "tod",
                   estimator: str = "zoh", mode: str = "LP_STABLE",
                   k_nu: float = 0.0) -> Scenario:
    """Inverted pendulum with link delay bounded by ``d_max``.

    ``d_rate_max`` = 0 gives a constant delay; a positive value selects
    the sinusoidal profile with that slope bound.  Growth constant:
    (1 + d_rate_max)(||B|| + g/length), times sqrt(l) for round robin.
    """
    if d_max < 0 or d_rate_max < 0:
        raise ValueError("delay bounds must be nonnegative")
    m = EX2
    sqrt_l = math.sqrt(2.0)
    scale = 1.0 if protocol == "tod" else sqrt_l
    growth_l = (1.0 + d_rate_max) * (_spectral_norm(m["B"]) + _G / _LEN) * scale
    est = estimator == "model"

    if d_max == 0:
        delay = None
    elif d_rate_max == 0:
        delay = make_delay_profile("constant", d_max, 0.0)
    else:
        omega_d = 2.0 * d_rate_max / d_max
        delay = make_delay_profile("sinusoidal", d_max, d_rate_max,
                                   {"omega": omega_d})

    A1, A2, B = m["A1"], m["A2"], m["B"]
    B1, B2, B3 = m["B1"], m["B2"], m["B3"]
    C1, C2 = m["C1"], m["C2"]
    S1, S2 = m["S1"], m["S2"]

    def bend(x1, e1):
        return -2.0 * _G / _LEN * np.sin((e1 + 2.0 * x1) / 2.0) * np.sin(e1 / 2.0)

    def d_at(t):
        if delay is None:
            return 0.0, 0.0
        return float(delay.value_at(t)), float(delay.derivative_at(t))

    def flow_x(view):
        t = view.t
        dv, _ = d_at(t)
        x = view.x
        x_d = x if dv == 0.0 else view.x_at(t - dv)
        nl = bend(x[:, 0], view.e[:, 0])
        out = _apply(A1, x) + _apply(A2, x_d) + _apply(B, view.e) + view.omega(t)
        out[:, 1] += nl
        return out

    def flow_e(view):
        t = view.t
        dv, ddot = d_at(t)
        x = view.x
        if dv == 0.0:
            x_d, x_2d, e_d, w_d = x, x, view.e, view.omega(t)
        else:
            x_d = view.x_at(t - dv)
            x_2d = view.x_at(t - 2 * dv)
            e_d = view.e_at(t - dv)
            w_d = view.omega(t - dv)
        inner = (-_apply(B, e_d) + _apply(B2, x_d) + _apply(B3, x_2d)
                 + _apply(C2, w_d))
        inner[:, 1] -= bend(x_d[:, 0], e_d[:, 0])
        if est:
            inner = inner + _apply(B, e_d + _apply(S1, x_d) + _apply(S2, x_2d))
        return (_apply(B1, x) + _apply(C1, view.omega(t))
                + (1.0 - ddot) * inner)

    def h_norm(view):
        t = view.t
        dv, ddot = d_at(t)
        x = view.x
        if dv == 0.0:
            x_d, x_2d, w_d = x, x, view.omega(t)
        else:
            x_d = view.x_at(t - dv)
            x_2d = view.x_at(t - 2 * dv)
            w_d = view.omega(t - dv)
        if est:
            inner = _apply(C2, w_d)
        else:
            inner = _apply(B2, x_d) + _apply(B3, x_2d) + _apply(C2, w_d)
        core = (_apply(B1, x) + _apply(C1, view.omega(t))
                + (1.0 - ddot) * inner)
        return scale * np.linalg.norm(core, axis=1)

    kind = "const" if d_rate_max == 0 else "tv"
    zone = "zero" if d_max == 0 else "pos"
    try:
        gamma_h = m["gamma_h_tod"][(kind, estimator, zone)] * scale
    except KeyError as exc:
        raise GainUnavailableError(
            f"no configured gain for pendulum case {(kind, estimator, zone)}") from exc
    return Scenario(
        name=f"example2[{protocol},{estimator},{kind},d={d_max:g}]",
        n_x=2, n_e=2, n_omega=2, link_sizes=(1, 1),
        flow_x=flow_x, flow_e=flow_e, h_norm=h_norm,
        growth_l=growth_l, gamma_h=gamma_h,
        gamma_d=m["gamma_d"][zone], gamma_des=m["gamma_des"],
        delay=delay, estimator=estimator, k_nu=k_nu,
        comparison_d_max=0.0 if est else d_max,
        history_span=2 * d_max,
        notes=f"pendulum, {kind} delay")


@dataclass(frozen=True)
class ScenarioFamily:
    name: str
    builder: object
    kwargs: dict

    def build(self, d: float, protocol: str = "tod", estimator: str = "zoh",
              mode: str = "LP_STABLE", **extra) -> Scenario:
        kw = dict(self.kwargs)
        kw.update(extra)
        return self.builder(d, protocol=protocol, estimator=estimator,
                            mode=mode, **kw)


def catalog() -> Dict[str, ScenarioFamily]:
    return {
        "example1": ScenarioFamily("example1", build_example1, {}),
        "example2": ScenarioFamily(
            "example2", lambda d, **kw: build_example2(d, 0.0, **kw), {}),
        "example2-tv": ScenarioFamily(
            "example2-tv", lambda d, **kw: build_example2(d, 0.5, **kw), {}),
    }


def protocol_for(scenario: Scenario, protocol: str):
    l = len(scenario.link_sizes)
    if protocol == "rr":
        return make_round_robin(l, scenario.link_sizes)
    if protocol == "tod":
        return make_tod(l, scenario.link_sizes)
    raise ValueError(f"unknown protocol {protocol!r}")


def error_params_for(scenario: Scenario, protocol: str,
                     epsilon: Optional[float] = None) -> ErrorSystemParams:
    """Comparison-system parameters for a scenario under a protocol.

    The flow coefficient is the protocol-scaled growth constant, further
    multiplied by a_upper/a_lower only when the comparison delay is
    positive (with no delayed error term there is no grant-count
    mismatch to absorb).
    """
    proto = protocol_for(scenario, protocol)
    if scenario.comparison_d_max > 0:
        a = proto.a_upper / proto.a_lower * scenario.growth_l
    else:
        a = scenario.growth_l
    return ErrorSystemParams(a=a, c=proto.rho, d_max=scenario.comparison_d_max,
                             k_nu=scenario.k_nu, epsilon=epsilon)
