"""Shared domain types.

Everything downstream (protocol models, interval certification, gain
estimation, simulation) is phrased in terms of the types defined here.
All types are immutable after construction and safe to share across
workers.

Units: time quantities are seconds everywhere in the API.  CSV output
converts delays and intervals to milliseconds (see the cli module).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DelayProfile",
    "make_delay_profile",
    "ProtocolSpec",
    "ErrorSystemParams",
    "RazumikhinWitness",
    "CompositeGains",
    "MatiCertificate",
    "Scenario",
    "SimTrace",
    "DelayProfileError",
    "WitnessError",
]


class DelayProfileError(ValueError):
    """A delay profile violates its declared bounds."""


class WitnessError(ValueError):
    """A certification witness violates its invariants."""


@dataclass(frozen=True)
class DelayProfile:
    """A time-varying transmission delay d(t).

    ``d_max`` bounds the value and ``d_rate_max`` bounds |d'(t)|.  The
    profile is evaluated through ``value_at``/``derivative_at``; both
    accept scalars or numpy arrays.
    """

    kind: str  # "constant" | "sinusoidal" | "table"
    d_max: float
    d_rate_max: float
    _value: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    _deriv: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    params: dict = field(default_factory=dict)

    def value_at(self, t):
        return self._value(np.asarray(t, dtype=float))

    def derivative_at(self, t):
        return self._deriv(np.asarray(t, dtype=float))

    @property
    def is_zero(self) -> bool:
        return self.d_max == 0.0


def _validate_profile(profile: DelayProfile, t_probe: np.ndarray) -> None:
    vals = np.asarray(profile.value_at(t_probe), dtype=float)
    ders = np.asarray(profile.derivative_at(t_probe), dtype=float)
    tol = 1e-12
    bad = np.flatnonzero((vals < -tol) | (vals > profile.d_max + tol))
    if bad.size:
        raise DelayProfileError(
            f"delay value out of [0, {profile.d_max}] at t={float(t_probe[bad[0]]):.6g}"
            f" (d={float(vals[bad[0]]):.6g})"
        )
    bad = np.flatnonzero(np.abs(ders) > profile.d_rate_max + tol)
    if bad.size:
        raise DelayProfileError(
            f"delay slope exceeds {profile.d_rate_max} at t={float(t_probe[bad[0]]):.6g}"
            f" (|d'|={float(abs(ders[bad[0]])):.6g})"
        )


def make_delay_profile(kind: str, d_max: float, d_rate_max: float,
                       params: Optional[dict] = None) -> DelayProfile:
    """Build a delay profile and verify its declared bounds.

    kinds:
      constant    -- d(t) = d_max, d'(t) = 0
      sinusoidal  -- d(t) = (d_max/2) (1 + sin(omega t + phase))
      table       -- piecewise-linear through params["t"], params["d"]

    Raises DelayProfileError when a probe detects a bound violation
    (first violating t is reported).
    """
    if d_max < 0 or d_rate_max < 0:
        raise DelayProfileError("d_max and d_rate_max must be nonnegative")
    params = dict(params or {})

    if kind == "constant":
        d = float(d_max)
        prof = DelayProfile(kind, d_max, d_rate_max,
                            lambda t: np.broadcast_to(d, np.shape(t)).copy(),
                            lambda t: np.zeros_like(np.asarray(t, dtype=float)),
                            params)
        probe = np.linspace(0.0, 1.0, 64)
    elif kind == "sinusoidal":
        omega = float(params.get("omega", 1.0))
        phase = float(params.get("phase", 0.0))
        amp = d_max / 2.0
        prof = DelayProfile(kind, d_max, d_rate_max,
                            lambda t: amp * (1.0 + np.sin(omega * t + phase)),
                            lambda t: amp * omega * np.cos(omega * t + phase),
                            params)
        period = 2 * math.pi / omega if omega else 1.0
        probe = np.linspace(0.0, 2 * period, 4096)
    elif kind == "table":
        ts = np.asarray(params["t"], dtype=float)
        ds = np.asarray(params["d"], dtype=float)
        if ts.ndim != 1 or ts.shape != ds.shape or ts.size < 2:
            raise DelayProfileError("table profile needs matching 1-d t/d arrays")
        if np.any(np.diff(ts) <= 0):
            raise DelayProfileError("table times must be strictly increasing")
        slopes = np.diff(ds) / np.diff(ts)

        def _val(t, ts=ts, ds=ds):
            return np.interp(t, ts, ds)

        def _der(t, ts=ts, slopes=slopes):
            idx = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, slopes.size - 1)
            return slopes[idx]

        prof = DelayProfile(kind, d_max, d_rate_max, _val, _der, params)
        probe = np.concatenate([ts, 0.5 * (ts[:-1] + ts[1:])])
    else:
        raise DelayProfileError(f"unknown delay profile kind: {kind!r}")

    _validate_profile(prof, probe)
    return prof


@dataclass(frozen=True)
class ProtocolSpec:
    """A scheduling protocol with exponential contraction at grants.

    ``a_lower``/``a_upper`` sandwich the protocol function W between
    multiples of the error norm; ``rho`` is the contraction factor at a
    noise-free grant.  ``link_sizes`` gives the number of error
    components carried by each link.
    """

    name: str  # "rr" | "tod"
    link_sizes: tuple
    a_lower: float
    a_upper: float
    rho: float

    def __post_init__(self):
        if not (0.0 <= self.rho < 1.0):
            raise ValueError("rho must lie in [0, 1)")
        if not (0.0 < self.a_lower <= self.a_upper):
            raise ValueError("need 0 < a_lower <= a_upper")

    @property
    def link_count(self) -> int:
        return len(self.link_sizes)

    @property
    def n_e(self) -> int:
        return int(sum(self.link_sizes))

    def link_slices(self):
        out, off = [], 0
        for s in self.link_sizes:
            out.append(slice(off, off + s))
            off += s
        return out


@dataclass(frozen=True)
class ErrorSystemParams:
    """Parameters of the scalar comparison system driving certification.

    a       flow coefficient (protocol-scaled growth constant, >= 0)
    c       jump coefficient in (-1, 1) (protocol contraction factor)
    d_max   bound on the comparison delay, seconds
    k_nu    bound on per-grant injected noise
    epsilon minimum spacing between transmissions; None defers the
            choice to certificate issue time (tau/10 convention)
    """

    a: float
    c: float
    d_max: float
    k_nu: float = 0.0
    epsilon: Optional[float] = None

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("a must be nonnegative")
        if not (-1.0 < self.c < 1.0):
            raise ValueError("c must lie in (-1, 1)")
        if self.d_max < 0:
            raise ValueError("d_max must be nonnegative")
        if self.k_nu < 0:
            raise ValueError("k_nu must be nonnegative")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive when given")


@dataclass(frozen=True)
class RazumikhinWitness:
    """Constants certifying exponential decay of the comparison system."""

    lam: float       # decay rate lambda (envelope exponent is lam/2)
    big_m: float     # overshoot constant M > 1
    r: float         # free positive constant of the flow estimate
    lambda2: float   # jump contraction constant in (0, 1)
    lambda1: float   # derived: a^2 / r for the a it was issued against

    def __post_init__(self):
        if self.lam <= 0:
            raise WitnessError("lambda must be positive")
        if self.big_m <= 1:
            raise WitnessError("M must exceed 1")
        if self.r <= 0:
            raise WitnessError("r must be positive")
        if not (0.0 < self.lambda2 < 1.0):
            raise WitnessError("lambda2 must lie in (0, 1)")
        if self.lambda1 < 0:
            raise WitnessError("lambda1 must be nonnegative")

    def check_against(self, c: float) -> None:
        if c != 0.0 and abs(self.lambda2 - c * c) > 1e-12 * max(1.0, c * c):
            raise WitnessError("lambda2 must equal c^2 when c != 0")


@dataclass(frozen=True)
class CompositeGains:
    """Closed-loop input-output coefficients assembled from the loop gains.

    Channel naming: ``he`` is disturbance -> (inner output, error),
    ``e`` is the error channel alone, ``x`` the state channel (filled in
    only when a detectability gain is supplied), ``xe`` their sum.
    ``k_*`` entries multiply initial-condition norms.  The raw loop
    constants the record was assembled from are kept alongside so
    downstream compositions never have to reconstruct them.
    """

    gamma_w: float
    gamma_h: float
    k_h: float
    a_lower: float
    gain_he: float
    bias_he: float
    gain_e: float
    bias_e: float
    k_e_from_e0: float
    k_e_from_x0: float
    gain_h: float
    bias_h: float
    k_h_from_x0: float
    k_h_from_e0: float
    gain_x: Optional[float] = None
    bias_x: Optional[float] = None
    k_x_from_x0: Optional[float] = None
    k_x_from_e0: Optional[float] = None
    gain_xe: Optional[float] = None
    bias_xe: Optional[float] = None


@dataclass(frozen=True)
class MatiCertificate:
    """A certified maximal transmission interval with its witness.

    ``tau`` is the certified interval; ``margin_i``/``margin_ii`` are the
    slack of the two decay conditions at ``tau`` (both strictly
    positive).  ``gamma_w`` is the error-channel gain (2/lambda) sqrt(M),
    ``bias`` the noise-induced offset, ``k_w`` the initial-condition
    coefficient at order ``p_order``.
    """

    tau: float
    witness: RazumikhinWitness
    gamma_w: float
    bias: float
    k_w: float
    p_order: float
    mode: str                  # "UGAS" | "LP_STABLE" | "LP_WITH_TARGET"
    gamma_h: float
    epsilon: float
    margin_i: float
    margin_ii: float
    small_gain_margin: float   # cap - gamma_w * gamma_h, cap per mode
    params: ErrorSystemParams
    gamma_d: Optional[float] = None
    gamma_des: Optional[float] = None
    omega_to_x_gain_bound: Optional[float] = None
    composite: Optional[CompositeGains] = None

    def __post_init__(self):
        if self.tau < self.epsilon:
            raise ValueError("certified tau fell below the minimum spacing epsilon")
        cap = 1.0 if self.mode != "LP_WITH_TARGET" else 1.0 - self.gamma_d / self.gamma_des
        if not self.gamma_w * self.gamma_h < cap:
            raise ValueError("certificate violates its own gain condition")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["witness"] = asdict(self.witness)
        d["params"] = asdict(self.params)
        d["composite"] = asdict(self.composite) if self.composite else None
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @staticmethod
    def from_dict(d: dict) -> "MatiCertificate":
        d = dict(d)
        d["witness"] = RazumikhinWitness(**d["witness"])
        d["params"] = ErrorSystemParams(**d["params"])
        if d.get("composite"):
            d["composite"] = CompositeGains(**d["composite"])
        return MatiCertificate(**d)

    @staticmethod
    def from_json(s: str) -> "MatiCertificate":
        return MatiCertificate.from_dict(json.loads(s))


@dataclass(frozen=True)
class Scenario:
    """An executable networked-loop instance.

    ``flow_x``/``flow_e`` evaluate the interconnected vector fields; both
    receive an evaluation context (see simulator.StageView) exposing the
    current stage values and delayed reads, and return (batch, n) arrays.
    ``h_norm`` evaluates the inner-output magnitude used by the growth
    bound; ``growth_l`` is the bound's growth constant and
    ``comparison_d_max`` the delay bound fed to the certification step
    (zero when the error flow has no delayed error dependence).
    """

    name: str
    n_x: int
    n_e: int
    n_omega: int
    link_sizes: tuple
    flow_x: Callable = field(repr=False)
    flow_e: Callable = field(repr=False)
    h_norm: Callable = field(repr=False)
    growth_l: float = 0.0
    gamma_h: float = 0.0
    gamma_d: Optional[float] = None
    gamma_des: Optional[float] = None
    k_h: float = 0.0
    k_d: float = 0.0
    delay: Optional[DelayProfile] = None     # shared link delay
    d_plant: float = 0.0
    d_ctrl: float = 0.0
    estimator: str = "zoh"                   # "zoh" | "model"
    k_nu: float = 0.0
    comparison_d_max: float = 0.0
    history_span: float = 0.0                # how far back flows may read
    notes: str = ""

    def __post_init__(self):
        if sum(self.link_sizes) != self.n_e:
            raise ValueError("link partition must cover the error vector exactly")
        if self.growth_l < 0 or self.gamma_h < 0:
            raise ValueError("growth constant and gain must be nonnegative")


@dataclass
class SimTrace:
    """Recorded output of one integration run.

    ``t`` is the (possibly decimated) time grid with matching ``x``/``e``
    samples of shape (len(t), batch, n).  ``events`` lists
    (time, granted link per batch row, injected noise per batch row).
    Auxiliary per-step channels (full resolution) back the growth and
    norm checks.  ``norm_*`` are running squared-integral accumulators.
    """

    t: np.ndarray
    x: np.ndarray
    e: np.ndarray
    events: list
    step: float
    t_aux: np.ndarray
    w_now: np.ndarray
    w_delayed: np.ndarray
    h_now: np.ndarray
    xe_norm: np.ndarray
    jump_mask: np.ndarray
    counters: np.ndarray
    norm_x: np.ndarray
    norm_e: np.ndarray
    norm_omega: np.ndarray
    norm_h: np.ndarray
    diverged: np.ndarray
    divergence_time: np.ndarray

    def l2_x(self):
        return np.sqrt(self.norm_x)

    def l2_e(self):
        return np.sqrt(self.norm_e)

    def l2_omega(self):
        return np.sqrt(self.norm_omega)

    def l2_h(self):
        return np.sqrt(self.norm_h)
