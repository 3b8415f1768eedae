"""Certified transmission intervals via the loop-gain condition.

`certify` searches for the largest interval tau for which some witness
(lambda, M, r, lambda2) satisfies the two decay conditions of the
comparison system together with the loop condition

    (2/lambda) sqrt(M) * gamma_h < cap,

where cap is 1 for plain stability and 1 - gamma_d/gamma_des when a
prescribed disturbance-to-state gain gamma_des is requested.

Search structure: for fixed (lambda, r, lambda2) condition (II) does not
involve M; condition (I) is convex in M with minimizer
M* = e^{lambda tau} / (tau lambda1), and the loop condition caps
M < (lambda cap / (2 gamma_h))^2.  M is therefore eliminated in closed
form (clamped to its admissible interval) and only (lambda, r) -- plus
lambda2 when c = 0 -- are gridded, in log space.  tau is then located by
a geometric forward scan over the whole admissible range followed by
bisection on the last feasible bracket; the scan never assumes the
feasible tau-set is an interval, and the refined tau is re-validated
against the exact conditions before a certificate is issued.

The default grids span 1e-2..1e3 with 60 points per axis and widen
automatically when the loop condition forces lambda beyond the default
ceiling (large gamma_h) or when the delay term rewards large r.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import (CompositeGains, ErrorSystemParams, MatiCertificate,
                   RazumikhinWitness)
from .razumikhin import check_conditions, error_gain, k_coefficient, margins

__all__ = [
    "SearchConfig",
    "SearchError",
    "InfeasibleTargetError",
    "certify",
    "compose_small_gain",
    "compose_detectability",
    "adjust_for_dropouts",
    "per_link_rate_for_unsynchronized",
    "sweep",
    "SweepRow",
]

_EXP_CLIP = 700.0


class SearchError(RuntimeError):
    """No feasible interval found within the search budget.

    A strictly positive interval always exists mathematically, so this
    signals an inadequate grid/budget, not infeasibility of the problem.
    """


class InfeasibleTargetError(ValueError):
    """Requested performance target cannot be met by any interval."""


@dataclass(frozen=True)
class SearchConfig:
    lam_lo: float = 1e-2
    lam_hi: float = 1e3
    r_lo: float = 1e-2
    r_hi: float = 1e3
    n_lam: int = 60
    n_r: int = 60
    n_lambda2: int = 25          # only used when c = 0
    lambda2_lo: float = 1e-6
    lambda2_hi: float = 0.99
    scan_points_per_decade: int = 60
    min_scan_points: int = 300
    bisect_iters: int = 60
    auto_widen: bool = True
    points_per_decade_widened: int = 12


def _grids(params: ErrorSystemParams, gamma_h: float, cap: float,
           cfg: SearchConfig):
    """Log grids for (lambda, r), widened when the instance demands it."""
    lam_hi, r_hi = cfg.lam_hi, cfg.r_hi
    if cfg.auto_widen:
        if gamma_h > 0:
            lam_hi = max(lam_hi, 20.0 * gamma_h / cap)
        if params.a > 0:
            lam2_ref = params.c ** 2 if params.c != 0 else 0.25
            lam_ref = 2.5 * gamma_h / cap if gamma_h > 0 else 10.0
            r_star = params.a * math.sqrt(
                math.exp(min(lam_ref * params.d_max, 60.0)) / lam2_ref)
            r_hi = min(max(r_hi, 10.0 * r_star), 1e9)
    n_lam = max(cfg.n_lam, int(cfg.points_per_decade_widened
                               * math.log10(lam_hi / cfg.lam_lo)))
    n_r = max(cfg.n_r, int(cfg.points_per_decade_widened
                           * math.log10(r_hi / cfg.r_lo)))
    lam = np.logspace(math.log10(cfg.lam_lo), math.log10(lam_hi), n_lam)
    r = np.logspace(math.log10(cfg.r_lo), math.log10(r_hi), n_r)
    return lam, r


class _WitnessGrid:
    """Vectorized feasibility over the witness grid with M eliminated."""

    def __init__(self, params: ErrorSystemParams, gamma_h: float, cap: float,
                 cfg: SearchConfig):
        lam, r = _grids(params, gamma_h, cap, cfg)
        if params.c != 0.0:
            lam2 = np.array([params.c ** 2])
        else:
            lam2 = np.logspace(math.log10(cfg.lambda2_lo),
                               math.log10(cfg.lambda2_hi), cfg.n_lambda2)
        self.L = lam[:, None, None]
        self.R = r[None, :, None]
        self.L2 = lam2[None, None, :]
        self.lam1 = params.a ** 2 / self.R
        self.gamma_h = gamma_h
        self.cap = cap
        self.d_max = params.d_max
        if gamma_h > 0:
            self.m_cap = (self.L * cap / (2.0 * gamma_h)) ** 2
        else:
            self.m_cap = np.full(np.broadcast_shapes(self.L.shape, self.R.shape,
                                                     self.L2.shape), np.inf)

    def best_m(self, tau: float) -> np.ndarray:
        """M maximizing the margin of condition (I), clamped to (1, m_cap)."""
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            m_star = np.where(
                self.lam1 > 0,
                np.exp(np.minimum(self.L * tau, _EXP_CLIP)) / (tau * self.lam1),
                np.inf)
            hi = np.maximum(np.where(np.isfinite(self.m_cap),
                                     self.m_cap * (1 - 1e-12), 1e300),
                            1.0 + 1e-12)
            return np.clip(m_star, 1.0 + 1e-12, hi)

    def feasible(self, tau: float) -> np.ndarray:
        m = self.best_m(tau)
        with np.errstate(over="ignore", invalid="ignore"):
            margin_i = np.log(m) - tau * (
                self.L + self.R + self.lam1 * m * np.exp(-np.minimum(self.L * tau,
                                                                     _EXP_CLIP)))
            grow = np.exp(np.minimum(self.L * self.d_max, _EXP_CLIP))
            margin_ii = -np.log(self.L2) - tau * (
                self.L + self.R + self.lam1 / self.L2 * grow)
        return (margin_i > 0) & (margin_ii > 0) & (self.m_cap > 1.0)

    def any_feasible(self, tau: float) -> bool:
        return bool(self.feasible(tau).any())

    def tau_upper_bound(self) -> float:
        """Sound necessary bound: tau (lambda + r) < min(-ln lambda2, ln m_cap)."""
        with np.errstate(over="ignore", invalid="ignore"):
            cap_log = np.log(np.maximum(np.minimum(self.m_cap, 1e300), 1.0 + 1e-12))
            ub = np.minimum(-np.log(self.L2), cap_log) / (self.L + self.R)
        ub = np.where(self.m_cap > 1.0, ub, 0.0)
        return float(np.max(ub))

    def pick_witness(self, tau: float):
        """Witness with the largest worst-case margin at ``tau``."""
        m = self.best_m(tau)
        with np.errstate(over="ignore", invalid="ignore"):
            margin_i = np.log(m) - tau * (
                self.L + self.R + self.lam1 * m * np.exp(-np.minimum(self.L * tau,
                                                                     _EXP_CLIP)))
            grow = np.exp(np.minimum(self.L * self.d_max, _EXP_CLIP))
            margin_ii = -np.log(self.L2) - tau * (
                self.L + self.R + self.lam1 / self.L2 * grow)
        ok = (margin_i > 0) & (margin_ii > 0) & (self.m_cap > 1.0)
        if not ok.any():
            return None
        score = np.where(ok, np.minimum(margin_i, margin_ii), -np.inf)
        idx = np.unravel_index(int(np.argmax(score)), score.shape)
        shp = score.shape
        lam = float(np.broadcast_to(self.L, shp)[idx])
        r = float(np.broadcast_to(self.R, shp)[idx])
        lam2 = float(np.broadcast_to(self.L2, shp)[idx])
        big_m = float(m[idx])
        return lam, big_m, r, lam2


def _mode_cap(mode: str, gamma_d: Optional[float], gamma_des: Optional[float]) -> float:
    if mode == "LP_WITH_TARGET":
        if gamma_d is None or gamma_des is None:
            raise ValueError("LP_WITH_TARGET needs gamma_d and gamma_des")
        if not gamma_d < gamma_des:
            raise InfeasibleTargetError(
                f"target gain {gamma_des} not achievable: requires gamma_d < gamma_des "
                f"(got gamma_d={gamma_d})")
        cap = 1.0 - gamma_d / gamma_des
        if cap <= 0:
            raise InfeasibleTargetError("target leaves no admissible loop gain")
        return cap
    if mode in ("UGAS", "LP_STABLE"):
        return 1.0
    raise ValueError(f"unknown mode {mode!r}")


def certify(params: ErrorSystemParams, gamma_h: float, mode: str = "LP_STABLE",
            gamma_d: Optional[float] = None, gamma_des: Optional[float] = None,
            search: Optional[SearchConfig] = None, p_order: float = 2.0,
            a_lower: float = 1.0, a_upper: float = 1.0,
            k_h: float = 0.0, k_d: float = 0.0) -> MatiCertificate:
    """Largest certifiable transmission interval for one instance.

    ``a_lower``/``a_upper`` are the protocol sandwich constants; they
    scale the noise entering the comparison system and the composed
    closed-loop coefficients.  ``k_h``/``k_d`` are the initial-condition
    offsets of the plant-side bounds, used only for the composed record.
    """
    if gamma_h < 0:
        raise ValueError("gamma_h must be nonnegative")
    cfg = search or SearchConfig()
    cap = _mode_cap(mode, gamma_d, gamma_des)
    grid = _WitnessGrid(params, gamma_h, cap, cfg)

    tau_ub = grid.tau_upper_bound()
    if not (tau_ub > 0):
        raise SearchError("no witness grid point satisfies the loop condition; "
                          "widen the search grids")
    tau_lo_floor = min(1e-8, tau_ub * 1e-9)
    n_scan = max(cfg.min_scan_points,
                 int(cfg.scan_points_per_decade * math.log10(tau_ub / tau_lo_floor)))
    taus = np.geomspace(tau_lo_floor, tau_ub, n_scan)

    best = 0.0
    nxt = None
    for i, t in enumerate(taus):
        if grid.any_feasible(float(t)):
            best = float(t)
            nxt = float(taus[i + 1]) if i + 1 < len(taus) else tau_ub * 1.001
    if best == 0.0:
        raise SearchError("scan found no feasible interval (search failure: a "
                          "positive interval always exists)")
    lo, hi = best, nxt
    for _ in range(cfg.bisect_iters):
        mid = 0.5 * (lo + hi)
        if grid.any_feasible(mid):
            lo = mid
        else:
            hi = mid
    # issue slightly inside the boundary so the certificate carries strictly
    # positive margins rather than epsilon-of-the-bisection ones
    tau = lo * (1.0 - 1e-6)

    epsilon = params.epsilon if params.epsilon is not None else tau / 10.0
    if tau < epsilon:
        raise SearchError(
            f"largest feasible interval {tau:.3e}s is below the minimum spacing "
            f"epsilon={epsilon:.3e}s")

    picked = grid.pick_witness(tau)
    if picked is None:  # pragma: no cover - guarded by the bisection invariant
        raise SearchError("witness lost during refinement")
    lam, big_m, r, lam2 = picked
    witness = RazumikhinWitness(lam=lam, big_m=big_m, r=r, lambda2=lam2,
                                lambda1=params.a ** 2 / r)
    report = check_conditions(witness, tau, params.a, params.d_max)
    if not report.feasible:  # pragma: no cover - re-validation safety net
        raise SearchError("refined interval failed re-validation")

    gamma_w = error_gain(witness)
    small_gain_margin = cap - gamma_w * gamma_h
    if small_gain_margin <= 0:  # pragma: no cover
        raise SearchError("loop condition failed re-validation")

    k_nu = 0.0 if mode == "UGAS" else params.k_nu
    bias = (a_upper * k_nu * math.sqrt(big_m)
            / (math.exp(lam * epsilon / 2.0) - 1.0)) if k_nu > 0 else 0.0
    k_w = k_coefficient(witness, params.a, params.d_max, p_order)

    composite = compose_small_gain(gamma_w, gamma_h, k_w, k_h, bias,
                                   a_lower, a_upper)
    omega_to_x = None
    if gamma_d is not None:
        composite = compose_detectability(composite, gamma_d, k_d, a_upper)
        omega_to_x = gamma_d / (1.0 - gamma_w * gamma_h)

    return MatiCertificate(
        tau=tau, witness=witness, gamma_w=gamma_w, bias=bias, k_w=k_w,
        p_order=p_order, mode=mode, gamma_h=gamma_h, epsilon=epsilon,
        margin_i=report.margin_i, margin_ii=report.margin_ii,
        small_gain_margin=small_gain_margin, params=params,
        gamma_d=gamma_d, gamma_des=gamma_des,
        omega_to_x_gain_bound=omega_to_x, composite=composite)


def compose_small_gain(gamma_w: float, gamma_h: float, k_w: float, k_h: float,
                       bias: float, a_lower: float, a_upper: float) -> CompositeGains:
    """Closed-loop coefficients of the interconnection.

    Error channel (coefficients of the closed-loop error bound):

        ||e|| <= (a_upper k_w / a_lower)/D ||e_0||
               + (gamma_w k_h / a_lower)/D ||x_0||
               + (gamma_w gamma_h / a_lower)/D ||omega|| + (1/a_lower)/D b

    with D = 1 - gamma_w gamma_h, plus the matching inner-output channel
    and their combination: gain gamma_h (1 + gamma_w/a_lower)/D and bias
    (gamma_h + 1/a_lower)/D * b.
    """
    prod = gamma_w * gamma_h
    if not prod < 1.0:
        raise InfeasibleTargetError(
            f"loop condition violated: gamma_w*gamma_h = {prod:.6g} >= 1")
    d = 1.0 - prod
    inv_al = 1.0 / a_lower
    return CompositeGains(
        gamma_w=gamma_w, gamma_h=gamma_h, k_h=k_h, a_lower=a_lower,
        gain_he=gamma_h * (1.0 + gamma_w * inv_al) / d,
        bias_he=(gamma_h + inv_al) / d * bias,
        gain_e=gamma_w * gamma_h * inv_al / d,
        bias_e=inv_al / d * bias,
        k_e_from_e0=a_upper * k_w * inv_al / d,
        k_e_from_x0=gamma_w * k_h * inv_al / d,
        gain_h=gamma_h / d,
        bias_h=gamma_h / d * bias,
        k_h_from_x0=k_h / d,
        k_h_from_e0=a_upper * k_h * k_w / d,
    )


def compose_detectability(composite: CompositeGains, gamma_d: float,
                          k_d: float, a_upper: float) -> CompositeGains:
    """Extend the composed record with the state channel.

    Chaining the state bound through the inner output adds terms
    gamma_d (gamma_h + 1) on the disturbance and on an a_upper-scaled
    error channel; substituting the closed-loop error bound then gives
    the disturbance -> (state, error) coefficients.
    """
    if gamma_d < 0:
        raise ValueError("gamma_d must be nonnegative")
    gh1 = composite.gamma_h + 1.0
    coef_e = a_upper * gamma_d * gh1
    gain_x = gamma_d * gh1 + coef_e * composite.gain_e
    bias_x = coef_e * composite.bias_e
    k_x_from_x0 = k_d + gamma_d * composite.k_h + coef_e * composite.k_e_from_x0
    k_x_from_e0 = coef_e * composite.k_e_from_e0
    return replace(composite,
                   gain_x=gain_x, bias_x=bias_x,
                   k_x_from_x0=k_x_from_x0, k_x_from_e0=k_x_from_e0,
                   gain_xe=gain_x + composite.gain_e,
                   bias_xe=bias_x + composite.bias_e)


def adjust_for_dropouts(tau: float, n_d: int) -> float:
    """Interval to schedule when up to ``n_d - 1`` consecutive losses occur.

    With at most ``n_d`` attempts needed per successful delivery, using
    tau / n_d keeps every successful update within the certified spacing.
    """
    if n_d < 1:
        raise ValueError("n_d must be a positive integer")
    return tau / n_d


def per_link_rate_for_unsynchronized(tau_rr: float) -> float:
    """Per-link transmission interval for unsynchronized links.

    Each link must transmit at least as often as the round-robin
    certificate's interval itself (not l times slower): the whole-loop
    schedule no longer interleaves grants, so every link independently
    needs spacing below tau_rr.
    """
    return tau_rr


@dataclass(frozen=True)
class SweepRow:
    delay: float
    protocol: str
    estimator: str
    mode: str
    gamma_h: float
    tau: Optional[float]
    lam: Optional[float]
    big_m: Optional[float]
    r: Optional[float]
    lambda2: Optional[float]
    margin_i: Optional[float]
    margin_ii: Optional[float]
    certified: bool
    note: str = ""


def sweep(family, delays: Sequence[float], protocol: str, estimator: str = "zoh",
          mode: str = "LP_STABLE", search: Optional[SearchConfig] = None,
          workers: int = 0) -> list:
    """Certify one row per delay grid point for a scenario family.

    ``family`` is a scenario family name (see scenarios.catalog) or an
    object with ``build(d, protocol, estimator, mode)`` returning a
    Scenario.  Rows with no configured gain are marked not-certified;
    per-row failures are recorded without aborting the sweep.  Output is
    sorted by delay regardless of worker scheduling.
    """
    from . import scenarios as _sc

    fam = _sc.catalog()[family] if isinstance(family, str) else family

    def one(d: float) -> SweepRow:
        try:
            scn = fam.build(d, protocol=protocol, estimator=estimator, mode=mode)
        except _sc.GainUnavailableError as exc:
            return SweepRow(d, protocol, estimator, mode, math.nan, None, None,
                            None, None, None, None, None, False, str(exc))
        params = _sc.error_params_for(scn, protocol)
        proto = _sc.protocol_for(scn, protocol)
        try:
            cert = certify(params, scn.gamma_h, mode=mode, gamma_d=scn.gamma_d,
                           gamma_des=scn.gamma_des, search=search,
                           a_lower=proto.a_lower, a_upper=proto.a_upper,
                           k_h=scn.k_h, k_d=scn.k_d)
        except (SearchError, InfeasibleTargetError) as exc:
            return SweepRow(d, protocol, estimator, mode, scn.gamma_h, None, None,
                            None, None, None, None, None, False, str(exc))
        w = cert.witness
        return SweepRow(d, protocol, estimator, mode, scn.gamma_h, cert.tau,
                        w.lam, w.big_m, w.r, w.lambda2, cert.margin_i,
                        cert.margin_ii, True)

    delays = list(delays)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, delays))
    else:
        rows = [one(d) for d in delays]
    return sorted(rows, key=lambda row: row.delay)
