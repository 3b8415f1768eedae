"""Fixed-step integration of the impulsive delayed closed loop.

Between transmissions the interconnected flows are advanced with the
classic 4-stage explicit scheme; at transmission instants (snapped to
grid nodes) the granted link's error components are replaced by the
injected noise while the plant state stays continuous.  Delayed
arguments are read from a ring buffer holding left/right node values and
derivatives with cubic Hermite interpolation in between, so trajectories
with jumps at nodes interpolate cleanly on every inter-node segment.

Reads slightly ahead of the last completed node (needed only when a
time-varying delay dips below one step) are served by extrapolating the
last completed segment; across a jump node the extrapolation falls back
to a first-order expansion from the post-jump side.

Everything is batched: states are (batch, n) arrays and one call
integrates a whole bank of initial histories or disturbance inputs under
a shared transmission schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Scenario, SimTrace
from .protocols import (ProtocolState, apply_jump, granted_link,
                        initial_state, w_value, w_weights)

__all__ = [
    "HistoryBuffer",
    "StageView",
    "make_schedule",
    "integrate",
    "integrate_comparison",
    "verify_growth_inequality",
    "verify_ugas",
    "UgasReport",
    "constant_history",
    "spline_history",
]

_NODE_TOL = 1e-9  # node-fraction snap for queries landing on grid points


class HistoryBuffer:
    """Ring of node samples with one-sided values for jump-aware lookup.

    Stores, per node, the left/right limits of the value and of the
    derivative.  ``read`` evaluates the cubic Hermite interpolant of the
    segment containing the query (right data at the lower node, left
    data at the upper node), falls back to the initial-history callable
    for queries before the start time, and extrapolates for queries past
    the newest node.
    """

    def __init__(self, span: float, step: float, batch: int, dim: int,
                 t0: float, initial: Callable[[np.ndarray], np.ndarray]):
        self.step = step
        self.t0 = t0
        self.size = max(int(math.ceil(span / step)) + 8, 12)
        shape = (self.size, batch, dim)
        self.val_l = np.zeros(shape)
        self.val_r = np.zeros(shape)
        self.der_l = np.zeros(shape)
        self.der_r = np.zeros(shape)
        self.jumped = np.zeros(self.size, dtype=bool)
        self.newest = -1
        self.initial = initial

    def put(self, k: int, val_l, der_l, val_r=None, der_r=None,
            jumped: bool = False):
        i = k % self.size
        self.val_l[i] = val_l
        self.der_l[i] = der_l
        self.val_r[i] = val_l if val_r is None else val_r
        self.der_r[i] = der_l if der_r is None else der_r
        self.jumped[i] = jumped
        self.newest = max(self.newest, k)

    def read(self, t_query: float) -> np.ndarray:
        if t_query < self.t0 - _NODE_TOL * self.step:
            return self.initial(t_query - self.t0)
        s = (t_query - self.t0) / self.step
        k0 = int(math.floor(s + _NODE_TOL))
        th = s - k0
        if th < 0.0:
            th = 0.0
        if k0 >= self.newest:
            return self._extrapolate(t_query)
        i0 = k0 % self.size
        i1 = (k0 + 1) % self.size
        y0, m0 = self.val_r[i0], self.der_r[i0]
        y1, m1 = self.val_l[i1], self.der_l[i1]
        h = self.step
        h00 = (1 + 2 * th) * (1 - th) ** 2
        h10 = th * (1 - th) ** 2
        h01 = th * th * (3 - 2 * th)
        h11 = th * th * (th - 1)
        return h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1

    def _extrapolate(self, t_query: float) -> np.ndarray:
        k = self.newest
        i = k % self.size
        dt = t_query - (self.t0 + k * self.step)
        if k <= 0 or self.jumped[i]:
            # no completed pre-segment, or the newest node carries a jump:
            # expand from the post-jump side
            return self.val_r[i] + dt * self.der_r[i]
        th = 1.0 + dt / self.step
        i0 = (k - 1) % self.size
        y0, m0 = self.val_r[i0], self.der_r[i0]
        y1, m1 = self.val_l[i], self.der_l[i]
        h = self.step
        h00 = (1 + 2 * th) * (1 - th) ** 2
        h10 = th * (1 - th) ** 2
        h01 = th * th * (3 - 2 * th)
        h11 = th * th * (th - 1)
        return h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1


def constant_history(values: np.ndarray) -> Callable[[float], np.ndarray]:
    values = np.atleast_2d(np.asarray(values, dtype=float))

    def phi(theta):
        return values

    return phi


def spline_history(rng: np.random.Generator, batch: int, dim: int,
                   span: float, scale: float = 1.0, knots: int = 5):
    """Random C^1 history: cubic interpolation through random knots."""
    span = max(span, 1e-9)
    ts = np.linspace(-span, 0.0, knots)
    ys = rng.uniform(-scale, scale, size=(knots, batch, dim))

    def phi(theta):
        th = float(np.clip(theta, -span, 0.0))
        j = min(int((th + span) / (span / (knots - 1))), knots - 2)
        u = (th - ts[j]) / (ts[j + 1] - ts[j])
        # smoothstep blend keeps the derivative bounded and continuous
        w = u * u * (3 - 2 * u)
        return (1 - w) * ys[j] + w * ys[j + 1]

    return phi


@dataclass
class StageView:
    """Evaluation context handed to scenario flows at one stage time."""

    t: float
    x: np.ndarray
    e: np.ndarray
    omega_fn: Callable[[float], np.ndarray]
    x_buf: HistoryBuffer
    e_buf: HistoryBuffer

    def omega(self, t_query: Optional[float] = None) -> np.ndarray:
        return self.omega_fn(self.t if t_query is None else t_query)

    def x_at(self, t_query: float) -> np.ndarray:
        if t_query == self.t:
            return self.x
        return self.x_buf.read(t_query)

    def e_at(self, t_query: float) -> np.ndarray:
        if t_query == self.t:
            return self.e
        return self.e_buf.read(t_query)


def make_schedule(tau: float, epsilon: float, horizon: float, step: float,
                  rng: Optional[np.random.Generator] = None,
                  fixed: bool = False) -> list:
    """Transmission node indices with spacing in [epsilon, tau].

    Spacings are drawn uniformly (or fixed at tau) and snapped to grid
    nodes; the snap never pushes a spacing outside [epsilon, tau] because
    epsilon and tau are both at least one node apart by the step
    precondition.
    """
    if not (0 < epsilon <= tau):
        raise ValueError("need 0 < epsilon <= tau")
    n_steps = int(round(horizon / step))
    k_eps = max(1, int(math.ceil(epsilon / step - 1e-9)))
    k_tau = max(k_eps, int(math.floor(tau / step + 1e-9)))
    nodes = []
    k = 0
    while True:
        if fixed or rng is None:
            gap = k_tau
        else:
            gap = int(rng.integers(k_eps, k_tau + 1))
        k += gap
        if k >= n_steps:
            break
        nodes.append(k)
    return nodes


def _l2_segment(acc, step, sq_left, sq_right):
    acc += 0.5 * step * (sq_left + sq_right)
    return acc


def integrate(scenario: Scenario, proto, tau: float, epsilon: Optional[float] = None,
              horizon: float = 5.0, step: Optional[float] = None,
              seed: Optional[int] = None,
              x0: Optional[np.ndarray] = None, e0: Optional[np.ndarray] = None,
              x_history: Optional[Callable] = None,
              e_history: Optional[Callable] = None,
              omega: Optional[Callable] = None,
              noise: str = "zero",
              fixed_spacing: bool = False,
              record_stride: Optional[int] = None,
              blow_up: float = 1e9) -> SimTrace:
    """Integrate the closed loop under protocol ``proto`` for ``horizon`` s.

    Initial conditions: constant histories from ``x0``/``e0`` arrays of
    shape (batch, n) (or callables over [-span, 0]).  ``omega`` maps a
    time to a (batch, n_omega) array; ``noise`` is "zero" or "uniform"
    (per-grant magnitudes uniform in [0, k_nu]).  Transmission spacings
    are uniform in [epsilon, tau] unless ``fixed_spacing``.
    """
    rng = np.random.default_rng(seed)
    if epsilon is None:
        epsilon = tau / 10.0

    pos_delays = []
    if scenario.delay is not None and scenario.delay.d_max > 0:
        pos_delays.append(scenario.delay.d_max)
    for dv in (scenario.d_plant, scenario.d_ctrl):
        if dv > 0:
            pos_delays.append(dv)
    step_cap = min(pos_delays + [tau]) / 20.0
    if step is None:
        step = step_cap
    if step > step_cap * (1 + 1e-9):
        raise ValueError(f"step {step:.3e} exceeds bound {step_cap:.3e} "
                         "(min(positive delays, tau)/20)")
    if horizon <= 0:
        raise ValueError("horizon must be positive")

    n_steps = int(round(horizon / step))
    if x0 is None:
        x0 = np.zeros((1, scenario.n_x))
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    batch = x0.shape[0]
    if e0 is None:
        e0 = np.zeros((batch, scenario.n_e))
    e0 = np.atleast_2d(np.asarray(e0, dtype=float))

    span = max(scenario.history_span, step) + 4 * step
    phi_x = x_history or constant_history(x0)
    phi_e = e_history or constant_history(e0)
    x_buf = HistoryBuffer(span, step, batch, scenario.n_x, 0.0, phi_x)
    e_buf = HistoryBuffer(span, step, batch, scenario.n_e, 0.0, phi_e)

    if omega is None:
        zero_w = np.zeros((batch, scenario.n_omega))
        omega = lambda t: zero_w

    events = make_schedule(tau, epsilon, horizon, step, rng=rng,
                           fixed=fixed_spacing)
    event_set = set(events)

    state = initial_state(proto)
    counters = np.zeros(n_steps + 1, dtype=int)

    def flows(t, x, e):
        view = StageView(t, x, e, omega, x_buf, e_buf)
        return scenario.flow_x(view), scenario.flow_e(view)

    def h_at(t, x, e):
        view = StageView(t, x, e, omega, x_buf, e_buf)
        return np.asarray(scenario.h_norm(view), dtype=float)

    x = x0.copy()
    e = e0.copy()
    fx0, fe0 = flows(0.0, x, e)
    x_buf.put(0, x, fx0)
    e_buf.put(0, e, fe0)

    stride = record_stride or max(1, n_steps // 2000)
    rec_idx = list(range(0, n_steps + 1, stride))
    if rec_idx[-1] != n_steps:
        rec_idx.append(n_steps)
    rec_pos = {k: i for i, k in enumerate(rec_idx)}
    t_rec = np.array([k * step for k in rec_idx])
    x_rec = np.zeros((len(rec_idx), batch, scenario.n_x))
    e_rec = np.zeros((len(rec_idx), batch, scenario.n_e))
    x_rec[0], e_rec[0] = x, e

    t_aux = np.arange(n_steps + 1) * step
    w_now = np.zeros((n_steps + 1, batch))
    w_del = np.zeros((n_steps + 1, batch))
    h_now = np.zeros((n_steps + 1, batch))
    xe_norm = np.zeros((n_steps + 1, batch))
    jump_mask = np.zeros(n_steps + 1, dtype=bool)

    def aux_record(k, t, x, e, st):
        w_now[k] = w_value(proto, st, e)
        if scenario.delay is not None and not scenario.delay.is_zero:
            dq = float(scenario.delay.value_at(t))
            e_del = e if dq == 0.0 else e_buf.read(t - dq)
        else:
            e_del = e
        w_del[k] = w_value(proto, st, e_del)
        h_now[k] = h_at(t, x, e)
        xe_norm[k] = np.sqrt((x * x).sum(axis=1) + (e * e).sum(axis=1))

    aux_record(0, 0.0, x, e, state)
    counters[0] = state.counter

    norm_x = np.zeros(batch)
    norm_e = np.zeros(batch)
    norm_w = np.zeros(batch)
    norm_h = np.zeros(batch)
    diverged = np.zeros(batch, dtype=bool)
    div_time = np.full(batch, np.nan)
    event_log = []

    half = 0.5 * step
    for k in range(n_steps):
        t = k * step
        k1x, k1e = flows(t, x, e)
        k2x, k2e = flows(t + half, x + half * k1x, e + half * k1e)
        k3x, k3e = flows(t + half, x + half * k2x, e + half * k2e)
        k4x, k4e = flows(t + step, x + step * k3x, e + step * k3e)
        xn = x + step / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        en = e + step / 6.0 * (k1e + 2 * k2e + 2 * k3e + k4e)

        kn = k + 1
        tn = kn * step
        fxl, fel = flows(tn, xn, en)

        # segment norms: right values at k, left values at k+1
        i_prev = k % x_buf.size
        sq_x0 = (x_buf.val_r[i_prev] ** 2).sum(axis=1)
        sq_e0 = (e_buf.val_r[i_prev] ** 2).sum(axis=1)
        w0 = omega(t)
        w1 = omega(tn)
        norm_x = _l2_segment(norm_x, step, sq_x0, (xn * xn).sum(axis=1))
        norm_e = _l2_segment(norm_e, step, sq_e0, (en * en).sum(axis=1))
        norm_w = _l2_segment(norm_w, step, (w0 * w0).sum(axis=1),
                             (w1 * w1).sum(axis=1))

        if kn in event_set:
            if noise == "uniform" and scenario.k_nu > 0:
                raw = rng.standard_normal(en.shape)
                raw /= np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-30)
                nu = raw * rng.uniform(0.0, scenario.k_nu, size=(batch, 1))
            else:
                nu = np.zeros_like(en)
            granted = granted_link(proto, state, en)
            ep, state_next = apply_jump(proto, state, en, nu, k_nu=scenario.k_nu or None)
            fxr, fer = flows(tn, xn, ep)
            x_buf.put(kn, xn, fxl, xn, fxr, jumped=True)
            e_buf.put(kn, en, fel, ep, fer, jumped=True)
            event_log.append({"t": tn, "k": kn, "granted": np.atleast_1d(granted),
                              "noise": nu, "e_pre": en.copy(), "e_post": ep.copy(),
                              "x_pre": xn.copy(), "x_post": xn.copy()})
            e_next = ep
            state = state_next
            jump_mask[kn] = True
        else:
            x_buf.put(kn, xn, fxl)
            e_buf.put(kn, en, fel)
            e_next = en

        x = xn
        e = e_next
        counters[kn] = state.counter
        aux_record(kn, tn, x, e, state)
        hseg0, hseg1 = h_now[k], h_now[kn]
        norm_h = _l2_segment(norm_h, step, hseg0 ** 2, hseg1 ** 2)

        mag = xe_norm[kn]
        newly = (~diverged) & (mag > blow_up)
        if newly.any():
            div_time[newly] = tn
            diverged |= newly
            # freeze runaway rows so the rest of the batch stays finite
            scale = np.where(mag > blow_up, blow_up / np.maximum(mag, 1e-30), 1.0)
            x = x * scale[:, None]
            e = e * scale[:, None]

        if kn in rec_pos:
            x_rec[rec_pos[kn]] = x
            e_rec[rec_pos[kn]] = e

    return SimTrace(t=t_rec, x=x_rec, e=e_rec, events=event_log, step=step,
                    t_aux=t_aux, w_now=w_now, w_delayed=w_del, h_now=h_now,
                    xe_norm=xe_norm, jump_mask=jump_mask, counters=counters,
                    norm_x=norm_x, norm_e=norm_e, norm_omega=norm_w,
                    norm_h=norm_h, diverged=diverged, divergence_time=div_time)


def integrate_comparison(a: float, c: float, delay, tau: float, epsilon: float,
                         horizon: float, step: float,
                         xi0: np.ndarray,
                         u_fn: Optional[Callable[[float], np.ndarray]] = None,
                         nu_fn: Optional[Callable[[float, int], np.ndarray]] = None,
                         seed: Optional[int] = None,
                         fixed_spacing: bool = False):
    """Integrate the scalar comparison system for a batch of initial values.

    ``delay`` is a DelayProfile (or None for no delay); ``u_fn`` maps t to
    a (batch,) input; ``nu_fn(t, index)`` yields per-event jump noise.
    Returns (times, trajectory (nodes, batch), event times, l2_xi, l2_u).
    """
    rng = np.random.default_rng(seed)
    xi0 = np.atleast_1d(np.asarray(xi0, dtype=float))
    batch = xi0.shape[0]
    d_max = 0.0 if delay is None else delay.d_max
    if d_max > 0 and step > d_max / 20.0 * (1 + 1e-9):
        raise ValueError("step must satisfy step <= d_max/20")
    if step > tau / 20.0 * (1 + 1e-9):
        raise ValueError("step must satisfy step <= tau/20")

    n_steps = int(round(horizon / step))
    span = max(d_max, step) + 4 * step
    phi = constant_history(xi0[:, None])
    buf = HistoryBuffer(span, step, batch, 1, 0.0, phi)

    events = make_schedule(tau, epsilon, horizon, step, rng=rng, fixed=fixed_spacing)
    event_set = set(events)

    def rhs(t, y):
        if d_max > 0:
            dq = float(delay.value_at(t))
            yd = y if dq == 0.0 else buf.read(t - dq)[:, 0]
        else:
            yd = y
        u = u_fn(t) if u_fn is not None else 0.0
        return a * yd + u

    y = xi0.copy()
    buf.put(0, y[:, None], rhs(0.0, y)[:, None])
    traj = np.zeros((n_steps + 1, batch))
    traj[0] = y
    l2_xi = np.zeros(batch)
    l2_u = np.zeros(batch)
    half = 0.5 * step
    n_events = 0
    for k in range(n_steps):
        t = k * step
        k1 = rhs(t, y)
        k2 = rhs(t + half, y + half * k1)
        k3 = rhs(t + half, y + half * k2)
        k4 = rhs(t + step, y + step * k3)
        yn = y + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        kn = k + 1
        tn = kn * step
        dln = rhs(tn, yn)
        u0 = u_fn(t) if u_fn is not None else np.zeros(batch)
        u1 = u_fn(tn) if u_fn is not None else np.zeros(batch)
        l2_u = _l2_segment(l2_u, step, np.square(u0), np.square(u1))
        l2_xi = _l2_segment(l2_xi, step, buf.val_r[k % buf.size][:, 0] ** 2,
                            yn ** 2)
        if kn in event_set:
            nu = (nu_fn(tn, n_events) if nu_fn is not None
                  else np.zeros(batch))
            yp = c * yn + nu
            buf.put(kn, yn[:, None], dln[:, None], yp[:, None],
                    rhs(tn, yp)[:, None], jumped=True)
            y = yp
            n_events += 1
        else:
            buf.put(kn, yn[:, None], dln[:, None])
            y = yn
        traj[kn] = y
    times = np.arange(n_steps + 1) * step
    return times, traj, [kk * step for kk in sorted(event_set)], \
        np.sqrt(l2_xi), np.sqrt(l2_u)


def verify_growth_inequality(trace: SimTrace, scenario: Scenario, proto,
                             growth_l: Optional[float] = None,
                             tol: float = 0.0) -> float:
    """Worst signed violation of the growth bound along a trace.

    Checks, away from jump nodes, that the finite-difference slope of
    W(i, e(t)) stays below growth_l * W(i, e(t - d(t))) + ||H|| (+tol);
    the right-hand side is sampled at both segment endpoints and the
    larger value used, so the check is exact up to O(step^2) curvature.
    Positive return = violation.
    """
    L = scenario.growth_l if growth_l is None else growth_l
    h = trace.step
    w = trace.w_now
    wd = trace.w_delayed
    hn = trace.h_now
    worst = -np.inf
    n = w.shape[0] - 1
    for k in range(n):
        if trace.jump_mask[k] or trace.jump_mask[k + 1]:
            continue
        fd = (w[k + 1] - w[k]) / h
        rhs = L * np.maximum(wd[k], wd[k + 1]) + np.maximum(hn[k], hn[k + 1]) + tol
        worst = max(worst, float((fd - rhs).max()))
    return worst


@dataclass(frozen=True)
class UgasReport:
    trials: int
    converged: int
    worst_ratio: float
    diverged: int


def verify_ugas(scenario: Scenario, proto, tau: float, trials: int = 50,
                horizon: float = 10.0, seed: int = 0,
                ratio_bound: float = 1e-3, init_scale: float = 1.0,
                groups: int = 5, step: Optional[float] = None) -> UgasReport:
    """Convergence battery: disturbance-free runs from random histories.

    Runs ``trials`` random constant initial histories (split across
    ``groups`` independently drawn schedules), reports how many reach
    ||(x, e)(T)|| < ratio_bound * ||initial|| and the worst final ratio.
    Divergence is counted, not raised.
    """
    rng = np.random.default_rng(seed)
    per = [trials // groups + (1 if g < trials % groups else 0)
           for g in range(groups)]
    converged = 0
    worst = 0.0
    diverged = 0
    for g, m in enumerate(per):
        if m == 0:
            continue
        x0 = rng.uniform(-init_scale, init_scale, size=(m, scenario.n_x))
        e0 = rng.uniform(-init_scale, init_scale, size=(m, scenario.n_e))
        trace = integrate(scenario, proto, tau, horizon=horizon, step=step,
                          seed=seed * 1000 + g, x0=x0, e0=e0)
        init = np.sqrt((x0 * x0).sum(axis=1) + (e0 * e0).sum(axis=1))
        final = trace.xe_norm[-1]
        ratio = final / np.maximum(init, 1e-30)
        ok = (ratio < ratio_bound) & ~trace.diverged
        converged += int(ok.sum())
        diverged += int(trace.diverged.sum())
        worst = max(worst, float(ratio.max()))
    return UgasReport(trials=trials, converged=converged, worst_ratio=worst,
                      diverged=diverged)
