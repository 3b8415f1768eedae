"""Decay conditions for the scalar impulsive delayed comparison system

    xi'(t)  = a xi(t - d(t)) + u(t)        between transmissions,
    xi(t+)  = c xi(t) + nu(t)              at transmissions,

with |c| < 1, d(t) <= d_max and spacing in [epsilon, tau].  A witness
(lambda, M, r, lambda2) certifies the exponential envelope

    |xi(t)| <= sqrt(M) |xi_0| exp(-lambda/2 (t - t0))

whenever both conditions below hold with positive margin:

    (I)   tau (lambda + r + lambda1 M e^{-lambda tau})          < ln M
    (II)  tau (lambda + r + lambda1/lambda2 e^{lambda d_max})   < -ln lambda2

where lambda1 = a^2 / r and lambda2 = c^2 for c != 0 (free in (0,1) for
c = 0).  The induced input-output gain and noise bias follow in closed
form from the witness.

All functions are pure and track the exact inequalities: `feasible`
means strictly positive margins, no hidden slack.  Exponentials are
evaluated in double precision; the term lambda1 M e^{-lambda tau} in
condition (I) may underflow to zero for large lambda tau, which is
harmless (the condition only gets easier).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import RazumikhinWitness, WitnessError

__all__ = [
    "FeasibilityReport",
    "check_conditions",
    "margins",
    "error_gain",
    "error_bias",
    "k_coefficient",
    "decay_envelope",
]

_EXP_CLIP = 700.0  # beyond this exp() overflows a double


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    margin_i: float
    margin_ii: float


def margins(lam: float, big_m: float, r: float, lambda2: float,
            tau: float, a: float, d_max: float):
    """Margins of conditions (I) and (II); positive means satisfied."""
    lambda1 = a * a / r
    term_i = lambda1 * big_m * math.exp(-min(lam * tau, _EXP_CLIP))
    margin_i = math.log(big_m) - tau * (lam + r + term_i)
    grow = math.exp(min(lam * d_max, _EXP_CLIP))
    margin_ii = -math.log(lambda2) - tau * (lam + r + lambda1 / lambda2 * grow)
    return margin_i, margin_ii


def check_conditions(w: RazumikhinWitness, tau: float, a: float,
                     d_max: float) -> FeasibilityReport:
    """Evaluate conditions (I)/(II) for a witness at interval ``tau``.

    lambda1 is recomputed from (a, r); the witness's stored lambda1 is
    only a record of the instance it was issued against.
    """
    if tau < 0 or d_max < 0:
        raise ValueError("tau and d_max must be nonnegative")
    if w.big_m <= 1 or w.r <= 0 or not (0 < w.lambda2 < 1):
        raise WitnessError("witness invariants violated")
    m_i, m_ii = margins(w.lam, w.big_m, w.r, w.lambda2, tau, a, d_max)
    return FeasibilityReport(feasible=(m_i > 0 and m_ii > 0),
                             margin_i=m_i, margin_ii=m_ii)


def error_gain(w: RazumikhinWitness) -> float:
    """Input-output gain of the comparison system: (2/lambda) sqrt(M)."""
    return 2.0 / w.lam * math.sqrt(w.big_m)


def error_bias(w: RazumikhinWitness, k_nu_tilde: float, epsilon: float) -> float:
    """Offset produced by jump noise bounded by ``k_nu_tilde``.

    Diverges as epsilon -> 0 (noise can be injected arbitrarily often),
    hence epsilon must be strictly positive.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if k_nu_tilde < 0:
        raise ValueError("noise bound must be nonnegative")
    if k_nu_tilde == 0.0:
        return 0.0
    return k_nu_tilde * math.sqrt(w.big_m) / (math.exp(w.lam * epsilon / 2.0) - 1.0)


def k_coefficient(w: RazumikhinWitness, a: float, d_max: float,
                  p: float = 2.0) -> float:
    """Initial-history coefficient of the induced norm bound at order p.

    2 sqrt(M) (1 + |a| (2/lambda)(e^{d_max lambda / 2} - 1)) (1/(p lambda))^{1/p};
    the trailing factor tends to 1 as p -> inf.
    """
    base = 2.0 * math.sqrt(w.big_m) * (
        1.0 + abs(a) * (2.0 / w.lam) * (math.exp(d_max * w.lam / 2.0) - 1.0))
    if math.isinf(p):
        return base
    if p < 1:
        raise ValueError("p must lie in [1, inf]")
    return base * (1.0 / (p * w.lam)) ** (1.0 / p)


def decay_envelope(w: RazumikhinWitness, xi0_norm: float, t_elapsed) -> np.ndarray:
    """sqrt(M) ||xi_0|| e^{-(lambda/2) t}; accepts scalar or array times."""
    t = np.asarray(t_elapsed, dtype=float)
    if np.any(t < 0):
        raise ValueError("elapsed time must be nonnegative")
    out = math.sqrt(w.big_m) * xi0_norm * np.exp(-w.lam / 2.0 * t)
    return float(out) if out.ndim == 0 else out
