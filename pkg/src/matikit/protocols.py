"""Scheduling protocol models: round robin and largest-error-first.

Both protocols come with a function W(i, e) sandwiched between
``a_lower * ||e||`` and ``a_upper * ||e||`` that contracts by ``rho`` at
every noise-free grant.  The grant rule and the additive noise injection
are kept separate: the deterministic rule picks the link, the injected
noise replaces that link's error components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import ProtocolSpec

__all__ = [
    "ProtocolState",
    "make_round_robin",
    "make_tod",
    "initial_state",
    "w_value",
    "w_weights",
    "granted_link",
    "apply_jump",
    "NoiseBoundError",
]


class NoiseBoundError(ValueError):
    """Injected noise exceeds the declared bound."""


@dataclass(frozen=True)
class ProtocolState:
    """Grant bookkeeping carried between transmissions.

    ``counter`` counts grants so far.  For round robin,
    ``steps_to_grant[j]`` is how many further grants happen before link j
    is served (a permutation of 0..l-1); largest-error-first needs no
    memory.
    """

    counter: int = 0
    steps_to_grant: Optional[tuple] = None

    def __post_init__(self):
        if self.steps_to_grant is not None:
            if sorted(self.steps_to_grant) != list(range(len(self.steps_to_grant))):
                raise ValueError("steps_to_grant must be a permutation of 0..l-1")


def make_round_robin(l: int, link_sizes: Optional[Sequence[int]] = None) -> ProtocolSpec:
    """Round robin over ``l`` links (component count per link optional)."""
    if l < 1:
        raise ValueError("need at least one link")
    sizes = tuple(int(s) for s in (link_sizes or (1,) * l))
    if len(sizes) != l:
        raise ValueError("link_sizes length must equal l")
    return ProtocolSpec("rr", sizes, a_lower=1.0, a_upper=math.sqrt(l),
                        rho=math.sqrt((l - 1) / l))


def make_tod(l: int, link_sizes: Optional[Sequence[int]] = None) -> ProtocolSpec:
    """Largest-error-first ("try once, discard") over ``l`` links."""
    if l < 1:
        raise ValueError("need at least one link")
    sizes = tuple(int(s) for s in (link_sizes or (1,) * l))
    if len(sizes) != l:
        raise ValueError("link_sizes length must equal l")
    return ProtocolSpec("tod", sizes, a_lower=1.0, a_upper=1.0,
                        rho=math.sqrt((l - 1) / l))


def initial_state(proto: ProtocolSpec, offset: int = 0) -> ProtocolState:
    if proto.name == "rr":
        l = proto.link_count
        steps = tuple((j - offset) % l for j in range(l))
        return ProtocolState(counter=0, steps_to_grant=steps)
    return ProtocolState(counter=0)


def w_weights(proto: ProtocolSpec, state: ProtocolState) -> np.ndarray:
    """Per-link squared weights of W: RR uses steps-to-grant + 1, flat 1 otherwise."""
    if proto.name == "rr":
        return np.asarray(state.steps_to_grant, dtype=float) + 1.0
    return np.ones(proto.link_count)


def _link_norms(proto: ProtocolSpec, e: np.ndarray) -> np.ndarray:
    """Euclidean norm of each link's sub-vector; e is (..., n_e)."""
    return np.stack([np.linalg.norm(e[..., sl], axis=-1) for sl in proto.link_slices()],
                    axis=-1)


def w_value(proto: ProtocolSpec, state: ProtocolState, e) -> np.ndarray:
    """W(i, e) = sqrt(sum_j w_j ||e_j||^2); scalar for 1-d input."""
    e = np.asarray(e, dtype=float)
    if e.shape[-1] != proto.n_e:
        raise ValueError(f"error vector has {e.shape[-1]} components, expected {proto.n_e}")
    sq = _link_norms(proto, e) ** 2
    val = np.sqrt(sq @ w_weights(proto, state))
    return float(val) if val.ndim == 0 else val


def granted_link(proto: ProtocolSpec, state: ProtocolState, e) -> np.ndarray:
    """Index of the link served at the next transmission (per batch row).

    RR serves the link whose steps-to-grant is 0.  Largest-error-first
    serves the link with maximal sub-vector norm, breaking ties toward
    the lowest index (argmax does exactly that).
    """
    e = np.asarray(e, dtype=float)
    if proto.name == "rr":
        g = int(np.asarray(state.steps_to_grant).argmin())
        return np.full(e.shape[:-1], g, dtype=int) if e.ndim > 1 else np.asarray(g)
    norms = _link_norms(proto, e)
    return np.argmax(norms, axis=-1)


def _advance(proto: ProtocolSpec, state: ProtocolState) -> ProtocolState:
    if proto.name == "rr":
        l = proto.link_count
        steps = tuple((s - 1) % l for s in state.steps_to_grant)
        return ProtocolState(counter=state.counter + 1, steps_to_grant=steps)
    return ProtocolState(counter=state.counter + 1)


def apply_jump(proto: ProtocolSpec, state: ProtocolState, e, noise=None,
               k_nu: Optional[float] = None) -> Tuple[np.ndarray, ProtocolState]:
    """One transmission: the granted link's error is replaced by its noise.

    ``noise`` holds per-link replacement values (same layout as e); only
    the granted link's slice is consumed.  All other components are
    untouched and the grant bookkeeping advances.  Raises
    NoiseBoundError when the consumed noise exceeds ``k_nu``.
    """
    e = np.asarray(e, dtype=float)
    squeeze = e.ndim == 1
    eb = e[None, :] if squeeze else e
    if noise is None:
        nb = np.zeros_like(eb)
    else:
        noise = np.asarray(noise, dtype=float)
        nb = noise[None, :] if noise.ndim == 1 else noise
    g = granted_link(proto, state, eb)
    out = eb.copy()
    slices = proto.link_slices()
    for j, sl in enumerate(slices):
        rows = np.flatnonzero(g == j)
        if rows.size == 0:
            continue
        nu = nb[rows][:, sl]
        if k_nu is not None:
            mags = np.linalg.norm(nu, axis=-1)
            if np.any(mags > k_nu + 1e-12):
                raise NoiseBoundError(
                    f"noise magnitude {float(mags.max()):.6g} exceeds bound {k_nu:.6g}")
        out[rows[:, None], np.arange(sl.start, sl.stop)[None, :]] = nu
    out = out[0] if squeeze else out
    return out, _advance(proto, state)
