"""Rank-certified second-phase points along a ray ``s * v``.

Along the ray each ReLU neuron ``sigma(s * alpha_i + b_i)`` is affine
except at its hinge ``-b_i / alpha_i``.  Two points inside every interval
between consecutive hinges, plus two on each unbounded side, give a feature
matrix of maximal rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "HingeProfile",
    "hinge_profile",
    "scalar_set",
    "build_points",
    "max_attainable_rank",
    "numeric_rank",
    "check_regularity",
    "RegularityResult",
]

ALPHA_TOL = 1e-12
TIE_JITTER = 1e-9
RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class HingeProfile:
    alpha: np.ndarray
    b: np.ndarray
    D: np.ndarray
    tau: np.ndarray

    @property
    def Lstar(self) -> int:
        return int(self.D.size)

    @property
    def tauBar(self) -> float:
        return 1.0 + float(np.max(np.abs(self.tau))) if self.tau.size else 1.0


def _break_ties(tau: np.ndarray) -> np.ndarray:
    tau = np.sort(tau)
    if tau.size < 2:
        return tau
    eps = TIE_JITTER * (1.0 + np.max(np.abs(tau)))
    out = tau.copy()
    for k in range(1, out.size):
        if out[k] <= out[k - 1]:
            out[k] = out[k - 1] + eps
    return out


def hinge_profile(W1: np.ndarray, b: np.ndarray, v: np.ndarray) -> HingeProfile:
    """Hinges of every neuron along ``s * v`` (the scale ``c`` is absorbed into ``alpha``)."""
    alpha = np.asarray(W1, dtype=float).T @ np.asarray(v, dtype=float)
    b = np.asarray(b, dtype=float)
    amax = float(np.max(np.abs(alpha))) if alpha.size else 0.0
    D = np.flatnonzero(np.abs(alpha) > ALPHA_TOL * amax) if amax > 0 else np.array([], dtype=int)
    tau = _break_ties(-b[D] / alpha[D])
    return HingeProfile(alpha, b, D, tau)


def profile_from_hinges(hinges) -> HingeProfile:
    """Profile whose neurons have the given hinges (``alpha = 1``, ``b = -hinge``)."""
    h = np.asarray(hinges, dtype=float)
    return HingeProfile(np.ones(h.size), -h, np.arange(h.size), _break_ties(h))


def scalar_set(profile: HingeProfile, signed: bool = True) -> np.ndarray:
    """``C' = {quarter points of interior intervals} U {tau_1 - tb, tau_1 - 2tb, tau_L + tb, tau_L + 2tb}``.

    With ``signed=True`` the result is ``C' U -C'`` (sorted, duplicates removed).
    """
    if profile.Lstar == 0:
        raise ValueError("no active neuron along this direction")
    t = profile.tau
    tb = profile.tauBar
    inner = np.concatenate([(3 * t[:-1] + t[1:]) / 4, (t[:-1] + 3 * t[1:]) / 4])
    ends = np.array([t[0] - tb, t[0] - 2 * tb, t[-1] + tb, t[-1] + 2 * tb])
    C = np.concatenate([inner, ends])
    if signed:
        C = np.concatenate([C, -C])
    return np.unique(C)


def build_points(v: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Rows ``s * v`` for ``s`` in ``C``."""
    return np.outer(np.asarray(C, dtype=float), np.asarray(v, dtype=float))


def max_attainable_rank(W1: np.ndarray, b: np.ndarray) -> int:
    """``|D|``, plus one when some neuron with ``w_i = 0`` has ``b_i > 0``."""
    norms = np.linalg.norm(np.asarray(W1, dtype=float), axis=0)
    active = norms > ALPHA_TOL
    extra = bool(np.any(np.asarray(b)[~active] > 0))
    return int(active.sum()) + int(extra)


def numeric_rank(K: np.ndarray, tol: float = RANK_TOL) -> int:
    if K.size == 0:
        return 0
    s = np.linalg.svd(K, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


@dataclass(frozen=True)
class RegularityResult:
    ok: bool
    rank: int
    max_rank: int

    def __bool__(self) -> bool:
        return self.ok


def check_regularity(Ktilde: np.ndarray, W1: np.ndarray, b: np.ndarray) -> RegularityResult:
    rank = numeric_rank(np.asarray(Ktilde, dtype=float))
    target = max_attainable_rank(W1, b)
    return RegularityResult(rank > 0 and rank >= target, rank, target)
