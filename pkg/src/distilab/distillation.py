"""Distillation of both training phases.

``t = 1``: one gradient-matching step moves the synthetic inputs.  The
matching objective for teacher gradients ``G^Tr`` and student gradients
``g^S`` (student loss ``1/2 sum_m (f(x_m) - y_m)^2`` on the synthetic set) is

    m = 1 - 1/(L J) sum_{i,j} <g^S_ij, G^Tr_ij>,

and the update is ``X <- X - eta (grad_X m + lam X)``; with ``lam = 1/eta``
this is ``X^(1) = -eta grad_X m``.

``t = 2``: only the labels move, with the points fixed by the rank-certified
construction.  Gradient matching has the telescoped closed form
``(1/J) sum_j K^T a_j^(T)``; performance matching is a ridge problem in the
labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .construction import build_points, hinge_profile, scalar_set, RANK_TOL
from .network import RELU, NetworkParams, Surrogate, forward, kernel
from .task_model import LabeledSet
from .training import GradientTrace, QuadraticGD, TrainRecord, auto_step, contraction_steps

__all__ = [
    "DistilledSet",
    "init_D1",
    "matching_objective",
    "matching_gradient",
    "gm_t1",
    "gm_t1_relu",
    "init_D2",
    "label_D2_init",
    "gm_t2",
    "pm_t2",
    "pm_t2_closed",
    "retrain_t2_gd",
    "retrain_t2_onestep",
    "chi_mean",
]

_NEURON_BLOCK = 1 << 16


@dataclass(frozen=True, eq=False)
class DistilledSet:
    X: np.ndarray
    y: np.ndarray
    phase: int

    def __post_init__(self) -> None:
        X = np.atleast_2d(np.array(self.X, dtype=float))
        y = np.array(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.size or y.size < 1:
            raise ValueError("need M >= 1 points with one label each")
        if self.phase not in (1, 2):
            raise ValueError("phase must be 1 or 2")
        if not np.all(np.isfinite(y)):
            raise ValueError("labels must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def M(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def with_labels(self, y: np.ndarray) -> "DistilledSet":
        return DistilledSet(self.X, y, self.phase)

    def as_labeled(self) -> LabeledSet:
        return LabeledSet(self.X, self.y)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i}" for i in range(self.d)] + ["y", "phase"])
            for row, yv in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(yv)), self.phase])

    @classmethod
    def from_csv(cls, path: str | Path) -> "DistilledSet":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        phases = set(data[:, -1].astype(int).tolist())
        if len(phases) != 1:
            raise ValueError("a distilled set holds a single phase")
        return cls(data[:, :-2], data[:, -2], phases.pop())


def chi_mean(d: int) -> float:
    """``E[chi(d)] = sqrt(2) Gamma((d+1)/2) / Gamma(d/2)``."""
    return math.exp(0.5 * math.log(2.0) + math.lgamma((d + 1) / 2) - math.lgamma(d / 2))


def init_D1(M1: int, d: int, label_mode: str = "constant", seed: int | None = 0, c: float = 1.0) -> DistilledSet:
    """Points uniform on the sphere; labels constant ``c`` or ``y^2 ~ chi(d)`` with a random sign."""
    if M1 < 1:
        raise ValueError("M1 must be at least 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((M1, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    if label_mode == "constant":
        y = np.full(M1, float(c))
    elif label_mode == "chi":
        chi = np.sqrt(rng.chisquare(d, size=M1))
        y = np.sqrt(chi) * (rng.integers(0, 2, size=M1) * 2.0 - 1.0)
    else:
        raise ValueError("label_mode must be 'constant' or 'chi'")
    return DistilledSet(X, y, 1)


# --------------------------------------------------------------------------
# t = 1 gradient matching
# --------------------------------------------------------------------------


def _stack(records: Sequence[TrainRecord]):
    """Yield blocks ``(W, a, b, G, net_id)`` of concatenated neurons."""
    block: list[TrainRecord] = []
    count = 0
    for rec in records:
        block.append(rec)
        count += rec.start.L
        if count >= _NEURON_BLOCK:
            yield _concat(block)
            block, count = [], 0
    if block:
        yield _concat(block)


def _concat(block: Sequence[TrainRecord]):
    W = np.concatenate([r.start.W for r in block], axis=1)
    a = np.concatenate([r.start.a for r in block])
    b = np.concatenate([r.start.b for r in block])
    G = np.concatenate([r.grads[0] for r in block], axis=1)
    ids = np.concatenate([np.full(r.start.L, k) for k, r in enumerate(block)])
    starts = np.cumsum([0] + [r.start.L for r in block[:-1]])
    return W, a, b, G, ids, starts


def _total_neurons(records: Sequence[TrainRecord]) -> int:
    return sum(r.start.L for r in records)


def _pair_sum(X, y, records, h: Surrogate, second: bool):
    """``sum_{i,j} <g^S_ij, G^Tr_ij>`` and its gradient in ``X``."""
    total = 0.0
    grad = np.zeros_like(X)
    for W, a, b, G, ids, starts in _stack(records):
        U = X @ W + b  # M x n
        Hp = h.d1(U)
        Hpp = h.d2(U) if second else np.zeros_like(U)
        P = X @ G
        aHp = a * Hp
        # per-network outputs and residuals
        F = np.add.reduceat(a * h.h(U), starts, axis=1)
        R = F - y[:, None]  # M x J
        Rn = R[:, ids]  # residual seen by each neuron
        total += float(np.sum(Rn * aHp * P))
        grad += Rn * (a * Hpp * P) @ W.T + (Rn * aHp) @ G.T
        cj = np.add.reduceat(aHp * P, starts, axis=1)
        grad += (cj[:, ids] * aHp) @ W.T
    return total, grad


def matching_objective(D: DistilledSet, records: Sequence[TrainRecord], h: Surrogate) -> float:
    """``1 - 1/(L J) sum_{i,j} <g^S_ij, G^Tr_ij>`` with student activation ``h``."""
    s, _ = _pair_sum(D.X, D.y, records, h, second=False)
    return 1.0 - s / _total_neurons(records)


def matching_gradient(D: DistilledSet, records: Sequence[TrainRecord], h: Surrogate) -> np.ndarray:
    """Gradient of :func:`matching_objective` in the synthetic inputs."""
    _, g = _pair_sum(D.X, D.y, records, h, second=h.smooth)
    return -g / _total_neurons(records)


def _step(D0: DistilledSet, grad: np.ndarray, eta: float, lam: float) -> DistilledSet:
    if math.isclose(eta * lam, 1.0, rel_tol=1e-12):
        X1 = -eta * grad  # the decay cancels X^(0) exactly
    else:
        X1 = D0.X - eta * (grad + lam * D0.X)
    return DistilledSet(X1, D0.y, 1)


def gm_t1(
    D0: DistilledSet,
    records: Sequence[TrainRecord],
    h: Surrogate,
    eta: float,
    lam: float | None = None,
) -> DistilledSet:
    """One gradient-matching step on the inputs with a smooth student activation.

    At a mirror-symmetric initialisation this reduces to
    ``x^(1) = eta y / (L J) sum_{i,j} [g_ij h'(<w_ij, x>) + w_ij h''(<w_ij, x>) <g_ij, x>]``
    where ``g_ij = -G^Tr_ij / a_ij = 1/N sum_n y_n x_n sigma'(<w_ij, x_n>)``.
    """
    if not h.smooth:
        raise ValueError("the ReLU has no second derivative; use gm_t1_relu")
    lam = 1.0 / eta if lam is None else lam
    return _step(D0, matching_gradient(D0, records, h), eta, lam)


def gm_t1_relu(
    D0: DistilledSet,
    records: Sequence[TrainRecord],
    eta: float,
    lam: float | None = None,
) -> DistilledSet:
    """Gradient matching with only the first-derivative term (student activation ReLU)."""
    lam = 1.0 / eta if lam is None else lam
    return _step(D0, matching_gradient(D0, records, RELU), eta, lam)


# --------------------------------------------------------------------------
# t = 2
# --------------------------------------------------------------------------


def _ray_points(W1: np.ndarray, b: np.ndarray, v: np.ndarray) -> np.ndarray:
    return build_points(v, scalar_set(hinge_profile(W1, b, v)))


def init_D2(W1: np.ndarray, b: np.ndarray, D1: DistilledSet, strategy: str = "compact") -> DistilledSet:
    """Points ``s * v`` from the construction; labels are zero placeholders.

    ``per_point`` uses every ``v = x_m^(1)``; ``compact`` uses their mean.
    """
    if strategy == "per_point":
        X = np.concatenate([_ray_points(W1, b, v) for v in D1.X], axis=0)
    elif strategy == "compact":
        X = _ray_points(W1, b, D1.X.mean(axis=0))
    else:
        raise ValueError("strategy must be 'per_point' or 'compact'")
    return DistilledSet(X, np.zeros(X.shape[0]), 2)


def label_D2_init(thetas: Sequence[NetworkParams], X: np.ndarray) -> np.ndarray:
    """``(1/J) sum_j f_{theta_j}(x)`` for each row of ``X``."""
    return np.mean([forward(th, X) for th in thetas], axis=0)


def gm_t2(
    D2: DistilledSet,
    records: Sequence[TrainRecord],
    Ktilde: np.ndarray,
    eta_D: float | None = None,
) -> DistilledSet:
    """One gradient-matching step on the labels.

    With student loss ``1/(2 M) |K^T a - y|^2`` at each teacher start
    ``a_j^(0)``, the matching gradient in the labels is ``1/M K^T S_j`` where
    ``S_j`` sums the recorded teacher gradients.  The default
    ``eta_D = M * eta_Tr`` makes the step telescope to
    ``(1/J) sum_j K^T a_j^(T)``.
    """
    M = D2.M
    J = len(records)
    if eta_D is None:
        eta_D = M * records[0].info["eta"]
    step = np.zeros(M)
    for rec in records:
        S = rec.grads.sum() if hasattr(rec.grads, "sum") else np.sum(rec.grads, axis=0)
        step += Ktilde.T @ S / M
    return D2.with_labels(D2.y - eta_D * step / J)


def _pm_quadratic(Ktilde, K, y, eta_S, M, lam):
    """``1/N |c K^T Kt yh - y|^2 + lam/2 |yh|^2`` as ``1/2 yh^T A yh - q^T yh``."""
    c = eta_S / M
    N = y.size
    P = K.T @ Ktilde  # N x M
    return QuadraticGD.from_kernel(P.T, y / c, N / (2 * c * c), lam, rank_tol=0.0)


def pm_t2(
    D2: DistilledSet,
    DTr: LabeledSet,
    theta1: NetworkParams,
    eta_S: float,
    eta_D: float | None = None,
    lam_D: float | None = None,
    xi_D: int | None = None,
    c_xi: float = 20.0,
) -> tuple[DistilledSet, dict]:
    """Performance matching of the labels through the one-step retraining map.

    Gradient descent from the current labels on
    ``1/N |K^T (eta_S / M) Kt yh - y|^2 + lam_D/2 |yh|^2``.
    Defaults: ``lam_D = 1e-8`` times the largest curvature, ``eta_D`` from
    the stability bound, ``xi_D = ceil(c_xi / -log rho)`` with ``rho`` the
    slowest per-step contraction (about ``1 - eta_D lam_D``).
    """
    Kt = kernel(theta1, D2.X)
    K = kernel(theta1, DTr.X)
    q0 = _pm_quadratic(Kt, K, DTr.y, eta_S, D2.M, 0.0)
    smax = q0.max_curvature
    if lam_D is None:
        lam_D = 1e-8 * smax
    quad = QuadraticGD(q0.U, q0.mu + lam_D, q0.qc)
    if eta_D is None:
        eta_D = auto_step(quad.max_curvature)
    if xi_D is None:
        # slowest contraction |1 - eta mu|; equals 1 - eta lam_D unless the ridge dominates
        rho = float(np.max(np.abs(1.0 - eta_D * quad.mu)))
        xi_D = math.ceil(c_xi / -math.log(rho)) if 0 < rho < 1 else 10_000
    yh, _ = quad.run(D2.y, eta_D, xi_D)
    info = {"eta_D": eta_D, "lam_D": lam_D, "xi_D": xi_D}
    return D2.with_labels(yh), info


def pm_t2_closed(D2: DistilledSet, DTr: LabeledSet, theta1: NetworkParams, eta_S: float, lam_D: float) -> np.ndarray:
    """Exact minimiser of the performance-matching ridge objective (direct solve)."""
    c = eta_S / D2.M
    P = kernel(theta1, DTr.X).T @ kernel(theta1, D2.X)
    N = DTr.N
    A = 2 * c * c / N * (P.T @ P) + lam_D * np.eye(D2.M)
    return np.linalg.solve(A, 2 * c / N * (P.T @ DTr.y))


def _sigma_min(mu: np.ndarray, tol: float = RANK_TOL) -> float:
    # eigenvalues of K K^T / M are s^2 / M; "positive" means s > tol * s_max
    s = np.sqrt(np.maximum(mu, 0.0))
    keep = s > tol * s.max() if s.size and s.max() > 0 else np.zeros_like(s, bool)
    return float(mu[keep].min()) if keep.any() else 0.0


def retrain_t2_gd(
    theta1: NetworkParams,
    D2: DistilledSet,
    eta: float | None = None,
    xi: int | None = None,
    c_R: float = 20.0,
    method: str = "auto",
) -> TrainRecord:
    """Plain GD from ``a = 0`` on ``1/(2M) |Kt^T a - y|^2``.

    Defaults: ``eta = 0.9 * 2 / sigma_max`` and ``xi = ceil(c_R / (eta sigma_min))``
    with ``sigma`` the eigenvalues of ``Kt Kt^T / M``, raised when the slowest
    per-step contraction ``max |1 - eta sigma|`` needs more steps.
    """
    Kt = kernel(theta1, D2.X)
    M = D2.M
    quad = QuadraticGD.from_kernel(Kt, D2.y, M, 0.0)
    smax = quad.max_curvature
    if eta is None:
        eta = auto_step(smax)
    if xi is None:
        smin = _sigma_min(quad.mu)
        if smin > 0:
            rho = max(abs(1.0 - eta * smin), abs(1.0 - eta * smax))
            xi = max(math.ceil(c_R / (eta * smin)), contraction_steps(c_R, rho))
        else:
            xi = 0
    a0 = np.zeros(theta1.L)
    if method == "auto":
        method = "loop" if xi <= 2000 else "spectral"
    if method == "loop":
        a, grads = a0.copy(), []
        for _ in range(xi):
            g = Kt @ (Kt.T @ a - D2.y) / M
            grads.append(g)
            a = a - eta * g
        trace = GradientTrace(np.array(grads).reshape(xi, theta1.L))
    else:
        a, trace = quad.run(a0, eta, xi)
    return TrainRecord(a, trace, start=a0, info={"eta": eta, "xi": xi})


def retrain_t2_onestep(theta1: NetworkParams, D2: DistilledSet, eta: float) -> np.ndarray:
    """``a^(1) = (eta / M) Kt y`` (one step from zero)."""
    return eta / D2.M * (kernel(theta1, D2.X) @ D2.y)
