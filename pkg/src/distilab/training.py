"""Teacher, student and retraining phases.

Phase 1 moves the first layer with one weight-decayed gradient step whose
decay equals ``1/eta``, so the old weights cancel.  Phase 2 runs gradient
descent on the last layer for a ridge objective.

Gradient descent on a quadratic ``1/2 a^T A a - q^T a`` is evaluated either
literally (``method="loop"``) or from the eigendecomposition of ``A``
(``method="spectral"``).  Both produce the same iterates; the spectral path
makes the very long runs used by the default iteration counts cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .network import NetworkParams, grad_w, grad_w_many, kernel, RELU, Surrogate
from .task_model import LabeledSet

__all__ = [
    "RoleParams",
    "PhasePlan",
    "TrainRecord",
    "GradientTrace",
    "QuadraticGD",
    "default_plan",
    "phase1_step",
    "phase2_ridge",
    "phase2_ridge_batch",
    "ridge_solution",
    "select_ridge_lambda",
    "auto_step",
    "contraction_steps",
    "teacher_train",
    "LAMBDA_GRID",
]

ROLES = ("Tr", "S", "D", "R")
LAMBDA_GRID = tuple(10.0**e for e in range(-4, 1))


@dataclass
class RoleParams:
    eta: float | None = None
    lam: float | None = None
    xi: int | None = None


@dataclass
class PhasePlan:
    """Step sizes, decays and iteration counts for every ``(t, role)``.

    ``None`` entries are resolved at run time from the data (step sizes from
    the largest curvature, ``lam_2^Tr`` by validation, iteration counts from
    ``c_xi`` or ``c_retrain``).
    """

    roles: dict[tuple[int, str], RoleParams]
    J: int | None = None
    M1: int = 1
    M2: int | None = None
    c_xi: float = 7.0
    c_retrain: float = 20.0

    def __getitem__(self, key: tuple[int, str]) -> RoleParams:
        return self.roles[key]

    def check(self) -> None:
        for role in ROLES:
            rp = self.roles[(1, role)]
            if rp.eta is not None and rp.lam is not None:
                if not math.isclose(rp.eta * rp.lam, 1.0, rel_tol=1e-12):
                    raise ValueError(f"phase 1 role {role}: lambda must equal 1/eta")
        if self.roles[(2, "S")].xi not in (None, 1):
            raise ValueError("the t=2 student runs exactly one step")

    def override(self, t: int, role: str, **kw) -> "PhasePlan":
        roles = dict(self.roles)
        rp = replace(roles[(t, role)], **kw)
        if t == 1 and "eta" in kw and "lam" not in kw and rp.eta is not None:
            rp.lam = 1.0 / rp.eta
        roles[(t, role)] = rp
        out = replace(self, roles=roles)
        out.check()
        return out


def default_plan(d: int, r: int = 1, mode: str = "single") -> PhasePlan:
    """Defaults with every hidden constant set to one.

    ``eta_1^D = sqrt(d)``; ``eta_1^R = d`` for a single-index task with one
    distilled point, ``sqrt(d)/r`` otherwise; ``M_1 = ceil(r^2 log d)`` in the
    multi-index mode.  The first-layer teacher and student share ``eta_1^R``.
    """
    if mode not in ("single", "multi"):
        raise ValueError("mode must be 'single' or 'multi'")
    eta_d = math.sqrt(d)
    if mode == "single":
        eta_r, m1 = float(d), 1
    else:
        eta_r, m1 = math.sqrt(d) / r, max(1, math.ceil(r * r * math.log(d)))
    roles = {
        (1, "Tr"): RoleParams(eta_r, 1.0 / eta_r, 1),
        (1, "S"): RoleParams(eta_r, 1.0 / eta_r, 1),
        (1, "D"): RoleParams(eta_d, 1.0 / eta_d, 1),
        (1, "R"): RoleParams(eta_r, 1.0 / eta_r, 1),
        (2, "Tr"): RoleParams(None, None, None),
        (2, "S"): RoleParams(None, 0.0, 1),
        (2, "D"): RoleParams(None, None, None),
        (2, "R"): RoleParams(None, 0.0, None),
    }
    plan = PhasePlan(roles, M1=m1)
    plan.check()
    return plan


# --------------------------------------------------------------------------
# Records and gradient descent on quadratics
# --------------------------------------------------------------------------


class GradientTrace:
    """Sequence of recorded gradients ``g_0 .. g_{T-1}``.

    Either backed by a stored array or generated on demand from the
    spectral form ``g_tau = U [(mu c0 - qc) (1 - eta mu)^tau]``.
    """

    def __init__(self, stored: np.ndarray | None = None, spectral=None, T: int | None = None):
        self._stored = None if stored is None else np.asarray(stored)
        self._spec = spectral
        self._T = len(self._stored) if stored is not None else int(T)

    def __len__(self) -> int:
        return self._T

    def __getitem__(self, tau: int) -> np.ndarray:
        if tau < 0:
            tau += self._T
        if not 0 <= tau < self._T:
            raise IndexError(tau)
        if self._stored is not None:
            return self._stored[tau]
        U, mu, r0, eta = self._spec
        return U @ (r0 * _pow(1.0 - eta * mu, tau))

    def __iter__(self):
        for t in range(self._T):
            yield self[t]

    def sum(self) -> np.ndarray:
        if self._stored is not None:
            return self._stored.sum(axis=0)
        U, mu, r0, eta = self._spec
        T = self._T
        # sum_tau (1 - eta mu)^tau = phi_T(mu) * mu ... written without dividing by mu
        return U @ (r0 * _geom(mu, eta, T))

    def materialize(self, limit: int = 100_000) -> np.ndarray:
        if self._stored is not None:
            return self._stored
        if self._T > limit:
            raise MemoryError(f"refusing to materialise {self._T} gradients")
        return np.stack([self[t] for t in range(self._T)])


@dataclass
class TrainRecord:
    final: NetworkParams | np.ndarray
    grads: GradientTrace | list[np.ndarray]
    start: NetworkParams | np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.grads)


def _pow(base: np.ndarray, T) -> np.ndarray:
    base = np.asarray(base, dtype=float)
    out = np.empty_like(base)
    pos = (base > 0) & (base < 1)
    out[pos] = np.exp(float(T) * np.log(base[pos]))
    out[~pos] = np.power(base[~pos], float(T))
    return out


def _phi(mu: np.ndarray, eta: float, T) -> np.ndarray:
    """``(1 - (1 - eta mu)^T) / mu`` with the ``mu -> 0`` limit ``eta T``."""
    mu = np.asarray(mu, dtype=float)
    out = np.empty_like(mu)
    x = eta * mu
    small = x <= 0
    out[small] = eta * float(T)
    mid = (x > 0) & (x < 1)
    out[mid] = -np.expm1(float(T) * np.log1p(-x[mid])) / mu[mid]
    big = x >= 1
    out[big] = (1.0 - np.power(1.0 - x[big], float(T))) / mu[big]
    return out


def _geom(mu: np.ndarray, eta: float, T) -> np.ndarray:
    """``sum_{tau<T} (1 - eta mu)^tau = phi_T(mu) / eta``."""
    return _phi(mu, eta, T) / eta


class QuadraticGD:
    """Gradient descent ``a <- a - eta (A a - q)`` with ``A = U diag(mu) U^T``."""

    def __init__(self, U: np.ndarray, mu: np.ndarray, qc: np.ndarray):
        self.U = U
        self.mu = np.asarray(mu, dtype=float)
        self.qc = np.asarray(qc, dtype=float)

    @classmethod
    def from_kernel(
        cls, K: np.ndarray, y: np.ndarray, n: float, lam: float = 0.0, rank_tol: float = 1e-10
    ) -> "QuadraticGD":
        """``A = K K^T / n + lam I``, ``q = K y / n`` through an SVD of ``K``.

        Singular values below ``rank_tol * s_max`` are treated as exact zeros,
        so directions outside the numerical column space of ``K`` never move.
        """
        L, N = K.shape
        U, s, Vt = np.linalg.svd(K, full_matrices=L > N)
        if s.size and s[0] > 0:
            s = np.where(s > rank_tol * s[0], s, 0.0)
        mu = np.zeros(L)
        mu[: s.size] = s * s / n
        qc = np.zeros(L)
        qc[: s.size] = s * (Vt[: s.size] @ y) / n
        return cls(U, mu + lam, qc)

    @property
    def max_curvature(self) -> float:
        return float(self.mu.max()) if self.mu.size else 0.0

    def run(self, a0: np.ndarray, eta: float, T) -> tuple[np.ndarray, GradientTrace]:
        c0 = self.U.T @ a0
        r0 = self.mu * c0 - self.qc
        cT = c0 - r0 * _phi(self.mu, eta, T)
        return self.U @ cT, GradientTrace(spectral=(self.U, self.mu, r0, eta), T=T)

    def limit(self, tol: float = 1e-10) -> np.ndarray:
        """Minimum-norm minimiser (pseudoinverse on directions with ``mu > tol * max``)."""
        keep = self.mu > tol * max(self.max_curvature, 1e-300)
        c = np.zeros_like(self.qc)
        c[keep] = self.qc[keep] / self.mu[keep]
        return self.U @ c


def contraction_steps(c: float, rho: float) -> int:
    """Smallest ``T`` with ``rho ** T <= exp(-c)``."""
    if not 0.0 <= rho < 1.0:
        raise ValueError("gradient descent does not contract (rho >= 1)")
    return 0 if rho == 0.0 else math.ceil(c / -math.log(rho))


def auto_step(max_curvature: float, safety: float = 0.9) -> float:
    """``safety * 2 / max_curvature``; stable for any ``safety < 1``."""
    if max_curvature <= 0:
        return 1.0
    return safety * 2.0 / max_curvature


# --------------------------------------------------------------------------
# Phases
# --------------------------------------------------------------------------


def phase1_step(
    theta: NetworkParams,
    D: LabeledSet,
    eta: float,
    lam: float,
    act: Surrogate = RELU,
    grad: np.ndarray | None = None,
) -> TrainRecord:
    """``W <- W - eta (grad_W L + lam W)`` with ``lam = 1/eta``, i.e. ``W <- -eta grad_W L``.

    The cancellation of ``W`` is applied exactly rather than through
    floating-point subtraction.
    """
    if not math.isclose(eta * lam, 1.0, rel_tol=1e-12):
        raise ValueError("phase 1 requires lambda = 1/eta")
    g = grad_w(theta, D, act) if grad is None else grad
    return TrainRecord(theta.with_(W=-eta * g), [g], start=theta, info={"eta": eta, "lam": lam})


def ridge_solution(K: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """``(K K^T / N + lam I)^{-1} K y / N``."""
    N = K.shape[1]
    A = K @ K.T / N + lam * np.eye(K.shape[0])
    return np.linalg.solve(A, K @ y / N)


def phase2_ridge(
    theta: NetworkParams,
    D: LabeledSet,
    eta: float,
    lam: float,
    xi: int,
    a0: np.ndarray | None = None,
    method: str = "auto",
) -> TrainRecord:
    """``xi`` steps of ``a <- a - eta [1/N K (K^T a - y) + lam a]`` with all gradients recorded."""
    K = kernel(theta, D.X)
    a0 = np.zeros(theta.L) if a0 is None else np.asarray(a0, dtype=float)
    return phase2_ridge_batch(K, D.y, [a0], eta, lam, xi, method=method)[0]


def phase2_ridge_batch(
    K: np.ndarray,
    y: np.ndarray,
    a0s: Sequence[np.ndarray],
    eta: float,
    lam: float,
    xi: int,
    method: str = "auto",
    quad: QuadraticGD | None = None,
) -> list[TrainRecord]:
    """Phase-2 ridge descent from several starting points on one kernel."""
    L, N = K.shape
    if xi < 0:
        raise ValueError("xi must be non-negative")
    if method == "auto":
        method = "loop" if xi * max(1, len(a0s)) <= 2000 else "spectral"
    if method == "loop":
        smax = np.linalg.norm(K, 2) ** 2 / N if K.size else 0.0
    else:
        quad = quad or QuadraticGD.from_kernel(K, y, N, lam)
        smax = quad.max_curvature - lam
    if not eta * (lam + smax) < 2.0:
        raise ValueError("step size violates the stability bound eta (lam + |K|^2/N) < 2")
    out = []
    for a0 in a0s:
        a0 = np.asarray(a0, dtype=float)
        if method == "loop":
            a = a0.copy()
            grads = []
            for _ in range(xi):
                g = K @ (K.T @ a - y) / N + lam * a
                grads.append(g)
                a = a - eta * g
            trace: GradientTrace = GradientTrace(np.array(grads).reshape(xi, L))
        elif method == "spectral":
            a, trace = quad.run(a0, eta, xi)
        else:
            raise ValueError(f"unknown method {method!r}")
        out.append(TrainRecord(a, trace, start=a0, info={"eta": eta, "lam": lam, "xi": xi}))
    return out


def select_ridge_lambda(
    K: np.ndarray,
    y: np.ndarray,
    grid: Sequence[float] = LAMBDA_GRID,
    val_frac: float = 0.2,
) -> float:
    """Pick ``lam`` from ``grid`` by validation MSE of the exact ridge fit.

    The last ``val_frac`` of the columns are held out.
    """
    N = K.shape[1]
    n_val = max(1, int(round(val_frac * N))) if N > 1 else 0
    if n_val == 0 or n_val >= N:
        return float(grid[0])
    Kt, yt = K[:, : N - n_val], y[: N - n_val]
    Kv, yv = K[:, N - n_val :], y[N - n_val :]
    best, best_err = float(grid[0]), math.inf
    for lam in grid:
        a = ridge_solution(Kt, yt, lam)
        err = float(np.mean((Kv.T @ a - yv) ** 2))
        if err < best_err:
            best, best_err = float(lam), err
    return best


def teacher_train(
    thetas: Sequence[NetworkParams],
    D: LabeledSet,
    plan: PhasePlan,
    t: int,
    method: str = "auto",
) -> list[TrainRecord]:
    """Teacher training for a batch of initialisations.

    ``t = 1``: one phase-1 step per network (ReLU gradients, batched).
    ``t = 2``: ridge descent on ``a`` for networks sharing ``W`` and ``b``;
    the resolved ``eta``, ``lam`` and ``xi`` are stored in each record's ``info``.
    """
    if t == 1:
        rp = plan[(1, "Tr")]
        grads = grad_w_many(thetas, D)
        return [phase1_step(th, D, rp.eta, rp.lam, grad=g) for th, g in zip(thetas, grads)]
    if t != 2:
        raise ValueError("t must be 1 or 2")
    W, b = thetas[0].W, thetas[0].b
    for th in thetas[1:]:
        if not (np.array_equal(th.W, W) and np.array_equal(th.b, b)):
            raise ValueError("t = 2 initialisations must share W and b")
    K = kernel(thetas[0], D.X)
    eta, lam, xi = resolve_t2_teacher(K, D.y, plan)
    quad = QuadraticGD.from_kernel(K, D.y, D.N, lam)
    return phase2_ridge_batch(K, D.y, [th.a for th in thetas], eta, lam, xi, method, quad)


def resolve_t2_teacher(K: np.ndarray, y: np.ndarray, plan: PhasePlan) -> tuple[float, float, int]:
    rp = plan[(2, "Tr")]
    N = K.shape[1]
    lam = rp.lam if rp.lam is not None else select_ridge_lambda(K, y)
    smax = np.linalg.norm(K, 2) ** 2 / N if K.size else 0.0
    eta = rp.eta if rp.eta is not None else auto_step(lam + smax)
    if rp.xi is not None:
        xi = rp.xi
    else:
        # ceil(c / (eta lam)) undercounts when eta lam or eta (lam + smax) nears 2
        rho = max(abs(1.0 - eta * lam), abs(1.0 - eta * (lam + smax)))
        xi = max(math.ceil(plan.c_xi / (eta * lam)), contraction_steps(plan.c_xi, rho))
    return float(eta), float(lam), int(xi)
