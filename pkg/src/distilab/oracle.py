"""Population gradients of the first distillation step.

For a preprocessed target ``f_hat`` (mean and linear part removed) and a
synthetic input ``xt`` the population gradient is

    G_hat = E_w[q(w) h'(<w, xt>)] + E_w[w h''(<w, xt>) <q(w), xt>],
    q(w)  = E_x[f_hat(x) x sigma'(<w, x>)],

with ``w`` uniform on the sphere and ``x ~ N(0, I_d)``.  Expanding the ReLU
in Hermite polynomials gives, for unit ``w``,

    q(w) = sum_{k>=1} c_{k+1}/k! C_{k+1}(w^k) + w sum_{k>=2} c_{k+2}/k! C_k(w^k).

For a single-index target every ``w``-expectation reduces to
one-dimensional integrals against ``f_d`` times even sphere moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .network import Surrogate
from .task_model import MultiIndexTask, eval_link, task_spectra
from .tensor_hermite import (
    QuadratureRule,
    log_fd_const,
    relu_hermite_coeff,
    sphere_moment,
    sphere_slice_rule,
    integral_table,
)

__all__ = [
    "PopGradReport",
    "SingleIndexTerms",
    "single_index_terms",
    "popgrad_single_closed",
    "leading_coefficient",
    "popgrad_multi_dominant",
    "popgrad_mc",
    "popgrad_report",
    "ibp_suite",
    "IbpRow",
]

_PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x)
    if not math.isclose(n, 1.0, rel_tol=1e-9):
        raise ValueError("xt must be a unit vector")
    return x


@dataclass(frozen=True)
class SingleIndexTerms:
    """Coefficients per order ``k`` and the scalars they were evaluated at."""

    s: float
    rho: float
    A: dict[int, float]
    B: dict[int, float]
    D: dict[int, float]
    E: dict[int, float]
    F: dict[int, float]
    G: dict[int, float]
    H: dict[int, float]


def _binomial_sums(k: int, s: float, rho: float, d: int, T: np.ndarray, shift_even: int, shift_odd: int):
    """Even and odd binomial sums over ``l`` with integrals read from ``T[p1, p2]``.

    even: ``sum_l C(k,2l) s^{k-2l} rho^{2l} c_l(d) I_{k-2l+shift_even, l}``
    odd:  ``sum_l C(k,2l+1) s^{k-2l-1} rho^{2l} c_{l+1}(d) I_{k-2l-1+shift_odd, l+1}``
    """
    even = 0.0
    for l in range(k // 2 + 1):
        even += math.comb(k, 2 * l) * s ** (k - 2 * l) * rho ** (2 * l) * sphere_moment(l, d) * T[k - 2 * l + shift_even, l]
    odd = 0.0
    for l in range((k - 1) // 2 + 1):
        if 2 * l + 1 > k:
            break
        odd += (
            math.comb(k, 2 * l + 1)
            * s ** (k - 2 * l - 1)
            * rho ** (2 * l)
            * sphere_moment(l + 1, d)
            * T[k - 2 * l - 1 + shift_odd, l + 1]
        )
    return even, odd


def single_index_terms(
    task: MultiIndexTask, xt: np.ndarray, h: Surrogate, rule: QuadratureRule | None = None
) -> SingleIndexTerms:
    """``A_k .. H_k`` and ``D_k`` for every order the link needs.

    ``A, B`` (``h'``) and ``E, F`` (``h''``) are the ``xt`` and ``beta_perp``
    components of ``E[w <beta,w>^k g(t)]``; ``G, H`` carry one more factor ``t``
    with ``h''``; ``D`` is the scalar ``E[<beta,w>^k h'(t)]``.
    """
    if task.r != 1:
        raise ValueError("closed form is single-index only; use popgrad_multi_dominant")
    if not h.smooth:
        raise ValueError("the closed form needs a C^2 surrogate")
    xt = _unit(xt)
    d = task.d
    rule = rule or sphere_slice_rule(d)
    beta = task.beta
    s = float(beta @ xt)
    rho = float(np.linalg.norm(beta - s * xt))
    p = task.p
    kmax = p + 2
    T1 = integral_table(h.d1(rule.nodes), kmax + 2, kmax, rule)
    T2 = integral_table(h.d2(rule.nodes), kmax + 2, kmax, rule)
    A, B, D, E, F, G, H = ({} for _ in range(7))
    for k in range(1, p + 1):
        A[k], B[k] = _binomial_sums(k, s, rho, d, T1, 1, 0)
        D[k], _ = _binomial_sums(k, s, rho, d, T1, 0, 0)
        E[k], F[k] = _binomial_sums(k, s, rho, d, T2, 1, 0)
        G[k], H[k] = _binomial_sums(k, s, rho, d, T2, 2, 1)
    return SingleIndexTerms(s, rho, A, B, D, E, F, G, H)


def _link_coeffs(task: MultiIndexTask) -> dict[int, float]:
    """``C_k = coef_k * k!`` for a single-index link."""
    return {a[0]: c * math.factorial(a[0]) for a, c in task.link}


def popgrad_single_closed(
    task: MultiIndexTask,
    xt: np.ndarray,
    h: Surrogate,
    rule: QuadratureRule | None = None,
    terms: SingleIndexTerms | None = None,
) -> np.ndarray:
    """Exact ``G_hat`` for ``r = 1`` as a combination of ``beta``, ``beta_perp`` and ``xt``."""
    terms = terms or single_index_terms(task, xt, h, rule)
    xt = np.asarray(xt, dtype=float)
    beta = task.beta
    s = terms.s
    bperp = beta - s * xt
    Ck = _link_coeffs(task)
    p = task.p
    c = relu_hermite_coeff
    out = np.zeros(task.d)
    for k in range(1, p):
        ak = c(k + 1) * Ck.get(k + 1, 0.0) / math.factorial(k)
        if ak:
            out += ak * terms.D[k] * beta
            out += s * ak * (terms.E[k] * xt + terms.F[k] * bperp)
    for k in range(2, p + 1):
        bk = c(k + 2) * Ck.get(k, 0.0) / math.factorial(k)
        if bk:
            out += bk * (terms.A[k] * xt + terms.B[k] * bperp)
            out += bk * (terms.G[k] * xt + terms.H[k] * bperp)
    return out


def leading_coefficient(h: Surrogate, d: int, n: int = 400) -> float:
    """``c_d = (1/d) E_{f_{d+2}}[h''] + 1/(d-1) E_{f_d}[(1 - t^2) h'']``."""
    r_d = sphere_slice_rule(d, n)
    r_d2 = sphere_slice_rule(d + 2, n)
    e1 = r_d2.integrate(h.d2(r_d2.nodes))
    e2 = r_d.integrate((1.0 - r_d.nodes**2) * h.d2(r_d.nodes))
    return e1 / d + e2 / (d - 1)


def popgrad_multi_dominant(
    task: MultiIndexTask, xt: np.ndarray, h: Surrogate, n: int = 400
) -> tuple[np.ndarray, float, float]:
    """Dominant term ``c_2 c_d H xt`` with ``c_2 = 1/sqrt(2 pi)`` the ReLU coefficient.

    Returns ``(vector, c_d, r / d^2)`` where the last entry is the predicted
    scale of the neglected terms.
    """
    xt = _unit(xt)
    H = task_spectra(task).H
    cd = leading_coefficient(h, task.d, n)
    return relu_hermite_coeff(2) * cd * (H @ xt), cd, task.r / task.d**2


def _f_hat(task: MultiIndexTask, Z: np.ndarray, c0: float, c1: np.ndarray) -> np.ndarray:
    return eval_link(task.link, Z) - c0 - Z @ c1


def _sample_sphere(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    W = rng.standard_normal((n, d))
    return W / np.linalg.norm(W, axis=1, keepdims=True)


def popgrad_mc(
    task: MultiIndexTask,
    xt: np.ndarray,
    h: Surrogate,
    nW: int,
    nX: int,
    seed: int | None = 0,
    conditional: bool = True,
    batch: int = 4096,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo ``G_hat`` with per-coordinate standard errors.

    ``nW`` directions are drawn as ``nW/2`` antithetic pairs ``(w, -w)`` that
    share their ``nX`` inner samples; each pair average is one i.i.d. draw.
    With ``conditional=True`` the inner expectation is reduced exactly to the
    span of ``B`` and the unit vector ``u`` of ``w`` orthogonal to it: only
    ``z = B^T x`` is sampled and the ``u``-coordinate is integrated in closed
    form.  ``conditional=False`` samples ``x`` in all ``d`` coordinates.
    """
    xt = _unit(xt)
    if nW < 2 or nX < 1:
        raise ValueError("need nW >= 2 and nX >= 1")
    rng = np.random.default_rng(seed)
    r = task.r
    coefs = dict(task.link)
    c0 = coefs.get((0,) * r, 0.0)
    c1 = np.array([coefs.get(tuple(int(i == j) for i in range(r)), 0.0) for j in range(r)])
    pairs = nW // 2
    s1 = np.zeros(task.d)
    s2 = np.zeros(task.d)
    done = 0
    while done < pairs:
        nb = min(batch, pairs - done)
        done += nb
        W = _sample_sphere(rng, nb, task.d)
        if conditional:
            qp, qm = _q_conditional(task, W, nX, rng, c0, c1)
        else:
            qp, qm = _q_full(task, W, nX, rng, c0, c1)
        t = W @ xt
        Yp = qp * h.d1(t)[:, None] + W * (h.d2(t) * (qp @ xt))[:, None]
        Ym = qm * h.d1(-t)[:, None] - W * (h.d2(-t) * (qm @ xt))[:, None]
        Y = 0.5 * (Yp + Ym)
        s1 += Y.sum(axis=0)
        s2 += (Y * Y).sum(axis=0)
    mean = s1 / pairs
    var = np.maximum(s2 / pairs - mean * mean, 0.0) * pairs / max(pairs - 1, 1)
    return mean, np.sqrt(var / pairs)


def _q_conditional(task, W, nX, rng, c0, c1):
    B = task.B
    C = W @ B  # nb x r
    R = W - C @ B.T
    nu = np.linalg.norm(R, axis=1)
    U = R / np.where(nu > 0, nu, 1.0)[:, None]
    Z = rng.standard_normal((W.shape[0], nX, task.r))
    f = _f_hat(task, Z.reshape(-1, task.r), c0, c1).reshape(W.shape[0], nX)
    m = np.einsum("bnr,br->bn", Z, C)
    arg = m / np.maximum(nu, 1e-300)[:, None]
    Phi = ndtr(arg)
    phi = np.exp(-0.5 * arg * arg) * _PHI0
    # E_zeta[zeta 1{m + nu zeta > 0}] = phi(m / nu); E_zeta[1{...}] = Phi(m / nu)
    fz_p = np.einsum("bn,bnr->br", f * Phi, Z) / nX
    fz_m = np.einsum("bn,bnr->br", f * (1.0 - Phi), Z) / nX
    fu = (f * phi).mean(axis=1)
    qp = fz_p @ B.T + fu[:, None] * U
    qm = fz_m @ B.T - fu[:, None] * U
    return qp, qm


def _q_full(task, W, nX, rng, c0, c1):
    nb, d = W.shape
    X = rng.standard_normal((nb, nX, d))
    Z = X @ task.B
    f = _f_hat(task, Z.reshape(-1, task.r), c0, c1).reshape(nb, nX)
    act = np.einsum("bnd,bd->bn", X, W) > 0
    qp = np.einsum("bn,bnd->bd", f * act, X) / nX
    qm = np.einsum("bn,bnd->bd", f * ~act, X) / nX
    return qp, qm


@dataclass(frozen=True)
class PopGradReport:
    closedForm: np.ndarray
    mc: np.ndarray
    mc_se: np.ndarray
    cosToTarget: float
    c_d: float

    @property
    def z_max(self) -> float:
        return float(np.max(np.abs(self.closedForm - self.mc) / self.mc_se))

    @property
    def combined_gap(self) -> float:
        """``|closed - mc| / sqrt(sum se^2)``."""
        return float(np.linalg.norm(self.closedForm - self.mc) / np.linalg.norm(self.mc_se))


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def popgrad_report(
    task: MultiIndexTask,
    xt: np.ndarray,
    h: Surrogate,
    nW: int = 200_000,
    nX: int = 50,
    seed: int | None = 0,
) -> PopGradReport:
    """Closed form (single-index) or dominant term (multi-index) next to the MC estimate."""
    dom, cd, _ = popgrad_multi_dominant(task, xt, h)
    closed = popgrad_single_closed(task, xt, h) if task.r == 1 else dom
    mc, se = popgrad_mc(task, xt, h, nW, nX, seed)
    return PopGradReport(closed, mc, se, _cos(mc, task_spectra(task).H @ xt), cd)


@dataclass(frozen=True)
class IbpRow:
    name: str
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)


def ibp_suite(h: Surrogate, d: int, n: int = 400) -> list[IbpRow]:
    """Quadrature check of the one-dimensional identities under ``f_d``.

    * ``E[t^2] = 1/d``
    * ``E_{f_d}[t h'(t)] = (1/d) E_{f_{d+2}}[h'']``
    * ``E_{f_d}[1 - t^2] = C_d / C_{d+2}`` (ratio of normalising constants)
    * ``E_{f_d}[(1 - t^2) h''(t)] = (d - 1) E_{f_d}[t h'(t)]``
    """
    r = sphere_slice_rule(d, n)
    r2 = sphere_slice_rule(d + 2, n)
    t = r.nodes
    rows = [
        IbpRow("E[t^2]", r.integrate(t * t), 1.0 / d),
        IbpRow("E[t h'(t)]", r.integrate(t * h.d1(t)), r2.integrate(h.d2(r2.nodes)) / d),
        IbpRow("E[1-t^2]", r.integrate(1.0 - t * t), math.exp(log_fd_const(d) - log_fd_const(d + 2))),
        IbpRow("E[(1-t^2)h''(t)]", r.integrate((1.0 - t * t) * h.d2(t)), (d - 1) * r.integrate(t * h.d1(t))),
    ]
    return rows
