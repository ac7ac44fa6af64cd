"""Dense tensors, Hermite polynomials and sphere-slice quadrature.

Conventions
-----------
* Tensors are stored densely in row-major order, ``values[i1 * d**(k-1) + ...]``.
* ``He_k`` is the probabilists' Hermite polynomial, orthogonal under N(0, 1)
  with ``E[He_j He_k] = k! delta_jk``.
* ``f_d`` is the density of ``<w, e>`` for ``w`` uniform on ``S^{d-1}`` and a
  fixed unit vector ``e``:
  ``f_d(t) = Gamma(d/2) / (sqrt(pi) Gamma((d-1)/2)) (1 - t^2)^((d-3)/2)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln, roots_jacobi, roots_legendre

__all__ = [
    "DenseTensor",
    "QuadratureRule",
    "HermiteCoeffsRelu",
    "hermite1d",
    "hermite_table",
    "relu_hermite_coeff",
    "relu_hermite_coeffs",
    "sym",
    "tensor_action",
    "map_action",
    "outer_power",
    "sphere_moment",
    "log_fd_const",
    "sphere_slice_density",
    "sphere_slice_rule",
    "weighted_integral",
    "integral_table",
    "fd_expectation",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# Dense tensors
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """Order-``k`` tensor over ``R^d`` with ``d**k`` row-major entries."""

    order: int
    dim: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.order < 0:
            raise ValueError("order must be non-negative")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.size != self.dim**self.order:
            raise ValueError(
                f"expected {self.dim ** self.order} entries, got {vals.size}"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_array(cls, arr: np.ndarray | float) -> "DenseTensor":
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 0:
            return cls(0, 1, arr.reshape(1))
        if len(set(arr.shape)) != 1:
            raise ValueError("all axes must share the same dimension")
        return cls(arr.ndim, arr.shape[0], arr)

    @classmethod
    def scalar(cls, value: float, dim: int = 1) -> "DenseTensor":
        return cls(0, dim, np.array([value], dtype=float))

    @property
    def array(self) -> np.ndarray:
        """View with shape ``(d,) * k`` (a 0-d array for scalars)."""
        return self.values.reshape((self.dim,) * self.order)

    def item(self) -> float:
        if self.order != 0:
            raise ValueError("item() only applies to order-0 tensors")
        return float(self.values[0])

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.values))

    def allclose(self, other: "DenseTensor", atol: float = 1e-12) -> bool:
        return (
            self.order == other.order
            and self.dim == other.dim
            and bool(np.allclose(self.values, other.values, rtol=0.0, atol=atol))
        )

    def __add__(self, other: "DenseTensor") -> "DenseTensor":
        _check_same_shape(self, other)
        return DenseTensor(self.order, self.dim, self.values + other.values)

    def __sub__(self, other: "DenseTensor") -> "DenseTensor":
        _check_same_shape(self, other)
        return DenseTensor(self.order, self.dim, self.values - other.values)

    def __mul__(self, c: float) -> "DenseTensor":
        return DenseTensor(self.order, self.dim, self.values * float(c))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"DenseTensor(order={self.order}, dim={self.dim})"


def _check_same_shape(a: DenseTensor, b: DenseTensor) -> None:
    if a.order != b.order or a.dim != b.dim:
        raise ValueError("tensor shapes differ")


def sym(T: DenseTensor) -> DenseTensor:
    """Average of ``T`` over all permutations of its indices."""
    k = T.order
    if k <= 1:
        return T
    arr = T.array
    acc = np.zeros_like(arr)
    perms = list(itertools.permutations(range(k)))
    for p in perms:
        acc += np.transpose(arr, p)
    return DenseTensor(k, T.dim, acc / len(perms))


def tensor_action(A: DenseTensor, B: DenseTensor) -> DenseTensor:
    """Contract the trailing ``B.order`` indices of ``A`` against ``B``."""
    if A.dim != B.dim and B.order > 0:
        raise ValueError(f"dimension mismatch: {A.dim} vs {B.dim}")
    k, l = A.order, B.order
    if l > k:
        raise ValueError("B must not have higher order than A")
    d = A.dim
    mat = A.values.reshape(d ** (k - l), d**l)
    out = mat @ B.values if l > 0 else mat[:, 0] * B.values[0]
    return DenseTensor(k - l, d, out)


def map_action(M: np.ndarray, T: DenseTensor) -> DenseTensor:
    """Apply ``M`` (``d x r``) to every index of an order-``k`` tensor over ``R^r``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("M must be a matrix")
    d, r = M.shape
    if T.order > 0 and T.dim != r:
        raise ValueError(f"dimension mismatch: M has {r} columns, T.dim = {T.dim}")
    out = T.array
    for ax in range(T.order):
        out = np.moveaxis(np.tensordot(M, out, axes=(1, ax)), 0, ax)
    return DenseTensor(T.order, d, out)


def outer_power(v: np.ndarray, k: int) -> DenseTensor:
    """``v^{(x)k}`` with entries ``v[i1] * ... * v[ik]``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    v = np.asarray(v, dtype=float).reshape(-1)
    out = np.ones(())
    for _ in range(k):
        out = np.multiply.outer(out, v)
    return DenseTensor(k, v.size, out)


# --------------------------------------------------------------------------
# Hermite polynomials and the ReLU expansion
# --------------------------------------------------------------------------


def hermite1d(k: int, x):
    """Probabilists' Hermite polynomial ``He_k`` evaluated at ``x`` (vectorised)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if k == 0:
        return prev if prev.ndim else float(prev)
    cur = x.copy()
    for j in range(1, k):
        prev, cur = cur, x * cur - j * prev
    return cur if cur.ndim else float(cur)


def hermite_table(kmax: int, x) -> np.ndarray:
    """Stack ``[He_0(x), ..., He_kmax(x)]`` along a new leading axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty((kmax + 1,) + x.shape)
    out[0] = 1.0
    if kmax >= 1:
        out[1] = x
    for j in range(1, kmax):
        out[j + 1] = x * out[j] - j * out[j - 1]
    return out


def relu_hermite_coeff(k: int) -> float:
    """``c_k`` in ``max(0, x) = sum_k c_k / k! He_k(x)``; equals ``E[sigma^(k)(z)]``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return _INV_SQRT_2PI
    if k == 1:
        return 0.5
    if k % 2 == 1:
        return 0.0
    m = k // 2
    # (2m)! / (m! 2^m (2m-1)) = (2m-3)!!, evaluated in log space for large m
    logmag = math.lgamma(2 * m + 1) - math.lgamma(m + 1) - m * math.log(2) - math.log(2 * m - 1)
    return (-1.0) ** (m - 1) * math.exp(logmag) * _INV_SQRT_2PI


@dataclass(frozen=True)
class HermiteCoeffsRelu:
    maxOrder: int
    c: np.ndarray

    def __call__(self, k: int) -> float:
        return float(self.c[k]) if k <= self.maxOrder else relu_hermite_coeff(k)


def relu_hermite_coeffs(max_order: int) -> HermiteCoeffsRelu:
    c = np.array([relu_hermite_coeff(k) for k in range(max_order + 1)])
    c.setflags(write=False)
    return HermiteCoeffsRelu(max_order, c)


# --------------------------------------------------------------------------
# Sphere moments, f_d and quadrature
# --------------------------------------------------------------------------


def sphere_moment(k: int, d: int) -> float:
    """``c_k(d) = E[z_1^{2k}]`` for ``z`` uniform on ``S^{d-2}`` (a sphere in ``R^{d-1}``).

    Uses ``E[mu^{2k}] = (2k-1)!!`` for a standard normal and
    ``E[nu^{2k}] = prod_{j<k} (d-1+2j)`` for ``nu ~ chi(d-1)``.
    """
    if d < 3:
        raise ValueError("sphere_moment needs d >= 3")
    if k < 0:
        raise ValueError("k must be non-negative")
    out = 1.0
    for j in range(k):
        out *= (2 * j + 1) / (d - 1 + 2 * j)
    return out


def log_fd_const(d: int) -> float:
    """Log of the normalising constant of ``f_d`` via log-Gamma differences."""
    if d < 2:
        raise ValueError("f_d needs d >= 2")
    return float(gammaln(d / 2.0) - 0.5 * math.log(math.pi) - gammaln((d - 1) / 2.0))


def sphere_slice_density(t, d: int):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        logv = log_fd_const(d) + 0.5 * (d - 3) * np.log1p(-t * t)
    out = np.where(np.abs(t) < 1.0, np.exp(logv), 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Fixed nodes and weights with ``f_d`` folded into the weights.

    ``interval`` is ``(-1, 1)`` for the full rule and ``(0, 1)`` for the half
    rule used with integrands that switch off at ``t = 0``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    d: int
    interval: tuple[float, float] = (-1.0, 1.0)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))


_JACOBI_MAX_D = 400


def sphere_slice_rule(
    d: int, n: int = 400, method: str = "auto", half: bool = False
) -> QuadratureRule:
    """Quadrature for ``int g(t) f_d(t) dt`` over ``(-1, 1)`` (or ``(0, 1)`` if ``half``).

    ``method="jacobi"`` absorbs ``(1-t^2)^((d-3)/2)`` into a Gauss-Jacobi
    weight, which is exact for polynomial ``g`` of degree ``< 2n`` and handles
    the half-integer endpoint behaviour of even ``d``.  ``method="legendre"``
    uses Gauss-Legendre nodes with ``f_d`` evaluated in log space.  ``"auto"``
    picks Jacobi up to ``d = 400`` (scipy's root finder degrades beyond that)
    and Legendre with at least ``2d`` nodes above.
    """
    if d < 3:
        raise ValueError("sphere_slice_rule needs d >= 3")
    if method == "auto":
        method = "jacobi" if d <= _JACOBI_MAX_D else "legendre"
        if method == "legendre":
            n = max(n, 2 * d)
    a = 0.5 * (d - 3)
    logc = log_fd_const(d)
    if method == "jacobi":
        if half:
            # t = (1 + u) / 2 on (0, 1): (1 - t)^a = 2^-a (1 - u)^a, (1 + t)^a stays in the integrand
            u, w = roots_jacobi(n, a, 0.0)
            t = 0.5 * (1.0 + u)
            logw = np.log(w) + logc - a * math.log(2.0) - math.log(2.0) + a * np.log1p(t)
            nodes, weights = t, np.exp(logw)
        else:
            t, w = roots_jacobi(n, a, a)
            nodes, weights = t, w * math.exp(logc)
        if not (np.all(np.isfinite(nodes)) and np.all(np.isfinite(weights))):
            return sphere_slice_rule(d, max(n, 2 * d), "legendre", half)
    elif method == "legendre":
        x, w = roots_legendre(n)
        if half:
            t, w = 0.5 * (1.0 + x), 0.5 * w
        else:
            t = x
        weights = w * np.exp(logc + a * np.log1p(-t * t))
        keep = weights > 0  # far tails underflow for large d
        nodes, weights = t[keep], weights[keep]
    else:
        raise ValueError(f"unknown quadrature method {method!r}")
    order = np.argsort(nodes)
    nodes = np.ascontiguousarray(nodes[order])
    weights = np.ascontiguousarray(weights[order])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes, weights, d, (0.0, 1.0) if half else (-1.0, 1.0))


def weighted_integral(
    i: Callable[[np.ndarray], np.ndarray] | float,
    p1: int,
    p2: int,
    rule: QuadratureRule,
) -> float:
    """``I_{p1,p2}[i] = int t^p1 (1 - t^2)^p2 i(t) f_d(t) dt`` on the rule's interval."""
    t = rule.nodes
    vals = np.broadcast_to(np.asarray(i(t) if callable(i) else i, dtype=float), t.shape)
    return rule.integrate(t**p1 * (1.0 - t * t) ** p2 * vals)


def integral_table(
    values: np.ndarray, p1_max: int, p2_max: int, rule: QuadratureRule
) -> np.ndarray:
    """All ``I_{p1,p2}`` for ``p1 <= p1_max``, ``p2 <= p2_max`` for one set of node values."""
    t = rule.nodes
    tp = t[None, :] ** np.arange(p1_max + 1)[:, None]
    sp = (1.0 - t * t)[None, :] ** np.arange(p2_max + 1)[:, None]
    wv = rule.weights * values
    return np.einsum("an,bn,n->ab", tp, sp, wv)


def fd_expectation(g: Callable[[np.ndarray], np.ndarray], d: int, n: int = 400) -> float:
    """``E_{t ~ f_d}[g(t)]`` with the default full rule."""
    return weighted_integral(g, 0, 0, sphere_slice_rule(d, n))


