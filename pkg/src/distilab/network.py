"""Two-layer ReLU network ``f(x) = sum_i a_i sigma(<w_i, x> + b_i)`` and its gradients.

The loss on a labeled set is ``L = 1/(2N) sum_n (f(x_n) - y_n)^2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .task_model import LabeledSet

__all__ = [
    "NetworkParams",
    "Surrogate",
    "UndefinedDerivativeError",
    "RELU",
    "init_symmetric",
    "forward",
    "loss",
    "grad_w",
    "grad_w_many",
    "grad_a",
    "kernel",
    "reinit_bias",
    "surrogate_eval",
    "relu",
    "relu_prime",
]


class UndefinedDerivativeError(ValueError):
    """Raised when a second derivative of the ReLU is requested."""


@dataclass(frozen=True, eq=False)
class NetworkParams:
    a: np.ndarray
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        a = np.array(self.a, dtype=float).reshape(-1)
        W = np.array(self.W, dtype=float)
        b = np.array(self.b, dtype=float).reshape(-1)
        if W.ndim != 2 or W.shape[1] != a.size or b.size != a.size:
            raise ValueError("inconsistent shapes: W must be d x L, a and b length L")
        for arr in (a, W, b):
            arr.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def L(self) -> int:
        return self.a.size

    @property
    def d(self) -> int:
        return self.W.shape[0]

    def with_(self, **kw) -> "NetworkParams":
        return replace(self, **kw)

    def is_mirror_symmetric(self) -> bool:
        """``w_i = w_{L-1-i}``, ``b_i = b_{L-1-i}``, ``a_i = -a_{L-1-i}`` (so ``f = 0``)."""
        if self.L % 2:
            return False
        return (
            np.array_equal(self.W, self.W[:, ::-1])
            and np.array_equal(self.b, self.b[::-1])
            and np.array_equal(self.a, -self.a[::-1])
        )

    def flat(self) -> np.ndarray:
        """``a``, then ``W`` column-major, then ``b``."""
        return np.concatenate([self.a, self.W.reshape(-1, order="F"), self.b])

    @classmethod
    def from_flat(cls, v: np.ndarray, d: int, L: int) -> "NetworkParams":
        v = np.asarray(v, dtype=float)
        if v.size != L * (d + 2):
            raise ValueError("flat vector has the wrong length")
        a = v[:L]
        W = v[L : L + d * L].reshape((d, L), order="F")
        return cls(a, W, v[L + d * L :])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# d={self.d},L={self.L}\n")
            w = csv.writer(fh)
            w.writerow(["value"])
            for v in self.flat():
                w.writerow([repr(float(v))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "NetworkParams":
        with open(path) as fh:
            meta = fh.readline().lstrip("#").strip()
        kv = dict(item.split("=") for item in meta.split(","))
        vals = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=1)
        return cls.from_flat(vals, int(kv["d"]), int(kv["L"]))


@dataclass(frozen=True)
class Surrogate:
    """Activation used inside student gradients.

    ``kind`` is ``"relu"``, ``"softplus"`` (``h = log(1 + e^{g t}) / g``) or
    ``"quadratic"`` (``h = t^2 / 2``, a test surrogate with ``h'' = 1``).
    """

    kind: str = "softplus"
    gamma_s: float = 8.0

    def __post_init__(self) -> None:
        if self.kind not in ("relu", "softplus", "quadratic"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.kind == "softplus" and not self.gamma_s > 0:
            raise ValueError("softplus needs gamma_s > 0")

    @property
    def smooth(self) -> bool:
        return self.kind != "relu"

    @classmethod
    def parse(cls, spec: str) -> "Surrogate":
        """``"relu"``, ``"quadratic"`` or ``"softplus:8"``."""
        kind, _, g = spec.partition(":")
        return cls(kind, float(g) if g else 8.0)

    def h(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "relu":
            return np.maximum(t, 0.0)
        if self.kind == "quadratic":
            return 0.5 * t * t
        return np.logaddexp(0.0, self.gamma_s * t) / self.gamma_s

    def d1(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "relu":
            return (t > 0).astype(float)
        if self.kind == "quadratic":
            return t.copy()
        return _sigmoid(self.gamma_s * t)

    def d2(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "relu":
            raise UndefinedDerivativeError("the ReLU has no second derivative; use gm_t1_relu")
        if self.kind == "quadratic":
            return np.ones_like(t)
        s = _sigmoid(self.gamma_s * t)
        return self.gamma_s * s * (1.0 - s)


RELU = Surrogate("relu")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def surrogate_eval(h: Surrogate, t, need_second: bool = True):
    """``(h(t), h'(t), h''(t))``; the ReLU raises unless ``need_second=False``."""
    if need_second:
        return h.h(t), h.d1(t), h.d2(t)
    return h.h(t), h.d1(t), None


def relu(z):
    return np.maximum(z, 0.0)


def relu_prime(z):
    """Indicator ``1{z > 0}``, so ``sigma'(0) = 0``."""
    return (np.asarray(z) > 0).astype(float)


def init_symmetric(d: int, L: int, seed: int | None) -> NetworkParams:
    """Mirror-paired init: ``w_i = w_{L-1-i}`` uniform on the sphere, ``a_i = -a_{L-1-i}``, ``b = 0``."""
    if L % 2:
        raise ValueError("L must be even")
    rng = np.random.default_rng(seed)
    half = L // 2
    Wh = rng.standard_normal((d, half))
    Wh /= np.linalg.norm(Wh, axis=0, keepdims=True)
    ah = rng.integers(0, 2, size=half) * 2.0 - 1.0
    W = np.concatenate([Wh, Wh[:, ::-1]], axis=1)
    a = np.concatenate([ah, -ah[::-1]])
    return NetworkParams(a, W, np.zeros(L))


def _pre(theta: NetworkParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != theta.d:
        raise ValueError(f"inputs must have {theta.d} columns")
    return X @ theta.W + theta.b


def forward(theta: NetworkParams, X, act: Surrogate = RELU):
    """Network output for one input or a batch (rows of ``X``, or a ``LabeledSet``)."""
    if isinstance(X, LabeledSet):
        X = X.X
    x = np.asarray(X, dtype=float)
    out = act.h(_pre(theta, x)) @ theta.a
    return float(out[0]) if x.ndim == 1 else out


def loss(theta: NetworkParams, D: LabeledSet, act: Surrogate = RELU) -> float:
    res = forward(theta, D.X, act) - D.y
    return float(0.5 * np.mean(res * res))


def kernel(theta: NetworkParams, X) -> np.ndarray:
    """ReLU feature matrix ``K[i, n] = sigma(<w_i, x_n> + b_i)`` (``L x N``)."""
    if isinstance(X, LabeledSet):
        X = X.X
    return relu(_pre(theta, X)).T


def grad_w(theta: NetworkParams, D: LabeledSet, act: Surrogate = RELU) -> np.ndarray:
    """``d x L`` matrix with column ``i = 1/N sum_n (f(x_n) - y_n) a_i x_n act'(<w_i,x_n> + b_i)``."""
    if D.N == 0:
        raise ValueError("empty dataset")
    Z = _pre(theta, D.X)
    res = act.h(Z) @ theta.a - D.y
    return (D.X.T @ (res[:, None] * act.d1(Z))) * (theta.a / D.N)


def grad_a(theta: NetworkParams, D: LabeledSet, lam: float = 0.0) -> np.ndarray:
    """``1/N K (K^T a - y) + lam a``."""
    K = kernel(theta, D.X)
    return K @ (K.T @ theta.a - D.y) / D.N + lam * theta.a


def _masked_moment(
    X: np.ndarray,
    r: np.ndarray,
    W: np.ndarray,
    b: np.ndarray,
    row_block: int = 4096,
    col_block: int = 512,
) -> np.ndarray:
    """``1/N sum_n r_n x_n 1{<w_c, x_n> + b_c > 0}`` for every column ``c`` of ``W``.

    Tiled so each block of pre-activations stays a few MB.
    """
    N, d = X.shape
    out = np.zeros((d, W.shape[1]))
    rX = X * r[:, None]
    for s in range(0, N, row_block):
        Xs = X[s : s + row_block]
        rXs = np.ascontiguousarray(rX[s : s + row_block].T)
        for c in range(0, W.shape[1], col_block):
            Z = Xs @ W[:, c : c + col_block]
            Z += b[c : c + col_block]
            out[:, c : c + col_block] += rXs @ (Z > 0).astype(float)
    return out / N


def grad_w_many(thetas: Sequence[NetworkParams], D: LabeledSet) -> list[np.ndarray]:
    """ReLU ``grad_w`` for many networks sharing one dataset.

    Mirror-symmetric networks output zero, so every column only needs the
    shared moment ``1/N sum_n (-y_n) x_n sigma'(.)`` at one member of each
    mirrored pair.  All such columns are batched through one tiled product.
    """
    if D.N == 0:
        raise ValueError("empty dataset")
    sym_idx = [j for j, th in enumerate(thetas) if th.is_mirror_symmetric()]
    out: list[np.ndarray | None] = [None] * len(thetas)
    if sym_idx:
        halves = [thetas[j].L // 2 for j in sym_idx]
        Wcat = np.concatenate([thetas[j].W[:, : h] for j, h in zip(sym_idx, halves)], axis=1)
        bcat = np.concatenate([thetas[j].b[: h] for j, h in zip(sym_idx, halves)])
        U = _masked_moment(D.X, -D.y, Wcat, bcat)
        off = 0
        for j, h in zip(sym_idx, halves):
            u = U[:, off : off + h]
            off += h
            out[j] = np.concatenate([u, u[:, ::-1]], axis=1) * thetas[j].a
    for j, th in enumerate(thetas):
        if out[j] is None:
            out[j] = grad_w(th, D)
    return out  # type: ignore[return-value]


def reinit_bias(theta: NetworkParams, seed: int | None) -> NetworkParams:
    """Replace ``b`` by a seeded standard Gaussian vector."""
    b = np.random.default_rng(seed).standard_normal(theta.L)
    return theta.with_(b=b)
