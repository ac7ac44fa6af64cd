"""Multi-index regression targets ``f*(x) = sigma*(B^T x)`` with Hermite-basis links."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor_hermite import DenseTensor, hermite_table, map_action

__all__ = [
    "Monomial",
    "MultiIndexTask",
    "LabeledSet",
    "TaskSpectra",
    "NAMED_LINKS",
    "named_link",
    "make_task",
    "eval_link",
    "eval_target",
    "sample_dataset",
    "preprocess",
    "task_spectra",
    "population_moments",
    "target_second_moment",
    "target_norm_mc",
]

Monomial = tuple[tuple[int, ...], float]


def _normalise_link(link: Iterable, r: int) -> tuple[Monomial, ...]:
    merged: dict[tuple[int, ...], float] = {}
    for deg, coef in link:
        if isinstance(deg, (int, np.integer)):
            if r != 1:
                raise ValueError("scalar degrees are only allowed for r = 1")
            deg = (int(deg),)
        deg = tuple(int(x) for x in deg)
        if len(deg) != r or any(x < 0 for x in deg):
            raise ValueError(f"multi-degree {deg} does not match r = {r}")
        merged[deg] = merged.get(deg, 0.0) + float(coef)
    out = tuple(sorted((k, v) for k, v in merged.items() if v != 0.0))
    return out


NAMED_LINKS: dict[str, tuple[Monomial, ...]] = {
    "he1": (((1,), 1.0),),
    "he2": (((2,), 1.0 / math.sqrt(2.0)),),
    "he3": (((3,), 1.0 / math.sqrt(6.0)),),
    "he2he4": (((2,), 0.5), ((4,), 1.0 / 24.0)),
}


def named_link(name: str) -> tuple[Monomial, ...]:
    try:
        return NAMED_LINKS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown link {name!r}; choose from {sorted(NAMED_LINKS)}") from None


@dataclass(frozen=True, eq=False)
class MultiIndexTask:
    """Target ``sigma*(B^T x)`` with ``sigma*(z) = sum_alpha coef_alpha prod_j He_{alpha_j}(z_j)``."""

    d: int
    r: int
    B: np.ndarray
    link: tuple[Monomial, ...]
    zeta: float = 0.0

    def __post_init__(self) -> None:
        B = np.array(self.B, dtype=float)
        if B.shape != (self.d, self.r):
            raise ValueError(f"B must have shape ({self.d}, {self.r})")
        if not np.allclose(B.T @ B, np.eye(self.r), atol=1e-10):
            raise ValueError("B must have orthonormal columns")
        if self.zeta < 0:
            raise ValueError("zeta must be non-negative")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "link", _normalise_link(self.link, self.r))

    @property
    def p(self) -> int:
        return max((sum(a) for a, _ in self.link), default=0)

    @property
    def beta(self) -> np.ndarray:
        if self.r != 1:
            raise ValueError("beta is only defined for single-index tasks")
        return self.B[:, 0]


@dataclass(eq=False)
class LabeledSet:
    X: np.ndarray
    y: np.ndarray
    alpha: float | None = None
    gamma: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.size:
            raise ValueError("row count of X must equal the number of labels")

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def preprocessed(self) -> bool:
        return self.alpha is not None

    def subset(self, idx: Sequence[int] | np.ndarray) -> "LabeledSet":
        idx = np.asarray(idx)
        return LabeledSet(self.X[idx], self.y[idx], self.alpha, self.gamma)

    def to_csv(self, path: str | Path) -> None:
        header = [f"x_{i}" for i in range(self.d)] + ["y"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row, yv in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(yv))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LabeledSet":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :-1], data[:, -1])


@dataclass(frozen=True, eq=False)
class TaskSpectra:
    C: list[DenseTensor]
    H: np.ndarray
    lambdaMin: float
    lambdaMax: float
    kappa: float
    C_se: list[DenseTensor] | None = None


def make_task(
    d: int,
    r: int,
    link: Iterable | str,
    zeta: float = 0.0,
    seed: int | None = 0,
) -> MultiIndexTask:
    """Draw ``B`` as the orthonormal QR factor of a seeded ``d x r`` Gaussian."""
    if r < 1 or r > d:
        raise ValueError(f"need 1 <= r <= d, got r={r}, d={d}")
    if isinstance(link, str):
        link = named_link(link)
    link = list(link)
    if not link:
        raise ValueError("link must be nonempty")
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((d, r)))
    Q = Q * np.sign(np.diag(R))  # unique factor with positive diag(R)
    return MultiIndexTask(d, r, Q, tuple(link), zeta)


def eval_link(link: Sequence[Monomial], Z: np.ndarray) -> np.ndarray:
    """``sigma*(z)`` for each row of ``Z`` (shape ``(n, r)``)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if not link:
        return np.zeros(Z.shape[0])
    kmax = max(max(a) for a, _ in link)
    tables = [hermite_table(kmax, Z[:, j]) for j in range(Z.shape[1])]
    out = np.zeros(Z.shape[0])
    for alpha, coef in link:
        term = np.full(Z.shape[0], coef)
        for j, a in enumerate(alpha):
            if a:
                term = term * tables[j][a]
        out += term
    return out


def eval_target(task: MultiIndexTask, x: np.ndarray):
    """Exact ``f*(x)``; accepts one ``d``-vector or an ``(n, d)`` batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != task.d:
        raise ValueError(f"expected inputs of length {task.d}")
    val = eval_link(task.link, X @ task.B)
    return float(val[0]) if single else val


def sample_dataset(task: MultiIndexTask, N: int, seed: int | None) -> LabeledSet:
    """``x ~ N(0, I_d)``, ``y = f*(x) + eps`` with ``eps`` uniform on ``{+zeta, -zeta}``."""
    if N < 1:
        raise ValueError("N must be positive")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, task.d))
    signs = rng.integers(0, 2, size=N) * 2.0 - 1.0
    y = eval_target(task, X) + task.zeta * signs
    return LabeledSet(X, y)


def preprocess(D: LabeledSet) -> LabeledSet:
    """Remove the empirical mean and linear part: ``y <- y - alpha - <gamma, x>``."""
    alpha = float(np.mean(D.y))
    gamma = (D.X * D.y[:, None]).mean(axis=0)
    resid = D.y - alpha - D.X @ gamma
    return LabeledSet(D.X, resid, alpha, gamma)


def _multidegree(idx: tuple[int, ...], r: int) -> tuple[int, ...]:
    counts = [0] * r
    for i in idx:
        counts[i] += 1
    return tuple(counts)


def _analytic_C(link: Sequence[Monomial], r: int, k: int) -> DenseTensor:
    # d^k/dz^kappa He_alpha has Gaussian mean alpha! when kappa == alpha, else 0
    coefs = dict(link)
    vals = np.zeros(r**k)
    for flat, idx in enumerate(itertools.product(range(r), repeat=k)):
        alpha = _multidegree(idx, r)
        c = coefs.get(alpha)
        if c is not None:
            vals[flat] = c * math.prod(math.factorial(a) for a in alpha)
    return DenseTensor(k, r, vals)


def _fd_C(
    link: Sequence[Monomial], r: int, k: int, Z: np.ndarray, h: float
) -> tuple[DenseTensor, DenseTensor]:
    mean = np.zeros(r**k)
    se = np.zeros(r**k)
    n = Z.shape[0]
    cache: dict[tuple[int, ...], tuple[float, float]] = {}
    eye = np.eye(r)
    for flat, idx in enumerate(itertools.product(range(r), repeat=k)):
        key = tuple(sorted(idx))
        if key not in cache:
            acc = np.zeros(n)
            for eps in itertools.product((-1.0, 1.0), repeat=k):
                shift = 0.5 * h * sum(e * eye[i] for e, i in zip(eps, key)) if k else 0.0
                acc += math.prod(eps) * eval_link(link, Z + shift)
            acc /= h**k
            cache[key] = (float(acc.mean()), float(acc.std(ddof=1) / math.sqrt(n)))
        mean[flat], se[flat] = cache[key]
    return DenseTensor(k, r, mean), DenseTensor(k, r, se)


def task_spectra(
    task: MultiIndexTask,
    mode: str = "analytic",
    mcSamples: int = 10**6,
    seed: int | None = 0,
    fd_step: float = 1e-2,
) -> TaskSpectra:
    """Hermite coefficient tensors ``C_k = E[grad^k sigma*(z)]`` and ``H = B C_2 B^T``.

    ``mode="mc"`` estimates each ``C_k`` by averaging central finite
    differences of ``sigma*`` at Gaussian samples and also returns the
    per-entry standard errors.
    """
    p = task.p
    kmax = max(p, 2)
    se_list = None
    if mode == "analytic":
        C = [_analytic_C(task.link, task.r, k) for k in range(kmax + 1)]
    elif mode == "mc":
        if mcSamples < 100:
            raise ValueError("mc mode needs at least 100 samples")
        Z = np.random.default_rng(seed).standard_normal((mcSamples, task.r))
        pairs = [_fd_C(task.link, task.r, k, Z, fd_step) for k in range(kmax + 1)]
        C = [m for m, _ in pairs]
        se_list = [s for _, s in pairs]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    C2 = C[2].array
    H = map_action(task.B, C[2]).array
    H = 0.5 * (H + H.T)
    ev = np.abs(np.linalg.eigvalsh(0.5 * (C2 + C2.T)))
    lmax = float(ev.max()) if ev.size else 0.0
    lmin = float(ev.min()) if ev.size else 0.0
    kappa = lmax / lmin if lmin > 0 else math.inf
    return TaskSpectra(C, H, lmin, lmax, kappa, se_list)


def population_moments(task: MultiIndexTask) -> tuple[float, np.ndarray]:
    """Exact ``alpha = E[f*]`` and ``gamma = E[f* x] = B C_1``."""
    coefs = dict(task.link)
    c0 = coefs.get((0,) * task.r, 0.0)
    c1 = np.array([coefs.get(tuple(int(i == j) for i in range(task.r)), 0.0) for j in range(task.r)])
    return float(c0), task.B @ c1


def target_second_moment(task: MultiIndexTask) -> float:
    """``E[f*(x)^2] = sum_alpha coef_alpha^2 alpha!`` by Hermite orthogonality."""
    return float(
        sum(c * c * math.prod(math.factorial(a) for a in alpha) for alpha, c in task.link)
    )


def target_norm_mc(task: MultiIndexTask, n: int = 10**5, seed: int | None = 0) -> tuple[float, float]:
    """Monte-Carlo estimate of ``E[f*^2]`` and its standard error."""
    rng = np.random.default_rng(seed)
    v = eval_link(task.link, rng.standard_normal((n, task.r))) ** 2
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n))
