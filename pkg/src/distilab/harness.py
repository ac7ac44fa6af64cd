"""End-to-end distillation pipeline, paradigm comparison and experiment drivers."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .construction import check_regularity
from .distillation import (
    DistilledSet,
    gm_t1,
    gm_t1_relu,
    gm_t2,
    init_D1,
    init_D2,
    label_D2_init,
    pm_t2,
    retrain_t2_gd,
    retrain_t2_onestep,
)
from .network import NetworkParams, Surrogate, forward, init_symmetric, kernel
from .task_model import (
    LabeledSet,
    MultiIndexTask,
    eval_target,
    make_task,
    named_link,
    preprocess,
    sample_dataset,
)
from .training import (
    PhasePlan,
    auto_step,
    default_plan,
    phase1_step,
    ridge_solution,
    select_ridge_lambda,
    teacher_train,
)

__all__ = [
    "PARADIGMS",
    "ExperimentConfig",
    "RunReport",
    "run_pipeline",
    "sweep",
    "transfer",
    "rank_table",
    "write_rows",
    "summarize",
]

PARADIGMS = ("full", "distilled", "random1", "random2", "teacher_t2")
CSV_FIELDS = ("run_id", "seed", "paradigm", "N", "Jstar", "mse", "cos_beta", "rank_ok", "wall_ms")

# seed streams
_TASK, _DATA, _TEST, _INIT1, _D1, _BIAS, _A2, _RANDOM, _FINETUNE = range(9)


def _sub(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    d: int = 10
    r: int = 1
    link: Any = "he2he4"
    zeta: float = 0.0
    N: int = 10_000
    Jstar: int = 10_000
    L: int = 100
    J2: int | None = None
    M1: int | None = None
    surrogate: str = "softplus:8"
    t2_method: str = "gm"
    construction: str = "compact"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    test_size: int = 10_000
    label_c: float = 1.0
    plan_overrides: dict[str, dict[str, float]] = field(default_factory=dict)
    paradigms: list[str] = field(default_factory=lambda: list(PARADIGMS))
    stage: str = "full"
    output_dir: str = "results"

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.L % 2:
            raise ValueError("L must be even for the mirrored initialisation")
        if self.t2_method not in ("gm", "pm"):
            raise ValueError("t2_method must be 'gm' or 'pm'")
        if self.construction not in ("compact", "per_point"):
            raise ValueError("construction must be 'compact' or 'per_point'")
        if self.stage not in ("full", "t1"):
            raise ValueError("stage must be 'full' or 't1'")
        bad = set(self.paradigms) - set(PARADIGMS)
        if bad:
            raise ValueError(f"unknown paradigms {sorted(bad)}")
        Surrogate.parse(self.surrogate)

    @property
    def J(self) -> int:
        """Number of t = 1 initialisations, ``ceil(2 J* / L)``."""
        return max(1, math.ceil(2 * self.Jstar / self.L))

    @property
    def Jstar_effective(self) -> int:
        return self.J * self.L // 2

    @property
    def mode(self) -> str:
        return "single" if self.r == 1 and (self.M1 or 1) == 1 else "multi"

    def plan(self) -> PhasePlan:
        plan = default_plan(self.d, self.r, self.mode)
        if self.M1 is not None:
            plan = dataclasses.replace(plan, M1=self.M1)
        for key, kw in self.plan_overrides.items():
            t, role = key.split(",")
            plan = plan.override(int(t), role.strip(), **kw)
        return plan

    def task(self, seed: int) -> MultiIndexTask:
        link = named_link(self.link) if isinstance(self.link, str) else _link_from_json(self.link)
        return make_task(self.d, self.r, link, self.zeta, seed=_sub(seed, _TASK))

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def _link_from_json(link) -> list:
    return [(tuple(deg) if isinstance(deg, (list, tuple)) else int(deg), float(c)) for deg, c in link]


@dataclass
class RunReport:
    seed: int
    mse: dict[str, float]
    cos_beta: float
    rank_ok: bool | None
    rank: int | None
    max_rank: int | None
    M2: int | None
    memory: int | None
    wall_ms: float
    info: dict[str, Any] = field(default_factory=dict)

    def comparable(self) -> dict:
        """Everything except timing, for determinism checks."""
        out = dataclasses.asdict(self)
        out.pop("wall_ms")
        return out


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Stage1:
    task: MultiIndexTask
    D: LabeledSet
    theta0: NetworkParams
    G0: np.ndarray  # teacher gradient of theta0 on the full data
    D1: DistilledSet
    cos_beta: float


def _alignment(task: MultiIndexTask, X: np.ndarray) -> float:
    """``|cos(x, beta)|`` (median over points); for ``r > 1`` the projected norm ratio."""
    vals = []
    for x in np.atleast_2d(X):
        n = np.linalg.norm(x)
        if n == 0:
            vals.append(0.0)
        elif task.r == 1:
            vals.append(abs(float(task.beta @ x)) / n)
        else:
            vals.append(float(np.linalg.norm(task.B.T @ x)) / n)
    return float(np.median(vals))


_STAGE1_KEYS = ("d", "r", "link", "zeta", "N", "Jstar", "L", "M1", "surrogate", "label_c", "plan_overrides")


def _stage1_key(cfg: ExperimentConfig) -> str:
    return json.dumps({k: getattr(cfg, k) for k in _STAGE1_KEYS}, sort_keys=True)


def _stage1(cfg: ExperimentConfig, seed: int) -> _Stage1:
    return _stage1_cached(_stage1_key(cfg), seed)


@lru_cache(maxsize=8)
def _stage1_cached(key: str, seed: int) -> _Stage1:
    cfg = ExperimentConfig(**json.loads(key))
    plan = cfg.plan()
    task = cfg.task(seed)
    D = preprocess(sample_dataset(task, cfg.N, _sub(seed, _DATA)))
    thetas = [init_symmetric(cfg.d, cfg.L, _sub(seed, _INIT1, j)) for j in range(cfg.J)]
    records = teacher_train(thetas, D, plan, t=1)
    label_mode = "constant" if cfg.mode == "single" else "chi"
    D0 = init_D1(plan.M1, cfg.d, label_mode, _sub(seed, _D1), c=cfg.label_c)
    h = Surrogate.parse(cfg.surrogate)
    rp = plan[(1, "D")]
    D1 = gm_t1(D0, records, h, rp.eta, rp.lam) if h.smooth else gm_t1_relu(D0, records, rp.eta, rp.lam)
    return _Stage1(task, D, thetas[0], records[0].grads[0], D1, _alignment(task, D1.X))


def _retrain_w(theta0: NetworkParams, D1: DistilledSet | LabeledSet, plan: PhasePlan) -> np.ndarray:
    rp = plan[(1, "R")]
    data = D1.as_labeled() if isinstance(D1, DistilledSet) else D1
    return phase1_step(theta0, data, rp.eta, rp.lam).final.W


def _teacher_t2(theta1: NetworkParams, D: LabeledSet, plan: PhasePlan, a_inits: Sequence[np.ndarray]):
    thetas = [theta1.with_(a=a) for a in a_inits]
    return teacher_train(thetas, D, plan, t=2)


class _Evaluator:
    def __init__(self, task: MultiIndexTask, D: LabeledSet, n: int, seed: int):
        rng = np.random.default_rng(_sub(seed, _TEST))
        self.X = rng.standard_normal((n, task.d))
        self.y = eval_target(task, self.X)
        self.shift = D.alpha + self.X @ D.gamma

    def mse(self, theta: NetworkParams) -> float:
        pred = forward(theta, self.X) + self.shift
        return float(np.mean((pred - self.y) ** 2))


def run_pipeline(cfg: ExperimentConfig, seed: int | None = None) -> RunReport:
    """Distill, retrain and score every requested paradigm for one seed.

    Paradigms: ``full`` (both phases on the training set), ``distilled``
    (retraining on the distilled sets), ``teacher_t2`` (the ``a_0 = 0``
    teacher at ``t = 2`` on top of the distilled first layer), ``random1``
    (a random training point replaces the first distilled set) and
    ``random2`` (random training points replace both distilled sets).
    """
    seed = cfg.seeds[0] if seed is None else seed
    t0 = time.perf_counter()
    s1 = _stage1(cfg, seed)
    if cfg.stage == "t1":
        return RunReport(seed, {}, s1.cos_beta, None, None, None, None, None, _ms(t0))

    plan = cfg.plan()
    task, D, theta0 = s1.task, s1.D, s1.theta0
    L = cfg.L
    b = np.random.default_rng(_sub(seed, _BIAS)).standard_normal(L)
    W1 = _retrain_w(theta0, s1.D1, plan)
    theta1 = NetworkParams(np.zeros(L), W1, b)

    J2 = cfg.J2 or cfg.J
    rng_a = np.random.default_rng(_sub(seed, _A2))
    a_inits = [np.zeros(L)] + [rng_a.integers(0, 2, size=L) * 2.0 - 1.0 for _ in range(J2)]
    t2 = _teacher_t2(theta1, D, plan, a_inits)
    ref, recs = t2[0], t2[1:]

    pts = init_D2(W1, b, s1.D1, cfg.construction)
    Kt = kernel(theta1, pts.X)
    reg = check_regularity(Kt, W1, b)
    D2 = pts.with_labels(label_D2_init([theta1.with_(a=a) for a in a_inits[1:]], pts.X))
    info: dict[str, Any] = {"eta_2_Tr": ref.info["eta"], "lam_2_Tr": ref.info["lam"], "xi_2_Tr": ref.info["xi"]}
    if cfg.t2_method == "gm":
        D2 = gm_t2(D2, recs, Kt)
        rt = retrain_t2_gd(theta1, D2)
        a_dist = rt.final
        info.update(eta_2_R=rt.info["eta"], xi_2_R=rt.info["xi"])
    else:
        eta_S = plan[(2, "R")].eta or auto_step(np.linalg.norm(Kt, 2) ** 2 / D2.M)
        D2, pm_info = pm_t2(D2, D, theta1, eta_S)
        a_dist = retrain_t2_onestep(theta1, D2, eta_S)
        info.update(eta_2_R=eta_S, **pm_info)

    ev = _Evaluator(task, D, cfg.test_size, seed)
    mse: dict[str, float] = {}
    want = set(cfg.paradigms)
    if "distilled" in want:
        mse["distilled"] = ev.mse(theta1.with_(a=a_dist))
    if "teacher_t2" in want:
        mse["teacher_t2"] = ev.mse(theta1.with_(a=ref.final))
    if "full" in want:
        eta = plan[(1, "Tr")].eta
        theta_f = NetworkParams(np.zeros(L), -eta * s1.G0, b)
        mse["full"] = ev.mse(theta_f.with_(a=_teacher_t2(theta_f, D, plan, [np.zeros(L)])[0].final))
    if want & {"random1", "random2"}:
        rng = np.random.default_rng(_sub(seed, _RANDOM))
        perm = rng.permutation(D.N)
        W1r = _retrain_w(theta0, D.subset(perm[:1]), plan)
        theta_r = NetworkParams(np.zeros(L), W1r, b)
        if "random1" in want:
            mse["random1"] = ev.mse(theta_r.with_(a=_teacher_t2(theta_r, D, plan, [np.zeros(L)])[0].final))
        if "random2" in want:
            idx = perm[1 : 1 + D2.M] if D.N > D2.M else rng.integers(0, D.N, size=D2.M)
            D2r = DistilledSet(D.X[idx], D.y[idx], 2)
            if cfg.t2_method == "gm":
                a_r = retrain_t2_gd(theta_r, D2r).final
            else:
                a_r = retrain_t2_onestep(theta_r, D2r, info["eta_2_R"])
            mse["random2"] = ev.mse(theta_r.with_(a=a_r))

    memory = plan.M1 * (cfg.d + 1) + D2.M + (cfg.d if cfg.construction == "compact" else plan.M1 * cfg.d)
    return RunReport(seed, mse, s1.cos_beta, reg.ok, reg.rank, reg.max_rank, D2.M, memory, _ms(t0), info)


def _ms(t0: float) -> float:
    return 1000.0 * (time.perf_counter() - t0)


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------


def _rows(report: RunReport, cfg: ExperimentConfig, run_id: str) -> list[dict]:
    base = {
        "run_id": run_id,
        "seed": report.seed,
        "N": cfg.N,
        "Jstar": cfg.Jstar,
        "cos_beta": report.cos_beta,
        "rank_ok": "" if report.rank_ok is None else int(report.rank_ok),
        "wall_ms": round(report.wall_ms, 3),
    }
    if not report.mse:
        return [dict(base, paradigm="alignment", mse="")]
    return [dict(base, paradigm=p, mse=report.mse[p]) for p in cfg.paradigms if p in report.mse]


def sweep(cfg: ExperimentConfig, axes: dict[str, Sequence]) -> list[dict]:
    """Grid over config fields (e.g. ``{"N": [...], "Jstar": [...]}``) times seeds.

    Returns long-format rows, one per (grid cell, seed, paradigm).
    """
    names = list(axes)
    rows: list[dict] = []
    for values in _product([list(axes[n]) for n in names]):
        cell = cfg.replace(**dict(zip(names, values)))
        for seed in cell.seeds:
            run_id = "-".join(f"{n}={v}" for n, v in zip(names, values)) + f"-s{seed}"
            rows.extend(_rows(run_pipeline(cell, seed), cell, run_id))
    return rows


def _product(lists: list[list]) -> Iterable[tuple]:
    if not lists:
        yield ()
        return
    for head in lists[0]:
        for tail in _product(lists[1:]):
            yield (head, *tail)


def transfer(cfg: ExperimentConfig, ns: Sequence[int], new_link: Any = "he3") -> list[dict]:
    """Fine-tune the last layer on ``n`` samples of a new target sharing ``B``.

    ``pretrained`` uses the first layer retrained on the first distilled
    set; ``scratch`` keeps the random initial first layer.  Both use the same
    Gaussian biases and an exact ridge fit with a validated ``lambda``.
    """
    plan = cfg.plan()
    link = named_link(new_link) if isinstance(new_link, str) else _link_from_json(new_link)
    rows = []
    for seed in cfg.seeds:
        s1 = _stage1(cfg, seed)
        g_task = MultiIndexTask(cfg.d, cfg.r, s1.task.B, link, 0.0)
        b = np.random.default_rng(_sub(seed, _BIAS)).standard_normal(cfg.L)
        nets = {
            "pretrained": NetworkParams(np.zeros(cfg.L), _retrain_w(s1.theta0, s1.D1, plan), b),
            "scratch": s1.theta0.with_(a=np.zeros(cfg.L), b=b),
        }
        rng_test = np.random.default_rng(_sub(seed, _TEST))
        Xt = rng_test.standard_normal((cfg.test_size, cfg.d))
        yt = eval_target(g_task, Xt)
        for n in ns:
            Dn = sample_dataset(g_task, n, _sub(seed, _FINETUNE, n))
            for kind, th in nets.items():
                K = kernel(th, Dn.X)
                lam = select_ridge_lambda(K, Dn.y)
                a = ridge_solution(K, Dn.y, lam)
                err = float(np.mean((forward(th.with_(a=a), Xt) - yt) ** 2))
                rows.append(
                    {"seed": seed, "n": n, "kind": kind, "mse": err, "cos_beta": s1.cos_beta, "lam": lam}
                )
    return rows


def rank_table(cfg: ExperimentConfig, key: str, sizes: Sequence[int], n_seeds: int = 20, tol: float = 1e-3) -> list[dict]:
    """Regularity and MSE-reconstruction outcomes per size (``key`` is ``"L"`` or ``"M1"``)."""
    if key not in ("L", "M1"):
        raise ValueError("key must be 'L' or 'M1'")
    base = cfg.replace(paradigms=["distilled", "teacher_t2"], stage="full")
    rows = []
    for size in sizes:
        cell = base.replace(**{key: size})
        for seed in range(n_seeds):
            rep = run_pipeline(cell, seed)
            gap = abs(rep.mse["distilled"] - rep.mse["teacher_t2"]) / rep.mse["teacher_t2"]
            rows.append(
                {
                    key: size,
                    "seed": seed,
                    "rank_ok": int(rep.rank_ok),
                    "rank": rep.rank,
                    "max_rank": rep.max_rank,
                    "M2": rep.M2,
                    "mse_distilled": rep.mse["distilled"],
                    "mse_teacher": rep.mse["teacher_t2"],
                    "rel_gap": gap,
                    "recon_ok": int(gap <= tol),
                }
            )
    return rows


def write_rows(rows: Sequence[dict], path: str | Path, fields: Sequence[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(fields or (rows[0].keys() if rows else CSV_FIELDS))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def summarize(rows: Sequence[dict], by: Sequence[str], value: str) -> list[dict]:
    """Median of ``value`` grouped by the ``by`` columns (blank values skipped)."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        v = row.get(value, "")
        if v == "" or v is None:
            continue
        groups.setdefault(tuple(row[k] for k in by), []).append(float(v))
    return [dict(zip(by, k), median=float(np.median(v)), count=len(v)) for k, v in groups.items()]
