"""One pass/fail check per acceptance criterion."""

import math

import numpy as np
import pytest

from distilab.distillation import (
    DistilledSet,
    gm_t1,
    gm_t2,
    label_D2_init,
    matching_gradient,
    matching_objective,
    retrain_t2_gd,
)
from distilab.harness import ExperimentConfig, rank_table, run_pipeline, transfer
from distilab.network import NetworkParams, Surrogate, grad_a, grad_w, init_symmetric, kernel, loss
from distilab.oracle import ibp_suite, popgrad_mc, popgrad_multi_dominant, popgrad_report
from distilab.task_model import LabeledSet, make_task
from distilab.tensor_hermite import DenseTensor, fd_expectation, hermite_table, map_action, sym
from distilab.training import default_plan, teacher_train

SP4 = Surrogate("softplus", 4.0)


def fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def inversions(seq):
    return sum(b < a for a, b in zip(seq, seq[1:]))


@pytest.fixture(scope="module")
def rank_rows():
    cfg = ExperimentConfig(N=10_000, Jstar=10_000)
    return {L: rank_table(cfg, "L", [L], n_seeds=20) for L in (10, 100)}


# 1 -----------------------------------------------------------------------------
def test_c01_rank_reproduction(rank_rows):
    for L, rows in rank_rows.items():
        assert sum(r["rank_ok"] for r in rows) >= 19, L


# 2 -----------------------------------------------------------------------------
def test_c02_mse_reconstruction(rank_rows):
    for L, rows in rank_rows.items():
        assert sum(r["rel_gap"] <= 1e-3 for r in rows) >= 19, L


# 3 -----------------------------------------------------------------------------
def test_c03_gm_t2_identity():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d, L, M = rng.integers(1, 9, size=3)
        theta1 = NetworkParams(np.zeros(L), rng.standard_normal((d, L)), rng.standard_normal(L))
        DTr = LabeledSet(rng.standard_normal((20, d)), rng.standard_normal(20))
        nets = [theta1.with_(a=rng.choice([-1.0, 1.0], L)) for _ in range(int(rng.integers(1, 4)))]
        X2 = rng.standard_normal((M, d))
        D2 = DistilledSet(X2, label_D2_init(nets, X2), 2)
        recs = teacher_train(nets, DTr, default_plan(int(d)), 2)
        Kt = kernel(theta1, X2)
        out = gm_t2(D2, recs, Kt)
        ref = np.mean([Kt.T @ r.final for r in recs], axis=0)
        assert np.max(np.abs(out.y - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref))), seed


# 4 -----------------------------------------------------------------------------
def test_c04_pseudoinverse_retraining():
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        d, L, M = rng.integers(1, 9, size=3)
        theta1 = NetworkParams(np.zeros(L), rng.standard_normal((d, L)), rng.standard_normal(L))
        D2 = DistilledSet(rng.standard_normal((M, d)), rng.standard_normal(M), 2)
        Kt = kernel(theta1, D2.X)
        rec = retrain_t2_gd(theta1, D2)
        ref = np.linalg.pinv(Kt.T) @ D2.y
        assert np.linalg.norm(rec.final - ref) <= 1e-6 * max(np.linalg.norm(ref), 1e-300), seed
        U, s, _ = np.linalg.svd(Kt, full_matrices=False)
        U = U[:, s > 1e-10 * s[0]] if s.size and s[0] > 0 else U[:, :0]
        for T in (1, 7, 50):
            a = retrain_t2_gd(theta1, D2, xi=T, method="loop").final
            assert np.linalg.norm(a - U @ (U.T @ a)) <= 1e-10, seed


# 5 -----------------------------------------------------------------------------
@pytest.mark.slow
def test_c05_latent_alignment(large_runs):
    base = ExperimentConfig(stage="t1")
    big = float(np.median([r.cos_beta for r in large_runs]))
    assert big >= 0.9

    def median_cos(N, Jstar):
        cfg = base.replace(N=N, Jstar=Jstar)
        return float(np.median([run_pipeline(cfg, s).cos_beta for s in cfg.seeds]))

    along_N = [median_cos(n, 100_000) for n in (100, 1000, 10_000)] + [big]
    along_J = [median_cos(100_000, j) for j in (100, 1000, 10_000)] + [big]
    assert inversions(along_N) <= 1, along_N
    assert inversions(along_J) <= 1, along_J


# 6 -----------------------------------------------------------------------------
@pytest.mark.slow
def test_c06_paradigm_ordering(large_runs):
    med = {p: float(np.median([r.mse[p] for r in large_runs])) for p in large_runs[0].mse}
    shown = ", ".join(f"{k}={v:.4g}" for k, v in med.items())
    assert med["distilled"] < med["random1"], shown
    assert med["distilled"] < med["random2"], shown
    assert med["distilled"] <= 2 * med["full"], shown


# 7 -----------------------------------------------------------------------------
@pytest.mark.slow
def test_c07_oracle_agreement():
    for d in (8, 32):
        for link in ("he2", "he2he4"):
            for gamma in (4.0, 8.0):
                task = make_task(d, 1, link, seed=d)
                rng = np.random.default_rng(d + int(gamma))
                xt = task.beta + 0.7 * rng.standard_normal(d) / math.sqrt(d)
                xt /= np.linalg.norm(xt)
                rep = popgrad_report(task, xt, Surrogate("softplus", gamma), nW=200_000, nX=50, seed=7)
                assert rep.combined_gap <= 5, (d, link, gamma, rep.combined_gap)
    c = 1 / math.sqrt(2)
    task = make_task(64, 2, [((2, 0), c), ((0, 2), c)], seed=3)
    rng = np.random.default_rng(3)
    xt = task.B @ np.array([1.0, 0.5]) + 0.1 * rng.standard_normal(64)
    xt /= np.linalg.norm(xt)
    h = Surrogate("softplus", 8.0)
    mc, _ = popgrad_mc(task, xt, h, 200_000, 50, seed=3)
    dom = popgrad_multi_dominant(task, xt, h)[0]
    assert mc @ dom / (np.linalg.norm(mc) * np.linalg.norm(dom)) >= 0.95


# 8 -----------------------------------------------------------------------------
def test_c08_identity_suite():
    n, kmax = 1_000_000, 5
    x = np.random.default_rng(0).standard_normal(n)
    He = hermite_table(kmax, x)
    for j in range(kmax + 1):
        for k in range(j, kmax + 1):
            prod = He[j] * He[k]
            target = math.factorial(k) if j == k else 0.0
            assert abs(prod.mean() - target) <= 5 * prod.std() / math.sqrt(n), (j, k)

    for gamma in (4.0, 8.0):
        for d in (10, 50, 200):
            for row in ibp_suite(Surrogate("softplus", gamma), d):
                assert row.gap <= 1e-8, (gamma, d, row.name)

    rng = np.random.default_rng(1)
    for k, d in [(2, 5), (3, 4), (4, 3)]:
        T = DenseTensor.from_array(rng.standard_normal((d,) * k))
        assert sym(T).frobenius() <= T.frobenius() + 1e-10
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        assert abs(map_action(Q, T).frobenius() - T.frobenius()) <= 1e-10

    for d in (3, 5, 10, 100, 1000):
        assert fd_expectation(lambda t: t * t, d) == pytest.approx(1 / d, rel=1e-12, abs=0)


# 9 -----------------------------------------------------------------------------
def test_c09_gradient_correctness():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d, L, N, J = (int(v) for v in rng.integers(1, 5, size=4))
        th = NetworkParams(rng.standard_normal(L), rng.standard_normal((d, L)), rng.standard_normal(L))
        D = LabeledSet(rng.standard_normal((N, d)), rng.standard_normal(N))
        gw = fd(lambda W: loss(th.with_(W=W), D, SP4), np.array(th.W))
        assert rel(grad_w(th, D, SP4), gw) <= 1e-5, seed
        ga = fd(lambda a: loss(th.with_(a=a), D) + 0.25 * a @ a, np.array(th.a))
        assert rel(grad_a(th, D, 0.5), ga) <= 1e-5, seed

        Lsym = 2 * max(1, L // 2)
        nets = [init_symmetric(d, Lsym, 10 * seed + j) for j in range(J)]
        recs = teacher_train(nets, D, default_plan(d), 1)
        D0 = DistilledSet(rng.standard_normal((1, d)), rng.standard_normal(1), 1)
        g = matching_gradient(D0, recs, SP4)
        g_fd = fd(lambda X: matching_objective(DistilledSet(X, D0.y, 1), recs, SP4), np.array(D0.X))
        assert rel(g, g_fd) <= 1e-5, seed
        eta = math.sqrt(d)
        step = gm_t1(D0, recs, SP4, eta, lam=0.0).X - D0.X
        assert rel(step, -eta * g_fd) <= 1e-5, seed


# 10 ----------------------------------------------------------------------------
@pytest.mark.slow
def test_c10_transfer():
    rows = transfer(ExperimentConfig(N=10_000, Jstar=10_000), [1000])
    pre = np.median([r["mse"] for r in rows if r["kind"] == "pretrained"])
    scratch = np.median([r["mse"] for r in rows if r["kind"] == "scratch"])
    assert scratch >= 2 * pre, (scratch, pre)
