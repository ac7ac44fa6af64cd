"""Command-line entry point ``distilab``."""

from __future__ import annotations

import json
import math
from pathlib import Path

import click
import numpy as np

from .harness import CSV_FIELDS, ExperimentConfig, rank_table, run_pipeline, summarize, sweep, transfer, write_rows
from .network import Surrogate
from .oracle import popgrad_mc, popgrad_multi_dominant, popgrad_single_closed
from .task_model import make_task


def _load(config: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(config) if config else ExperimentConfig()


def _ints(text: str) -> list[int]:
    return [int(float(v)) for v in text.split(",") if v.strip()]


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Progressive dataset distillation experiments."""


@main.command()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="ExperimentConfig JSON.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
def distill(config, out):
    """Run the full pipeline for every configured seed."""
    cfg = _load(config)
    out = Path(out or cfg.output_dir)
    rows, reports = [], []
    for seed in cfg.seeds:
        rep = run_pipeline(cfg, seed)
        reports.append(rep.comparable() | {"wall_ms": rep.wall_ms})
        for p, v in rep.mse.items():
            rows.append(
                {"run_id": f"s{seed}", "seed": seed, "paradigm": p, "N": cfg.N, "Jstar": cfg.Jstar, "mse": v,
                 "cos_beta": rep.cos_beta, "rank_ok": int(bool(rep.rank_ok)), "wall_ms": round(rep.wall_ms, 3)}
            )
    write_rows(rows, out / "distill.csv", CSV_FIELDS)
    _dump({"medians": summarize(rows, ["paradigm"], "mse"), "runs": reports}, out / "distill_summary.json")
    for s in summarize(rows, ["paradigm"], "mse"):
        click.echo(f"{s['paradigm']:>11}  median mse {s['median']:.6g}")


@main.command("sweep")
@click.option("--config", type=click.Path(exists=True, dir_okay=False))
@click.option("--axis", "axes", multiple=True, required=True, help="NAME=v1,v2,... (repeatable).")
@click.option("--out", type=click.Path(file_okay=False), default=None)
def sweep_cmd(config, axes, out):
    """Grid over config fields, e.g. --axis N=100,1000 --axis Jstar=100,1000."""
    cfg = _load(config)
    grid = {}
    for ax in axes:
        name, _, vals = ax.partition("=")
        if not vals:
            raise click.BadParameter(f"expected NAME=values, got {ax!r}")
        grid[name.strip()] = _ints(vals)
    out = Path(out or cfg.output_dir)
    rows = sweep(cfg, grid)
    write_rows(rows, out / "sweep.csv", CSV_FIELDS)
    by = ["paradigm"] + list(grid)
    _dump({"mse": summarize(rows, by, "mse"), "cos_beta": summarize(rows, by, "cos_beta")}, out / "sweep_summary.json")
    click.echo(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")


@main.command("transfer")
@click.option("--config", type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "ns", default="10,100,1000", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def transfer_cmd(config, ns, out):
    """Fine-tune on a new target sharing the principal subspace."""
    cfg = _load(config)
    out = Path(out or cfg.output_dir)
    rows = transfer(cfg, _ints(ns))
    write_rows(rows, out / "transfer.csv")
    med = summarize(rows, ["kind", "n"], "mse")
    _dump({"mse": med}, out / "transfer_summary.json")
    for s in sorted(med, key=lambda r: (r["n"], r["kind"])):
        click.echo(f"n={s['n']:>7} {s['kind']:>10}  median mse {s['median']:.6g}")


@main.command("rank-check")
@click.option("--config", type=click.Path(exists=True, dir_okay=False))
@click.option("--key", type=click.Choice(["L", "M1"]), default="L", show_default=True)
@click.option("--sizes", default="10,100", show_default=True)
@click.option("--seeds", "n_seeds", default=20, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def rank_check(config, key, sizes, n_seeds, out):
    """Regularity rate and MSE-reconstruction rate per size."""
    cfg = _load(config)
    out = Path(out or cfg.output_dir)
    rows = rank_table(cfg, key, _ints(sizes), n_seeds)
    write_rows(rows, out / "rank.csv")
    summary = []
    for size in _ints(sizes):
        sel = [r for r in rows if r[key] == size]
        summary.append(
            {key: size, "rank_rate": float(np.mean([r["rank_ok"] for r in sel])),
             "recon_rate": float(np.mean([r["recon_ok"] for r in sel]))}
        )
        click.echo(f"{key}={size}: rank rate {summary[-1]['rank_rate']:.3f}, reconstruction rate {summary[-1]['recon_rate']:.3f}")
    _dump({"rates": summary}, out / "rank_summary.json")


@main.command()
@click.option("--d", type=int, default=32, show_default=True)
@click.option("--r", type=int, default=1, show_default=True)
@click.option("--link", default="he2", show_default=True)
@click.option("--surrogate", default="softplus:8", show_default=True)
@click.option("--samples", type=float, default=1e7, show_default=True, help="Total MC samples nW * nX.")
@click.option("--nx", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default="oracle.csv", show_default=True)
def oracle(d, r, link, surrogate, samples, nx, seed, out):
    """Closed-form population gradient next to its Monte-Carlo estimate."""
    h = Surrogate.parse(surrogate)
    task = make_task(d, r, link if r == 1 else _multi_link(link, r), seed=seed)
    rng = np.random.default_rng(seed + 1)
    xt = task.B @ rng.standard_normal(r) + 0.5 * rng.standard_normal(d) / math.sqrt(d)
    xt /= np.linalg.norm(xt)
    closed = popgrad_single_closed(task, xt, h) if r == 1 else popgrad_multi_dominant(task, xt, h)[0]
    mc, se = popgrad_mc(task, xt, h, int(samples) // nx, nx, seed)
    rows = [
        {"term": f"G[{i}]", "closed": closed[i], "mc": mc[i], "se": se[i], "gap": abs(closed[i] - mc[i])}
        for i in range(d)
    ]
    gap = float(np.linalg.norm(closed - mc) / np.linalg.norm(se))
    rows.append({"term": "norm", "closed": float(np.linalg.norm(closed)), "mc": float(np.linalg.norm(mc)),
                 "se": float(np.linalg.norm(se)), "gap": gap})
    write_rows(rows, out, ["term", "closed", "mc", "se", "gap"])
    click.echo(f"|closed - mc| = {gap:.3f} combined SE")


def _multi_link(name: str, r: int) -> list:
    if name != "he2":
        raise click.BadParameter("multi-index oracle supports --link he2 (sum of He_2 per direction)")
    c = 1.0 / math.sqrt(2.0 * r)
    return [(tuple(2 * int(i == j) for i in range(r)), c) for j in range(r)]


if __name__ == "__main__":  # pragma: no cover
    main()
