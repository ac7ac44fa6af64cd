import csv
import json

import pytest
from click.testing import CliRunner

from distilab.cli import main
from distilab.harness import CSV_FIELDS, ExperimentConfig


@pytest.fixture
def cfg_path(tmp_path):
    cfg = ExperimentConfig(N=400, Jstar=100, L=10, test_size=300, seeds=[0, 1], output_dir=str(tmp_path / "out"))
    p = tmp_path / "cfg.json"
    p.write_text(cfg.to_json())
    return p


def read_csv(path):
    with open(path) as fh:
        reader = csv.DictReader(fh)
        return reader.fieldnames, list(reader)


def invoke(*args):
    res = CliRunner().invoke(main, [str(a) for a in args])
    assert res.exit_code == 0, res.output
    return res


def test_distill(cfg_path, tmp_path):
    res = invoke("distill", "--config", cfg_path)
    assert "distilled" in res.output
    cols, rows = read_csv(tmp_path / "out" / "distill.csv")
    assert tuple(cols) == CSV_FIELDS
    assert len(rows) == 2 * 5
    summary = json.loads((tmp_path / "out" / "distill_summary.json").read_text())
    assert len(summary["runs"]) == 2 and len(summary["medians"]) == 5


def test_sweep(cfg_path, tmp_path):
    out = tmp_path / "sw"
    invoke("sweep", "--config", cfg_path, "--axis", "N=200,400", "--axis", "Jstar=100", "--out", out)
    cols, rows = read_csv(out / "sweep.csv")
    assert tuple(cols) == CSV_FIELDS and len(rows) == 2 * 2 * 5
    assert "cos_beta" in json.loads((out / "sweep_summary.json").read_text())
    bad = CliRunner().invoke(main, ["sweep", "--config", str(cfg_path), "--axis", "N"])
    assert bad.exit_code != 0


def test_transfer(cfg_path, tmp_path):
    res = invoke("transfer", "--config", cfg_path, "--n", "10,20")
    cols, rows = read_csv(tmp_path / "out" / "transfer.csv")
    assert cols == ["seed", "n", "kind", "mse", "cos_beta", "lam"]
    assert len(rows) == 2 * 2 * 2 and "pretrained" in res.output


def test_rank_check(cfg_path, tmp_path):
    res = invoke("rank-check", "--config", cfg_path, "--sizes", "4,10", "--seeds", "2")
    cols, rows = read_csv(tmp_path / "out" / "rank.csv")
    assert cols[0] == "L" and len(rows) == 4
    rates = json.loads((tmp_path / "out" / "rank_summary.json").read_text())["rates"]
    assert [r["L"] for r in rates] == [4, 10] and "reconstruction rate" in res.output


@pytest.mark.parametrize("extra", [[], ["--r", "2", "--link", "he2"]])
def test_oracle(tmp_path, extra):
    out = tmp_path / "o.csv"
    res = invoke("oracle", "--d", "8", "--samples", "20000", "--nx", "10", "--out", out, *extra)
    assert "combined SE" in res.output
    cols, rows = read_csv(out)
    assert cols == ["term", "closed", "mc", "se", "gap"]
    assert len(rows) == 9 and rows[-1]["term"] == "norm"


def test_oracle_rejects_unsupported_multi_link(tmp_path):
    res = CliRunner().invoke(main, ["oracle", "--d", "8", "--r", "2", "--link", "he3", "--out", str(tmp_path / "o.csv")])
    assert res.exit_code != 0
