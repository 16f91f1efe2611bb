import json
import subprocess
import sys

import numpy as np
import pytest

from biequi.cli import cli_main
from biequi.io import GtEntry, read_gt_log, read_transform_json, write_gt_log
from biequi.params import load_archive


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli_main(["init-weights", "--seed", "0", "--out", str(d / "w.bqf")]) == 0
    assert cli_main(["synth", "--seed", "4", "--points", "1200", "--overlap", "0.6", "--noise", "0",
                     "--out", str(d / "pair")]) == 0
    return d


def test_synth_outputs(workdir):
    for name in ("ref.ply", "src.ply", "gt.json", "matches.json"):
        assert (workdir / "pair" / name).exists()
    assert 0.5 <= json.loads((workdir / "pair" / "gt.json").read_text())["overlap"] <= 0.7


def test_register_oracle(workdir):
    d = workdir / "pair"
    out = workdir / "oracle.json"
    code = cli_main(["register", "--ref", str(d / "ref.ply"), "--src", str(d / "src.ply"), "--weights",
                     str(workdir / "w.bqf"), "--out", str(out), "--gt", str(d / "gt.json"),
                     "--oracle-matches", str(d / "matches.json")])
    assert code == 0
    rec = json.loads(out.read_text())
    assert rec["rmse_m"] < 1e-6 and len(rec["matrix"]) == 16
    assert read_transform_json(out).allclose(read_transform_json(d / "gt.json"), 1e-6)


def test_register_learned_with_refine(workdir):
    d = workdir / "pair"
    out = workdir / "learned.json"
    code = cli_main(["register", "--ref", str(d / "ref.ply"), "--src", str(d / "src.ply"), "--weights",
                     str(workdir / "w.bqf"), "--out", str(out), "--refine", "1"])
    assert code == 0
    assert set(json.loads(out.read_text())) == {"matrix"}


def test_register_failure_writes_null(workdir, tmp_path):
    d = workdir / "pair"
    (tmp_path / "none.json").write_text('{"matches": []}')
    out = tmp_path / "f.json"
    code = cli_main(["register", "--ref", str(d / "ref.ply"), "--src", str(d / "src.ply"), "--weights",
                     str(workdir / "w.bqf"), "--out", str(out), "--oracle-matches", str(tmp_path / "none.json")])
    assert code == 1
    assert json.loads(out.read_text())["matrix"] is None


def test_runtime_and_usage_errors(workdir, tmp_path, capsys):
    assert cli_main(["register", "--ref", "missing.ply", "--src", "missing.ply", "--weights",
                     str(workdir / "w.bqf"), "--out", str(tmp_path / "o.json")]) == 1
    assert cli_main(["register", "--bogus"]) == 2
    assert cli_main(["synth", "--out", str(tmp_path), "--points", "0"]) == 2
    assert cli_main([]) == 2
    capsys.readouterr()


def test_init_weights_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"n_blocks": 1}))
    assert cli_main(["init-weights", "--config", str(tmp_path / "c.json"), "--seed", "3",
                     "--out", str(tmp_path / "w.bqf")]) == 0
    assert load_archive(tmp_path / "w.bqf").config.n_blocks == 1


def test_selftest_primitives(capsys):
    assert cli_main(["selftest", "--suite", "primitives"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(ln.startswith("PASS") for ln in lines)


def test_selftest_tight_tolerance_fails(capsys):
    assert cli_main(["selftest", "--suite", "primitives", "--tol", "0"]) == 1
    capsys.readouterr()


def test_bench(workdir, tmp_path, capsys):
    d = workdir / "pair"
    gt = read_transform_json(d / "gt.json")
    (tmp_path / "pairs.txt").write_text(f"{d / 'ref.ply'}\t{d / 'src.ply'}\t0.6\n")
    write_gt_log(tmp_path / "gt.log", [GtEntry(0, 1, 2, gt)])
    assert len(read_gt_log(tmp_path / "gt.log")) == 1
    code = cli_main(["bench", "--pairs", str(tmp_path / "pairs.txt"), "--gt", str(tmp_path / "gt.log"),
                     "--weights", str(workdir / "w.bqf"), "--report", str(tmp_path / "r.json"),
                     "--csv", str(tmp_path / "r.csv")])
    assert code == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert {"mean_rr", "robust_rr", "mean_ir", "robust_ir", "pairs", "buckets"} <= set(rep)
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 2
    assert "robust_rr" in capsys.readouterr().out
    write_gt_log(tmp_path / "gt.log", [GtEntry(0, 1, 2, gt)] * 2)
    assert cli_main(["bench", "--pairs", str(tmp_path / "pairs.txt"), "--gt", str(tmp_path / "gt.log"),
                     "--weights", str(workdir / "w.bqf"), "--report", str(tmp_path / "r.json")]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "biequi", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "register" in proc.stdout
