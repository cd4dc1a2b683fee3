import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from epicodec import cli, pipeline
from epicodec.evaluation import RDCurve, RDPoint, write_rd_csv

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.json"
CHAIN = ("synth-data", "build-epi", "train", "encode", "decode", "evaluate")


def run_chain(out, *extra):
    for stage in CHAIN:
        assert cli.main([stage, "--config", str(SMOKE), "--out", str(out), *extra]) == 0, stage


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    out = tmp_path_factory.mktemp("chain")
    run_chain(out)
    return out


def fresh_copy(chain, tmp_path):
    dst = tmp_path / "run"
    shutil.copytree(chain, dst)
    return dst


def test_chain_writes_every_stage(chain):
    for d in ("frames", "epi", "train", "bitstreams", "decoded", "eval"):
        prov = json.loads((chain / d / "provenance.json").read_text()) if d != "bitstreams" else \
            json.loads((chain / d / "manifest.json").read_text())
        assert {"config_hash", "seed", "format_version"} <= set(prov)
    assert len(list((chain / "bitstreams").glob("*.epic"))) == 8
    assert (chain / "eval" / "rd.csv").read_text().startswith("label,rate_bpp,rate_kbps,psnr_db,ssim")


def test_even_views_are_spliced_exactly(chain):
    from epicodec.mvio import read_manifest
    src = read_manifest(chain / "frames" / "manifest.json").frames
    dec = read_manifest(chain / "decoded" / "manifest.json").frames
    np.testing.assert_array_equal(dec[[0, 2]], src[[0, 2]])


def test_chain_is_deterministic(chain, tmp_path):
    other = tmp_path / "again"
    run_chain(other)
    for rel in sorted(p.relative_to(chain) for p in chain.rglob("*") if p.is_file()):
        assert (other / rel).read_bytes() == (chain / rel).read_bytes(), rel


def test_invalid_config_exits_2_with_field_path(tmp_path, capsys):
    code = cli.main(["train", "--config", str(SMOKE), "--out", str(tmp_path), "--set", "train.batchsize=0"])
    assert code == 2
    assert "train.batchsize" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["synth-data", "--config", str(tmp_path / "none.json")]) == 2


def test_corrupt_bitstream_exits_3(chain, tmp_path, capsys):
    run = fresh_copy(chain, tmp_path)
    f = run / "bitstreams" / "w0000_s0003.epic"
    f.write_bytes(b"JUNK" + f.read_bytes()[4:])
    assert cli.main(["decode", "--config", str(SMOKE), "--out", str(run)]) == 3
    assert "w0000_s0003" in capsys.readouterr().err


def test_truncated_bitstream_exits_3(chain, tmp_path):
    run = fresh_copy(chain, tmp_path)
    f = run / "bitstreams" / "w0000_s0000.epic"
    f.write_bytes(f.read_bytes()[:-3])
    assert cli.main(["decode", "--config", str(SMOKE), "--out", str(run)]) == 3


def test_config_mismatch_exits_4(chain, tmp_path):
    run = fresh_copy(chain, tmp_path)
    assert cli.main(["decode", "--config", str(SMOKE), "--out", str(run), "--set", "loss.beta=1e-5"]) == 4
    assert cli.main(["encode", "--config", str(SMOKE), "--out", str(run), "--set", "seed=3"]) == 4


def test_swapped_checkpoint_exits_4(chain, tmp_path):
    run = fresh_copy(chain, tmp_path)
    assert cli.main(["train", "--config", str(SMOKE), "--out", str(run), "--set", "train.epochs=1"]) == 0
    # the bitstreams now belong to a checkpoint produced under another config
    assert cli.main(["decode", "--config", str(SMOKE), "--out", str(run)]) == 4


def test_missing_stage_input_exits_1(tmp_path):
    assert cli.main(["train", "--config", str(SMOKE), "--out", str(tmp_path)]) == 1


def test_resume_finishes_the_run(chain, tmp_path):
    run = tmp_path / "r"
    for stage in ("synth-data", "build-epi"):
        assert cli.main([stage, "--config", str(SMOKE), "--out", str(run)]) == 0
    from epicodec.config import load_config
    pipeline.train(load_config(SMOKE, output_dir=str(run)), max_steps=5)
    assert cli.main(["train", "--config", str(SMOKE), "--out", str(run), "--resume"]) == 0
    assert (run / "train" / "metrics.csv").read_bytes() == (chain / "train" / "metrics.csv").read_bytes()


def test_bdstats_identity_gives_zero(tmp_path, capsys):
    pts = [RDPoint(f"p{i}", r, r * 10, q, s) for i, (r, q, s) in
           enumerate(zip([0.1, 0.2, 0.4, 0.8], [30.0, 32.0, 33.5, 34.5], [0.8, 0.85, 0.9, 0.92]))]
    write_rd_csv(tmp_path / "a.csv", RDCurve(pts))
    code = cli.main(["bdstats", "--config", str(SMOKE), "--out", str(tmp_path),
                     "--anchor", str(tmp_path / "a.csv"), "--test", str(tmp_path / "a.csv")])
    assert code == 0
    rows = (tmp_path / "bd" / "bd.csv").read_text().splitlines()[1:]
    for row in rows:
        _, _, rate, _, quality = row.split(",")
        assert abs(float(rate)) < 1e-9 and abs(float(quality)) < 1e-9
    assert "BDBR" in capsys.readouterr().out


def test_bdstats_without_curves_exits_2(tmp_path):
    assert cli.main(["bdstats", "--config", str(SMOKE), "--out", str(tmp_path)]) == 2


def test_thread_cap_is_applied(tmp_path, monkeypatch):
    from threadpoolctl import threadpool_info
    seen = {}

    def probe(cfg):
        seen["threads"] = [p["num_threads"] for p in threadpool_info()]
        return tmp_path

    monkeypatch.setitem(pipeline.STAGES, "synth-data", probe)
    monkeypatch.setenv("EPICODEC_THREADS", "1")
    assert cli.main(["synth-data", "--config", str(SMOKE), "--out", str(tmp_path)]) == 0
    assert all(n == 1 for n in seen["threads"])
    monkeypatch.setenv("EPICODEC_THREADS", "zero")
    assert cli.main(["synth-data", "--config", str(SMOKE), "--out", str(tmp_path)]) == 2


def test_console_script_entry_point(tmp_path):
    env = {**os.environ, "EPICODEC_THREADS": "1"}
    proc = subprocess.run([sys.executable, "-m", "epicodec.cli", "synth-data", "--config", str(SMOKE),
                           "--out", str(tmp_path)], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "frames" / "manifest.json").exists()
