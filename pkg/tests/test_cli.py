import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from latentmoe import container
from latentmoe.cli import main


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def gen(path="src.lmoe", *extra):
    args = ["gen", "--kind", "moe", "--n", "16", "--m", "8", "--experts", "4", "--seed", "3", "--out", path]
    return main(args + list(extra))


def manifest(path):
    return json.loads(open(path).read())


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_gen_transform_verify_pipeline(work):
    assert gen() == 0
    assert main(["transform", "--in", "src.lmoe", "--out", "lat.lmoe", "--group-size", "1", "--rank", "full",
                 "--report", "rep.json"]) == 0
    assert main(["verify", "--a", "src.lmoe", "--b", "lat.lmoe", "--max-rel-dev", "1e-6"]) == 0
    rep = json.loads((work / "rep.json").read_text())
    assert rep["forward"]["max_rel_dev"] <= 1e-6
    assert container.load("lat.lmoe").kind == "molae"


def test_manifest_digests_match_files(work):
    assert gen() == 0
    assert main(["transform", "--in", "src.lmoe", "--out", "lat.lmoe", "--group-size", "2", "--report", "r.json"]) == 0
    m = manifest("lat.lmoe.manifest.json")
    assert m["command"] == "transform" and m["exit_code"] == 0 and m["error"] is None
    assert m["inputs"] == {"src.lmoe": sha("src.lmoe")}
    assert m["outputs"] == {"lat.lmoe": sha("lat.lmoe"), "r.json": sha("r.json")}
    assert m["options"]["in"] == "src.lmoe" and m["options"]["group_size"] == 2 and m["seed"] == 0
    assert manifest("src.lmoe.manifest.json")["outputs"] == {"src.lmoe": sha("src.lmoe")}


def test_repeat_runs_byte_identical(work):
    def run():
        assert gen() == 0
        assert main(["transform", "--in", "src.lmoe", "--out", "lat.lmoe", "--group-size", "2", "--rank", "4",
                     "--latent-dim", "6", "--report", "r.json"]) == 0
        return [(work / f).read_bytes() for f in ("src.lmoe", "lat.lmoe", "r.json", "lat.lmoe.manifest.json",
                                                  "src.lmoe.manifest.json")]

    assert run() == run()


def test_count_reference_config_text(work, capsys):
    assert main(["count", "--n", "512", "--m", "256", "--experts", "32", "--group-size", "8"]) == 0
    out = capsys.readouterr().out
    for s in ("12,582,912", "7,864,320", "12,599,296", "7,880,704"):
        assert s in out


def test_count_reference_config_json(work, capsys):
    assert main(["count", "--n", "512", "--m", "256", "--experts", "32", "--group-size", "8", "--json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert (d["moe_params"], d["molae_params"], d["moe_flops"], d["molae_flops"]) == (
        12_582_912, 7_864_320, 12_599_296, 7_880_704)
    assert manifest("count.manifest.json")["summary"]["molae_params"] == 7_864_320


def test_count_layer_census(work, capsys):
    assert main(["gen", "--kind", "molae", "--n", "16", "--m", "4", "--experts", "6", "--group-size", "3",
                 "--out", "l.lmoe"]) == 0
    capsys.readouterr()
    assert main(["count", "--in", "l.lmoe", "--json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["layer_census"] == d["molae_params"] == 3 * (6 * 16 + 2 * 64)


def test_count_missing_dims_is_usage_error(work):
    assert main(["count", "--n", "8"]) == 1


def test_partial_ops_keep_dense_bytes(work):
    assert gen() == 0
    assert main(["transform", "--in", "src.lmoe", "--out", "lat.lmoe", "--group-size", "2", "--ops", "gate,down",
                 "--dtype", "float32"]) == 0
    src = container.load("src.lmoe").parameters()
    out = container.load("lat.lmoe").parameters()
    for i in range(4):
        assert src[f"experts.{i}.up"].tobytes() == out[f"dense.{i}.up"].tobytes()
    assert "groups.0.up" not in out and "groups.0.gate" in out


def test_exit_code_usage(work):
    assert main(["gen", "--kind", "bogus", "--n", "4", "--m", "2", "--experts", "2", "--out", "x"]) == 1
    assert main(["transform", "--in", "a", "--out", "b", "--rank", "2", "--rank-ratio", "0.5"]) == 1
    assert main([]) == 1
    assert gen() == 0
    assert main(["transform", "--in", "src.lmoe", "--out", "b.lmoe", "--group-size", "9"]) == 1


def test_exit_code_io(work, capsys):
    assert main(["verify", "--a", "missing.lmoe", "--b", "missing.lmoe"]) == 2
    assert gen() == 0
    data = (work / "src.lmoe").read_bytes()
    (work / "cut.lmoe").write_bytes(data[:-1])
    assert main(["transform", "--in", "cut.lmoe", "--out", "o.lmoe"]) == 2
    err = capsys.readouterr().err
    assert str(len(data)) in err and str(len(data) - 1) in err
    m = manifest("o.lmoe.manifest.json")
    assert m["exit_code"] == 2 and "bytes" in m["error"] and m["outputs"] == {}
    assert not (work / "o.lmoe").exists()


def test_exit_code_numerical(work):
    # 4 calibration rows give rank-deficient 8 x 8 Grams; a vanishing lambda cannot repair them
    assert main(["gen", "--kind", "moe", "--n", "8", "--m", "4", "--experts", "2", "--out", "z.lmoe"]) == 0
    code = main(["transform", "--in", "z.lmoe", "--out", "o.lmoe", "--group-size", "2", "--mode", "activation-aware",
                 "--lambda", "1e-300", "--calib-samples", "4"])
    assert code == 3
    m = manifest("o.lmoe.manifest.json")
    assert m["exit_code"] == 3 and "lambda=1e-300" in m["error"]
    assert not (work / "o.lmoe").exists()
    # the default lambda handles the same input
    assert main(["transform", "--in", "z.lmoe", "--out", "o.lmoe", "--group-size", "2", "--mode", "activation-aware",
                 "--calib-samples", "4", "--report", "r.json"]) == 0
    assert json.loads((work / "r.json").read_text())["groups"][0]["regularized"]


def test_negative_lambda_is_usage_error(work):
    assert gen() == 0
    assert main(["transform", "--in", "src.lmoe", "--out", "o.lmoe", "--mode", "activation-aware", "--lambda", "-1"]) == 1


def test_exit_code_verification(work):
    assert gen() == 0
    assert main(["transform", "--in", "src.lmoe", "--out", "lat.lmoe", "--group-size", "4", "--rank", "2"]) == 0
    assert main(["verify", "--a", "src.lmoe", "--b", "lat.lmoe", "--max-rel-dev", "1e-9"]) == 4
    m = manifest("lat.lmoe.verify.manifest.json")
    assert m["exit_code"] == 4 and m["summary"]["passed"] is False


def test_rank_ratio_and_activation_aware(work):
    assert gen() == 0
    assert main(["transform", "--in", "src.lmoe", "--out", "a.lmoe", "--group-size", "2", "--rank-ratio", "0.5",
                 "--mode", "activation-aware", "--calib-samples", "64", "--lambda", "1e-4", "--report", "a.json"]) == 0
    rep = json.loads((work / "a.json").read_text())
    assert rep["options"]["mode"] == "activation_aware" and rep["calibration"]["samples"] == 64
    assert sum(rep["calibration"]["per_expert"]) == 64 * 2
    assert np.isfinite(rep["forward"]["max_rel_dev"])


def test_forward_round_trip(work):
    assert gen() == 0
    x = np.random.default_rng(0).standard_normal((5, 16)).astype("<f4")
    (work / "x.bin").write_bytes(x.tobytes())
    assert main(["forward", "--in", "src.lmoe", "--input", "x.bin", "--out", "y.bin"]) == 0
    y = np.frombuffer((work / "y.bin").read_bytes(), dtype="<f4").reshape(5, 16)
    ref = container.load("src.lmoe").forward(x.astype(np.float64)).astype("<f4")
    assert np.array_equal(y, ref)
    (work / "bad.bin").write_bytes(x.tobytes()[:-4])
    assert main(["forward", "--in", "src.lmoe", "--input", "bad.bin", "--out", "z.bin"]) == 2


def test_bench_runs(work, capsys):
    assert gen() == 0
    assert main(["bench", "--in", "src.lmoe", "--probes", "8", "--repeats", "2"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["seconds_per_forward_median"] >= 0 and d["analytic_flops_all_experts"] > 0


def test_module_entry_point(work):
    r = subprocess.run([sys.executable, "-m", "latentmoe", "count", "--n", "8", "--m", "4", "--experts", "4",
                        "--group-size", "2", "--json"], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["moe_params"] == 3 * 4 * 32
    r = subprocess.run([sys.executable, "-m", "latentmoe", "gen"], capture_output=True, text=True)
    assert r.returncode == 1
