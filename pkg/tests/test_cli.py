import json
import struct
import subprocess
import sys

import pytest

from moekit.cli import EXIT_CODES, main


def run(tmp_path, *argv):
    out = tmp_path / f"r{len(list(tmp_path.glob('r*.json')))}.json"
    code = main([*argv, "--out", str(out)])
    assert code == 0
    return json.loads(out.read_text())


@pytest.fixture
def pipeline(tmp_path):
    p = lambda name: str(tmp_path / name)
    gen = run(tmp_path, "gen", "--seed", "2", "--model-out", p("m.smck"), "--batch-out", p("b.f32mat"))
    (tmp_path / "gen.json").write_text(json.dumps(gen))
    cal = run(tmp_path, "calibrate", "--model", p("m.smck"), "--batch", p("b.f32mat"),
              "--cache-activations", "--cache-out", p("acts.npz"))
    (tmp_path / "stats.json").write_text(json.dumps(cal))
    return tmp_path, p


def test_full_pipeline(pipeline):
    tmp_path, p = pipeline
    cl = run(tmp_path, "cluster", "--model", p("m.smck"), "--stats", p("stats.json"), "--budget", "4")
    (tmp_path / "cl.json").write_text(json.dumps(cl))
    assert cl["schema_version"] == 1 and "timing" in cl
    mg = run(tmp_path, "merge", "--model", p("m.smck"), "--stats", p("stats.json"), "--clusters", p("cl.json"),
             "--strategy", "average", "--model-out", p("merged.smck"))
    assert mg["expert_params_after"] * 4 == mg["expert_params_before"]
    ev = run(tmp_path, "eval", "--model", p("m.smck"), "--reduced", p("merged.smck"), "--batch", p("b.f32mat"),
             "--stats", p("stats.json"), "--clusters", p("cl.json"), "--truth", p("gen.json"))
    assert ev["quality"]["jensen_slack"] >= -1e-6
    assert ev["ari"] == [1.0] * 4
    assert all(row["violations"] == 0 for row in ev["jensen"])


def test_fixdom_with_cache_and_params(pipeline):
    tmp_path, p = pipeline
    cl = run(tmp_path, "cluster", "--model", p("m.smck"), "--stats", p("stats.json"), "--non-uniform", "0.5")
    assert sum(cl["budgets"]) == 32
    (tmp_path / "cl.json").write_text(json.dumps(cl))
    run(tmp_path, "merge", "--model", p("m.smck"), "--stats", p("stats.json"), "--clusters", p("cl.json"),
        "--strategy", "fixdom", "--activations", p("acts.npz"), "--model-out", p("fd.smck"))
    pr = run(tmp_path, "params", "--model", p("m.smck"), "--reduced", p("fd.smck"))
    assert pr["expert_ratio"] == 0.5


def test_fixdom_without_cache_fails(pipeline, capsys):
    tmp_path, p = pipeline
    cl = run(tmp_path, "cluster", "--model", p("m.smck"), "--stats", p("stats.json"), "--budget", "4")
    (tmp_path / "cl.json").write_text(json.dumps(cl))
    code = main(["merge", "--model", p("m.smck"), "--stats", p("stats.json"), "--clusters", p("cl.json"),
                 "--strategy", "fixdom"])
    assert code == EXIT_CODES["missing_activation_cache"]
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "missing_activation_cache"


@pytest.mark.parametrize("method", [["f"], ["s"], ["msmoe"], ["o-sampled", "50"]])
def test_prune_methods(pipeline, method):
    tmp_path, p = pipeline
    rep = run(tmp_path, "prune", "--model", p("m.smck"), "--stats", p("stats.json"), "--batch", p("b.f32mat"),
              "--method", *method, "--ratio", "0.5", "--model-out", p("pr.smck"))
    assert rep["expert_params_after"] == 4 * 8 * 3 * 32 * 64


def test_exhaustive_o_prune_blowup(tmp_path, capsys):
    p = lambda name: str(tmp_path / name)
    (tmp_path / "spec.txt").write_text("experts=24\nlayers=1\ntokens=8\n")
    run(tmp_path, "gen", "--config", p("spec.txt"), "--model-out", p("m.smck"), "--batch-out", p("b.f32mat"))
    # C(24, 12) is about 2.7 million subsets, above the exhaustive limit
    code = main(["prune", "--model", p("m.smck"), "--batch", p("b.f32mat"), "--method", "o", "--budget", "12"])
    assert code == EXIT_CODES["combinatorial"]
    assert "sampled" in json.loads(capsys.readouterr().err)["message"]


def test_oracle_small_layer(tmp_path):
    p = lambda name: str(tmp_path / name)
    (tmp_path / "spec.txt").write_text("experts=8\nclusters=2\nlayers=1\n")
    run(tmp_path, "gen", "--config", p("spec.txt"), "--model-out", p("m.smck"), "--batch-out", p("b.f32mat"))
    cal = run(tmp_path, "calibrate", "--model", p("m.smck"), "--batch", p("b.f32mat"))
    (tmp_path / "stats.json").write_text(json.dumps(cal))
    rep = run(tmp_path, "oracle", "--model", p("m.smck"), "--stats", p("stats.json"), "--budget", "2")
    row = rep["layers"][0]
    assert row["count_matches_stirling"] and row["partitions"] == 127 and row["within_3opt"]


def test_checkpoint_error_codes(tmp_path, capsys):
    bad = tmp_path / "bad.smck"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    assert main(["params", "--model", str(bad)]) == EXIT_CODES["bad_magic"]
    bad.write_bytes(b"SMCK" + struct.pack("<HIII", 9, 0, 1, 1))
    assert main(["params", "--model", str(bad)]) == EXIT_CODES["version_mismatch"]
    bad.write_bytes(b"SMCK" + struct.pack("<HIII", 1, 1, 1, 1) + struct.pack("<III", 1, 1, 1) + b"\0" * 4)
    assert main(["params", "--model", str(bad)]) == EXIT_CODES["truncated"]
    assert main(["params", "--model", str(tmp_path / "missing.smck")]) == EXIT_CODES["not_found"]
    lines = capsys.readouterr().err.strip().splitlines()
    assert [json.loads(l)["error"] for l in lines] == ["bad_magic", "version_mismatch", "truncated", "not_found"]


def test_params_preset(tmp_path):
    rep = run(tmp_path, "params", "--preset", "mixtral-8x7b", "--experts", "8", "4")
    assert [r["experts"] for r in rep["rows"]] == [8, 4]
    assert rep["rows"][1]["expert_ratio"] == 0.5


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "moekit", "params", "--preset", "qwen1.5-moe-a2.7b"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["command"] == "params"
