import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from capture_kernels import matrix_io
from capture_kernels.cli import main
from capture_kernels.finite_width import flop_count
from capture_kernels.tasks import build_grammar, save_grammar

SCRIPTED = {"version": 1, "task": {"kind": "induction", "params": {"vocab_size": 16}},
            "delta": 0.2, "T0": 8, "T_grid": [8, 16, 32, 64, 128, 256, 512, 1024], "seed": 3,
            "n_eval": 4, "learner": {"type": "scripted", "C": 5, "P0": 8}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


# -- gen ----------------------------------------------------------------------------------

def test_gen_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "gen", "--task", "spp", "--t", 16, "--count", 100, "--seed", 1,
                         "--out", tmp_path / f"{name}.jsonl")
        assert code == 0
    for suffix in (".jsonl", ".jsonl.kmat"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
    manifest = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert manifest["master_seed"] == 1 and len(manifest["config_hash"]) == 64


def test_gen_verify_names_corrupted_line(tmp_path, capsys):
    out = tmp_path / "d.jsonl"
    assert run(capsys, "gen", "--task", "sort", "--t", 5, "--count", 4, "--seed", 2,
               "--out", out)[0] == 0
    lines = out.read_text().splitlines()
    rec = json.loads(lines[2])
    rec["label"] = list(reversed(rec["label"])) if rec["label"] != sorted(rec["label"]) \
        else [rec["label"][-1]] * len(rec["label"])
    lines[2] = json.dumps(rec, sort_keys=True)
    out.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "gen", "--verify", "--out", out)
    assert code == 3
    report = json.loads(err)
    assert report["error"] == "VerificationFailed"
    assert [f["line"] for f in report["failures"]] == [3]


def test_gen_cfg_without_unit_start_rule_exits_3(tmp_path, capsys):
    g = build_grammar(0)
    d = g.to_dict()
    keep = [i for i, r in enumerate(d["terminal"]) if r[0] != g.start]
    d["terminal"] = [d["terminal"][i] for i in keep]
    d["terminal_w"] = [d["terminal_w"][i] for i in keep]
    (tmp_path / "g.json").write_text(json.dumps(d))
    code, _, err = run(capsys, "gen", "--task", "cfg", "--t", 1, "--grammar", tmp_path / "g.json",
                       "--out", tmp_path / "c.jsonl")
    assert code == 3
    assert json.loads(err)["error"] == "UnsatisfiableLength"


def test_gen_cfg_with_saved_grammar(tmp_path, capsys):
    save_grammar(build_grammar(1), tmp_path / "g.json")
    code, _, _ = run(capsys, "gen", "--task", "cfg", "--t", 8, "--count", 5, "--verify",
                     "--grammar", tmp_path / "g.json", "--out", tmp_path / "c.jsonl")
    assert code == 0


def test_gen_requires_task_or_verify(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--out", tmp_path / "x.jsonl")
    assert code == 2 and "ConfigError" in err


# -- kernel --------------------------------------------------------------------------------

@pytest.fixture
def xfile(tmp_path):
    path = tmp_path / "x.npy"
    np.save(path, np.random.default_rng(0).standard_normal((4, 3)))
    return path


def test_kernel_identical_inputs_symmetric_psd(tmp_path, xfile, capsys):
    code, out, _ = run(capsys, "kernel", xfile, xfile, "--n-mc", 512, "--out", tmp_path / "k.kmat")
    assert code == 0
    rep = last_json(out)
    assert rep["symmetric"] is True and rep["min_eigenvalue"] > -1e-10
    mat, se = matrix_io.read_matrix(tmp_path / "k.kmat")
    np.testing.assert_array_equal(mat, mat.T)
    assert rep["readout"] == mat[-1, -1]


def test_kernel_single_draw_has_infinite_stderr(tmp_path, xfile, capsys):
    code, out, _ = run(capsys, "kernel", xfile, "--mode", "ntk", "--n-mc", 1,
                       "--out", tmp_path / "k.kmat")
    assert code == 0
    assert last_json(out)["stderr"] == "inf"


def test_kernel_flops_report(tmp_path, xfile, capsys):
    code, out, _ = run(capsys, "kernel", xfile, "--n-mc", 64, "--flops", "--depth", 2,
                       "--d-model", 64, "--heads", 4, "--out", tmp_path / "k.kmat")
    assert code == 0
    assert last_json(out)["flops"] == flop_count(2, 4, 64, 16, 4)


def test_kernel_validate_finite(tmp_path, xfile, capsys):
    code, out, _ = run(capsys, "kernel", xfile, "--validate-finite", "--d-model", 1024,
                       "--draws", 2000, "--out", tmp_path / "k.kmat")
    assert code == 0
    fw = last_json(out)["finite_width"]
    assert fw["d_model"] == 1024 and fw["draws"] == 2000
    assert 0 < fw["max_abs_gap"] < 0.05


def test_kernel_workers_and_backend_do_not_change_output(tmp_path, xfile, capsys):
    base = ["kernel", xfile, "--n-mc", 256, "--out", tmp_path / "k.kmat"]
    reps = []
    for argv in (base, base + ["--workers", 3], ["--backend", "numpy"] + base):
        assert run(capsys, *argv)[0] == 0
        reps.append(matrix_io.read_matrix(tmp_path / "k.kmat")[0])
    np.testing.assert_array_equal(reps[0], reps[1])
    np.testing.assert_allclose(reps[0], reps[2], rtol=1e-10, atol=1e-12)


def test_kernel_shape_error_exits_nonzero(tmp_path, capsys):
    np.save(tmp_path / "a.npy", np.zeros((3, 2)))
    np.save(tmp_path / "b.npy", np.zeros((3, 5)))
    code, _, err = run(capsys, "kernel", tmp_path / "a.npy", tmp_path / "b.npy",
                       "--out", tmp_path / "k.kmat")
    assert code == 4 and "ShapeMismatch" in err


def test_kernel_reads_gen_container(tmp_path, capsys):
    run(capsys, "gen", "--task", "induction", "--t", 6, "--count", 2, "--d", 8,
        "--out", tmp_path / "d.jsonl")
    code, out, _ = run(capsys, "kernel", tmp_path / "d.jsonl.kmat", "--index2", 1, "--n-mc", 64,
                       "--out", tmp_path / "k.kmat")
    assert code == 0 and last_json(out)["shape"] == [6, 6]


# -- capture --------------------------------------------------------------------------------

def write_cfg(tmp_path, cfg):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_capture_scripted_recovers_constant(tmp_path, capsys):
    code, out, _ = run(capsys, "capture", write_cfg(tmp_path, SCRIPTED), "--out", tmp_path / "o")
    assert code == 0
    rep = last_json(out)
    assert rep["verdict"] == "capture"
    assert abs(rep["C"] - 5) <= 0.5
    for name in ("curve.csv", "fit.json", "manifest.json"):
        assert (tmp_path / "o" / name).exists()


def test_capture_resume_after_stop(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SCRIPTED)
    run(capsys, "capture", cfg, "--out", tmp_path / "full")
    code, out, _ = run(capsys, "capture", cfg, "--out", tmp_path / "part", "--stop-after", 3)
    assert code == 0 and last_json(out)["stopped"] is True
    run(capsys, "capture", cfg, "--out", tmp_path / "part")
    for name in ("curve.csv", "fit.json"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_capture_missing_field_exits_2(tmp_path, capsys):
    bad = {k: v for k, v in SCRIPTED.items() if k != "task"}
    code, _, err = run(capsys, "capture", write_cfg(tmp_path, bad), "--out", tmp_path / "o")
    assert code == 2
    assert "config invalid at <root>: 'task' is a required property" in json.loads(err)["message"]


def test_capture_manifest_hash_matches_file_bytes(tmp_path, capsys):
    import hashlib
    cfg = write_cfg(tmp_path, SCRIPTED)
    run(capsys, "capture", cfg, "--out", tmp_path / "o")
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config_hash"] == hashlib.sha256(cfg.read_bytes()).hexdigest()


# -- selftest / entry point --------------------------------------------------------------------

def test_selftest_single_suite(capsys):
    code, out, _ = run(capsys, "selftest", "--suite", "trace_identity")
    assert code == 0 and out.strip().endswith("1/1 suites passed")


def test_selftest_mutation_exits_4(capsys):
    code, out, _ = run(capsys, "selftest", "--suite", "arc_cosine", "--mutate")
    assert code == 4 and out.startswith("FAIL arc_cosine")


def test_module_entry_point_version():
    res = subprocess.run([sys.executable, "-m", "capture_kernels.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
