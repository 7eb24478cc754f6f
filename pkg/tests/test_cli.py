import json
import subprocess
import sys

import pytest

from graspfield.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny synth -> train-nerf -> train-grasp pipeline shared by the CLI tests."""
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--set", "single", "--scenes", "2", "--seed", "1", "--out", d / "data",
               "--image-size", "24") == 0
    assert run("train-nerf", "--data", d / "data", "--out", d / "nerf", "--seed", "0",
               "--steps", "4", "--warmup", "2", "--rays", "32", "--samples", "6",
               "--checkpoint-every", "2") == 0
    assert run("train-grasp", "--freeze", "--backbone", d / "nerf", "--data", d / "data",
               "--out", d / "grasp", "--seed", "0", "--epochs", "2", "--negatives", "31") == 0
    return d


def test_synth_layout(tmp_path):
    assert run("synth", "--set", "multi_A", "--scenes", "3", "--seed", "1", "--out", tmp_path,
               "--image-size", "16") == 0
    scenes = sorted(p.name for p in (tmp_path / "scenes").iterdir())
    assert scenes == ["scene_0000", "scene_0001", "scene_0002"]
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 1 and man["command"] == "synth"
    meta = json.loads((tmp_path / "scenes" / "scene_0000" / "meta.json").read_text())
    assert len(meta["scene"]["objects"]) == 5


def test_training_run_layout(workdir):
    nerf = workdir / "nerf"
    assert {p.name for p in nerf.iterdir()} == {"checkpoint", "checkpoint_step000002",
                                                 "config.json", "log.csv", "manifest.json"}
    header = (nerf / "log.csv").read_text().splitlines()[0]
    assert header == "step,loss,lr_omega,lr_phi"


def test_frozen_backbone_checksums(workdir):
    a = json.loads((workdir / "nerf" / "checkpoint" / "manifest.json").read_text())["checksums"]
    b = json.loads((workdir / "grasp" / "checkpoint" / "manifest.json").read_text())["checksums"]
    assert a["omega"] == b["omega"] and a["phi"] == b["phi"] and a["psi"] != b["psi"]


def test_optimize_snapshots(workdir):
    out = workdir / "opt"
    assert run("optimize", "--checkpoint", workdir / "grasp", "--scene",
               workdir / "data" / "scenes" / "scene_0000", "--views", "3", "--candidates", "32",
               "--iters", "16", "--seed", "0", "--out", out) == 0
    res = json.loads((out / "optim_result.json").read_text())
    assert sorted(res["snapshots"], key=int) == ["8", "12", "16"]
    assert all(len(v) == 5 for v in res["snapshots"].values())
    assert res["seed"] == 0 and res["config"]["objective"] == "three_views"
    assert all(c["direction"] == [0.0, 0.0, -1.0] for c in res["snapshots"]["16"])


def test_eval_report_and_rerun(workdir):
    ev = workdir / "ev"
    args = ["eval", "--checkpoint", workdir / "grasp", "--task", "single_object", "--scenes", "1",
            "--candidates", "16", "--iters", "2", "--snapshots", "1", "2", "--seed", "3",
            "--model", "frozen", "--out", ev]
    assert run(*args) == 0
    assert run("report", ev, "--out", workdir / "rep") == 0
    assert (workdir / "rep" / "table1.csv").read_text().startswith("best-success,frozen\nso,")
    assert run("rerun", ev / "manifest.json", "--out", workdir / "ev2") == 0
    assert (ev / "eval_report.csv").read_bytes() == (workdir / "ev2" / "eval_report.csv").read_bytes()


def test_render(workdir):
    out = workdir / "render"
    assert run("render", "--checkpoint", workdir / "nerf", "--scene",
               workdir / "data" / "scenes" / "scene_0001", "--samples", "4", "--seed", "0",
               "--out", out) == 0
    assert (out / "scene_0001_v0_to_v1.png").exists()


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["synth", "--set", "single", "--scenes", "1", "--out", "x"],  # seed is mandatory
    ["synth", "--set", "nope", "--scenes", "1", "--seed", "0", "--out", "x"],
    ["optimize", "--views", "2"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_checkpoint_exit_2(tmp_path):
    assert run("eval", "--checkpoint", tmp_path, "--task", "single_object", "--seed", "0",
               "--out", tmp_path / "o") == 2


def test_future_manifest_exit_2(workdir, tmp_path):
    man = json.loads((workdir / "nerf" / "checkpoint" / "manifest.json").read_text())
    man["format_version"] = 7
    ck = tmp_path / "ck"
    ck.mkdir()
    (ck / "manifest.json").write_text(json.dumps(man))
    (ck / "weights.bin").write_bytes((workdir / "nerf" / "checkpoint" / "weights.bin").read_bytes())
    assert run("render", "--checkpoint", ck, "--scene", workdir / "data" / "scenes" / "scene_0000",
               "--seed", "0", "--out", tmp_path / "r") == 2


def test_freeze_without_backbone_exit_2(workdir, tmp_path):
    assert run("train-grasp", "--data", workdir / "data", "--out", tmp_path, "--seed", "0",
               "--epochs", "1") == 2


def test_inputs_not_mutated(workdir, tmp_path):
    before = {p: p.read_bytes() for p in (workdir / "nerf" / "checkpoint").iterdir()}
    run("train-grasp", "--freeze", "--backbone", workdir / "nerf", "--data", workdir / "data",
        "--out", tmp_path / "g", "--seed", "1", "--epochs", "1", "--negatives", "7")
    assert before == {p: p.read_bytes() for p in (workdir / "nerf" / "checkpoint").iterdir()}


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "graspfield.cli", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "train-grasp" in proc.stdout


def test_thread_cap_env(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("GRASPFIELD_THREADS", "1")
    assert run("synth", "--set", "single", "--scenes", "1", "--seed", "1", "--out", tmp_path,
               "--image-size", "16") == 0
