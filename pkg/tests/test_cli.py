import csv
import json

import numpy as np
import pytest

from draec.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from draec.runner import ExperimentSpec, load_trace
from draec.scene import load_scene
from draec.wavio import read_wav, write_wav

SHORT = ["--set", "scene.duration_s=2", "--set", "scene.snr_db=30"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert run(*SHORT, "simulate", "--out", d) == EXIT_OK
    return d


def test_simulate_one_cell(scene_dir):
    manifest = json.loads((scene_dir / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 1
    assert [p.name for p in scene_dir.iterdir() if p.is_dir()] == ["scene_0000"]
    assert manifest["scenes"][0]["change_point"] is None


def test_simulate_deterministic(tmp_path, scene_dir):
    assert run(*SHORT, "simulate", "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "manifest.json").read_text() == (scene_dir / "manifest.json").read_text()
    a, _ = read_wav(tmp_path / "scene_0000" / "mixture.wav")
    b, _ = read_wav(scene_dir / "scene_0000" / "mixture.wav")
    assert np.array_equal(a, b)


def test_simulate_path_change(tmp_path):
    assert run("--set", "scene.duration_s=1", "simulate", "--path-change", "--echo-only",
               "--trials", 2, "--out", tmp_path) == EXIT_OK
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert [e["change_point"] for e in manifest["scenes"]] == [16000, 16000]
    assert load_scene(tmp_path / "scene_0001").meta["change_point"] == 16000


def test_process_silence(tmp_path):
    write_wav(tmp_path / "m.wav", np.zeros((2, 8000)))
    write_wav(tmp_path / "p.wav", np.zeros(8000))
    assert run("process", "--mic", tmp_path / "m.wav", "--playback", tmp_path / "p.wav",
               "--out", tmp_path / "o") == EXIT_OK
    y, _ = read_wav(tmp_path / "o" / "kalman-joint" / "enhanced.wav")
    assert y.shape == (2, 8000) and not np.any(y)


def test_process_six_variants_evaluate(tmp_path, scene_dir):
    sc = scene_dir / "scene_0000"
    assert run(*SHORT, "process", "--scene", sc, "--variant", "all", "--trace", "full",
               "--out", tmp_path / "p") == EXIT_OK
    outs = sorted(p for p in (tmp_path / "p").iterdir())
    assert len(outs) == 6
    wavs = [read_wav(p / "enhanced.wav")[0] for p in outs]
    for i in range(6):
        for j in range(i + 1, 6):
            assert not np.array_equal(wavs[i], wavs[j])
    assert (tmp_path / "p" / "kalman-aec_then_dr" / "intermediate.wav").exists()
    assert not (tmp_path / "p" / "kalman-joint" / "intermediate.wav").exists()
    stages = load_trace(tmp_path / "p" / "rls-dr_then_aec" / "trace.npz")
    assert [s.kind for s in stages] == ["dr", "aec"] and stages[0].trace_stride == 1

    # determinism of the written outputs
    assert run(*SHORT, "process", "--scene", sc, "--variant", "kalman-joint",
               "--out", tmp_path / "q") == EXIT_OK
    assert ((tmp_path / "q" / "kalman-joint" / "enhanced.wav").read_bytes()
            == (outs[0].parent / "kalman-joint" / "enhanced.wav").read_bytes())

    assert run(*SHORT, "evaluate", "--scene", sc, "--processed", tmp_path / "p",
               "--out", tmp_path / "e") == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "e" / "metrics.csv").open()))
    assert len(rows) == 6
    assert all(r["sier_improvement_db"] != "" for r in rows)
    assert len(list((tmp_path / "e").glob("*.json"))) == 6


def test_evaluate_unprocessed_and_target(tmp_path, scene_dir):
    sc = scene_dir / "scene_0000"
    assert run("evaluate", "--scene", sc, "--unprocessed", "--out", tmp_path) == EXIT_OK
    rep = json.loads(next(tmp_path.glob("*unprocessed.json")).read_text())
    assert rep["erle_steady_db"] == 0.0 and rep["sier_improvement_db"] == 0.0
    assert run("evaluate", "--scene", sc, "--estimate", sc / "target_image.wav",
               "--out", tmp_path) == EXIT_OK
    rep = json.loads(next(tmp_path.glob("*target_image.json")).read_text())
    assert rep["sdr_out_db"] == 60.0
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert len(rows) == 2


def test_experiment_table(tmp_path, monkeypatch):
    monkeypatch.setenv("DRAEC_WORKERS", "2")
    assert run("--set", "scene.duration_s=1.5", "experiment", "--rt60", "0.3", "--ser", "-10",
               "--trials", 3, "--tracking", "--out", tmp_path) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "table.csv").open()))
    assert len(rows) == 6
    assert {r["trials"] for r in rows} == {"3"}
    assert {r["sier_ordering_ok"] for r in rows} <= {"True", "False"}
    assert not (tmp_path / "PARTIAL").exists()
    curve = list(csv.DictReader((tmp_path / "erle_curve.csv").open()))
    kj = [r for r in curve if r["variant"] == "kalman-joint"]
    change = float(kj[0]["change_point_s"])
    before = [float(r["erle_db"]) for r in kj if change - 0.6 <= float(r["time_s"]) <= change - 0.5]
    after = [float(r["erle_db"]) for r in kj if change <= float(r["time_s"]) <= change + 0.5]
    assert min(after) < max(before) - 10
    with (tmp_path / "runs.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 18


def test_experiment_worker_count_does_not_change_results(tmp_path, monkeypatch):
    args = ["--set", "scene.duration_s=1", "experiment", "--variants", "kalman-joint,rls-joint",
            "--trials", 2]
    monkeypatch.setenv("DRAEC_WORKERS", "1")
    assert run(*args, "--out", tmp_path / "a") == EXIT_OK
    monkeypatch.setenv("DRAEC_WORKERS", "2")
    assert run(*args, "--out", tmp_path / "b") == EXIT_OK
    assert (tmp_path / "a" / "table.csv").read_text() == (tmp_path / "b" / "table.csv").read_text()


def test_failed_experiment_leaves_partial_marker(tmp_path):
    # 10 ms is shorter than one STFT frame, so analysis fails mid-sweep
    code = run("--set", "scene.duration_s=0.01", "experiment", "--variants", "kalman-joint",
               "--out", tmp_path)
    assert code == EXIT_RUNTIME
    assert (tmp_path / "PARTIAL").exists()


def test_experiment_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec(rt60=())
    with pytest.raises(ValueError):
        ExperimentSpec(trials=0)


@pytest.mark.parametrize("argv,code", [
    (["bogus"], EXIT_USAGE),
    ([], EXIT_USAGE),
    (["--set", "filter.alpha=1.5", "simulate", "--out", "x"], EXIT_USAGE),
    (["--set", "filter.nope=1", "simulate", "--out", "x"], EXIT_USAGE),
    (["--set", "noequals", "simulate", "--out", "x"], EXIT_USAGE),
    (["process", "--out", "x"], EXIT_USAGE),
    (["simulate", "--trials", "abc", "--out", "x"], EXIT_USAGE),
    (["process", "--scene", "/nonexistent", "--out", "x"], EXIT_RUNTIME),
])
def test_errors_exit_nonzero_with_one_line(capsys, tmp_path, monkeypatch, argv, code):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("draec: error: ")


def test_process_config_mismatch(tmp_path, scene_dir, capsys):
    code = run("--set", "filter.n_mics=3", "process", "--scene", scene_dir / "scene_0000",
               "--out", tmp_path)
    assert code == EXIT_RUNTIME
    assert "n_mics" in capsys.readouterr().err
