import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from pedyield.cli import main
from pedyield.data_io import write_tracks
from pedyield.scene import PedestrianTrack, TrackSet, VehicleTrack


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synthesize", "--out", str(d / "tracks.csv"), "--n", "40", "--seed", "3"]) == 0
    assert main(["train", str(d / "tracks.csv"), "--out", str(d / "model.json"),
                 "--restarts", "1"]) == 0
    return d


def read_pred(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows


def test_train_outputs(workdir):
    report = json.loads((workdir / "model.report.json").read_text())
    assert np.all(np.diff(report["loss_trace"]) <= 1e-9)
    model = json.loads((workdir / "model.json").read_text())
    assert model["format_version"] == 1
    assert model["provenance"]["dataset"] == "tracks.csv"


def test_train_deterministic(workdir, tmp_path):
    before = sha(workdir / "tracks.csv")
    assert main(["train", str(workdir / "tracks.csv"), "--out", str(tmp_path / "m.json"),
                 "--restarts", "1"]) == 0
    assert sha(tmp_path / "m.json") == sha(workdir / "model.json")
    assert sha(workdir / "tracks.csv") == before


def test_train_empty(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("track_id,class,frame,x_m,y_m,vx_mps,vy_mps\n")
    assert main(["train", str(tmp_path / "e.csv"), "--out", str(tmp_path / "m.json")]) == 2
    assert "training-infeasible" in capsys.readouterr().err


def straight_scene(path):
    ped = PedestrianTrack("w", 0, np.column_stack([0.1 * np.arange(30) * 1.2, np.zeros(30)]))
    write_tracks(TrackSet([ped], []), path)


def test_predict_straight(workdir, tmp_path):
    straight_scene(tmp_path / "s.csv")
    out = tmp_path / "p.csv"
    assert main(["predict", "--model", str(workdir / "model.json"), "--scene",
                 str(tmp_path / "s.csv"), "--pedestrian", "w", "--out", str(out)]) == 0
    rows = read_pred(out)
    mean = np.array([[float(r["x_m"]), float(r["y_m"])] for r in rows if r["sample"] == "mean"])
    assert len(mean) == 50
    assert np.abs(mean[:, 1]).max() < 0.1
    assert np.abs(np.diff(mean[:, 0]) - 0.12).max() < 0.02


def test_predict_single_sample(workdir, tmp_path):
    straight_scene(tmp_path / "s.csv")
    out = tmp_path / "p.csv"
    assert main(["predict", "--model", str(workdir / "model.json"), "--scene",
                 str(tmp_path / "s.csv"), "--pedestrian", "w", "--samples", "1",
                 "--out", str(out)]) == 0
    rows = [r for r in read_pred(out) if r["sample"] != "mean"]
    assert {r["sample"] for r in rows} == {"0"}
    assert {float(r["weight"]) for r in rows} == {1.0}


def test_predict_av_coverage(workdir, tmp_path, capsys):
    straight_scene(tmp_path / "s.csv")
    av = VehicleTrack("ego", 30, np.column_stack([-20 + np.arange(40) * 0.8, np.full(40, -2.0)]),
                      np.tile([8.0, 0.0], (40, 1)))
    write_tracks(TrackSet([], [av]), tmp_path / "av.csv")
    code = main(["predict", "--model", str(workdir / "model.json"), "--scene",
                 str(tmp_path / "s.csv"), "--pedestrian", "w", "--av-trajectory",
                 str(tmp_path / "av.csv"), "--out", str(tmp_path / "p.csv")])
    assert code == 2
    assert "covers 4 s" in capsys.readouterr().err


def test_predict_av_full(workdir, tmp_path):
    straight_scene(tmp_path / "s.csv")
    av = VehicleTrack("ego", 29, np.column_stack([-20 + np.arange(60) * 0.8, np.full(60, -2.0)]),
                      np.tile([8.0, 0.0], (60, 1)))
    write_tracks(TrackSet([], [av]), tmp_path / "av.csv")
    assert main(["predict", "--model", str(workdir / "model.json"), "--scene",
                 str(tmp_path / "s.csv"), "--pedestrian", "w", "--av-trajectory",
                 str(tmp_path / "av.csv"), "--out", str(tmp_path / "p.csv")]) == 0


def test_evaluate_cv_without_model(workdir, tmp_path):
    assert main(["evaluate", str(workdir / "tracks.csv"), "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "metrics_cv.csv").read_text().splitlines()
    assert lines[0] == "t_seconds,ade_m,rmse_m,n"
    assert len(lines) == 6


def test_evaluate_osp_and_av(workdir, tmp_path):
    assert main(["evaluate", str(workdir / "tracks.csv"), "--model", str(workdir / "model.json"),
                 "--predictors", "osp,osp-av", "--samples", "20",
                 "--out-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "metrics.json").read_text())
    assert set(summary) == {"osp", "osp-av"}


def test_evaluate_needs_model(workdir, tmp_path):
    assert main(["evaluate", str(workdir / "tracks.csv"), "--predictors", "osp",
                 "--out-dir", str(tmp_path)]) == 1


def test_bench(workdir, tmp_path):
    out = tmp_path / "b.json"
    assert main(["bench", "--model", str(workdir / "model.json"), "--reps", "100",
                 "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert {"mean_s", "p95_s"} <= set(rep)


def test_usage_and_data_errors(tmp_path):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["train", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "m.json")]) == 2
    (tmp_path / "bad.json").write_text("{")
    straight_scene(tmp_path / "s.csv")
    assert main(["predict", "--model", str(tmp_path / "bad.json"), "--scene",
                 str(tmp_path / "s.csv"), "--pedestrian", "w", "--out",
                 str(tmp_path / "p.csv")]) == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "pedyield.cli", "synthesize", "--out",
                          str(tmp_path / "t.csv"), "--n", "2"], capture_output=True, text=True)
    assert res.returncode == 0
    assert (tmp_path / "t.csv").exists()
