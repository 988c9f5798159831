import csv
import io
import json
import os
import stat

import numpy as np
import pytest

from boxreg.cli import main
from boxreg.evaluation import MetricsRow
from boxreg.geometry import PointFrame, Track
from boxreg.io import Dataset, ExperimentReport, load_dataset, load_report, load_track, save_dataset
from boxreg.simulate import SensorModel, gen_vehicle_cloud

SMALL = """\
mode: 2d
seed: 3
steps: 5
points_per_frame: 64
"""


@pytest.fixture
def small(tmp_path):
    cfg = tmp_path / "small.yaml"
    cfg.write_text(SMALL)
    data = tmp_path / "small.json"
    assert main(["simulate", "--config", str(cfg), "--out", str(data)]) == 0
    return cfg, data


def _still_dataset(path, n=5):
    """Straight constant-velocity track with noiseless full-surface scans, initial = gt.

    Every loss term is stationary at the ground truth of such a dataset.
    """
    size = (4.7, 1.9, 1.7)
    poses = np.zeros((n, 6))
    poses[:, 0] = 0.5 * np.arange(n)
    poses[:, 2] = 0.85
    track = Track(poses, size)
    frames = []
    for i, box in enumerate(track.boxes()):
        scans = [gen_vehicle_cloud(size, SensorModel(position=tuple(box.center + off), noise_sigma=0.0), box).points
                 for off in (np.array([15.0, 12.0, 10.0]), np.array([-15.0, -12.0, -10.0]))]
        frames.append(PointFrame(i, np.vstack(scans)))
    ds = Dataset({"mode": "3d", "seed": 0}, frames, track, track.copy())
    save_dataset(ds, path)
    return ds


# -- simulate ----------------------------------------------------------------------------------


def test_simulate_shape_and_format(small):
    _, data = small
    doc = json.loads(data.read_text())
    assert set(doc) == {"meta", "frames", "gt_track", "initial_track"}
    assert len(doc["frames"]) == 5
    assert [f["t"] for f in doc["frames"]] == list(range(5))
    assert len(doc["gt_track"]) == len(doc["initial_track"]) == 5
    assert all(len(r) == 9 for r in doc["gt_track"] + doc["initial_track"])
    assert all(len(p) == 3 for f in doc["frames"] for p in f["points"])
    assert doc["meta"]["mode"] == "2d" and doc["meta"]["seed"] == 3


def test_simulate_byte_identical(small, tmp_path):
    cfg, data = small
    again = tmp_path / "again.json"
    assert main(["simulate", "--config", str(cfg), "--out", str(again)]) == 0
    assert again.read_bytes() == data.read_bytes()


def test_simulate_seed_flag_overrides_config(small, tmp_path):
    cfg, data = small
    other = tmp_path / "other.json"
    assert main(["simulate", "--config", str(cfg), "--seed", "4", "--out", str(other)]) == 0
    assert other.read_bytes() != data.read_bytes()
    assert json.loads(other.read_text())["meta"]["seed"] == 4


def test_dataset_round_trip(small, tmp_path):
    _, data = small
    ds = load_dataset(data)
    copy = tmp_path / "copy.json"
    save_dataset(ds, copy)
    assert json.loads(copy.read_text()) == json.loads(data.read_text())


def test_simulate_rejects_short_trajectory(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("steps: 2\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x.json")]) == 2
    err = capsys.readouterr().err
    assert "steps" in err and "T >= 3" in err
    assert not (tmp_path / "x.json").exists()


@pytest.mark.parametrize("text, field", [("stepz: 5\n", "stepz"), ("top_k: 0\n", "top_k"),
                                         ("mode: 4d\n", "mode"), ("speed: fast\n", "speed")])
def test_invalid_config_names_field(tmp_path, capsys, text, field):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x.json")]) == 2
    assert field in capsys.readouterr().err


def test_missing_required_flag(tmp_path, capsys):
    assert main(["register", "--out", str(tmp_path)]) == 2
    assert "--dataset" in capsys.readouterr().err


def test_malformed_dataset_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"frames": [], "gt_track": [[1, 2, 3]]}')
    assert main(["register", "--dataset", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("not json")
    assert main(["gradcheck", "--dataset", str(bad)]) == 2


# -- register ------------------------------------------------------------------------------------


def test_register_initial_equals_gt(tmp_path):
    data = tmp_path / "still.json"
    ds = _still_dataset(data)
    out = tmp_path / "run"
    assert main(["register", "--dataset", str(data), "--out", str(out), "--no-baseline"]) == 0
    assert np.array_equal(load_track(out / "track.json").records(), ds.initial_track.records())
    report = load_report(out / "report.json")
    assert report.iterations <= 1
    assert report.refined.mean_iou_2d == 1.0


def test_register_report_round_trip(small, tmp_path):
    cfg, data = small
    out = tmp_path / "run"
    assert main(["register", "--config", str(cfg), "--dataset", str(data), "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    report = ExperimentReport.from_dict(doc)
    assert report.to_dict() == doc
    assert report.baseline is not None
    assert all(b <= a for a, b in zip(report.loss_curve, report.loss_curve[1:]))
    assert len(load_track(out / "track.json")) == 5


def test_register_is_reproducible(small, tmp_path):
    cfg, data = small
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["register", "--config", str(cfg), "--dataset", str(data), "--out", str(out),
                     "--no-baseline"]) == 0
    assert (a / "track.json").read_bytes() == (b / "track.json").read_bytes()
    ra, rb = load_report(a / "report.json"), load_report(b / "report.json")
    assert ra.loss_curve == rb.loss_curve and ra.refined == rb.refined


def test_register_window_fallback_note(small, tmp_path, capsys):
    cfg, data = small
    out = tmp_path / "run"
    # 5 frames, default window of 10
    assert main(["register", "--config", str(cfg), "--dataset", str(data), "--out", str(out),
                 "--mode", "window", "--no-baseline"]) == 0
    report = load_report(out / "report.json")
    assert any("fell back" in n for n in report.notes)
    assert "fell back" in capsys.readouterr().out


def test_register_newton_mode(small, tmp_path):
    cfg, data = small
    cfg.write_text(SMALL + "max_iterations: 3\n")
    out = tmp_path / "run"
    assert main(["register", "--config", str(cfg), "--dataset", str(data), "--out", str(out),
                 "--mode", "newton", "--no-baseline"]) == 0
    assert load_report(out / "report.json").method == "newton"


# -- evaluate -----------------------------------------------------------------------------------


def _gt_track_file(data, path):
    ds = load_dataset(data)
    path.write_text(json.dumps({"track": ds.gt_track.records().tolist()}))
    return ds


def test_evaluate_gt_gives_zero_errors(small, tmp_path):
    cfg, data = small
    track = tmp_path / "gt_track.json"
    ds = _gt_track_file(data, track)
    out = tmp_path / "eval"
    assert main(["evaluate", "--config", str(cfg), "--dataset", str(data), "--track", str(track),
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO((out / "per_frame.csv").read_text())))
    assert len(rows) == len(ds.frames)
    assert list(rows[0]) == ["frame", "dx", "dy", "dz", "droll", "dpitch", "dyaw", "iou"]
    for r in rows:
        assert all(float(r[k]) == 0.0 for k in ("dx", "dy", "dz", "droll", "dpitch", "dyaw"))
        assert float(r["iou"]) == 1.0
    doc = json.loads((out / "metrics.json").read_text())
    assert MetricsRow.from_dict(doc).to_dict() == doc


def test_evaluate_length_mismatch(small, tmp_path):
    cfg, data = small
    ds = load_dataset(data)
    track = tmp_path / "short.json"
    track.write_text(json.dumps({"track": ds.gt_track.records()[:-1].tolist()}))
    assert main(["evaluate", "--dataset", str(data), "--track", str(track), "--out", str(tmp_path / "e")]) == 2


# -- baseline-icp -------------------------------------------------------------------------------


def test_baseline_icp_flags_tiny_frame(small, tmp_path):
    _, data = small
    ds = load_dataset(data)
    ds.frames[2] = PointFrame(2, ds.frames[2].points[:2])
    tiny = tmp_path / "tiny.json"
    save_dataset(ds, tiny)
    out = tmp_path / "icp"
    assert main(["baseline-icp", "--dataset", str(tiny), "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["skipped_frames"] == [2]
    track = load_track(out / "track.json")
    assert np.array_equal(track.poses[2], ds.initial_track.poses[2])
    assert np.array_equal(track.size, ds.initial_track.size)


# -- gradcheck ----------------------------------------------------------------------------------


def test_gradcheck_passes_on_small_dataset(small, capsys):
    cfg, data = small
    assert main(["gradcheck", "--config", str(cfg), "--dataset", str(data)]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_enclosure_only_interior_points(tmp_path):
    # every point strictly inside every box: the enclosure term is flat
    rng = np.random.default_rng(0)
    poses = np.zeros((4, 6))
    poses[:, 0] = 0.5 * np.arange(4)
    track = Track(poses, (4.0, 2.0, 2.0))
    frames = [PointFrame(i, rng.uniform(-0.5, 0.5, (30, 3)) + poses[i, :3]) for i in range(4)]
    data = tmp_path / "inside.json"
    save_dataset(Dataset({"mode": "3d", "seed": 0}, frames, track, track.copy()), data)
    cfg = tmp_path / "omega.yaml"
    cfg.write_text("closeness_weight: 0\nenclosure_weight: 1\nsmoothness_weight: 0\nalignment_weight: 0\n"
                   "gradcheck_scale: 0.01\n")
    assert main(["gradcheck", "--config", str(cfg), "--dataset", str(data)]) == 0


def test_gradcheck_corrupted_gradient_fails(small, capsys):
    cfg, data = small

    def corrupted(track, frames, loss_cfg):
        from boxreg.losses import total_loss
        g = total_loss(track, frames, loss_cfg)[1].copy()
        g[0] *= 1.5
        g[1] += 0.1
        return g

    assert main(["gradcheck", "--config", str(cfg), "--dataset", str(data)], gradient=corrupted) == 3
    assert "FAIL" in capsys.readouterr().out


# -- files ------------------------------------------------------------------------------------------


def test_outputs_written_atomically_with_normal_permissions(small, tmp_path):
    cfg, data = small
    out = tmp_path / "run"
    assert main(["register", "--config", str(cfg), "--dataset", str(data), "--out", str(out),
                 "--no-baseline"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["report.json", "track.json"]
    mask = os.umask(0)
    os.umask(mask)
    assert stat.S_IMODE(data.stat().st_mode) == 0o666 & ~mask
