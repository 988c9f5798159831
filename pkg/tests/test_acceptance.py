"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line
in the terminal summary (see conftest.py).

The end-to-end criteria run the command line on the committed datasets in
``data/`` with the committed configs in ``configs/``, exactly as a user would.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from boxreg.cli import main
from boxreg.config import load_config
from boxreg.evaluation import iou_2d_bev, iou_3d, iou_3d_monte_carlo
from boxreg.geometry import BoxState, PointFrame, box_to_world
from boxreg.io import load_dataset, load_report
from boxreg.losses import enclosure
from boxreg.optim import OptimizerSettings, lbfgs_minimize
from boxreg.pipeline import make_dataset
from boxreg.simulate import (
    NoiseScales,
    SensorModel,
    TrajectoryConfig,
    fps,
    fps_indices,
    gen_trajectory,
    gen_vehicle_cloud,
    occlude,
    perturb_track,
    trajectory_angles,
)

ROOT = Path(__file__).resolve().parent.parent
DATA = {m: ROOT / "data" / f"{m}.json" for m in ("2d", "3d")}
CONFIG = {m: ROOT / "configs" / f"{m}.yaml" for m in ("2d", "3d")}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """cmd_register (with the ICP baseline) on both committed datasets, timed."""
    out = {}
    for mode in ("2d", "3d"):
        target = tmp_path_factory.mktemp(f"register_{mode}")
        start = time.perf_counter()
        code = main(["register", "--config", str(CONFIG[mode]), "--dataset", str(DATA[mode]),
                     "--out", str(target)])
        elapsed = time.perf_counter() - start
        assert code == 0
        out[mode] = (load_report(target / "report.json"), elapsed)
    return out


def test_committed_configs_regenerate_committed_datasets(tmp_path):
    for mode in ("2d", "3d"):
        regenerated = tmp_path / f"{mode}.json"
        assert main(["simulate", "--config", str(CONFIG[mode]), "--out", str(regenerated)]) == 0
        assert regenerated.read_bytes() == DATA[mode].read_bytes()


def test_criterion_1_gradient_suite(criterion, capsys):
    with criterion(1, "analytic vs finite-difference gradients on committed datasets") as v:
        start = time.perf_counter()
        codes = {m: main(["gradcheck", "--config", str(CONFIG[m]), "--dataset", str(DATA[m])]) for m in DATA}
        elapsed = time.perf_counter() - start
        lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("max relative error")]
        v.note(" | ".join(f"{m}: {ln.split(' over')[0]}" for m, ln in zip(DATA, lines)))
        v.note(f"{elapsed:.1f}s")
        assert codes == {"2d": 0, "3d": 0}
        assert elapsed < 30.0


def test_criterion_2_enclosure_plateau(criterion):
    with criterion(2, "enclosure constant and flat for interior points") as v:
        rng = np.random.default_rng(2024)
        worst_value = worst_grad = 0.0
        for _ in range(100):
            size = rng.uniform(0.5, 5.0, 3)
            box = BoxState(*rng.uniform(-10, 10, 3), *size, *rng.uniform(-math.pi, math.pi, 3))
            q = rng.uniform(-0.999, 0.999, (int(rng.integers(1, 200)), 3)) * box.half_size
            value, grad = enclosure(PointFrame(0, box_to_world(q, box)), box, 0.0)
            worst_value = max(worst_value, abs(value - (box.l + box.w + box.h) / 6))
            worst_grad = max(worst_grad, float(np.linalg.norm(grad[:3])))
        v.note(f"max value deviation {worst_value:.1e}, max center-gradient norm {worst_grad:.1e}")
        assert worst_value < 1e-9 and worst_grad < 1e-9


def _ratios(report, names):
    return {k: report.refined.mean_abs_error[k] / report.initial.mean_abs_error[k] for k in names}


def test_criterion_3_bev_experiment(criterion, runs):
    with criterion(3, "2D experiment: IoU gain and error reduction") as v:
        report, elapsed = runs["2d"]
        gain = report.refined.mean_iou_2d - report.initial.mean_iou_2d
        ratios = _ratios(report, ("x", "y", "yaw"))
        v.note(f"IoU {report.initial.mean_iou_2d:.3f} -> {report.refined.mean_iou_2d:.3f}")
        v.note("ratios " + ", ".join(f"{k} {r:.2f}" for k, r in ratios.items()))
        v.note(f"{elapsed:.1f}s")
        assert len(report.refined.frames) == 48
        assert gain >= 0.20
        assert all(r <= 0.5 for r in ratios.values())
        assert elapsed < 60.0


def test_criterion_4_3d_experiment(criterion, runs):
    with criterion(4, "3D experiment: IoU gain and error reduction") as v:
        report, elapsed = runs["3d"]
        gain = report.refined.mean_iou_3d - report.initial.mean_iou_3d
        ratios = _ratios(report, ("x", "y", "z", "roll", "pitch", "yaw"))
        v.note(f"IoU3D {report.initial.mean_iou_3d:.3f} -> {report.refined.mean_iou_3d:.3f}")
        v.note("ratios " + ", ".join(f"{k} {r:.2f}" for k, r in ratios.items()))
        v.note(f"{elapsed:.1f}s")
        assert report.config["points_per_frame"] == 512
        assert gain >= 0.15
        assert all(ratios[k] <= 0.5 for k in ("x", "y", "z", "yaw"))
        assert all(ratios[k] <= 0.7 for k in ("roll", "pitch"))
        assert elapsed < 300.0


def test_criterion_5_baseline_dominance(criterion, runs):
    with criterion(5, "proposed method beats the ICP baseline on the occluded 3D dataset") as v:
        report, _ = runs["3d"]
        assert load_config(CONFIG["3d"]).simulation.occlusion_fraction > 0
        v.note(f"IoU3D proposed {report.refined.mean_iou_3d:.3f} vs icp {report.baseline.mean_iou_3d:.3f}")
        assert report.refined.mean_iou_3d > report.baseline.mean_iou_3d


def _aa_iou(a, b):
    ix = max(0.0, min(a.x + a.l / 2, b.x + b.l / 2) - max(a.x - a.l / 2, b.x - b.l / 2))
    iy = max(0.0, min(a.y + a.w / 2, b.y + b.w / 2) - max(a.y - a.w / 2, b.y - b.w / 2))
    inter = ix * iy
    return inter / (a.l * a.w + b.l * b.w - inter)


def test_criterion_6_iou_oracles(criterion):
    with criterion(6, "IoU oracles") as v:
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(1000):
            a = BoxState(*rng.uniform(-2, 2, 2), 0, *rng.uniform(0.2, 3, 2), 1)
            b = BoxState(*rng.uniform(-2, 2, 2), 0, *rng.uniform(0.2, 3, 2), 1)
            worst = max(worst, abs(iou_2d_bev(a, b) - _aa_iou(a, b)))
        octagon = 2 * (math.sqrt(2) - 1) / (2 - 2 * (math.sqrt(2) - 1))
        sq = BoxState(0, 0, 0, 1, 1, 1)
        rot = abs(iou_2d_bev(sq, BoxState(0, 0, 0, 1, 1, 1, yaw=math.pi / 4)) - octagon)
        mc = 0.0
        for trial in range(10):
            a = BoxState(*rng.uniform(-0.5, 0.5, 3), *rng.uniform(1, 3, 3), 0, 0, rng.uniform(-3, 3))
            b = BoxState(*rng.uniform(-0.5, 0.5, 3), *rng.uniform(1, 3, 3), 0, 0, rng.uniform(-3, 3))
            mc = max(mc, abs(iou_3d(a, b) - iou_3d_monte_carlo(a, b, 200_000, seed=trial)))
        v.note(f"axis-aligned {worst:.1e}, 45 deg {rot:.1e}, monte carlo {mc:.4f}")
        assert worst <= 1e-12 and rot <= 1e-9 and mc <= 0.005


def _brute_fps(points, n, start):
    chosen = [start]
    while len(chosen) < min(n, len(points)):
        best, best_d = None, -1.0
        for j, p in enumerate(points):
            if j in chosen:
                continue
            d = min(float(np.sum((p - points[c]) ** 2)) for c in chosen)
            if d > best_d:
                best, best_d = j, d
        chosen.append(best)
    return chosen


def test_criterion_7_trajectory_fps_determinism(criterion, tmp_path):
    with criterion(7, "trajectory angles, FPS reference, determinism") as v:
        T = 50
        roll, pitch, yaw = trajectory_angles(T)
        r = p = y = 0.0
        for t in range(1, T + 1):
            c, s = math.cos(2 * math.pi * t / T), math.sin(2 * math.pi * t / T)
            r += np.sign(c) * math.pi / (6 * T)
            p += np.sign(c) * math.pi / (3 * T)
            y += np.sign(s) * 2 * math.pi / T
            assert (roll[t], pitch[t], yaw[t]) == (r, p, y)
        v.note("angles exact")

        for seed in range(100):
            rng = np.random.default_rng(seed)
            m = int(rng.integers(5, 60))
            pts = rng.integers(0, 4, (m, 3)).astype(float) if seed % 2 else rng.normal(size=(m, 3))
            n, start = int(rng.integers(1, m)), int(rng.integers(m))
            assert list(fps_indices(pts, n, start)) == _brute_fps(pts, n, start)
        v.note("fps = brute force on 100 instances")

        cfg = load_config(CONFIG["3d"])
        assert gen_trajectory(cfg.simulation.trajectory).poses.tobytes() == \
            gen_trajectory(cfg.simulation.trajectory).poses.tobytes()
        box = BoxState(0, 0, 0.85, 4.7, 1.9, 1.7, 0.1, 0.05, 0.3)
        clouds = [gen_vehicle_cloud(box.size, SensorModel(), box, seed=9).points for _ in range(2)]
        assert clouds[0].tobytes() == clouds[1].tobytes()
        frame = PointFrame(0, clouds[0])
        assert occlude(frame, 0.3, 4).points.tobytes() == occlude(frame, 0.3, 4).points.tobytes()
        assert fps(frame, 64, seed=2).points.tobytes() == fps(frame, 64, seed=2).points.tobytes()
        gt = gen_trajectory(TrajectoryConfig(steps=10))
        assert perturb_track(gt, NoiseScales(), 1).poses.tobytes() == perturb_track(gt, NoiseScales(), 1).poses.tobytes()
        for mode in ("2d", "3d"):
            ds = make_dataset(load_config(CONFIG[mode]))
            stored = load_dataset(DATA[mode])
            assert json.dumps(ds.to_dict()) == json.dumps(stored.to_dict())
        runs = []
        small = tmp_path / "small.json"
        assert main(["simulate", "--seed", "1", "--out", str(small)]) == 0
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert main(["register", "--dataset", str(small), "--out", str(out), "--no-baseline"]) == 0
            runs.append((out / "track.json").read_bytes())
        assert runs[0] == runs[1]
        v.note("seeded outputs byte-identical")


def test_criterion_8_optimizer_sanity(criterion, runs):
    with criterion(8, "L-BFGS oracles and monotone loss curves") as v:
        a = np.array([1.0, -2.0, 3.5])
        x, trace = lbfgs_minimize(lambda x: (float((x - a) @ (x - a)), 2 * (x - a)), np.zeros(3))
        assert np.max(np.abs(x - a)) <= 1e-8 and trace.iterations <= 10
        v.note(f"bowl {trace.iterations} it")

        def rosenbrock(z):
            p, q = z
            return (1 - p) ** 2 + 100 * (q - p * p) ** 2, np.array(
                [-2 * (1 - p) - 400 * p * (q - p * p), 200 * (q - p * p)])

        x, trace = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]))
        assert np.max(np.abs(x - 1.0)) <= 1e-5
        v.note(f"rosenbrock {trace.iterations} it")

        rng = np.random.default_rng(8)
        settings = OptimizerSettings(gradient_tolerance=1e-8, loss_change_tolerance=1e-300, max_iterations=1000)
        for d in (2, 5, 10, 20):
            Q = rng.normal(size=(d, d))
            A = Q @ Q.T + 0.5 * np.eye(d)
            xs = rng.normal(size=d)
            x, trace = lbfgs_minimize(lambda x: (0.5 * (x - xs) @ A @ (x - xs), A @ (x - xs)), np.zeros(d), settings)
            assert np.max(np.abs(A @ (x - xs))) < 1e-8 and trace.iterations <= 2 * d
        v.note("SPD quadratics within 2d iterations")

        for mode, (report, _) in runs.items():
            curve = report.loss_curve
            assert all(b <= a for a, b in zip(curve, curve[1:])), mode
        v.note("loss curves non-increasing on 2d and 3d")
