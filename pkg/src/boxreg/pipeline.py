"""
End-to-end experiment steps used by the command line: build a dataset,
register it, run the ICP baseline, evaluate a track and check gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .evaluation import MetricsRow, icp_baseline, interior_frames, param_errors
from .geometry import Track
from .io import Dataset, ExperimentReport
from .losses import gradient_relative_error, local_finite_diff_gradient, total_loss
from .optim import RegistrationResult, register, register_sliding_window
from .simulate import simulate

METHODS = ("lbfgs", "newton", "window")


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    frames, gt, initial = simulate(cfg.simulation)
    flat = cfg.to_flat()
    meta = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "trajectory": {k: flat[k] for k in ("steps", "speed", "dt", "yaw_increment_scale")},
        "sensor": {k: flat[k] for k in ("sensor_position", "spacing", "noise_sigma")},
        "noise": cfg.simulation.noise.as_dict(),
        "size": flat["size"],
        "occlusion_fraction": flat["occlusion_fraction"],
        "points_per_frame": flat["points_per_frame"],
    }
    return Dataset(meta, frames, gt, initial)


def metrics(est: Track, ds: Dataset, cfg: ExperimentConfig, frames=None) -> MetricsRow:
    """Errors against the dataset's ground truth, over interior frames by default."""
    idx = interior_frames(len(ds.gt_track)) if frames is None else frames
    return param_errors(est, ds.gt_track, idx, cfg.evaluation.iou_samples, seed=cfg.seed)


def run_registration(ds: Dataset, cfg: ExperimentConfig, method: str = "lbfgs") -> RegistrationResult:
    if method not in METHODS:
        raise ValueError(f"mode must be one of {METHODS}, got {method!r}")
    if method == "window":
        return register_sliding_window(ds.initial_track, ds.frames, cfg.loss, cfg.optimizer)
    return register(ds.initial_track, ds.frames, cfg.loss, cfg.optimizer, method=method)


def run_baseline(ds: Dataset, cfg: ExperimentConfig):
    """ICP baseline; returns (track, skipped frame indices)."""
    return icp_baseline(ds.frames, ds.initial_track, cfg.icp)


def experiment(ds: Dataset, cfg: ExperimentConfig, method: str = "lbfgs", with_baseline: bool = True):
    """Register, optionally run the baseline, and assemble the report.

    Returns ``(result, report)``.
    """
    result = run_registration(ds, cfg, method)
    notes = list(result.notes)
    baseline_row = None
    if with_baseline:
        base_track, skipped = run_baseline(ds, cfg)
        baseline_row = metrics(base_track, ds, cfg)
        if skipped:
            notes.append(f"icp skipped frames (fewer than 3 points): {skipped}")
    report = ExperimentReport(
        initial=metrics(ds.initial_track, ds, cfg),
        refined=metrics(result.track, ds, cfg),
        baseline=baseline_row,
        loss_curve=[float(v) for v in result.losses],
        runtime=float(result.elapsed),
        config=cfg.to_flat(),
        method=result.method,
        iterations=int(result.iterations),
        termination=result.reason,
        notes=notes,
    )
    return result, report


@dataclass
class GradcheckReport:
    max_relative_error: float
    per_point: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return bool(self.max_relative_error < self.tolerance)


def gradcheck(ds: Dataset, cfg: ExperimentConfig, gradient=None) -> GradcheckReport:
    """Analytic vs central-difference gradients at the initial track and at
    ``cfg.evaluation.gradcheck_perturbations`` seeded perturbations of it.

    ``gradient(track, frames, loss_cfg)`` supplies the analytic gradient
    (defaults to the one from :func:`total_loss`); tests pass a corrupted
    one as a negative control. Coordinates whose stencil crosses a branch of
    the piecewise data terms are left out of the comparison.
    """
    gradient = gradient or (lambda tr, fr, lc: total_loss(tr, fr, lc)[1])
    ev = cfg.evaluation
    loss_cfg = cfg.loss
    cols = list(loss_cfg.free_columns)
    rng = np.random.default_rng([cfg.seed, 5])
    tracks = [ds.initial_track]
    for _ in range(ev.gradcheck_perturbations):
        tr = ds.initial_track.copy()
        tr.poses[:, cols] += rng.normal(0.0, ev.gradcheck_scale, (len(tr), len(cols)))
        tracks.append(tr)
    errors, excluded = [], []
    for tr in tracks:
        analytic = np.asarray(gradient(tr, ds.frames, loss_cfg), dtype=float)
        numeric, clean = local_finite_diff_gradient(tr, ds.frames, loss_cfg, ev.gradcheck_step,
                                                    return_mask=True)
        # below this both gradients are zero up to difference-quotient roundoff
        floor = 64 * np.finfo(float).eps * max(1.0, abs(total_loss(tr, ds.frames, loss_cfg)[0])) / ev.gradcheck_step
        errors.append(gradient_relative_error(analytic[clean], numeric[clean], floor))
        excluded.append(int(np.count_nonzero(~clean)))
    return GradcheckReport(float(max(errors)), errors, excluded, ev.gradcheck_tolerance)

