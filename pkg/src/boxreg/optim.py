"""
Minimizers for the registration loss.

``lbfgs_minimize`` is a generic limited-memory BFGS with a backtracking
Armijo line search. ``register`` runs it (or coordinate-wise Newton sweeps)
over the free pose parameters of a track; ``register_sliding_window``
optimizes overlapping fixed-length blocks of frames one at a time.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Track
from .losses import (
    LossConfig,
    alignment,
    as_batch,
    closeness,
    enclosure,
    make_objective,
    pose_vector,
    smoothness,
    total_loss,
    track_from_vector,
)

logger = logging.getLogger(__name__)


class NonFiniteError(ArithmeticError, ValueError):
    """The objective or its gradient is NaN/inf where a finite value is required."""


@dataclass
class OptimizerSettings:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    loss_change_tolerance: float = 1e-8
    lbfgs_history: int = 10
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 30
    newton_fd_step: float = 1e-4
    window_size: int = 10
    window_stride: int = 5
    # multipliers on the smoothness/alignment weights for successive warm-start
    # stages; the last stage always runs the configured weights
    continuation: tuple = (0.02, 0.1, 1.0)

    def __post_init__(self):
        self.continuation = tuple(float(c) for c in self.continuation)
        if not self.continuation or self.continuation[-1] != 1.0:
            raise ValueError("continuation must end with 1.0")
        if any(c < 0 for c in self.continuation):
            raise ValueError("continuation multipliers must be >= 0")
        for name in ("gradient_tolerance", "loss_change_tolerance", "newton_fd_step", "armijo"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must be in (0, 1)")
        if self.lbfgs_history < 1:
            raise ValueError("lbfgs_history must be >= 1")
        if self.max_iterations < 0 or self.max_backtracks < 1:
            raise ValueError("max_iterations must be >= 0 and max_backtracks >= 1")
        if not 1 <= self.window_stride <= self.window_size:
            raise ValueError("need 1 <= window_stride <= window_size")


@dataclass
class OptimTrace:
    losses: list = field(default_factory=list)
    iterations: int = 0
    reason: str = ""
    evaluations: int = 0
    warm_iterations: int = 0


@dataclass
class RegistrationResult:
    track: Track
    losses: list
    iterations: int
    reason: str
    method: str = "lbfgs"
    notes: list = field(default_factory=list)
    elapsed: float = 0.0


def _two_loop(grad, pairs):
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(objective, x0, settings: OptimizerSettings | None = None):
    """Minimize ``objective(x) -> (f, grad)`` starting from ``x0``.

    Returns ``(x_best, trace)``. ``trace.losses`` holds f at x0 followed by
    f after every accepted step, so it is non-increasing.
    """
    settings = settings or OptimizerSettings()
    x = np.array(x0, dtype=float)
    f, g = objective(x)
    g = np.asarray(g, dtype=float)
    trace = OptimTrace(losses=[float(f)], evaluations=1)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteError("objective is not finite at the starting point")

    pairs = deque(maxlen=settings.lbfgs_history)
    while True:
        if np.max(np.abs(g), initial=0.0) < settings.gradient_tolerance:
            trace.reason = "gradient"
            break
        if trace.iterations >= settings.max_iterations:
            trace.reason = "max-iter"
            break

        d = _two_loop(g, pairs)
        slope = g @ d
        if not slope < 0:
            pairs.clear()
            d = -g
            slope = g @ d
        if not pairs:
            # first step (or after reset): cap the move to unit size
            d = d / max(1.0, np.max(np.abs(d)))
            slope = g @ d

        t = 1.0
        accepted = False
        for _ in range(settings.max_backtracks):
            x_new = x + t * d
            f_new, g_new = objective(x_new)
            trace.evaluations += 1
            if np.isfinite(f_new) and f_new <= f + settings.armijo * t * slope:
                accepted = True
                break
            t *= settings.shrink
        if not accepted:
            trace.reason = "line-search-stall"
            break
        # refine with the minimizer of the 1-D quadratic through f(0), f'(0)
        # and f(t); exact on quadratic objectives
        curv = f_new - f - slope * t
        if curv > 0:
            t_q = -slope * t * t / (2.0 * curv)
            if abs(t_q - t) > 1e-3 * t:
                x_q = x + t_q * d
                f_q, g_q = objective(x_q)
                trace.evaluations += 1
                if np.isfinite(f_q) and f_q < f_new:
                    x_new, f_new, g_new = x_q, f_q, g_q

        g_new = np.asarray(g_new, dtype=float)
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)) and sy > 0:
            pairs.append((s, y, 1.0 / sy))
        change = f - f_new
        x, f, g = x_new, f_new, g_new
        trace.iterations += 1
        trace.losses.append(float(f))
        if change <= settings.loss_change_tolerance * max(1.0, abs(f)):
            trace.reason = "loss-change"
            break
    return x, trace


def _frame_value(pts, box, cfg: LossConfig) -> float:
    v = 0.0
    if cfg.closeness_weight > 0:
        v += cfg.closeness_weight * closeness(pts, box, cfg.top_k)[0]
    if cfg.enclosure_weight > 0:
        v += cfg.enclosure_weight * enclosure(pts, box, cfg.l1_smoothing)[0]
    return v


def _trajectory_value(track: Track, cfg: LossConfig) -> float:
    v = 0.0
    if cfg.smoothness_weight > 0:
        v += cfg.smoothness_weight * smoothness(track)[0]
    if cfg.alignment_weight > 0:
        v += cfg.alignment_weight * alignment(track)[0]
    return v


def newton_coordinate_step(track: Track, frames, cfg: LossConfig,
                           settings: OptimizerSettings | None = None) -> np.ndarray:
    """One coordinate-wise Newton sweep over every free pose parameter.

    Derivatives along each coordinate come from central differences (first
    derivative with step 1e-5, second with ``settings.newton_fd_step``).
    Coordinates with a vanishing or unhelpful Newton step fall back to a
    backtracked gradient step. Returns the updated pose vector.
    """
    settings = settings or OptimizerSettings()
    n = len(track)
    if len(frames) != n:
        raise ValueError(f"track has {n} boxes but {len(frames)} frames were given")
    cols = list(cfg.free_columns)
    poses = track.poses.copy()
    pts = [f.points if hasattr(f, "points") else np.asarray(f, dtype=float).reshape(-1, 3) for f in frames]
    for p in pts:
        if len(p) == 0:
            raise ValueError("empty frame: loss needs at least one point")

    work = Track(poses, track.size)
    frame_vals = np.array([_frame_value(pts[i], work.box(i), cfg) for i in range(n)])
    h1, h2 = 1e-5, settings.newton_fd_step

    for i in range(n):
        others = frame_vals.sum() - frame_vals[i]

        for c in cols:
            def f_of(v, i=i, c=c):
                work.poses[i, c] = v
                return (others + _frame_value(pts[i], work.box(i), cfg)) / n + _trajectory_value(work, cfg)

            v0 = poses[i, c]
            f0 = f_of(v0)
            d1 = (f_of(v0 + h1) - f_of(v0 - h1)) / (2 * h1)
            d2 = (f_of(v0 + h2) - 2 * f0 + f_of(v0 - h2)) / (h2 * h2)
            best = v0
            if d1 != 0.0:
                if abs(d2) >= 1e-8:
                    cand = v0 - d1 / d2
                    if f_of(cand) < f0:
                        best = cand
                if best == v0:
                    t = 1.0
                    for _ in range(settings.max_backtracks):
                        cand = v0 - t * d1
                        if f_of(cand) <= f0 - settings.armijo * t * d1 * d1:
                            best = cand
                            break
                        t *= settings.shrink
            work.poses[i, c] = best
            poses[i, c] = best
        frame_vals[i] = _frame_value(pts[i], work.box(i), cfg)
    return poses[:, cols].ravel()


def _newton_register(track0: Track, frames, cfg, settings):
    track = track0.copy()
    f = total_loss(track, frames, cfg)[0]
    losses = [float(f)]
    reason = "max-iter"
    it = 0
    while it < settings.max_iterations:
        vec = newton_coordinate_step(track, frames, cfg, settings)
        cand = track_from_vector(vec, track, cfg)
        f_new, g_new = total_loss(cand, frames, cfg)
        if f_new > f:
            reason = "line-search-stall"
            break
        it += 1
        change = f - f_new
        track, f = cand, f_new
        losses.append(float(f))
        if np.max(np.abs(g_new), initial=0.0) < settings.gradient_tolerance:
            reason = "gradient"
            break
        if change <= settings.loss_change_tolerance * max(1.0, abs(f)):
            reason = "loss-change"
            break
    return track, losses, it, reason


def _stage_configs(cfg: LossConfig, settings: OptimizerSettings):
    return [replace(cfg, smoothness_weight=c * cfg.smoothness_weight,
                    alignment_weight=c * cfg.alignment_weight) for c in settings.continuation]


def _continued_lbfgs(objective_for, x0, cfg, settings):
    """Run L-BFGS through the continuation stages.

    ``objective_for(cfg)`` builds the objective for one stage. The returned
    trace belongs to the final (configured) objective and starts at its value
    at ``x0``; if the warm start ended above that value the final stage is
    restarted from ``x0``.
    """
    stages = _stage_configs(cfg, settings)
    final = objective_for(stages[-1])
    f0 = float(final(x0)[0])
    x = np.array(x0, dtype=float)
    warm_iterations = 0
    for stage in stages[:-1]:
        x, trace = lbfgs_minimize(objective_for(stage), x, settings)
        warm_iterations += trace.iterations
    if float(final(x)[0]) > f0:
        x = np.array(x0, dtype=float)
    x, trace = lbfgs_minimize(final, x, settings)
    if trace.losses[0] != f0:
        trace.losses.insert(0, f0)
    trace.warm_iterations = warm_iterations
    return x, trace


def register(track0: Track, frames, cfg: LossConfig | None = None,
             settings: OptimizerSettings | None = None, method: str = "lbfgs") -> RegistrationResult:
    """Refine the pose of every box of ``track0`` against ``frames``."""
    cfg = cfg or LossConfig()
    settings = settings or OptimizerSettings()
    if len(track0) != len(frames):
        raise ValueError(f"track has {len(track0)} boxes but {len(frames)} frames were given")
    if len(track0) < 1:
        raise ValueError("empty track")
    start = time.perf_counter()
    if method == "lbfgs":
        batch = as_batch(frames)
        x, trace = _continued_lbfgs(lambda c: make_objective(track0, batch, c),
                                    pose_vector(track0, cfg), cfg, settings)
        track = track_from_vector(x, track0, cfg)
        result = RegistrationResult(track, trace.losses, trace.iterations, trace.reason, method)
        if trace.warm_iterations:
            result.notes.append(f"warm-start iterations: {trace.warm_iterations}")
    elif method == "newton":
        track, losses, it, reason = _newton_register(track0, frames, cfg, settings)
        result = RegistrationResult(track, losses, it, reason, method)
    else:
        raise ValueError(f"unknown method {method!r}")
    result.elapsed = time.perf_counter() - start
    logger.info("register(%s): %d iterations, loss %.6g -> %.6g (%s)", method, result.iterations,
                result.losses[0], result.losses[-1], result.reason)
    return result


def window_starts(n: int, size: int, stride: int) -> list[int]:
    """Start indices of full windows covering [0, n)."""
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] + size < n:
        starts.append(n - size)
    return starts


def register_sliding_window(track0: Track, frames, cfg: LossConfig | None = None,
                            settings: OptimizerSettings | None = None) -> RegistrationResult:
    """Optimize windows of ``window_size`` frames, advancing by ``window_stride``.

    Each window minimizes the full-track loss with only its own frames free,
    so overlapping frames keep the result of the latest window and the loss
    never increases from one window to the next.
    """
    cfg = cfg or LossConfig()
    settings = settings or OptimizerSettings()
    n = len(track0)
    size = settings.window_size
    if n < size:
        result = register(track0, frames, cfg, settings)
        result.method = "window"
        result.notes.append(f"N={n} < window size {size}: fell back to full-batch register")
        return result
    if len(frames) != n:
        raise ValueError(f"track has {n} boxes but {len(frames)} frames were given")

    start_time = time.perf_counter()
    ncols = len(cfg.free_columns)
    full = pose_vector(track0, cfg)
    batch = as_batch(frames)
    losses: list = []
    iterations = 0
    reasons = []
    for s in window_starts(n, size, settings.window_stride):
        lo, hi = s * ncols, (s + size) * ncols

        def block_for(stage_cfg, lo=lo, hi=hi):
            objective = make_objective(track0, batch, stage_cfg)

            def block_objective(xw):
                x = full.copy()
                x[lo:hi] = xw
                f, g = objective(x)
                return f, g[lo:hi]

            return block_objective

        xw, trace = _continued_lbfgs(block_for, full[lo:hi], cfg, settings)
        full[lo:hi] = xw
        losses.extend(trace.losses if not losses else trace.losses[1:])
        iterations += trace.iterations
        reasons.append(trace.reason)
    track = track_from_vector(full, track0, cfg)
    reason = reasons[-1]
    result = RegistrationResult(track, losses, iterations, reason, "window",
                                notes=[f"windows={len(reasons)} reasons={reasons}"])
    result.elapsed = time.perf_counter() - start_time
    return result
