"""
Registration losses between a box track and its point-cloud stream.

Every term returns ``(value, gradient)``. Per-frame terms (closeness,
enclosure) take one frame and one box and return the gradient w.r.t. the
box pose (x, y, z, roll, pitch, yaw); trajectory terms (smoothness,
alignment) take a whole track and return an (N, 6) gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    BoxState,
    PointFrame,
    Track,
    heading_from_angles,
    rotation_matrix,
    rotation_matrix_derivatives,
)

STATIONARY_EPS = 1e-9

# pose columns that stay free in each mode
POSE_COLUMNS_3D = (0, 1, 2, 3, 4, 5)
POSE_COLUMNS_BEV = (0, 1, 5)


@dataclass
class LossConfig:
    closeness_weight: float = 1.0
    enclosure_weight: float = 2.0
    smoothness_weight: float = 0.5
    alignment_weight: float = 0.5
    top_k: int = 32
    l1_smoothing: float = 1e-3
    optimize_z_axis: bool = True

    def __post_init__(self):
        for name in ("closeness_weight", "enclosure_weight", "smoothness_weight",
                     "alignment_weight", "l1_smoothing"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise ValueError(f"top_k must be a positive integer, got {self.top_k}")
        self.top_k = int(self.top_k)

    @property
    def free_columns(self) -> tuple:
        return POSE_COLUMNS_3D if self.optimize_z_axis else POSE_COLUMNS_BEV


def _points(frame) -> np.ndarray:
    pts = frame.points if isinstance(frame, PointFrame) else np.asarray(frame, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty frame: loss needs at least one point")
    return pts


def _local(pts: np.ndarray, box: BoxState):
    R = rotation_matrix(box.roll, box.pitch, box.yaw)
    rel = pts - box.center
    return rel, rel @ R, R


def _chain_to_pose(rel: np.ndarray, R: np.ndarray, box: BoxState, g_local: np.ndarray) -> np.ndarray:
    """Pull dL/dq (local coordinates, (M, 3)) back to dL/dpose (6,)."""
    grad = np.empty(6)
    grad[:3] = -R @ g_local.sum(axis=0)
    dR = rotation_matrix_derivatives(box.roll, box.pitch, box.yaw)
    for a in range(3):
        grad[3 + a] = np.sum((rel @ dR[a]) * g_local)
    return grad


def smooth_abs(x: np.ndarray, mu: float):
    """|x| with a quadratic cap on [-mu, mu]; returns (value, derivative).

    With mu == 0 this is the exact absolute value and its derivative is
    sign(x) (0 at the kink).
    """
    ax = np.abs(x)
    if mu <= 0:
        return ax, np.sign(x)
    inner = ax < mu
    val = np.where(inner, 0.5 * x * x / mu + 0.5 * mu, ax)
    der = np.where(inner, x / mu, np.sign(x))
    return val, der


def closeness(frame, box: BoxState, k: int):
    """Mean squared distance of the top-k closest points to each visible face.

    Each axis selects its own k points (the closest ones to that axis's
    visible face) and its sum is normalized by the number actually selected.
    """
    pts = _points(frame)
    if k < 1:
        raise ValueError(f"top_k must be >= 1, got {k}")
    rel, q, R = _local(pts, box)
    half = box.half_size
    mass = q.mean(axis=0)
    sides = np.where(mass < 0.0, -1.0, 1.0)

    m = len(pts)
    kk = min(k, m)
    value = 0.0
    g_local = np.zeros_like(q)
    for axis in range(3):
        d = sides[axis] * q[:, axis] - half[axis]
        if kk < m:
            sel = np.argpartition(d * d, kk - 1)[:kk]
        else:
            sel = np.arange(m)
        ds = d[sel]
        value += float(ds @ ds) / kk
        g_local[sel, axis] = 2.0 * ds * sides[axis] / kk
    return value, _chain_to_pose(rel, R, box, g_local)


def enclosure(frame, box: BoxState, mu: float = 0.0):
    """Mean L1 distance from all points to all six faces.

    Equals (l + w + h) / 6 with zero gradient whenever every point is
    inside the box (for mu == 0).
    """
    pts = _points(frame)
    rel, q, R = _local(pts, box)
    half = box.half_size
    plus_v, plus_d = smooth_abs(q - half, mu)
    minus_v, minus_d = smooth_abs(q + half, mu)
    m = len(pts)
    value = float(plus_v.sum() + minus_v.sum()) / (6.0 * m)
    g_local = (plus_d + minus_d) / (6.0 * m)
    return value, _chain_to_pose(rel, R, box, g_local)


def smoothness(track: Track):
    """Mean norm of the change in consecutive absolute pose differences."""
    poses = track.poses
    n = len(poses)
    grad = np.zeros_like(poses)
    if n < 3:
        return 0.0, grad
    diff = np.diff(poses, axis=0)
    absdiff = np.abs(diff)
    accel = np.diff(absdiff, axis=0)
    norms = np.linalg.norm(accel, axis=1)
    value = float(norms.sum()) / (n - 2)

    safe = np.where(norms > 0, norms, 1.0)
    g_accel = np.where(norms[:, None] > 0, accel / safe[:, None], 0.0) / (n - 2)
    g_abs = np.zeros_like(absdiff)
    g_abs[1:] += g_accel
    g_abs[:-1] -= g_accel
    g_diff = g_abs * np.sign(diff)
    grad[1:] += g_diff
    grad[:-1] -= g_diff
    return value, grad


def alignment(track: Track):
    """Mean distance between box heading and unit motion direction.

    Headings are compared modulo pi: a box facing exactly backwards along
    its motion counts as aligned. Transitions shorter than STATIONARY_EPS
    contribute nothing.
    """
    poses = track.poses
    n = len(poses)
    grad = np.zeros_like(poses)
    if n < 2:
        return 0.0, grad
    pitch, yaw = poses[:-1, 4], poses[:-1, 5]
    heading = heading_from_angles(pitch, yaw)
    disp = np.diff(poses[:, :3], axis=0)
    dist = np.linalg.norm(disp, axis=1)
    moving = dist >= STATIONARY_EPS
    unit = np.where(moving[:, None], disp / np.where(moving, dist, 1.0)[:, None], 0.0)

    flip = np.where(np.sum(heading * unit, axis=1) < 0.0, -1.0, 1.0)
    resid = flip[:, None] * heading - unit
    rnorm = np.linalg.norm(resid, axis=1)
    active = moving & (rnorm > 0)
    value = float(rnorm[moving].sum()) / (n - 1)

    g_r = np.where(active[:, None], resid / np.where(active, rnorm, 1.0)[:, None], 0.0) / (n - 1)
    # heading partials
    cb, sb = np.cos(pitch), np.sin(pitch)
    cg, sg = np.cos(yaw), np.sin(yaw)
    d_pitch = np.stack([-sb * cg, -sb * sg, -cb], axis=1)
    d_yaw = np.stack([-cb * sg, cb * cg, np.zeros_like(cb)], axis=1)
    g_head = flip[:, None] * g_r
    grad[:-1, 4] += np.sum(g_head * d_pitch, axis=1)
    grad[:-1, 5] += np.sum(g_head * d_yaw, axis=1)
    # unit-vector partials: dU/dd = (I - U U^T) / |d|
    g_u = -g_r
    g_disp = (g_u - unit * np.sum(unit * g_u, axis=1)[:, None]) / np.where(moving, dist, 1.0)[:, None]
    grad[1:, :3] += g_disp
    grad[:-1, :3] -= g_disp
    return value, grad


def rotations_with_derivatives(roll, pitch, yaw):
    """Vectorized rotation matrices (N, 3, 3) and their angle partials (N, 3, 3, 3)."""
    ca, sa = np.cos(roll), np.sin(roll)
    cb, sb = np.cos(pitch), np.sin(pitch)
    cg, sg = np.cos(yaw), np.sin(yaw)
    n = len(ca)
    zero, one = np.zeros(n), np.ones(n)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    rx = mat([[one, zero, zero], [zero, ca, -sa], [zero, sa, ca]])
    ry = mat([[cb, zero, sb], [zero, one, zero], [-sb, zero, cb]])
    rz = mat([[cg, -sg, zero], [sg, cg, zero], [zero, zero, one]])
    drx = mat([[zero, zero, zero], [zero, -sa, -ca], [zero, ca, -sa]])
    dry = mat([[-sb, zero, cb], [zero, zero, zero], [-cb, zero, -sb]])
    drz = mat([[-sg, -cg, zero], [cg, -sg, zero], [zero, zero, zero]])
    rzy = rz @ ry
    rot = rzy @ rx
    drot = np.stack([rzy @ drx, rz @ dry @ rx, drz @ ry @ rx], axis=1)
    return rot, drot


class FrameBatch:
    """All frames of a sequence padded into one (N, M_max, 3) array.

    Lets the per-frame terms be evaluated for every box at once; results
    match :func:`closeness` and :func:`enclosure` applied frame by frame.
    """

    def __init__(self, frames):
        pts = [_points(f) for f in frames]
        self.n = len(pts)
        self.counts = np.array([len(p) for p in pts])
        m = int(self.counts.max()) if self.n else 0
        self.points = np.zeros((self.n, m, 3))
        self.mask = np.zeros((self.n, m), dtype=bool)
        for i, p in enumerate(pts):
            self.points[i, :len(p)] = p
            self.mask[i, :len(p)] = True
        self._padded = not self.mask.all()

    def __len__(self):
        return self.n

    def _local(self, poses):
        rot, drot = rotations_with_derivatives(poses[:, 3], poses[:, 4], poses[:, 5])
        rel = self.points - poses[:, None, :3]
        if self._padded:
            rel = rel * self.mask[..., None]
        return rel, rel @ rot, (rot, drot)

    def _chain(self, poses, rel, rots, g_local):
        rot, drot = rots
        grad = np.empty((self.n, 6))
        grad[:, :3] = -(rot @ g_local.sum(axis=1)[:, :, None])[:, :, 0]
        # d/d angle of sum(g * rel @ R) = sum((rel^T g) * dR)
        outer = np.swapaxes(rel, 1, 2) @ g_local
        for a in range(3):
            grad[:, 3 + a] = np.sum(outer * drot[:, a], axis=(1, 2))
        return grad

    def evaluate(self, poses, size, top_k=None, mu=None):
        """Return ((closeness values, grads), (enclosure values, grads)) per frame.

        A term is skipped (None) when its parameter is None.
        """
        rel, q, rot = self._local(poses)
        half = 0.5 * np.asarray(size, dtype=float)
        counts = self.counts
        out_c = out_e = None
        if top_k is not None:
            mass = q.sum(axis=1) / counts[:, None]
            sides = np.where(mass < 0.0, -1.0, 1.0)
            kk = np.minimum(top_k, counts)
            g_local = np.zeros_like(q)
            values = np.zeros(self.n)
            rows = np.arange(self.n)[:, None]
            for axis in range(3):
                d = sides[:, axis, None] * q[:, :, axis] - half[axis]
                d2 = np.where(self.mask, d * d, np.inf)
                kmax = int(kk.max())
                if kmax < d2.shape[1]:
                    part = np.argpartition(d2, kmax - 1, axis=1)[:, :kmax]
                    order = np.take_along_axis(part, np.argsort(np.take_along_axis(d2, part, axis=1), axis=1), axis=1)
                else:
                    order = np.argsort(d2, axis=1)
                take = np.arange(order.shape[1])[None, :] < kk[:, None]
                ds = np.where(take, d[rows, order], 0.0)
                values += np.sum(ds * ds, axis=1) / kk
                g_local[rows, order, axis] = 2.0 * ds * sides[:, axis, None] / kk[:, None]
            out_c = (values, self._chain(poses, rel, rot, g_local))
        if mu is not None:
            plus_v, plus_d = smooth_abs(q - half, mu)
            minus_v, minus_d = smooth_abs(q + half, mu)
            w = self.mask[..., None] / (6.0 * counts[:, None, None])
            values = np.sum((plus_v + minus_v) * w, axis=(1, 2))
            out_e = (values, self._chain(poses, rel, rot, (plus_d + minus_d) * w))
        return out_c, out_e


def as_batch(frames) -> FrameBatch:
    return frames if isinstance(frames, FrameBatch) else FrameBatch(frames)


def loss_terms(track: Track, frames, cfg: LossConfig):
    """Evaluate the four terms; returns {name: (value, (N, 6) gradient)}.

    ``frames`` may be a list of frames / point arrays or a prebuilt
    :class:`FrameBatch` (faster when the same frames are evaluated often).
    """
    n = len(track)
    if len(frames) != n:
        raise ValueError(f"track has {n} boxes but {len(frames)} frames were given")
    if n < 1:
        raise ValueError("empty track")
    batch = as_batch(frames)
    zero = (0.0, np.zeros((n, 6)))
    out_c, out_e = batch.evaluate(
        track.poses, track.size,
        top_k=cfg.top_k if cfg.closeness_weight > 0 else None,
        mu=cfg.l1_smoothing if cfg.enclosure_weight > 0 else None,
    )
    terms = {
        "closeness": (float(out_c[0].sum()) / n, out_c[1] / n) if out_c else zero,
        "enclosure": (float(out_e[0].sum()) / n, out_e[1] / n) if out_e else zero,
        "smoothness": smoothness(track) if cfg.smoothness_weight > 0 else zero,
        "alignment": alignment(track) if cfg.alignment_weight > 0 else zero,
    }
    return terms


def weighted_sum(terms: dict, cfg: LossConfig):
    weights = {
        "closeness": cfg.closeness_weight,
        "enclosure": cfg.enclosure_weight,
        "smoothness": cfg.smoothness_weight,
        "alignment": cfg.alignment_weight,
    }
    value = 0.0
    grad = None
    for name, (v, g) in terms.items():
        value += weights[name] * v
        grad = weights[name] * g if grad is None else grad + weights[name] * g
    return value, grad


def total_loss(track: Track, frames, cfg: LossConfig):
    """Weighted total loss and its gradient over the free pose vector."""
    value, grad = weighted_sum(loss_terms(track, frames, cfg), cfg)
    return value, grad[:, list(cfg.free_columns)].ravel()


def pose_vector(track: Track, cfg: LossConfig) -> np.ndarray:
    """Flatten the free pose parameters: 6 per box in 3D, (x, y, yaw) in BEV."""
    return track.poses[:, list(cfg.free_columns)].ravel().copy()


def track_from_vector(vec, template: Track, cfg: LossConfig) -> Track:
    """Inverse of :func:`pose_vector`; fixed parameters come from ``template``."""
    cols = list(cfg.free_columns)
    poses = template.poses.copy()
    poses[:, cols] = np.asarray(vec, dtype=float).reshape(len(template), len(cols))
    return Track(poses, template.size)


def make_objective(template: Track, frames, cfg: LossConfig):
    """Closure mapping a pose vector to (loss, gradient)."""

    batch = as_batch(frames)

    def objective(vec):
        return total_loss(track_from_vector(vec, template, cfg), batch, cfg)

    return objective


def finite_diff_gradient(track: Track, frames, cfg: LossConfig, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of :func:`total_loss` over the pose vector."""
    if step <= 0:
        raise ValueError("step must be > 0")
    x0 = pose_vector(track, cfg)
    frames = as_batch(frames)
    grad = np.zeros_like(x0)
    for j in range(len(x0)):
        x = x0.copy()
        x[j] = x0[j] + step
        fplus = total_loss(track_from_vector(x, track, cfg), frames, cfg)[0]
        x[j] = x0[j] - step
        fminus = total_loss(track_from_vector(x, track, cfg), frames, cfg)[0]
        grad[j] = (fplus - fminus) / (2 * step)
    return grad


def branch_signature(pts: np.ndarray, box: BoxState, cfg: LossConfig) -> tuple:
    """Which piece of the piecewise loss definition applies at ``box``.

    Covers the visible side per axis, the top-K point set per axis and, for
    every point/face pair, whether it sits in the smoothed (or, at mu = 0,
    negative) region of the absolute value. Central differences are only
    trustworthy when the signature is the same at both ends of the stencil.
    """
    _, q, _ = _local(pts, box)
    half = box.half_size
    parts = []
    if cfg.closeness_weight > 0:
        sides = np.where(q.mean(axis=0) < 0.0, -1.0, 1.0)
        k = min(cfg.top_k, len(q))
        parts.append(sides.tobytes())
        for axis in range(3):
            d = sides[axis] * q[:, axis] - half[axis]
            parts.append(np.sort(np.argsort(d * d, kind="stable")[:k]).tobytes())
    if cfg.enclosure_weight > 0:
        mu = cfg.l1_smoothing
        for shifted in (q - half, q + half):
            region = np.abs(shifted) < mu if mu > 0 else shifted < 0
            parts.append(region.tobytes())
    return tuple(parts)


def local_finite_diff_gradient(track: Track, frames, cfg: LossConfig, step: float = 1e-5,
                               return_mask: bool = False):
    """Central differences of the total loss, one frame at a time.

    Same quantity as :func:`finite_diff_gradient`, but moving a parameter
    of box i only re-evaluates frame i's data terms (through the per-frame
    functions, not the batched path) plus the trajectory terms.

    With ``return_mask`` also returns a boolean array marking coordinates
    whose stencil stays on one branch of the piecewise data terms (see
    :func:`branch_signature`).
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    n = len(track)
    if len(frames) != n:
        raise ValueError(f"track has {n} boxes but {len(frames)} frames were given")
    pts = [_points(f) for f in frames]

    def frame_value(i, work):
        box = work.box(i)
        v = 0.0
        if cfg.closeness_weight > 0:
            v += cfg.closeness_weight * closeness(pts[i], box, cfg.top_k)[0]
        if cfg.enclosure_weight > 0:
            v += cfg.enclosure_weight * enclosure(pts[i], box, cfg.l1_smoothing)[0]
        return v

    def trajectory_value(work):
        v = 0.0
        if cfg.smoothness_weight > 0:
            v += cfg.smoothness_weight * smoothness(work)[0]
        if cfg.alignment_weight > 0:
            v += cfg.alignment_weight * alignment(work)[0]
        return v

    cols = list(cfg.free_columns)
    work = track.copy()
    grad = np.zeros((n, len(cols)))
    smooth = np.ones((n, len(cols)), dtype=bool)
    for i in range(n):
        for j, c in enumerate(cols):
            v0 = work.poses[i, c]
            vals, sigs = [], []
            for v in (v0 + step, v0 - step):
                work.poses[i, c] = v
                vals.append(frame_value(i, work) / n + trajectory_value(work))
                if return_mask:
                    sigs.append(branch_signature(pts[i], work.box(i), cfg))
            work.poses[i, c] = v0
            grad[i, j] = (vals[0] - vals[1]) / (2 * step)
            if return_mask:
                smooth[i, j] = sigs[0] == sigs[1]
    if return_mask:
        return grad.ravel(), smooth.ravel()
    return grad.ravel()


def gradient_relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """max |a - n| scaled by the largest gradient component."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(analytic), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale < floor:
        return 0.0 if diff < floor else float("inf")
    return float(diff / scale)
