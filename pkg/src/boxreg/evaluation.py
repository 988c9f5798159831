"""
Metrics for refined tracks (per-parameter errors, BEV and 3D IoU) and a
point-to-point ICP baseline that registers a surface-sampled box to each
frame independently.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    BoxState,
    PointFrame,
    Track,
    euler_from_matrix,
    point_in_box,
    rotation_matrix,
    wrap_angle,
    wrap_pi,
)

PARAM_NAMES = ("x", "y", "z", "roll", "pitch", "yaw")


# -- 2D polygons ---------------------------------------------------------------

def bev_corners(box: BoxState) -> np.ndarray:
    """Counter-clockwise footprint corners (4, 2) from x, y, l, w, yaw."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.x, box.y])


def polygon_area(poly) -> float:
    """Shoelace area (positive for counter-clockwise vertices)."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clip) -> list:
    """Sutherland-Hodgman: intersect ``subject`` with the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    for i in range(len(clip)):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_cross_point(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_cross_point(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: BoxState, b: BoxState) -> float:
    return max(0.0, polygon_area(clip_polygon(bev_corners(a), bev_corners(b))))


def iou_2d_bev(a: BoxState, b: BoxState) -> float:
    """Exact rotated-rectangle IoU of the two footprints."""
    area_a, area_b = a.l * a.w, b.l * b.w
    if area_a <= 0 or area_b <= 0:
        raise ValueError("degenerate footprint")
    if a == b:
        return 1.0
    inter = bev_intersection_area(a, b)
    return float(min(1.0, max(0.0, inter / (area_a + area_b - inter))))


# -- 3D IoU ----------------------------------------------------------------------

def _box_corners(box: BoxState) -> np.ndarray:
    signs = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float)
    return (signs * box.half_size) @ rotation_matrix(box.roll, box.pitch, box.yaw).T + box.center


def iou_3d(a: BoxState, b: BoxState, samples: int = 200_000, seed: int = 0) -> float:
    """Volumetric IoU.

    Exact when both boxes are roll- and pitch-free (footprint intersection
    times vertical overlap); otherwise a seeded Monte Carlo estimate over
    the axis-aligned hull of both boxes.
    """
    vol_a, vol_b = a.l * a.w * a.h, b.l * b.w * b.h
    if vol_a <= 0 or vol_b <= 0:
        raise ValueError("degenerate box")
    if a == b:
        return 1.0
    if a.roll == 0 and a.pitch == 0 and b.roll == 0 and b.pitch == 0:
        dz = min(a.z + a.h / 2, b.z + b.h / 2) - max(a.z - a.h / 2, b.z - b.h / 2)
        if dz <= 0:
            return 0.0
        inter = bev_intersection_area(a, b) * dz
        return float(min(1.0, max(0.0, inter / (vol_a + vol_b - inter))))
    return iou_3d_monte_carlo(a, b, samples, seed)


def iou_3d_monte_carlo(a: BoxState, b: BoxState, samples: int = 200_000, seed: int = 0) -> float:
    pts = np.vstack([_box_corners(a), _box_corners(b)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    rng = np.random.default_rng(seed)
    inter = union = 0
    chunk = 500_000
    left = int(samples)
    while left > 0:
        k = min(chunk, left)
        p = lo + rng.random((k, 3)) * (hi - lo)
        in_a = point_in_box(p, a)
        in_b = point_in_box(p, b)
        inter += int(np.count_nonzero(in_a & in_b))
        union += int(np.count_nonzero(in_a | in_b))
        left -= k
    return inter / union if union else 0.0


# -- per-parameter errors -------------------------------------------------------

@dataclass
class MetricsRow:
    mean_abs_error: dict
    mean_iou_2d: float
    mean_iou_3d: float
    frames: list = field(default_factory=list)
    per_frame_errors: list = field(default_factory=list)
    per_frame_iou_2d: list = field(default_factory=list)
    per_frame_iou_3d: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRow":
        return cls(**d)


def pose_errors(est: Track, gt: Track) -> np.ndarray:
    """(N, 6) absolute errors; angle errors are wrapped modulo pi."""
    if len(est) != len(gt):
        raise ValueError(f"length mismatch: {len(est)} estimated vs {len(gt)} ground-truth boxes")
    diff = est.poses - gt.poses
    err = np.abs(diff)
    err[:, 3:] = np.abs(wrap_angle(diff[:, 3:]))
    return err


def param_errors(est: Track, gt: Track, frames=None, iou_samples: int = 200_000,
                 seed: int = 0) -> MetricsRow:
    """Mean absolute pose errors and mean IoU over ``frames`` (default: all).

    The 3D IoU of frame i uses seed ``seed + i`` on the Monte Carlo path.
    """
    err = pose_errors(est, gt)
    n = len(gt)
    idx = list(range(n)) if frames is None else [int(i) for i in frames]
    iou2 = [iou_2d_bev(est.box(i), gt.box(i)) for i in idx]
    iou3 = [iou_3d(est.box(i), gt.box(i), iou_samples, seed + i) for i in idx]
    sub = err[idx]
    return MetricsRow(
        mean_abs_error={k: float(v) for k, v in zip(PARAM_NAMES, sub.mean(axis=0))},
        mean_iou_2d=float(np.mean(iou2)),
        mean_iou_3d=float(np.mean(iou3)),
        frames=idx,
        per_frame_errors=sub.tolist(),
        per_frame_iou_2d=[float(v) for v in iou2],
        per_frame_iou_3d=[float(v) for v in iou3],
    )


def interior_frames(n: int) -> list:
    """Frame indices without the first and the last one."""
    return list(range(1, n - 1)) if n > 2 else list(range(n))


# -- ICP baseline ------------------------------------------------------------------

@dataclass
class IcpSettings:
    surface_samples: int = 1000
    max_iterations: int = 50
    tolerance: float = 1e-6
    planar: bool = False

    def __post_init__(self):
        if self.surface_samples < 8:
            raise ValueError("surface_samples must be >= 8")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def sample_box_surface(box: BoxState, n: int) -> np.ndarray:
    """About ``n`` points spread uniformly by area over the six faces.

    Each face gets a regular grid of cell centers at a common spacing, so
    the point density is the same everywhere and the pattern is symmetric
    about every face center. Returns world coordinates.
    """
    size = box.size
    half = box.half_size
    area = 2.0 * (size[0] * size[1] + size[0] * size[2] + size[1] * size[2])
    spacing = math.sqrt(area / n)
    chunks = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        nu = max(1, int(round(size[u] / spacing)))
        nv = max(1, int(round(size[v] / spacing)))
        gu = (np.arange(nu) + 0.5) / nu * size[u] - half[u]
        gv = (np.arange(nv) + 0.5) / nv * size[v] - half[v]
        uu, vv = np.meshgrid(gu, gv, indexing="ij")
        for sign in (1.0, -1.0):
            face = np.empty((uu.size, 3))
            face[:, axis] = sign * half[axis]
            face[:, u] = uu.ravel()
            face[:, v] = vv.ravel()
            chunks.append(face)
    return np.concatenate(chunks) @ box.rotation.T + box.center


def best_fit_transform(src: np.ndarray, dst: np.ndarray, planar: bool = False):
    """Least-squares rigid (R, t) with R @ src_i + t ~ dst_i (SVD of the cross-covariance)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - cs, dst - cd
    dims = 2 if planar else 3
    H = A[:, :dims].T @ B[:, :dims]
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(dims)
    D[-1, -1] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    Rk = Vt.T @ D @ U.T
    R = np.eye(3)
    R[:dims, :dims] = Rk
    t = cd - R @ cs
    if planar:
        t[2] = 0.0
    return R, t


def _nearest(tree: cKDTree, points: np.ndarray, query: np.ndarray) -> np.ndarray:
    # Nearest cloud point per query; equidistant neighbours are averaged so a
    # tie does not get resolved by point order (which would bias the fit on
    # regular scan grids).
    k = min(4, len(points))
    dist, idx = tree.query(query, k=k)
    dist, idx = dist.reshape(len(query), k), idx.reshape(len(query), k)
    tied = dist <= dist[:, :1] + 1e-9
    return (points[idx] * tied[..., None]).sum(axis=1) / tied.sum(axis=1, keepdims=True)


def icp_box(points: np.ndarray, box: BoxState, settings: IcpSettings):
    """Register surface samples of ``box`` onto ``points``; returns (box, iterations)."""
    src = sample_box_surface(box, settings.surface_samples)
    tree = cKDTree(points)
    R_tot, t_tot = np.eye(3), np.zeros(3)
    it = 0
    for it in range(1, settings.max_iterations + 1):
        R, t = best_fit_transform(src, _nearest(tree, points, src), settings.planar)
        src = src @ R.T + t
        R_tot, t_tot = R @ R_tot, R @ t_tot + t
        angle = math.acos(max(-1.0, min(1.0, 0.5 * (np.trace(R) - 1.0))))
        if np.linalg.norm(t) + angle < settings.tolerance:
            break
    center = R_tot @ box.center + t_tot
    roll, pitch, yaw = euler_from_matrix(R_tot @ box.rotation)
    if settings.planar:
        roll, pitch = box.roll, box.pitch
        center[2] = box.z
    # keep angles on the branch of the input box
    roll = box.roll + float(wrap_pi(roll - box.roll))
    pitch = box.pitch + float(wrap_pi(pitch - box.pitch))
    yaw = box.yaw + float(wrap_pi(yaw - box.yaw))
    return BoxState(*center, box.l, box.w, box.h, roll, pitch, yaw), it


def icp_baseline(frames, track0: Track, settings: IcpSettings | None = None):
    """Per-frame ICP of the sampled box to its cloud, no trajectory coupling.

    Returns ``(track, skipped)`` where ``skipped`` lists the frames with fewer
    than 3 points, whose boxes are left unchanged.
    """
    settings = settings or IcpSettings()
    if len(frames) != len(track0):
        raise ValueError(f"track has {len(track0)} boxes but {len(frames)} frames were given")
    poses = track0.poses.copy()
    skipped = []
    for i, frame in enumerate(frames):
        pts = frame.points if isinstance(frame, PointFrame) else np.asarray(frame, dtype=float).reshape(-1, 3)
        if len(pts) < 3:
            skipped.append(i)
            continue
        box, _ = icp_box(pts, track0.box(i), settings)
        poses[i] = box.pose
    return Track(poses, track0.size.copy()), skipped
