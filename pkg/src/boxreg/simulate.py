"""
Synthetic data: a turning/rolling/pitching vehicle trajectory, a cuboid
vehicle scanned from a fixed sensor, random occlusion, noisy initial boxes
and farthest point sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoxState, PointFrame, Track, heading_from_angles, rotation_matrix

DEFAULT_SIZE = (4.7, 1.9, 1.7)

# streams for deriving independent per-frame generators from one base seed
_CLOUD, _OCCLUDE, _FPS, _PERTURB = 1, 2, 3, 4


def frame_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, int(index)])


@dataclass
class TrajectoryConfig:
    steps: int = 50
    speed: float = 5.0
    dt: float = 0.1
    seed: int = 0
    mode: str = "3d"
    # multiplies the yaw increment; 0 gives a straight path
    yaw_increment_scale: float = 1.0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 3:
            raise ValueError(f"steps (T) must be an integer >= 3, got {self.steps}")
        self.steps = int(self.steps)
        if not self.speed > 0:
            raise ValueError(f"speed must be > 0, got {self.speed}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.mode not in ("3d", "2d"):
            raise ValueError(f"mode must be '3d' or '2d', got {self.mode!r}")


@dataclass
class SensorModel:
    position: tuple = (4.0, -14.0, 4.0)
    spacing: float = 0.1
    noise_sigma: float = 0.01

    def __post_init__(self):
        self.position = tuple(float(v) for v in self.position)
        if len(self.position) != 3:
            raise ValueError("sensor position needs 3 coordinates")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class NoiseScales:
    """Standard deviations of the initial-box perturbation per pose parameter."""

    x: float = 0.392
    y: float = 0.124
    z: float = 0.082
    roll: float = 0.083
    pitch: float = 0.1
    yaw: float = 0.18

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if not v >= 0:
                raise ValueError(f"noise scale {k} must be >= 0, got {v}")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("x", "y", "z", "roll", "pitch", "yaw")}

    def as_array(self) -> np.ndarray:
        return np.array(list(self.as_dict().values()), dtype=float)


def trajectory_angles(steps: int, yaw_scale: float = 1.0):
    """Roll, pitch and yaw for t = 0..T, accumulated from zero.

    Returns three arrays of length T + 1.
    """
    T = steps
    t = np.arange(1, T + 1, dtype=float)
    phase = t * 2 * math.pi / T
    up_down = np.sign(np.cos(phase))
    turn = np.sign(np.sin(phase))
    d_roll = up_down * math.pi / (6 * T)
    d_pitch = up_down * math.pi / (3 * T)
    d_yaw = turn * 2 * math.pi / T * yaw_scale
    zero = np.zeros(1)
    return (np.concatenate([zero, np.cumsum(d_roll)]),
            np.concatenate([zero, np.cumsum(d_pitch)]),
            np.concatenate([zero, np.cumsum(d_yaw)]))


def gen_trajectory(cfg: TrajectoryConfig, size=DEFAULT_SIZE) -> Track:
    """Ground-truth track with ``cfg.steps`` boxes (t = 1..T).

    Angles follow the sign-switching increments above; the center moves
    ``speed * dt`` per step along the heading of the previous state. In 2d
    mode roll and pitch stay zero.
    """
    T = cfg.steps
    roll, pitch, yaw = trajectory_angles(T, cfg.yaw_increment_scale)
    if cfg.mode == "2d":
        roll = np.zeros_like(roll)
        pitch = np.zeros_like(pitch)
    step = cfg.speed * cfg.dt
    heading = heading_from_angles(pitch, yaw)
    centers = np.zeros((T + 1, 3))
    centers[0, 2] = 0.5 * float(size[2])
    for t in range(1, T + 1):
        centers[t] = centers[t - 1] + step * heading[t - 1]
    poses = np.column_stack([centers, roll, pitch, yaw])[1:]
    return Track(poses, size)


def gen_vehicle_cloud(size, sensor: SensorModel, box: BoxState, seed: int = 0) -> PointFrame:
    """Grid-sample the faces of ``box`` that face the sensor.

    Each visible face is covered by a regular grid (edges included) at
    roughly ``sensor.spacing``; Gaussian noise of ``sensor.noise_sigma`` is added in
    world coordinates.
    """
    size = np.asarray(size, dtype=float)
    half = 0.5 * size
    R = rotation_matrix(box.roll, box.pitch, box.yaw)
    center = box.center
    sensor_local = (np.asarray(sensor.position) - center) @ R
    if np.all(np.abs(sensor_local) <= half):
        raise ValueError("sensor is inside the box")

    chunks = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for sign in (1.0, -1.0):
            # outward normal . (sensor - face center) > 0, in local coordinates
            if sign * (sensor_local[axis] - sign * half[axis]) <= 0:
                continue
            nu = max(1, int(round(size[u] / sensor.spacing)))
            nv = max(1, int(round(size[v] / sensor.spacing)))
            # grid includes the face edges so every extent is observed
            gu = np.linspace(-half[u], half[u], nu + 1)
            gv = np.linspace(-half[v], half[v], nv + 1)
            uu, vv = np.meshgrid(gu, gv, indexing="ij")
            face = np.empty((uu.size, 3))
            face[:, axis] = sign * half[axis]
            face[:, u] = uu.ravel()
            face[:, v] = vv.ravel()
            chunks.append(face)
    local = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    pts = local @ R.T + center
    if sensor.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        pts = pts + rng.normal(0.0, sensor.noise_sigma, pts.shape)
    return PointFrame(0, pts)


def occlude(frame: PointFrame, fraction: float, seed: int = 0, min_points: int = 10) -> PointFrame:
    """Drop the points beyond a random plane, removing at most ``fraction``.

    The plane has a random orientation and a random offset; if it would
    cut away more than ``fraction`` of the points (or leave fewer than
    ``min_points``) it is pushed outward until it does not.
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    if len(frame.points) == 0:
        raise ValueError("cannot occlude an empty frame")
    plane = occlusion_plane(frame, fraction, seed, min_points)
    if plane is None:
        return PointFrame(frame.index, frame.points.copy())
    normal, offset = plane
    return PointFrame(frame.index, frame.points[frame.points @ normal <= offset])


def occlusion_plane(frame: PointFrame, fraction: float, seed: int = 0, min_points: int = 10):
    """The (normal, offset) that :func:`occlude` uses; None when nothing is cut."""
    pts = frame.points
    m = len(pts)
    max_removed = min(int(math.floor(fraction * m)), max(0, m - min_points))
    if max_removed == 0:
        return None
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    proj = pts @ normal
    offset = rng.uniform(proj.min(), proj.max())
    return normal, max(offset, np.sort(proj)[m - max_removed - 1])


def perturb_track(gt: Track, scales: NoiseScales, seed: int = 0) -> Track:
    """Add independent zero-mean Gaussian noise to every pose parameter."""
    rng = frame_rng(seed, _PERTURB)
    noise = rng.normal(size=gt.poses.shape) * scales.as_array()
    return Track(gt.poses + noise, gt.size.copy())


def fps_indices(points, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    pts = np.asarray(points, dtype=float)
    m = len(pts)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n >= m:
        return np.arange(m)
    chosen = np.empty(n, dtype=int)
    chosen[0] = start
    mind = np.sum((pts - pts[start]) ** 2, axis=1)
    # selected points are masked out so duplicates are never picked twice
    mind[start] = -1.0
    for i in range(1, n):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1))
        mind[nxt] = -1.0
    return chosen


def fps(frame: PointFrame, n: int, seed: int = 0, start: int | None = None) -> PointFrame:
    """Downsample ``frame`` to ``min(n, len(frame))`` points.

    The first point is drawn from ``seed`` unless ``start`` is given; the
    output keeps the selection order.
    """
    m = len(frame.points)
    if n >= m:
        return PointFrame(frame.index, frame.points.copy())
    if start is None:
        start = int(np.random.default_rng(seed).integers(m))
    idx = fps_indices(frame.points, n, start)
    return PointFrame(frame.index, frame.points[idx])


@dataclass
class SimulationConfig:
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    sensor: SensorModel = field(default_factory=SensorModel)
    noise: NoiseScales = field(default_factory=NoiseScales)
    size: tuple = DEFAULT_SIZE
    occlusion_fraction: float = 0.3
    points_per_frame: int = 512

    def __post_init__(self):
        self.size = tuple(float(v) for v in self.size)
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ValueError(f"size must be three positive extents, got {self.size}")
        if not 0 <= self.occlusion_fraction < 1:
            raise ValueError(f"occlusion_fraction must be in [0, 1), got {self.occlusion_fraction}")
        if int(self.points_per_frame) != self.points_per_frame or self.points_per_frame < 1:
            raise ValueError(f"points_per_frame must be a positive integer, got {self.points_per_frame}")
        self.points_per_frame = int(self.points_per_frame)


def simulate(cfg: SimulationConfig):
    """Generate (frames, gt_track, initial_track) for one seeded experiment.

    In 2d mode only x, y and yaw of the initial boxes are perturbed.
    """
    seed = cfg.trajectory.seed
    gt = gen_trajectory(cfg.trajectory, cfg.size)
    frames = []
    for i, box in enumerate(gt.boxes()):
        cloud = gen_vehicle_cloud(cfg.size, cfg.sensor, box, seed=frame_rng(seed, _CLOUD, i).integers(2**63))
        cloud = occlude(cloud, cfg.occlusion_fraction, seed=frame_rng(seed, _OCCLUDE, i).integers(2**63))
        cloud = fps(cloud, cfg.points_per_frame, seed=frame_rng(seed, _FPS, i).integers(2**63))
        frames.append(PointFrame(i, cloud.points))
    scales = cfg.noise
    if cfg.trajectory.mode == "2d":
        scales = NoiseScales(x=scales.x, y=scales.y, z=0.0, roll=0.0, pitch=0.0, yaw=scales.yaw)
    initial = perturb_track(gt, scales, seed)
    return frames, gt, initial
