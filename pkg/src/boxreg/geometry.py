"""
Oriented-box geometry: Euler rotations, corners, face planes and
point/box frame transforms.

Rotations are composed as R = Rz(yaw) @ Ry(pitch) @ Rx(roll), so the box
heading (local +x axis) in world coordinates is
[cos(pitch) cos(yaw), cos(pitch) sin(yaw), -sin(pitch)].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# face order used throughout: +x, -x, +y, -y, +z, -z
FACE_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")


@dataclass(frozen=True)
class BoxState:
    """One oriented box: center, extents along local axes, roll/pitch/yaw."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"box has non-finite fields: {vals}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got {(self.l, self.w, self.h)}")

    @classmethod
    def from_array(cls, arr) -> "BoxState":
        """Build from a 9-record [x, y, z, l, w, h, roll, pitch, yaw]."""
        a = [float(v) for v in arr]
        if len(a) != 9:
            raise ValueError(f"box record needs 9 numbers, got {len(a)}")
        return cls(*a)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h,
                         self.roll, self.pitch, self.yaw], dtype=float)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @property
    def size(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h], dtype=float)

    @property
    def half_size(self) -> np.ndarray:
        return 0.5 * self.size

    @property
    def pose(self) -> np.ndarray:
        """The six free parameters (x, y, z, roll, pitch, yaw)."""
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw], dtype=float)

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.roll, self.pitch, self.yaw)


@dataclass(frozen=True)
class Plane:
    """a*x + b*y + c*z + d = 0 with (a, b, c) a unit outward normal."""

    a: float
    b: float
    c: float
    d: float

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=float)

    def signed_distance(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.normal + self.d


@dataclass
class PointFrame:
    """Point cloud observed at integer timestamp ``index``."""

    index: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"frame {self.index} has non-finite coordinates")
        self.points = pts

    def __len__(self):
        return len(self.points)


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(b: float) -> np.ndarray:
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(g: float) -> np.ndarray:
    c, s = math.cos(g), math.sin(g)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def rotation_matrix_derivatives(roll: float, pitch: float, yaw: float):
    """Partial derivatives of :func:`rotation_matrix` w.r.t. roll, pitch, yaw.

    Returns an array of shape (3, 3, 3) indexed [angle, row, col].
    """
    ca, sa = math.cos(roll), math.sin(roll)
    cb, sb = math.cos(pitch), math.sin(pitch)
    cg, sg = math.cos(yaw), math.sin(yaw)
    rx, ry, rz = rot_x(roll), rot_y(pitch), rot_z(yaw)
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sa, -ca], [0.0, ca, -sa]])
    dry = np.array([[-sb, 0.0, cb], [0.0, 0.0, 0.0], [-cb, 0.0, -sb]])
    drz = np.array([[-sg, -cg, 0.0], [cg, -sg, 0.0], [0.0, 0.0, 0.0]])
    return np.stack([rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx])


def euler_from_matrix(R: np.ndarray):
    """Invert :func:`rotation_matrix`; returns (roll, pitch, yaw).

    Pitch is taken in [-pi/2, pi/2]. At gimbal lock roll is set to 0.
    """
    R = np.asarray(R, dtype=float)
    sb = -np.clip(R[2, 0], -1.0, 1.0)
    pitch = math.asin(sb)
    if abs(R[2, 0]) < 1.0 - 1e-12:
        roll = math.atan2(R[2, 1], R[2, 2])
        yaw = math.atan2(R[1, 0], R[0, 0])
    else:
        roll = 0.0
        yaw = math.atan2(-R[0, 1], R[1, 1])
    return roll, pitch, yaw


def corners(box: BoxState) -> np.ndarray:
    """The 8 corners in world coordinates, shape (8, 3)."""
    signs = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float)
    local = signs * box.half_size
    return local @ box.rotation.T + box.center


def face_planes(box: BoxState) -> list[Plane]:
    """Six outward face planes, ordered +x, -x, +y, -y, +z, -z."""
    R = box.rotation
    c = box.center
    half = box.half_size
    planes = []
    for axis in range(3):
        n = R[:, axis]
        for sign in (1.0, -1.0):
            normal = sign * n
            d = -(normal @ c) - half[axis]
            planes.append(Plane(*normal, d))
    return planes


def point_plane_distance(p, plane: Plane):
    """Unsigned distance from point(s) ``p`` to ``plane``."""
    return np.abs(plane.signed_distance(p))


def world_to_box(p, box: BoxState) -> np.ndarray:
    """Express world point(s) in box-local coordinates: R^T (p - center)."""
    p = np.asarray(p, dtype=float)
    return (p - box.center) @ box.rotation


def box_to_world(q, box: BoxState) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q @ box.rotation.T + box.center


def point_in_box(p, box: BoxState):
    """Inside-or-on-boundary test; works on a single point or an (M, 3) array."""
    q = world_to_box(p, box)
    return np.all(np.abs(q) <= box.half_size, axis=-1)


def visible_faces(frame: PointFrame, box: BoxState) -> np.ndarray:
    """Pick the face per box axis on the side of the point mass center.

    Returns signs of shape (3,), +1 for the +axis face and -1 for the -axis
    face. An exactly centered mass picks +axis.
    """
    pts = frame.points if isinstance(frame, PointFrame) else np.asarray(frame, dtype=float)
    if len(pts) == 0:
        raise ValueError("no points for visibility")
    mass_local = world_to_box(pts.mean(axis=0), box)
    return np.where(mass_local < 0.0, -1.0, 1.0)


def wrap_angle(theta):
    """Map an angle into [-pi/2, pi/2) modulo pi."""
    return np.mod(np.asarray(theta, dtype=float) + math.pi / 2, math.pi) - math.pi / 2


def wrap_pi(theta):
    """Map an angle into [-pi, pi) modulo 2 pi."""
    return np.mod(np.asarray(theta, dtype=float) + math.pi, 2 * math.pi) - math.pi


def heading_unit(box: BoxState) -> np.ndarray:
    """Box local +x axis in world coordinates."""
    return heading_from_angles(box.pitch, box.yaw)


def heading_from_angles(pitch, yaw) -> np.ndarray:
    cb = np.cos(pitch)
    return np.stack([cb * np.cos(yaw), cb * np.sin(yaw), -np.sin(pitch)], axis=-1)


@dataclass
class Track:
    """Boxes of one rigid object over time.

    ``poses`` has shape (N, 6) with columns x, y, z, roll, pitch, yaw; all
    boxes share ``size`` = (l, w, h).
    """

    poses: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        self.poses = np.array(self.poses, dtype=float).reshape(-1, 6)
        self.size = np.array(self.size, dtype=float).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError(f"track size must be positive, got {self.size}")
        if not (np.all(np.isfinite(self.poses)) and np.all(np.isfinite(self.size))):
            raise ValueError("track has non-finite values")

    def __len__(self):
        return len(self.poses)

    def box(self, i: int) -> BoxState:
        x, y, z, a, b, g = self.poses[i]
        return BoxState(x, y, z, *self.size, a, b, g)

    def boxes(self) -> list[BoxState]:
        return [self.box(i) for i in range(len(self))]

    @classmethod
    def from_boxes(cls, boxes) -> "Track":
        boxes = list(boxes)
        if not boxes:
            raise ValueError("empty track")
        size = boxes[0].size
        for b in boxes[1:]:
            if not np.array_equal(b.size, size):
                raise ValueError("all boxes of a track must share one size")
        return cls(np.array([b.pose for b in boxes]), size)

    def records(self) -> np.ndarray:
        """(N, 9) array of [x, y, z, l, w, h, roll, pitch, yaw] rows."""
        n = len(self)
        out = np.empty((n, 9))
        out[:, :3] = self.poses[:, :3]
        out[:, 3:6] = self.size
        out[:, 6:] = self.poses[:, 3:]
        return out

    @classmethod
    def from_records(cls, records) -> "Track":
        rec = np.asarray(records, dtype=float).reshape(-1, 9)
        if len(rec) == 0:
            raise ValueError("empty track")
        size = rec[0, 3:6]
        if not np.all(rec[:, 3:6] == size):
            raise ValueError("all boxes of a track must share one size")
        return cls(np.hstack([rec[:, :3], rec[:, 6:]]), size)

    def copy(self) -> "Track":
        return Track(self.poses.copy(), self.size.copy())
