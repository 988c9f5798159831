"""
JSON file formats for datasets, tracks and experiment reports, plus the
per-frame error CSV. Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import MetricsRow
from .geometry import PointFrame, Track


class DatasetError(ValueError):
    """Malformed or inconsistent dataset/track file."""


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def to_json(obj, compact: bool = False) -> str:
    # json formats floats with repr, which round-trips exactly
    if compact:
        return json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n"
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


@dataclass
class Dataset:
    meta: dict
    frames: list
    gt_track: Track
    initial_track: Track

    def __post_init__(self):
        n = len(self.frames)
        if len(self.gt_track) != n or len(self.initial_track) != n:
            raise DatasetError(f"length mismatch: {n} frames, {len(self.gt_track)} gt boxes, "
                               f"{len(self.initial_track)} initial boxes")
        for f in self.frames:
            if len(f.points) == 0:
                raise DatasetError(f"frame {f.index} is empty")

    @property
    def mode(self) -> str:
        return self.meta.get("mode", "3d")

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "frames": [{"t": int(f.index), "points": f.points.tolist()} for f in self.frames],
            "gt_track": self.gt_track.records().tolist(),
            "initial_track": self.initial_track.records().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        try:
            frames = [PointFrame(int(f["t"]), np.asarray(f["points"], dtype=float).reshape(-1, 3))
                      for f in d["frames"]]
            gt = track_from_records(d["gt_track"])
            initial = track_from_records(d["initial_track"])
            meta = dict(d.get("meta", {}))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DatasetError):
                raise
            raise DatasetError(f"malformed dataset: {exc}") from None
        return cls(meta, frames, gt, initial)


def track_from_records(records) -> Track:
    arr = np.asarray(records, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 9:
        raise DatasetError(f"box records must be rows of 9 numbers, got shape {arr.shape}")
    try:
        return Track.from_records(arr)
    except ValueError as exc:
        raise DatasetError(str(exc)) from None


def save_dataset(ds: Dataset, path) -> None:
    write_atomic(path, to_json(ds.to_dict(), compact=True))


def load_dataset(path) -> Dataset:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from None
    return Dataset.from_dict(data)


def save_track(track: Track, path, extra: dict | None = None) -> None:
    doc = {"track": track.records().tolist()}
    doc.update(extra or {})
    write_atomic(path, to_json(doc))


def load_track(path) -> Track:
    data = json.loads(Path(path).read_text())
    records = data["track"] if isinstance(data, dict) else data
    return track_from_records(records)


@dataclass
class ExperimentReport:
    initial: MetricsRow
    refined: MetricsRow
    baseline: MetricsRow | None
    loss_curve: list
    runtime: float
    config: dict
    method: str = "lbfgs"
    iterations: int = 0
    termination: str = ""
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("initial", "refined", "baseline"):
            row = getattr(self, key)
            d[key] = row.to_dict() if row is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        d = dict(d)
        for key in ("initial", "refined", "baseline"):
            if d.get(key) is not None:
                d[key] = MetricsRow.from_dict(d[key])
        return cls(**d)


def save_report(report: ExperimentReport, path) -> None:
    write_atomic(path, to_json(report.to_dict()))


def load_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


CSV_HEADER = ("frame", "dx", "dy", "dz", "droll", "dpitch", "dyaw", "iou")


def metrics_csv(row: MetricsRow, iou: str = "3d") -> str:
    """Per-frame CSV text; ``iou`` picks the 2d or 3d IoU column."""
    per_iou = row.per_frame_iou_3d if iou == "3d" else row.per_frame_iou_2d
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for frame, errs, v in zip(row.frames, row.per_frame_errors, per_iou):
        writer.writerow([frame, *[repr(float(e)) for e in errs], repr(float(v))])
    return buf.getvalue()
