"""Dataset ingestion: frame association, frame selection, region splits and pair mining.

Also holds the on-disk dataset layout::

    <root>/<sequence_id>/images/<timestamp>.png
    <root>/<sequence_id>/clouds/<timestamp>.xyz   # "x y z" per line, meters
    <root>/<sequence_id>/poses.csv                # timestamp,x,y,z
"""

from __future__ import annotations

import bisect
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from adafusion.errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Frame:
    """One timestamp-associated (image, point cloud) observation."""

    frame_id: str
    timestamp: float
    image_ref: str
    cloud_ref: str
    position: tuple[float, float, float]
    sequence_id: str = ""

    @property
    def xyz(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


@dataclass(frozen=True)
class PairLabel:
    frame_a: str
    frame_b: str
    y: int


@dataclass(frozen=True)
class TestBox:
    """Axis-aligned square test region in the ground plane."""

    __test__ = False  # keep pytest from collecting this as a test class

    center: tuple[float, float]
    side: float

    def contains(self, xy: np.ndarray) -> np.ndarray:
        half = 0.5 * self.side
        xy = np.atleast_2d(xy)
        return (np.abs(xy[:, 0] - self.center[0]) <= half) & (np.abs(xy[:, 1] - self.center[1]) <= half)


@dataclass
class DatasetSplit:
    train_frames: list[Frame]
    test_frames: list[Frame]
    test_boxes: list[TestBox] = field(default_factory=list)


def positions_of(frames: Sequence[Frame]) -> np.ndarray:
    if not frames:
        return np.zeros((0, 3))
    return np.array([f.position for f in frames], dtype=np.float64)


def _as_position(p) -> tuple[float, float, float]:
    p = [float(v) for v in p]
    if len(p) == 2:
        p.append(0.0)
    if len(p) != 3 or not all(np.isfinite(p)):
        raise ValidationError(f"position must be 2 or 3 finite coordinates, got {p}")
    return (p[0], p[1], p[2])


def _check_strictly_increasing(ts: Sequence[float], what: str) -> None:
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValidationError(f"{what} timestamps must be strictly increasing")


def associate_frames(
    image_index: Sequence[tuple[float, str]],
    cloud_index: Sequence[tuple[float, str]],
    max_dt: float,
    poses: np.ndarray | None = None,
    sequence_id: str = "",
) -> list[Frame]:
    """Pair every image with the nearest-in-time unused cloud within ``max_dt``.

    Images are visited in time order. A cloud equidistant from an image on both
    sides resolves to the earlier one. Unmatched images and clouds are dropped.
    Frame positions are linearly interpolated from ``poses`` (rows ``t, x, y, z``)
    at the cloud timestamp; without poses they are the origin.
    """
    if max_dt <= 0:
        raise ValidationError("max_dt must be positive")
    img_ts = [float(t) for t, _ in image_index]
    cld_ts = [float(t) for t, _ in cloud_index]
    _check_strictly_increasing(img_ts, "image")
    _check_strictly_increasing(cld_ts, "cloud")
    if poses is not None:
        poses = np.asarray(poses, dtype=np.float64).reshape(-1, 4)
        _check_strictly_increasing(list(poses[:, 0]), "pose")

    used = [False] * len(cld_ts)
    frames = []
    for t, image_ref in zip(img_ts, (r for _, r in image_index)):
        right = bisect.bisect_left(cld_ts, t)
        left = right - 1
        while left >= 0 and used[left]:
            left -= 1
        while right < len(cld_ts) and used[right]:
            right += 1
        best = None
        if left >= 0:
            best = left
        if right < len(cld_ts) and (best is None or cld_ts[right] - t < t - cld_ts[best]):
            best = right
        if best is None or abs(cld_ts[best] - t) > max_dt:
            continue
        used[best] = True
        tc = cld_ts[best]
        if poses is not None and len(poses):
            pos = tuple(float(np.interp(tc, poses[:, 0], poses[:, k])) for k in (1, 2, 3))
        else:
            pos = (0.0, 0.0, 0.0)
        frames.append(
            Frame(
                frame_id=f"{sequence_id}/{t:.6f}" if sequence_id else f"{t:.6f}",
                timestamp=t,
                image_ref=image_ref,
                cloud_ref=cloud_index[best][1],
                position=_as_position(pos),
                sequence_id=sequence_id,
            )
        )
    return frames


def select_frames_by_distance(frames: Sequence[Frame], spacing: float) -> list[Frame]:
    """Keep a frame once the path travelled since the last kept frame reaches ``spacing``."""
    if spacing <= 0:
        raise ValidationError("spacing must be positive")
    if not frames:
        return []
    _check_strictly_increasing([f.timestamp for f in frames], "frame")
    xyz = positions_of(frames)
    steps = np.linalg.norm(np.diff(xyz, axis=0), axis=1)
    kept = [frames[0]]
    travelled = 0.0
    for frame, step in zip(frames[1:], steps):
        travelled += step
        if travelled >= spacing:
            kept.append(frame)
            travelled = 0.0
    return kept


def split_regions(frames: Sequence[Frame], test_boxes: Sequence[TestBox]) -> DatasetSplit:
    """Assign frames inside any (closed) test box to the test set, the rest to training."""
    for box in test_boxes:
        if not box.side > 0:
            raise ValidationError(f"degenerate test box {box}")
    xy = positions_of(frames)[:, :2]
    inside = np.zeros(len(frames), dtype=bool)
    for box in test_boxes:
        inside |= box.contains(xy)
    train = [f for f, t in zip(frames, inside) if not t]
    test = [f for f, t in zip(frames, inside) if t]
    return DatasetSplit(train, test, list(test_boxes))


def mine_pair_indices(
    positions: np.ndarray,
    d_pos: float = 10.0,
    d_neg: float = 50.0,
    neg_cap: int | None = 20,
    rng: np.random.Generator | int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Index form of :func:`mine_pairs`; returns ``(positives, negatives)`` as (k, 2) arrays.

    Positives are unordered (``i < j``). With ``neg_cap=None`` negatives are the
    full unordered set; otherwise each query ``i`` gets up to ``neg_cap``
    partners drawn uniformly without replacement from its wrong matches.
    """
    if not d_pos < d_neg:
        raise ValidationError(f"need d_pos < d_neg, got {d_pos} >= {d_neg}")
    if neg_cap is not None and neg_cap < 0:
        raise ValidationError("neg_cap must be non-negative")
    rng = np.random.default_rng(rng)
    xyz = np.asarray(positions, dtype=np.float64)
    n = len(xyz)
    pos, neg = [], []
    for i in range(n):
        d = np.linalg.norm(xyz - xyz[i], axis=1)
        later = np.arange(i + 1, n)
        pos.append(np.stack([np.full(len(later), i), later], axis=1)[d[i + 1 :] <= d_pos])
        if neg_cap is None:
            js = later[d[i + 1 :] >= d_neg]
        else:
            cand = np.flatnonzero(d >= d_neg)
            js = rng.choice(cand, size=neg_cap, replace=False) if len(cand) > neg_cap else cand
        neg.append(np.stack([np.full(len(js), i), js], axis=1))
    empty = np.zeros((0, 2), dtype=np.int64)
    pos_arr = np.concatenate(pos).astype(np.int64) if pos else empty
    neg_arr = np.concatenate(neg).astype(np.int64) if neg else empty
    return pos_arr, neg_arr


def mine_pairs(
    frames: Sequence[Frame],
    d_pos: float = 10.0,
    d_neg: float = 50.0,
    neg_cap: int | None = 20,
    rng: np.random.Generator | int | None = None,
) -> list[PairLabel]:
    """True-match (y=+1, distance <= d_pos) and wrong-match (y=-1, distance >= d_neg) pairs."""
    pos, neg = mine_pair_indices(positions_of(frames), d_pos, d_neg, neg_cap, rng)
    ids = [f.frame_id for f in frames]
    return [PairLabel(ids[i], ids[j], 1) for i, j in pos] + [PairLabel(ids[i], ids[j], -1) for i, j in neg]


def count_pairs(frames: Sequence[Frame], d_pos: float = 10.0, d_neg: float = 50.0) -> tuple[int, int]:
    """Exhaustive (unordered) true-match and wrong-match counts."""
    pos, neg = mine_pair_indices(positions_of(frames), d_pos, d_neg, neg_cap=None)
    return len(pos), len(neg)


# --------------------------------------------------------------------------- disk layout


def _stamp(t: float) -> str:
    return f"{t:.6f}"


def _timestamped_files(directory: Path, suffix: str) -> list[tuple[float, str]]:
    if not directory.is_dir():
        return []
    out = []
    for p in directory.iterdir():
        if p.suffix != suffix:
            continue
        try:
            out.append((float(p.stem), str(p)))
        except ValueError:
            log.warning("skipping %s: file stem is not a timestamp", p)
    return sorted(out)


def read_poses(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append([float(rec["timestamp"]), float(rec["x"]), float(rec["y"]), float(rec["z"])])
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def list_sequences(root: str | Path) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def load_sequence(root: str | Path, sequence_id: str, max_dt: float = 0.1) -> list[Frame]:
    """Associate the images and clouds of one on-disk sequence into frames."""
    seq_dir = Path(root) / sequence_id
    if not seq_dir.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {seq_dir}")
    images = _timestamped_files(seq_dir / "images", ".png")
    clouds = _timestamped_files(seq_dir / "clouds", ".xyz")
    pose_path = seq_dir / "poses.csv"
    poses = read_poses(pose_path) if pose_path.exists() else None
    if images and clouds and poses is None:
        raise FileNotFoundError(f"missing {pose_path}")
    if not images or not clouds:
        log.warning("sequence %s has %d images and %d clouds", sequence_id, len(images), len(clouds))
    return associate_frames(images, clouds, max_dt, poses=poses, sequence_id=sequence_id)


def read_cloud(path: str | Path) -> np.ndarray:
    text = Path(path).read_text()
    if not text.strip():
        return np.zeros((0, 3))
    return np.loadtxt(text.splitlines(), dtype=np.float64, ndmin=2).reshape(-1, 3)


def write_cloud(path: str | Path, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt="%.4f")


def read_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def write_sequence(
    root: str | Path,
    sequence_id: str,
    frames: Sequence[Frame],
    images: dict[str, np.ndarray],
    clouds: dict[str, np.ndarray],
) -> None:
    """Write frames (with in-memory payloads keyed by ref) in the on-disk layout."""
    seq_dir = Path(root) / sequence_id
    (seq_dir / "images").mkdir(parents=True, exist_ok=True)
    (seq_dir / "clouds").mkdir(parents=True, exist_ok=True)
    with open(seq_dir / "poses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "x", "y", "z"])
        for f in frames:
            w.writerow([_stamp(f.timestamp), *(repr(v) for v in f.position)])
            write_image(seq_dir / "images" / f"{_stamp(f.timestamp)}.png", images[f.image_ref])
            write_cloud(seq_dir / "clouds" / f"{_stamp(f.timestamp)}.xyz", clouds[f.cloud_ref])


class DiskStore:
    """Resolves frame refs that are file paths."""

    def image(self, ref: str) -> np.ndarray:
        return read_image(ref)

    def cloud(self, ref: str) -> np.ndarray:
        return read_cloud(ref)


@dataclass
class MemoryStore:
    """Resolves frame refs against in-memory payloads (synthetic data)."""

    images: dict[str, np.ndarray]
    clouds: dict[str, np.ndarray]

    def image(self, ref: str) -> np.ndarray:
        return self.images[ref]

    def cloud(self, ref: str) -> np.ndarray:
        return self.clouds[ref]


# --------------------------------------------------------------------------- index files

FRAME_FIELDS = ["frame_id", "sequence_id", "timestamp", "image_ref", "cloud_ref", "x", "y", "z", "split"]


def write_frame_index(path: str | Path, split: DatasetSplit) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRAME_FIELDS)
        for name, frames in (("train", split.train_frames), ("test", split.test_frames)):
            for f in frames:
                w.writerow([f.frame_id, f.sequence_id, _stamp(f.timestamp), f.image_ref, f.cloud_ref,
                            *(f"{v:.4f}" for v in f.position), name])


def read_frame_index(path: str | Path) -> DatasetSplit:
    train, test = [], []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            f = Frame(
                frame_id=rec["frame_id"],
                timestamp=float(rec["timestamp"]),
                image_ref=rec["image_ref"],
                cloud_ref=rec["cloud_ref"],
                position=_as_position((rec["x"], rec["y"], rec["z"])),
                sequence_id=rec["sequence_id"],
            )
            (test if rec["split"] == "test" else train).append(f)
    return DatasetSplit(train, test)


def write_pairs(path: str | Path, pairs: Iterable[PairLabel]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_a", "frame_b", "y"])
        for p in pairs:
            w.writerow([p.frame_a, p.frame_b, p.y])
