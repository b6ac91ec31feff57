"""Turn raw frames into network inputs: binary voxel grids and normalized images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from adafusion.errors import ValidationError

Bounds = tuple[tuple[float, float, float], tuple[float, float, float]]

DEFAULT_BOUNDS: Bounds = ((-36.0, -36.0, -4.0), (36.0, 36.0, 20.0))
DEFAULT_RESOLUTION = (72, 72, 48)
DEFAULT_IMAGE_SIZE = (300, 400)

# ITU-R BT.601 luma weights; they sum to 1 so gray is affine-equivariant.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32).reshape(3, 1, 1)


@dataclass(frozen=True)
class VoxelGrid:
    occupancy: np.ndarray  # (1, X, Y, Z), float32 in {0, 1}
    bounds: Bounds

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.occupancy.shape[1:])


@dataclass(frozen=True)
class PreprocessConfig:
    bounds: Bounds = DEFAULT_BOUNDS
    resolution: tuple[int, int, int] = DEFAULT_RESOLUTION
    crop: tuple[int, int, int, int] | None = None  # top, left, height, width; None keeps the full image
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    ground_removal: bool = True
    ground_offset: float = 0.2
    ground_percentile: float = 5.0
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    saturation: tuple[float, float] = (0.8, 1.2)
    jitter_sigma: float = 0.05
    jitter_clip: float = 0.1


def remove_ground(points: np.ndarray, z_threshold: float) -> np.ndarray:
    """Drop points at or below ``z_threshold`` (gravity-aligned frame), preserving order."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts[pts[:, 2] > z_threshold]


def ground_threshold(points: np.ndarray, offset: float = 0.2, percentile: float = 5.0) -> float:
    """Ground height estimated as a low z-percentile, raised by ``offset``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return -np.inf
    return float(np.percentile(pts[:, 2], percentile)) + offset


def voxelize(
    points: np.ndarray,
    bounds: Bounds = DEFAULT_BOUNDS,
    resolution: tuple[int, int, int] = DEFAULT_RESOLUTION,
) -> VoxelGrid:
    """Binary occupancy: a cell is 1 iff at least one in-bounds point falls in it.

    Cell index is ``floor((p - min) / cell_size)``; points on the max face are
    clamped into the last cell and points outside the box are ignored.
    """
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    res = np.asarray(resolution, dtype=np.int64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise ValidationError(f"degenerate voxel bounds {bounds}")
    if res.shape != (3,) or np.any(res <= 0):
        raise ValidationError(f"resolution must be three positive ints, got {resolution}")
    occ = np.zeros((1, *res.tolist()), dtype=np.float32)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
    if len(pts):
        idx = np.floor((pts - lo) / ((hi - lo) / res)).astype(np.int64)
        idx = np.minimum(idx, res - 1)
        occ[0, idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(occ, (tuple(lo.tolist()), tuple(hi.tolist())))


def prepare_image(
    raw: np.ndarray,
    crop: tuple[int, int, int, int] | None = None,
    out_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
) -> np.ndarray:
    """Crop, bilinearly resize and map 8-bit values to [-1, 1]; returns float32 (3, H, W)."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValidationError(f"expected an HxWx3 RGB image, got shape {raw.shape}")
    h, w = raw.shape[:2]
    top, left, ch, cw = crop if crop is not None else (0, 0, h, w)
    if top < 0 or left < 0 or ch <= 0 or cw <= 0 or top + ch > h or left + cw > w:
        raise ValidationError(f"crop {crop} outside image extent {(h, w)}")
    x = torch.from_numpy(np.ascontiguousarray(raw[top : top + ch, left : left + cw], dtype=np.float32))
    x = x.permute(2, 0, 1)
    if (ch, cw) != tuple(out_size):
        x = F.interpolate(x[None], size=tuple(out_size), mode="bilinear", align_corners=False, antialias=True)[0]
    return (x.numpy() / 127.5 - 1.0).astype(np.float32)


def _factor(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def augment(
    image: np.ndarray,
    points: np.ndarray,
    rng: np.random.Generator,
    brightness: tuple[float, float] = (0.8, 1.2),
    contrast: tuple[float, float] = (0.8, 1.2),
    saturation: tuple[float, float] = (0.8, 1.2),
    jitter_sigma: float = 0.05,
    jitter_clip: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Photometric jitter on a normalized image plus clipped Gaussian point jitter.

    Each adjustment is written as ``x + (factor - 1) * (...)`` so a factor of 1
    is an exact identity.
    """
    img = np.asarray(image, dtype=np.float32)
    b = _factor(rng, brightness)
    c = _factor(rng, contrast)
    s = _factor(rng, saturation)
    # brightness scales intensity in [0, 1] space, i.e. about -1 here
    img = img + np.float32(b - 1.0) * (img + 1.0)
    mean_gray = np.float32((img * _LUMA).sum(axis=0).mean())
    img = img + np.float32(c - 1.0) * (img - mean_gray)
    gray = (img * _LUMA).sum(axis=0, keepdims=True)
    img = img + np.float32(s - 1.0) * (img - gray)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if jitter_sigma > 0:
        noise = np.clip(rng.normal(0.0, jitter_sigma, size=pts.shape), -jitter_clip, jitter_clip)
        pts = pts + noise
    return img, pts


class FramePreprocessor:
    """Applies a :class:`PreprocessConfig` to raw (image, cloud) payloads."""

    def __init__(self, config: PreprocessConfig | None = None):
        self.config = config or PreprocessConfig()

    def image(self, raw: np.ndarray) -> np.ndarray:
        return prepare_image(raw, self.config.crop, self.config.image_size)

    def cloud(self, raw: np.ndarray) -> np.ndarray:
        pts = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
        if self.config.ground_removal:
            pts = remove_ground(pts, ground_threshold(pts, self.config.ground_offset, self.config.ground_percentile))
        return pts

    def voxels(self, points: np.ndarray) -> np.ndarray:
        return voxelize(points, self.config.bounds, self.config.resolution).occupancy

    def augment(self, image: np.ndarray, points: np.ndarray, rng: np.random.Generator):
        cfg = self.config
        return augment(image, points, rng, cfg.brightness, cfg.contrast, cfg.saturation,
                       cfg.jitter_sigma, cfg.jitter_clip)
