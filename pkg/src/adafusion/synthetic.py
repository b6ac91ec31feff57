"""Desk-scale synthetic visual-LiDAR datasets with per-place modality quality.

Each place has a profile saying which sensor sees something distinctive:

* ``visual_rich``: textured, place-specific image; corridor-like cloud whose
  wall offsets and clutter change on every visit.
* ``lidar_rich``: place-specific 3D structure; dark, low-contrast image with
  random glare blobs on every visit.
* ``both_rich`` / ``both_poor``: both informative / neither.

Sequence ``k`` is the k-th traversal of all places, so ``n_revisits + 1``
sequences come out. Clouds are sensor-centred with the ground at z = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from adafusion.data import Frame, TestBox
from adafusion.errors import ValidationError
from adafusion.preprocess import PreprocessConfig

PROFILES = ("visual_rich", "lidar_rich", "both_rich", "both_poor")

PLACE_SPACING = 80.0
PLACE_JITTER = 10.0  # keeps neighbours >= 60 m apart
VISIT_RADIUS = 2.5  # visits of one place stay within 5 m of each other
EXTENT = 16.0  # half-width of the simulated scene, meters


@dataclass(frozen=True)
class SyntheticSpec:
    n_places: int = 100
    n_revisits: int = 3
    profiles: tuple[str, ...] | str = "mixed"  # one per place, a single profile name, or "mixed"
    seed: int = 0
    image_shape: tuple[int, int] = (48, 64)
    noise_images: bool = False  # every image is pure noise (no place information)

    def place_profiles(self) -> list[str]:
        if isinstance(self.profiles, str):
            if self.profiles == "mixed":
                return [PROFILES[i % len(PROFILES)] for i in range(self.n_places)]
            return [self.profiles] * self.n_places
        if len(self.profiles) != self.n_places:
            raise ValidationError("need exactly one profile per place")
        return list(self.profiles)


class SyntheticDataset(NamedTuple):
    frames: list[Frame]
    images: dict[str, np.ndarray]
    clouds: dict[str, np.ndarray]
    places: np.ndarray  # (n_places, 2) centres
    profiles: list[str]


def synthetic_preprocess_config() -> PreprocessConfig:
    """Voxel bounds and image size matched to the synthetic scenes (2 x 2 x 1 m cells)."""
    return PreprocessConfig(
        bounds=((-EXTENT, -EXTENT, -1.0), (EXTENT, EXTENT, 7.0)),
        resolution=(16, 16, 8),
        crop=(0, 0, 40, 64),  # bottom rows hold the "vehicle hood"
        image_size=(40, 56),
    )


def _layout(n: int, rng: np.random.Generator) -> np.ndarray:
    cols = math.ceil(math.sqrt(n))
    pts = []
    for i in range(n):
        r, c = divmod(i, cols)
        c = c if r % 2 == 0 else cols - 1 - c  # serpentine route
        pts.append((c * PLACE_SPACING, r * PLACE_SPACING))
    return np.asarray(pts) + rng.uniform(-PLACE_JITTER / 2, PLACE_JITTER / 2, size=(n, 2))


# --------------------------------------------------------------------------- images


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Random field on a coarse grid, bilinearly upsampled; values in [0, 1]."""
    coarse = rng.random((cells + 1, cells + 1))
    yy = np.linspace(0, cells, h)
    xx = np.linspace(0, cells, w)
    y0 = np.minimum(yy.astype(int), cells - 1)
    x0 = np.minimum(xx.astype(int), cells - 1)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    c = coarse
    return ((1 - fy) * (1 - fx) * c[y0][:, x0] + (1 - fy) * fx * c[y0][:, x0 + 1]
            + fy * (1 - fx) * c[y0 + 1][:, x0] + fy * fx * c[y0 + 1][:, x0 + 1])


def _place_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """High-contrast canvas (h, w + 12, 3) of stripes and coloured blocks."""
    W = w + 12
    yy, xx = np.mgrid[0:h, 0:W]
    img = np.empty((h, W, 3))
    base = rng.uniform(40, 215, size=3)
    for ch in range(3):
        freq = rng.uniform(0.08, 0.35, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[..., ch] = base[ch] + 60 * np.sin(freq[0] * xx + freq[1] * yy + phase)
    for _ in range(rng.integers(3, 6)):
        y, x = rng.integers(0, h - 8), rng.integers(0, W - 8)
        bh, bw = rng.integers(6, h // 2), rng.integers(6, W // 3)
        img[y : y + bh, x : x + bw] = rng.uniform(0, 255, size=3)
    return img


def _visit_image(texture: np.ndarray | None, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    if texture is not None:
        shift = 6 + int(rng.integers(-3, 4))
        img = texture[:, shift : shift + w] * rng.uniform(0.85, 1.15) + rng.normal(0, 4, size=(h, w, 3))
    else:
        # dark, low contrast, with glare that changes on every visit
        img = 25 + 10 * _smooth_field(rng, h, w, 3)[..., None] + rng.normal(0, 5, size=(h, w, 3))
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(4, 12)
            yy, xx = np.mgrid[0:h, 0:w]
            img += rng.uniform(60, 160) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
    return img


def _noise_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = 255 * _smooth_field(rng, h, w, int(rng.integers(2, 6)))[..., None] * rng.random(3)
    return img + rng.uniform(-60, 60, size=(h, w, 3))


def _hood(img: np.ndarray, h_keep: int) -> np.ndarray:
    img = img.copy()
    img[h_keep:] = 90.0
    return img


# --------------------------------------------------------------------------- clouds


def _box_points(rng: np.random.Generator, center, size, height, n) -> np.ndarray:
    """Points on the vertical faces and roof of a box standing on the ground."""
    sx, sy = size
    face = rng.integers(0, 5, size=n)
    x = (rng.random(n) - 0.5) * sx
    y = (rng.random(n) - 0.5) * sy
    x = np.select([face == 0, face == 1], [-sx / 2, sx / 2], x)
    y = np.select([face == 2, face == 3], [-sy / 2, sy / 2], y)
    z = np.where(face == 4, height, rng.random(n) * height)
    return np.stack([x + center[0], y + center[1], z], axis=1)


def _ground(rng: np.random.Generator, n: int = 600) -> np.ndarray:
    xy = rng.uniform(-EXTENT, EXTENT, size=(n, 2))
    return np.column_stack([xy, rng.normal(0, 0.03, size=n)])


def _place_structure(rng: np.random.Generator) -> list[tuple]:
    objs = []
    for _ in range(rng.integers(6, 11)):
        objs.append((rng.uniform(-EXTENT + 3, EXTENT - 3, size=2), rng.uniform(1.0, 4.5, size=2),
                     rng.uniform(1.5, 6.5)))
    return objs


def _visit_cloud(structure: list[tuple] | None, offset: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    parts = [_ground(rng)]
    if structure is not None:
        for center, size, height in structure:
            parts.append(_box_points(rng, center - offset, size, height, 120))
    else:
        # corridor: two long walls, lateral placement and clutter differ per visit
        half = rng.uniform(3.0, 6.0)
        shift = rng.uniform(-2.0, 2.0)
        for side in (-1, 1):
            n = 400
            parts.append(np.column_stack([rng.uniform(-EXTENT, EXTENT, n),
                                          np.full(n, shift + side * half), rng.uniform(0, 3.0, n)]))
        for _ in range(rng.integers(1, 4)):
            parts.append(_box_points(rng, rng.uniform(-EXTENT + 2, EXTENT - 2, size=2),
                                     rng.uniform(0.5, 2.0, size=2), rng.uniform(0.5, 2.5), 80))
    pts = np.concatenate(parts)
    pts = pts + rng.normal(0, 0.05, size=pts.shape)
    keep = rng.random(len(pts)) > 0.1
    return np.round(pts[keep], 4)


def generate_synthetic_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """Pure function of ``spec``: the same spec always yields identical arrays."""
    if spec.n_places < 2:
        raise ValidationError("need at least two places")
    if spec.n_revisits < 0:
        raise ValidationError("n_revisits must be non-negative")
    profiles = spec.place_profiles()
    unknown = set(profiles) - set(PROFILES)
    if unknown:
        raise ValidationError(f"unknown profiles {sorted(unknown)}")
    h, w = spec.image_shape
    h_keep = h - h // 6
    root = np.random.SeedSequence(spec.seed)
    layout_ss, place_ss, visit_ss = root.spawn(3)
    places = _layout(spec.n_places, np.random.default_rng(layout_ss))
    place_rngs = [np.random.default_rng(s) for s in place_ss.spawn(spec.n_places)]
    textures, structures = [], []
    for prof, prng in zip(profiles, place_rngs):
        textures.append(_place_texture(prng, h, w) if prof in ("visual_rich", "both_rich") else None)
        structures.append(_place_structure(prng) if prof in ("lidar_rich", "both_rich") else None)

    frames, images, clouds = [], {}, {}
    visit_seqs = visit_ss.spawn(spec.n_revisits + 1)
    for k, seq_ss in enumerate(visit_seqs):
        seq = f"seq{k:02d}"
        rng = np.random.default_rng(seq_ss)
        for i in range(spec.n_places):
            r = VISIT_RADIUS * math.sqrt(rng.random())
            theta = rng.uniform(0, 2 * np.pi)
            offset = np.array([r * math.cos(theta), r * math.sin(theta)])
            pos = places[i] + offset
            t = 1000.0 * k + 10.0 * i
            ref = f"{seq}/{t:.6f}"
            if spec.noise_images:
                img = _noise_image(rng, h, w)
            else:
                img = _visit_image(textures[i], rng, h, w)
            images[ref] = np.clip(np.rint(_hood(img, h_keep)), 0, 255).astype(np.uint8)
            clouds[ref] = _visit_cloud(structures[i], offset, rng)
            frames.append(Frame(ref, t, ref, ref, (float(pos[0]), float(pos[1]), 0.0), seq))
    return SyntheticDataset(frames, images, clouds, places, profiles)


def place_test_boxes(places: np.ndarray, indices, side: float = 60.0) -> list[TestBox]:
    """Square test regions around chosen places; side 60 m never reaches a neighbouring place."""
    return [TestBox((float(places[i, 0]), float(places[i, 1])), side) for i in indices]
