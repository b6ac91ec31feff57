"""Descriptor databases, exact KNN retrieval and recall@N evaluation."""

from __future__ import annotations

import csv
import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.spatial.distance import cdist

from adafusion.data import Frame, positions_of
from adafusion.errors import FormatError, ValidationError
from adafusion.preprocess import FramePreprocessor

log = logging.getLogger(__name__)

DB_FORMAT_VERSION = 1
_METRICS = {"l1": "cityblock", "l2": "euclidean"}


@dataclass(frozen=True)
class DescriptorDB:
    descriptors: np.ndarray  # (n, 2*C1)
    alphas: np.ndarray  # (n, 2)
    positions: np.ndarray  # (n, 3)
    frame_ids: np.ndarray  # (n,) str
    sequence_ids: np.ndarray  # (n,) str
    built_from: str = ""

    def __post_init__(self):
        n = len(self.frame_ids)
        for name in ("descriptors", "alphas", "positions", "sequence_ids"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        for name in ("descriptors", "alphas", "positions", "frame_ids", "sequence_ids"):
            arr = np.array(getattr(self, name), copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.frame_ids)

    def subset(self, mask: np.ndarray) -> "DescriptorDB":
        return DescriptorDB(self.descriptors[mask], self.alphas[mask], self.positions[mask],
                            self.frame_ids[mask], self.sequence_ids[mask], self.built_from)

    def sequence(self, sequence_id: str) -> "DescriptorDB":
        return self.subset(self.sequence_ids == sequence_id)

    @property
    def sequences(self) -> list[str]:
        return sorted(set(self.sequence_ids.tolist()))

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, format_version=np.array(DB_FORMAT_VERSION), descriptors=self.descriptors,
                     alphas=self.alphas, positions=self.positions, frame_ids=self.frame_ids,
                     sequence_ids=self.sequence_ids, built_from=np.array(self.built_from))

    @classmethod
    def load(cls, path: str | Path) -> "DescriptorDB":
        try:
            with np.load(path, allow_pickle=False) as z:
                version = int(z["format_version"])
                if version != DB_FORMAT_VERSION:
                    raise FormatError(f"{path}: descriptor DB format {version}, expected {DB_FORMAT_VERSION}")
                return cls(z["descriptors"], z["alphas"], z["positions"], z["frame_ids"],
                           z["sequence_ids"], str(z["built_from"]))
        except (FormatError, FileNotFoundError):
            raise
        except Exception as exc:
            raise FormatError(f"{path}: not a readable descriptor DB ({exc})") from exc


def empty_db(dim: int = 0, built_from: str = "") -> DescriptorDB:
    return DescriptorDB(np.zeros((0, dim), np.float32), np.zeros((0, 2), np.float32), np.zeros((0, 3)),
                        np.array([], dtype=str), np.array([], dtype=str), built_from)


def model_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@torch.no_grad()
def build_database(
    frames: Sequence[Frame],
    model: torch.nn.Module,
    store,
    preprocessor: FramePreprocessor | None = None,
    batch_size: int = 32,
    built_from: str | None = None,
) -> DescriptorDB:
    """Embed frames in inference mode. Frames that fail to preprocess are skipped with a warning."""
    pre = preprocessor or FramePreprocessor()
    was_training = model.training
    model.eval()
    kept, images, voxels = [], [], []
    for f in frames:
        try:
            images.append(pre.image(store.image(f.image_ref)))
            voxels.append(pre.voxels(pre.cloud(store.cloud(f.cloud_ref))))
            kept.append(f)
        except Exception as exc:  # one bad frame must not sink the whole pass
            log.warning("skipping frame %s: %s", f.frame_id, exc)
            del images[len(kept):], voxels[len(kept):]
    dtype = next(model.parameters()).dtype
    desc, alpha = [], []
    for start in range(0, len(kept), batch_size):
        img = torch.from_numpy(np.stack(images[start : start + batch_size])).to(dtype)
        vox = torch.from_numpy(np.stack(voxels[start : start + batch_size])).to(dtype)
        out = model(img, vox)
        desc.append(out.descriptor.numpy())
        alpha.append(out.alpha.numpy())
    model.train(was_training)
    tag = model_hash(model) if built_from is None else built_from
    if not kept:
        return empty_db(model.config.descriptor_dim, tag)
    return DescriptorDB(np.concatenate(desc), np.concatenate(alpha), positions_of(kept),
                        np.array([f.frame_id for f in kept]), np.array([f.sequence_id for f in kept]), tag)


def descriptor_distances(queries: np.ndarray, db: np.ndarray, metric: str = "l1") -> np.ndarray:
    if metric not in _METRICS:
        raise ValidationError(f"metric must be one of {sorted(_METRICS)}, got {metric!r}")
    return cdist(np.atleast_2d(queries).astype(np.float64), np.atleast_2d(db).astype(np.float64), _METRICS[metric])


def _rank(dist_row: np.ndarray, frame_ids: np.ndarray) -> np.ndarray:
    return np.lexsort((frame_ids, dist_row))


def knn_query(db: DescriptorDB, query: np.ndarray, n: int, metric: str = "l1") -> tuple[list[str], np.ndarray]:
    """Top-``n`` frame ids by ascending distance (ties by frame id), with their distances."""
    if len(db) == 0:
        raise ValidationError("cannot query an empty descriptor DB")
    if not 1 <= n <= len(db):
        raise ValidationError(f"n must be in [1, {len(db)}], got {n}")
    d = descriptor_distances(query, db.descriptors, metric)[0]
    order = _rank(d, db.frame_ids)[:n]
    return db.frame_ids[order].tolist(), d[order]


def one_percent_n(db_size: int) -> int:
    return max(1, math.ceil(0.01 * db_size))


@dataclass
class RecallResult:
    recall_at: dict[int, float]
    ar1: float
    ar1pct: float
    n_queries: int
    query_seq: str = ""
    db_seq: str = ""
    n_one_percent: int = 1


def first_hit_ranks(queries: DescriptorDB, db: DescriptorDB, d_tp: float = 20.0, metric: str = "l1") -> np.ndarray:
    """0-based rank of the first true positive per query; -1 where the DB holds none."""
    if len(queries) == 0:
        return np.zeros(0, dtype=np.int64)
    if len(db) == 0:
        return np.full(len(queries), -1, dtype=np.int64)
    dist = descriptor_distances(queries.descriptors, db.descriptors, metric)
    geo = cdist(queries.positions, db.positions)
    ranks = np.full(len(queries), -1, dtype=np.int64)
    for i in range(len(queries)):
        tp = geo[i] <= d_tp
        if tp.any():
            ranks[i] = int(np.flatnonzero(tp[_rank(dist[i], db.frame_ids)])[0])
    return ranks


def recall_at_n(
    queries: DescriptorDB,
    db: DescriptorDB,
    ns: Sequence[int] = (1,),
    d_tp: float = 20.0,
    metric: str = "l1",
) -> RecallResult:
    """Fraction of queries with a true positive (within ``d_tp`` meters) in the top N.

    Queries without any true positive in the DB are left out of the denominator.
    """
    ranks = first_hit_ranks(queries, db, d_tp, metric)
    valid = ranks >= 0
    n1pct = one_percent_n(len(db))
    wanted = sorted(set(int(n) for n in ns) | {1, n1pct})
    if valid.any():
        recall = {n: float(np.mean(ranks[valid] < n)) for n in wanted}
    else:
        recall = {n: float("nan") for n in wanted}
    seq = lambda d: d.sequences[0] if len(d.sequences) == 1 else ""  # noqa: E731
    return RecallResult(recall, recall[1], recall[n1pct], int(valid.sum()), seq(queries), seq(db), n1pct)


@dataclass
class Combination:
    seq_a: str
    seq_b: str
    roles: tuple[RecallResult, RecallResult]

    @property
    def ar1(self) -> float:
        return float(np.nanmean([r.ar1 for r in self.roles])) if self._any_valid else float("nan")

    @property
    def ar1pct(self) -> float:
        return float(np.nanmean([r.ar1pct for r in self.roles])) if self._any_valid else float("nan")

    @property
    def _any_valid(self) -> bool:
        return any(r.n_queries for r in self.roles)


@dataclass
class SuiteSummary:
    combinations: list[Combination] = field(default_factory=list)

    @property
    def ar1(self) -> float:
        vals = [c.ar1 for c in self.combinations if not math.isnan(c.ar1)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def ar1pct(self) -> float:
        vals = [c.ar1pct for c in self.combinations if not math.isnan(c.ar1pct)]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["combination", "query_seq", "db_seq", "N", "recall"])
            for k, combo in enumerate(self.combinations):
                for r in combo.roles:
                    for n, rec in sorted(r.recall_at.items()):
                        w.writerow([k, r.query_seq, r.db_seq, n, repr(rec)])

    def summary_text(self) -> str:
        lines = [f"combinations: {len(self.combinations)}",
                 f"AR@1:  {100 * self.ar1:.2f}%",
                 f"AR@1%: {100 * self.ar1pct:.2f}%"]
        for c in self.combinations:
            lines.append(f"  {c.seq_a} <-> {c.seq_b}: AR@1 {100 * c.ar1:.2f}%  AR@1% {100 * c.ar1pct:.2f}%")
        return "\n".join(lines)


def average_recall_suite(
    db: DescriptorDB,
    ns: Sequence[int] = (1,),
    d_tp: float = 20.0,
    metric: str = "l1",
) -> SuiteSummary:
    """Every unordered pair of sequences, each evaluated in both query/database roles."""
    seqs = db.sequences
    if len(seqs) < 2:
        raise ValidationError(f"need at least two sequences, got {seqs}")
    parts = {s: db.sequence(s) for s in seqs}
    combos = []
    for a, b in itertools.combinations(seqs, 2):
        roles = (recall_at_n(parts[a], parts[b], ns, d_tp, metric), recall_at_n(parts[b], parts[a], ns, d_tp, metric))
        combos.append(Combination(a, b, roles))
    return SuiteSummary(combos)


@dataclass
class WeightReport:
    frame_ids: list[str]
    sequence_ids: list[str]
    alphas: np.ndarray  # (n, 2)
    means: tuple[float, float]
    ratios: np.ndarray  # (n, 2), percent; raw alpha where the mean is zero
    zero_mean: tuple[bool, bool]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_id", "sequence_id", "alpha_i", "alpha_p", "ratio_i_pct", "ratio_p_pct",
                        "raw_i", "raw_p"])
            for fid, sid, a, r in zip(self.frame_ids, self.sequence_ids, self.alphas, self.ratios):
                w.writerow([fid, sid, repr(float(a[0])), repr(float(a[1])), repr(float(r[0])), repr(float(r[1])),
                            int(self.zero_mean[0]), int(self.zero_mean[1])])

    def plot(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(8, 3))
        x = np.arange(len(self.frame_ids))
        ax.plot(x, self.ratios[:, 0], label="visual")
        ax.plot(x, self.ratios[:, 1], label="LiDAR")
        ax.axhline(100.0, color="gray", lw=0.8)
        ax.set_xlabel("frame")
        ax.set_ylabel("relative weight (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def weight_ratio_report(db: DescriptorDB) -> WeightReport:
    """Each frame's alpha as a percentage of the DB-mean alpha, per modality."""
    if len(db) == 0:
        raise ValidationError("weight report needs a non-empty DB")
    alphas = np.asarray(db.alphas, dtype=np.float64)
    means = alphas.mean(axis=0)
    # a constant column must give exactly 100%, which summation rounding can break
    constant = np.all(alphas == alphas[0], axis=0)
    means = np.where(constant, alphas[0], means)
    zero = tuple(bool(m == 0) for m in means)
    ratios = np.empty_like(alphas)
    for k in range(2):
        ratios[:, k] = alphas[:, k] if zero[k] else 100.0 * alphas[:, k] / means[k]
    return WeightReport(db.frame_ids.tolist(), db.sequence_ids.tolist(), alphas,
                        (float(means[0]), float(means[1])), ratios, zero)
