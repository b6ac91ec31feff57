"""Pairwise margin loss, the training loop and checkpoint files."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from adafusion.data import Frame, mine_pair_indices, positions_of
from adafusion.errors import FormatError, NumericError, ValidationError
from adafusion.fusion import AdaFusionNet, ModelConfig
from adafusion.preprocess import FramePreprocessor
from adafusion.retrieval import average_recall_suite, build_database, model_hash

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOG_FIELDS = ["step", "loss", "ar1", "lr", "alpha_i_mean", "alpha_p_mean"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16  # pairs per step, half true matches and half wrong matches
    lr_init: float = 8e-4
    lr_decay: float = 0.9
    patience: int = 20  # evaluations without AR@1 improvement before decaying
    eval_every: int = 2000  # batches
    margin: float = 1.0
    slack: float = 0.5
    d_pos: float = 10.0
    d_neg: float = 50.0
    neg_cap: int = 20
    d_tp: float = 20.0
    metric: str = "l1"
    val_fraction: float = 0.1
    val_tile: float = 100.0
    augment: bool = True
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.slack < self.margin:
            raise ValidationError(f"need 0 < slack < margin, got slack={self.slack}, margin={self.margin}")
        if not 0 < self.lr_decay < 1:
            raise ValidationError("lr_decay must lie in (0, 1)")
        for name in ("epochs", "batch_size", "patience", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValidationError("batch_size must hold at least one pair of each label")


def pairwise_margin_loss(f1: torch.Tensor, f2: torch.Tensor, y: torch.Tensor | int, margin: float = 1.0,
                         slack: float = 0.5) -> torch.Tensor:
    """Per-pair hinge on the L1 descriptor distance.

    y = +1: max(d - (margin - slack), 0); y = -1: max((margin + slack) - d, 0).
    The subgradient at a hinge kink is 0.
    """
    y = torch.as_tensor(y, device=f1.device)
    if not torch.all((y == 1) | (y == -1)):
        raise ValidationError("labels must be +1 or -1")
    if f1.shape != f2.shape:
        raise ValidationError(f"descriptor shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    d = (f1 - f2).abs().sum(dim=-1)
    return torch.where(y == 1, torch.relu(d - (margin - slack)), torch.relu((margin + slack) - d))


class PlateauDecay:
    """Multiply the learning rate by ``decay`` after ``patience`` evaluations without improvement."""

    def __init__(self, lr: float, decay: float = 0.9, patience: int = 20):
        self.lr = lr
        self.decay = decay
        self.patience = patience
        self.best = -math.inf
        self.stale = 0

    def step(self, score: float) -> bool:
        """Record one evaluation; returns True when it is a new best."""
        if not math.isnan(score) and score > self.best:
            self.best = score
            self.stale = 0
            return True
        self.stale += 1
        if self.stale >= self.patience:
            self.lr *= self.decay
            self.stale = 0
        return False


def holdout_regions(frames: Sequence[Frame], fraction: float, tile: float,
                    rng: np.random.Generator) -> tuple[list[Frame], list[Frame]]:
    """Hold out a fraction of square ground tiles (whole regions, never single frames)."""
    if fraction <= 0 or not frames:
        return list(frames), []
    xy = positions_of(frames)[:, :2]
    keys = [tuple(k) for k in np.floor(xy / tile).astype(np.int64).tolist()]
    tiles = sorted(set(keys))
    n_val = min(len(tiles) - 1, max(1, math.ceil(fraction * len(tiles))))
    if n_val <= 0:
        return list(frames), []
    chosen = {tiles[i] for i in rng.choice(len(tiles), size=n_val, replace=False)}
    train = [f for f, k in zip(frames, keys) if k not in chosen]
    val = [f for f, k in zip(frames, keys) if k in chosen]
    return train, val


class PairBatcher:
    """Balanced batches: every step holds ``batch_size // 2`` true and wrong matches."""

    def __init__(self, positives: np.ndarray, negatives: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(positives) == 0 or len(negatives) == 0:
            raise ValidationError(f"need both pair labels, got {len(positives)} true / {len(negatives)} wrong matches")
        half = batch_size // 2
        pos = positives[rng.permutation(len(positives))]
        neg = negatives[rng.permutation(len(negatives))]
        n_batches = math.ceil(len(pos) / half)
        self.batches = []
        for b in range(n_batches):
            p = pos[np.arange(b * half, (b + 1) * half) % len(pos)]
            q = neg[np.arange(b * half, (b + 1) * half) % len(neg)]
            pairs = np.concatenate([p, q])
            y = np.concatenate([np.ones(len(p), np.int64), -np.ones(len(q), np.int64)])
            self.batches.append((pairs, y))

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)


class FrameInputs:
    """Caches normalized images and ground-removed clouds; voxelizes per batch."""

    def __init__(self, frames: Sequence[Frame], store, preprocessor: FramePreprocessor):
        self.pre = preprocessor
        self.images = [preprocessor.image(store.image(f.image_ref)) for f in frames]
        self.clouds = [preprocessor.cloud(store.cloud(f.cloud_ref)) for f in frames]
        self._voxels: dict[int, np.ndarray] = {}

    def batch(self, idx: Sequence[int], rng: np.random.Generator | None = None,
              dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        images, voxels = [], []
        for i in idx:
            if rng is not None:
                img, pts = self.pre.augment(self.images[i], self.clouds[i], rng)
                vox = self.pre.voxels(pts)
            else:
                img = self.images[i]
                if i not in self._voxels:
                    self._voxels[i] = self.pre.voxels(self.clouds[i])
                vox = self._voxels[i]
            images.append(img)
            voxels.append(vox)
        return torch.from_numpy(np.stack(images)).to(dtype), torch.from_numpy(np.stack(voxels)).to(dtype)


def batch_loss(model: torch.nn.Module, inputs: FrameInputs, pairs: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean pair loss of one batch and the alphas of its frames."""
    uniq, inv = np.unique(pairs, return_inverse=True)
    inv = inv.reshape(pairs.shape)
    image, voxels = inputs.batch(uniq.tolist(), rng)
    out = model(image, voxels)
    losses = pairwise_margin_loss(out.descriptor[inv[:, 0]], out.descriptor[inv[:, 1]],
                                  torch.from_numpy(y), cfg.margin, cfg.slack)
    return losses.mean(), out.alpha


@dataclass
class TrainResult:
    model: AdaFusionNet
    log: list[dict] = field(default_factory=list)
    best_ar1: float = float("nan")
    best_step: int = 0
    losses: list[float] = field(default_factory=list)  # per step


def write_log(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([row["step"], *(repr(float(row[k])) for k in LOG_FIELDS[1:])])


def _dump_state(out_dir: Path | None, state: dict) -> str:
    if out_dir is None:
        return json.dumps(state)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "nonfinite_dump.json"
    path.write_text(json.dumps(state, indent=2))
    return str(path)


def train(
    config: TrainConfig,
    model_config: ModelConfig,
    frames: Sequence[Frame],
    store,
    preprocessor: FramePreprocessor | None = None,
    val_frames: Sequence[Frame] | None = None,
    out_dir: str | Path | None = None,
    run_config: dict | None = None,
) -> TrainResult:
    """Train on ``frames`` and return the model restored to its best validation AR@1.

    Without ``val_frames`` a fraction of the training tiles is held out for
    validation. With ``out_dir`` the best checkpoint (``best.pt``) and the
    log (``train_log.csv``) are written there.
    """
    pre = preprocessor or FramePreprocessor()
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    if val_frames is None:
        frames, val_frames = holdout_regions(frames, config.val_fraction, config.val_tile, rng)
    val_frames = list(val_frames)
    model = AdaFusionNet(model_config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_init, betas=(0.9, 0.999), eps=1e-8)
    sched = PlateauDecay(config.lr_init, config.lr_decay, config.patience)
    inputs = FrameInputs(frames, store, pre)
    positions = positions_of(frames)
    positives, _ = mine_pair_indices(positions, config.d_pos, config.d_neg, neg_cap=0)

    result = TrainResult(model)
    best_state = copy.deepcopy(model.state_dict())
    window_losses: list[float] = []
    window_alphas: list[np.ndarray] = []

    def evaluate(step: int) -> None:
        nonlocal best_state
        ar1 = float("nan")
        alpha_mean = np.concatenate(window_alphas).mean(axis=0) if window_alphas else np.full(2, np.nan)
        if len({f.sequence_id for f in val_frames}) >= 2:
            db = build_database(val_frames, model, store, pre, built_from="")
            ar1 = average_recall_suite(db, (1,), config.d_tp, config.metric).ar1
            alpha_mean = db.alphas.mean(axis=0)
        improved = sched.step(ar1)
        if improved or not val_frames:
            best_state = copy.deepcopy(model.state_dict())
            result.best_ar1, result.best_step = ar1, step
        for g in opt.param_groups:
            g["lr"] = sched.lr
        row = dict(step=step, loss=float(np.mean(window_losses)) if window_losses else float("nan"), ar1=ar1,
                   lr=sched.lr, alpha_i_mean=float(alpha_mean[0]), alpha_p_mean=float(alpha_mean[1]))
        result.log.append(row)
        log.info("step %d loss %.4f AR@1 %.4f lr %.2e alpha %.3f/%.3f", step, row["loss"], ar1, sched.lr,
                 row["alpha_i_mean"], row["alpha_p_mean"])
        window_losses.clear()
        window_alphas.clear()

    step = 0
    done = False
    for epoch in range(config.epochs):
        _, negatives = mine_pair_indices(positions, config.d_pos, config.d_neg, config.neg_cap, rng)
        for pairs, y in PairBatcher(positives, negatives, config.batch_size, rng):
            loss, alpha = batch_loss(model, inputs, pairs, y, config, rng if config.augment else None)
            if not torch.isfinite(loss):
                where = _dump_state(out_dir, dict(step=step + 1, epoch=epoch, lr=sched.lr, loss=repr(float(loss.detach())),
                                                  pairs=pairs.tolist(), labels=y.tolist(),
                                                  param_norms={n: float(p.detach().norm()) for n, p in model.named_parameters()}))
                raise NumericError(f"non-finite loss at step {step + 1} (epoch {epoch}); state dump: {where}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            result.losses.append(float(loss.detach()))
            window_losses.append(result.losses[-1])
            window_alphas.append(alpha.detach().numpy())
            if step % config.eval_every == 0:
                evaluate(step)
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        if done:
            break
    if step % config.eval_every:
        evaluate(step)

    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "best.pt", model, run_config=run_config)
        write_log(out_dir / "train_log.csv", result.log)
    return result


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: AdaFusionNet, run_config: dict | None = None,
                    config_hash: str = "") -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.config),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "run_config": json.dumps(run_config or {}, sort_keys=True),
        "config_hash": config_hash,
        "model_hash": model_hash(model),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[AdaFusionNet, dict]:
    """Rebuild the model from a checkpoint; returns ``(model, run_config)``.

    Any unreadable or mismatched file raises :class:`FormatError` before a model is built.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise FormatError(f"{path}: missing format_version")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint format {payload['format_version']}, "
                          f"expected {CHECKPOINT_FORMAT_VERSION}")
    try:
        mc = dict(payload["model_config"])
        mc["fc_hidden"] = tuple(mc["fc_hidden"])
        model = AdaFusionNet(ModelConfig(**mc))
        model.load_state_dict(payload["state_dict"])
        run_config = json.loads(payload.get("run_config", "{}"))
    except Exception as exc:
        raise FormatError(f"{path}: checkpoint contents do not match a model ({exc})") from exc
    model.eval()
    return model, run_config
