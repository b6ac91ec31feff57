"""Desk-scale training experiments on synthetic data."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from adafusion.data import MemoryStore, split_regions
from adafusion.fusion import ModelConfig
from adafusion.preprocess import FramePreprocessor
from adafusion.retrieval import DescriptorDB, average_recall_suite, build_database
from adafusion.synthetic import SyntheticSpec, generate_synthetic_dataset, place_test_boxes, synthetic_preprocess_config
from adafusion.training import TrainConfig, train

SMOKE_TRAIN = TrainConfig(epochs=1000, batch_size=16, eval_every=50, max_steps=200, patience=20)


@dataclass
class SmokeResult:
    seed: int
    adaptive: bool
    noise_images: bool
    first_losses: float  # mean loss of steps 1-10
    last_losses: float  # mean loss of the final 10 steps
    test_ar1: float
    test_ar1pct: float
    alpha_mean: tuple[float, float]  # over the test DB
    log: list[dict]
    db: DescriptorDB | None = None
    place_profiles: dict[str, str] | None = None  # frame_id -> profile of its place


def held_out_places(n_places: int) -> list[int]:
    """Roughly 30% of places, spread along the route."""
    return [i for i in range(n_places) if i % 10 in (1, 4, 7)]


def run_smoke(
    seed: int = 0,
    adaptive: bool = True,
    noise_images: bool = False,
    n_places: int = 100,
    n_revisits: int = 3,
    train_config: TrainConfig = SMOKE_TRAIN,
    model_config: ModelConfig | None = None,
) -> SmokeResult:
    ds = generate_synthetic_dataset(SyntheticSpec(n_places, n_revisits, "mixed", seed, noise_images=noise_images))
    split = split_regions(ds.frames, place_test_boxes(ds.places, held_out_places(n_places)))
    store = MemoryStore(ds.images, ds.clouds)
    pre = FramePreprocessor(synthetic_preprocess_config())
    mc = replace(model_config or ModelConfig.tiny(), adaptive=adaptive)
    result = train(replace(train_config, seed=seed), mc, split.train_frames, store, pre)
    db = build_database(split.test_frames, result.model, store, pre)
    suite = average_recall_suite(db, (1,), train_config.d_tp, train_config.metric)
    losses = np.asarray(result.losses)
    return SmokeResult(
        seed=seed,
        adaptive=adaptive,
        noise_images=noise_images,
        first_losses=float(losses[:10].mean()),
        last_losses=float(losses[-10:].mean()),
        test_ar1=suite.ar1,
        test_ar1pct=suite.ar1pct,
        alpha_mean=tuple(float(v) for v in db.alphas.mean(axis=0)),
        log=result.log,
        db=db,
        place_profiles={f.frame_id: ds.profiles[i % n_places] for i, f in enumerate(ds.frames)},
    )
