"""Run configuration: a nested YAML file plus ``--set key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from adafusion.errors import ValidationError
from adafusion.fusion import ModelConfig
from adafusion.preprocess import DEFAULT_BOUNDS, DEFAULT_IMAGE_SIZE, DEFAULT_RESOLUTION, PreprocessConfig
from adafusion.synthetic import SyntheticSpec
from adafusion.training import TrainConfig

DATA_ROOT_ENV = "ADAFUSION_DATA_ROOT"
DESCRIPTOR_DIMS = (128, 192, 256, 512)


@dataclass(frozen=True)
class DatasetConfig:
    root: str = "data"
    sequences: tuple[str, ...] | None = None  # None: every sequence directory under root
    max_dt: float = 0.1  # image/cloud association window, seconds
    spacing: float = 10.0  # frame selection, meters of travel
    split_file: str | None = None  # YAML {side, centers}; default <root>/split.yaml
    index_dir: str = "runs/index"
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = DEFAULT_BOUNDS
    resolution: tuple[int, int, int] = DEFAULT_RESOLUTION
    crop: tuple[int, int, int, int] | None = None
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    ground_removal: bool = True

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(bounds=self.bounds, resolution=self.resolution, crop=self.crop,
                                image_size=self.image_size, ground_removal=self.ground_removal)

    def split_path(self) -> Path:
        return Path(self.split_file) if self.split_file else Path(self.root) / "split.yaml"


@dataclass(frozen=True)
class EvalConfig:
    ns: tuple[int, ...] = (1, 5, 10)
    metric: str = "l1"
    d_tp: float = 20.0


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:12]


def _tupled(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    return v


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValidationError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = v if k == "profiles" and isinstance(v, str) else _tupled(v)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"bad [{where}] section: {exc}") from exc


def _apply_override(tree: dict, item: str) -> None:
    if "=" not in item:
        raise ValidationError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(f"cannot override below scalar key in {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


def config_from_dict(tree: dict) -> RunConfig:
    tree = dict(tree or {})
    sections = {"dataset": DatasetConfig, "synth": SyntheticSpec, "model": ModelConfig,
                "train": TrainConfig, "eval": EvalConfig}
    unknown = set(tree) - set(sections) - {"out_dir"}
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    built = {name: _build(cls, tree.get(name), name) for name, cls in sections.items()}
    cfg = RunConfig(**built, out_dir=str(tree.get("out_dir", "runs")))
    if cfg.eval.metric not in ("l1", "l2"):
        raise ValidationError(f"eval.metric must be l1 or l2, got {cfg.eval.metric!r}")
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read YAML (if given), apply dotted overrides, then the data-root environment variable."""
    tree: dict = {}
    if path is not None:
        with open(path) as fh:
            tree = yaml.safe_load(fh) or {}
        if not isinstance(tree, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
    for item in overrides or []:
        _apply_override(tree, item)
    if os.environ.get(DATA_ROOT_ENV):
        tree.setdefault("dataset", {})["root"] = os.environ[DATA_ROOT_ENV]
    return config_from_dict(tree)


def read_split_file(path: str | Path) -> tuple[float, list[tuple[float, float]]]:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    try:
        side = float(doc["side"])
        centers = [(float(c[0]), float(c[1])) for c in doc.get("centers", [])]
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ValidationError(f"{path}: split file needs 'side' and a list of [x, y] 'centers'") from exc
    return side, centers


def write_split_file(path: str | Path, side: float, centers) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump({"side": float(side), "centers": [[float(x), float(y)] for x, y in centers]}, fh)
