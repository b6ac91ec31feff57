"""Command-line entry point: ``adafusion [-c CONFIG] [--set k=v ...] <command>``.

Exit status: 0 success, 1 validation error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from adafusion import data
from adafusion.config import RunConfig, load_config, read_split_file, write_split_file
from adafusion.errors import FormatError, NumericError, ValidationError
from adafusion.preprocess import FramePreprocessor

log = logging.getLogger("adafusion")


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _index_path(cfg: RunConfig) -> Path:
    return Path(cfg.dataset.index_dir) / "frames.csv"


def cmd_synth(cfg: RunConfig, args) -> None:
    from adafusion.experiments import held_out_places
    from adafusion.synthetic import generate_synthetic_dataset

    root = Path(args.root or cfg.dataset.root)
    ds = generate_synthetic_dataset(cfg.synth)
    for seq in sorted({f.sequence_id for f in ds.frames}):
        data.write_sequence(root, seq, [f for f in ds.frames if f.sequence_id == seq], ds.images, ds.clouds)
    centers = [tuple(ds.places[i]) for i in held_out_places(len(ds.places))]
    write_split_file(root / "split.yaml", 60.0, centers)
    print(f"wrote {len(ds.frames)} frames in {cfg.synth.n_revisits + 1} sequences to {root}")


def cmd_prepare(cfg: RunConfig, args) -> None:
    ds = cfg.dataset
    sequences = list(ds.sequences) if ds.sequences else data.list_sequences(ds.root)
    frames = []
    for seq in sequences:
        seq_frames = data.select_frames_by_distance(data.load_sequence(ds.root, seq, ds.max_dt), ds.spacing)
        if not seq_frames:
            log.warning("sequence %s produced no frames", seq)
        frames.extend(seq_frames)
    boxes = []
    if ds.split_path().exists():
        side, centers = read_split_file(ds.split_path())
        boxes = [data.TestBox(c, side) for c in centers]
    else:
        log.warning("no split file at %s; every frame goes to training", ds.split_path())
    split = data.split_regions(frames, boxes)
    index_dir = Path(ds.index_dir)
    index_dir.mkdir(parents=True, exist_ok=True)
    data.write_frame_index(index_dir / "frames.csv", split)
    tc = cfg.train
    pairs = data.mine_pairs(split.train_frames, tc.d_pos, tc.d_neg, tc.neg_cap, np.random.default_rng(tc.seed))
    data.write_pairs(index_dir / "pairs.csv", pairs)
    n_pos, n_neg = data.count_pairs(split.train_frames, tc.d_pos, tc.d_neg)
    print(f"training frames: {len(split.train_frames)}")
    print(f"testing frames: {len(split.test_frames)}")
    print(f"true match pairs: {n_pos}")
    print(f"wrong match pairs: {n_neg} ({sum(p.y < 0 for p in pairs)} sampled)")
    print(f"index written to {index_dir}")


def cmd_train(cfg: RunConfig, args) -> None:
    from adafusion.training import train

    split = data.read_frame_index(_index_path(cfg))
    if not split.train_frames:
        raise ValidationError("frame index holds no training frames")
    pre = FramePreprocessor(cfg.dataset.preprocess())
    out = _out(cfg)
    result = train(cfg.train, cfg.model, split.train_frames, data.DiskStore(), pre, out_dir=out,
                   run_config=cfg.to_dict())
    print(f"best validation AR@1 {result.best_ar1:.4f} at step {result.best_step}")
    print(f"checkpoint: {out / 'best.pt'}")
    print(f"training log: {out / 'train_log.csv'}")


def cmd_embed(cfg: RunConfig, args) -> None:
    from adafusion.retrieval import build_database
    from adafusion.training import load_checkpoint

    ckpt = Path(args.checkpoint or Path(cfg.out_dir) / "best.pt")
    model, _ = load_checkpoint(ckpt)
    split = data.read_frame_index(_index_path(cfg))
    frames = split.test_frames if args.split == "test" else split.train_frames
    if args.sequences:
        frames = [f for f in frames if f.sequence_id in set(args.sequences)]
    db = build_database(frames, model, data.DiskStore(), FramePreprocessor(cfg.dataset.preprocess()))
    path = Path(args.db or _out(cfg) / "db.npz")
    db.save(path)
    print(f"descriptor DB with {len(db)} rows: {path}")


def cmd_eval(cfg: RunConfig, args) -> None:
    from adafusion.retrieval import DescriptorDB, average_recall_suite

    db = DescriptorDB.load(args.db or Path(cfg.out_dir) / "db.npz")
    suite = average_recall_suite(db, cfg.eval.ns, cfg.eval.d_tp, cfg.eval.metric)
    out = _out(cfg)
    suite.write_csv(out / "results.csv")
    text = suite.summary_text()
    (out / "summary.txt").write_text(f"config {cfg.hash()}\n{text}\n")
    print(text)
    print(f"results: {out / 'results.csv'}")


def cmd_weights_report(cfg: RunConfig, args) -> None:
    from adafusion.retrieval import DescriptorDB, weight_ratio_report

    db = DescriptorDB.load(args.db or Path(cfg.out_dir) / "db.npz")
    report = weight_ratio_report(db)
    out = _out(cfg)
    report.write_csv(out / "weights.csv")
    if args.plot:
        report.plot(args.plot)
    print(f"mean alpha: visual {report.means[0]:.4f}, LiDAR {report.means[1]:.4f}")
    for k, name in enumerate(("visual", "LiDAR")):
        if report.zero_mean[k]:
            print(f"warning: mean {name} weight is zero; raw weights reported")
    print(f"report: {out / 'weights.csv'}")


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "weights-report": cmd_weights_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adafusion", description=__doc__.splitlines()[0])
    p.add_argument("-c", "--config", help="YAML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set train.max_steps=200")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", help="generate a synthetic dataset in the on-disk layout")
    s.add_argument("--root", help="output directory (default: dataset.root)")
    sub.add_parser("prepare", help="associate, select, split and mine pairs; write index files")
    sub.add_parser("train", help="train and write the best checkpoint and training log")
    s = sub.add_parser("embed", help="build a descriptor DB from a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--split", choices=("test", "train"), default="test")
    s.add_argument("--sequences", nargs="*")
    s.add_argument("--db", help="output path (default: <out_dir>/db.npz)")
    s = sub.add_parser("eval", help="recall@N over every pair of sequences in a descriptor DB")
    s.add_argument("--db")
    s = sub.add_parser("weights-report", help="relative adaptive weights per frame")
    s.add_argument("--db")
    s.add_argument("--plot", help="also write a plot (png/svg)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        print(f"config {cfg.hash()}")
        COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
