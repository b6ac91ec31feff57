"""Desk-scale smoke experiment: AdaFusion vs the concatenation baseline, plus a noise-image variant.

    python3 scripts/run_smoke.py --seeds 0 1 2 --steps 200 --out runs/smoke
"""

import argparse
import csv
import statistics
import time
from dataclasses import replace
from pathlib import Path

from adafusion.experiments import SMOKE_TRAIN, run_smoke

VARIANTS = {"adafusion": dict(adaptive=True), "concat": dict(adaptive=False),
            "noise_images": dict(adaptive=True, noise_images=True)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=SMOKE_TRAIN.max_steps)
    p.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=list(VARIANTS))
    p.add_argument("--out", default="runs/smoke")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(SMOKE_TRAIN, max_steps=args.steps)
    rows = []
    for seed in args.seeds:
        for name in args.variants:
            t0 = time.perf_counter()
            r = run_smoke(seed, train_config=cfg, **VARIANTS[name])
            rows.append(dict(variant=name, seed=seed, loss_first10=r.first_losses, loss_last10=r.last_losses,
                             test_ar1=r.test_ar1, test_ar1pct=r.test_ar1pct, alpha_i=r.alpha_mean[0],
                             alpha_p=r.alpha_mean[1], seconds=time.perf_counter() - t0))
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rows[-1].items()),
                  flush=True)
    with open(out / "smoke.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for name in args.variants:
        sel = [r for r in rows if r["variant"] == name]
        print(f"{name:13s} median AR@1 {statistics.median(r['test_ar1'] for r in sel):.4f}  "
              f"median alpha_I {statistics.median(r['alpha_i'] for r in sel):.4f}")


if __name__ == "__main__":
    main()
