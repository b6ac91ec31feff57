"""Train one AdaFusion smoke model and summarize test-set alphas and R@1 per place profile."""

import argparse
from collections import defaultdict

import numpy as np

from adafusion.experiments import run_smoke
from adafusion.retrieval import first_hit_ranks


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    r = run_smoke(args.seed, adaptive=True)
    db = r.db
    hits = defaultdict(list)
    for a in db.sequences:
        for b in db.sequences:
            if a == b:
                continue
            q, d = db.sequence(a), db.sequence(b)
            for fid, rank in zip(q.frame_ids, first_hit_ranks(q, d)):
                if rank >= 0:
                    hits[r.place_profiles[fid]].append(rank == 0)
    by_profile = defaultdict(list)
    for fid, alpha in zip(db.frame_ids, db.alphas):
        by_profile[r.place_profiles[fid]].append(alpha)
    print(f"{'profile':12s} {'frames':>6s} {'alpha_I':>8s} {'alpha_P':>8s} {'R@1':>6s}")
    for prof in sorted(by_profile):
        a = np.array(by_profile[prof])
        print(f"{prof:12s} {len(a):6d} {a[:, 0].mean():8.3f} {a[:, 1].mean():8.3f} {np.mean(hits[prof]):6.3f}")


if __name__ == "__main__":
    main()
