"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import statistics
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from gradcheck import STEP, gradient_suite  # noqa: E402

from adafusion.attention import channel_attention, channel_attention_map, spatial_attention, spatial_attention_map  # noqa: E402
from adafusion.backbone import Backbone, global_average_pool, image_stack, voxel_stack  # noqa: E402
from adafusion.config import DESCRIPTOR_DIMS, EvalConfig  # noqa: E402
from adafusion.data import MemoryStore, count_pairs, mine_pair_indices, positions_of  # noqa: E402
from adafusion.experiments import run_smoke  # noqa: E402
from adafusion.fusion import AdaFusionNet, ModelConfig, WeightHead  # noqa: E402
from adafusion.preprocess import FramePreprocessor, voxelize  # noqa: E402
from adafusion.retrieval import DescriptorDB, average_recall_suite, build_database, knn_query, recall_at_n  # noqa: E402
from adafusion.synthetic import SyntheticSpec, generate_synthetic_dataset, synthetic_preprocess_config  # noqa: E402
from adafusion.training import TrainConfig, pairwise_margin_loss, train  # noqa: E402

REL = 1e-6


def _rel(got, want) -> float:
    got, want = np.asarray(got, np.float64), np.asarray(want, np.float64)
    return float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-12))) if got.size else 0.0


def _db(desc, pos, seq):
    n = len(desc)
    return DescriptorDB(np.asarray(desc, float), np.full((n, 2), 0.5), np.asarray(pos, float),
                        np.array([f"{seq}/{i:05d}" for i in range(n)]), np.array([seq] * n))


# ---------------------------------------------------------------------------------------- criteria


def criterion_oracles() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    checks = {}

    bounds = ((-2.0, -2.0, -2.0), (2.0, 2.0, 2.0))
    pts = rng.uniform(-2.2, 2.2, (5000, 3))
    pts[:100] = np.round(pts[:100] * 2) / 2
    checks["voxelize"] = np.array_equal(voxelize(pts, bounds, (8, 6, 5)).occupancy,
                                        oracles.voxel_oracle(pts, bounds, (8, 6, 5)))

    m = torch.randn(2, 5, 4, 3, 2, dtype=torch.float64)
    checks["gap"] = max(_rel(global_average_pool(m)[b].numpy(), oracles.gap_oracle(m[b].numpy())) for b in range(2)) <= REL

    q, k, v = (torch.randn(1, 4, 6, dtype=torch.float64) for _ in range(3))
    want, s = oracles.spatial_attention_oracle(q[0].numpy(), k[0].numpy(), v[0].numpy())
    checks["spatial_attention"] = (_rel(spatial_attention(q, k, v)[0].numpy(), want) <= REL
                                   and _rel(spatial_attention_map(q, k)[0].numpy(), s) <= REL)
    want, s = oracles.channel_attention_oracle(q[0].numpy(), k[0].numpy(), v[0].numpy())
    checks["channel_attention"] = (_rel(channel_attention(q, k, v)[0].numpy(), want) <= REL
                                   and _rel(channel_attention_map(q, k)[0].numpy(), s) <= REL)

    head = WeightHead(16, (64, 32)).double()
    with torch.no_grad():
        for p in head.parameters():
            p.uniform_(-0.5, 0.5)
    a, b = torch.randn(1, 8, dtype=torch.float64), torch.randn(1, 8, dtype=torch.float64)
    layers = [(l.weight.detach().numpy(), l.bias.detach().numpy()) for l in head.mlp if isinstance(l, torch.nn.Linear)]
    checks["fc_head"] = _rel(head(a, b)[0].detach().numpy(), oracles.dense_oracle(torch.cat([a, b], -1)[0].tolist(), layers)) <= REL

    f1, f2 = rng.normal(size=(64, 8)), rng.normal(size=(64, 8)) * 0.2
    y = rng.choice([-1, 1], 64)
    got = pairwise_margin_loss(torch.from_numpy(f1), torch.from_numpy(f2), torch.from_numpy(y), 3.0, 1.0).numpy()
    want = [oracles.margin_loss_oracle(x1, x2, t, 3.0, 1.0) for x1, x2, t in zip(f1.tolist(), f2.tolist(), y.tolist())]
    checks["pairwise_loss"] = np.allclose(got, want, rtol=REL, atol=0)

    desc = rng.integers(0, 4, (500, 3)).astype(float)
    db = _db(desc, np.zeros((500, 3)), "db")
    ok = True
    for _ in range(5):
        query = rng.integers(0, 4, 3).astype(float)
        ids, d = knn_query(db, query, 500)
        want_ids, want_d = oracles.knn_oracle(desc.tolist(), db.frame_ids.tolist(), query.tolist())
        ok &= ids == want_ids and _rel(d, want_d) <= REL
    checks["knn_500"] = ok

    pos_db, pos_q = (np.c_[rng.uniform(0, 400, (n, 2)), np.zeros(n)] for n in (150, 100))
    d_db, d_q = rng.integers(0, 5, (150, 4)).astype(float), rng.integers(0, 5, (100, 4)).astype(float)
    dbb, qq = _db(d_db, pos_db, "b"), _db(d_q, pos_q, "a")
    res = recall_at_n(qq, dbb, (1, 5, 10), 20.0)
    ok = True
    for n in (1, 2, 5, 10):
        want, _ = oracles.recall_oracle(d_q.tolist(), pos_q.tolist(), d_db.tolist(), pos_db.tolist(),
                                        dbb.frame_ids.tolist(), n, 20.0)
        ok &= res.recall_at[n] == want
    checks["recall_100_queries"] = ok

    bad = [k for k, v in checks.items() if not v]
    return not bad, f"{len(checks) - len(bad)}/{len(checks)} oracles agree" + (f"; failing: {bad}" if bad else "")


def criterion_gradients() -> tuple[bool, str]:
    t0 = time.perf_counter()
    suite = gradient_suite(seed=0, step=STEP)
    elapsed = time.perf_counter() - t0
    worst_group, worst = max(((g, c.error) for g, c in suite.items()), key=lambda x: x[1])
    raw = max(c.error_all for c in suite.values())
    crossed = sum(c.n_crossed for c in suite.values())
    clean = sum(c.n_clean for c in suite.values())
    ok = worst < 1e-3 and elapsed < 300 and all(c.n_clean >= 8 for c in suite.values())
    return ok, (f"{len(suite)} groups, {clean} kink-free coords, max rel err {worst:.1e} ({worst_group}); "
                f"{crossed} kink-crossing coords excluded (raw max {raw:.1e}); {elapsed:.0f}s")


def criterion_invariants() -> tuple[bool, str]:
    checks = {}
    torch.manual_seed(0)
    model = AdaFusionNet(ModelConfig.tiny()).eval()
    with torch.no_grad():
        model.weight_head.mlp[-2].weight.normal_(0, 3.0)
        model.weight_head.mlp[-2].bias.normal_(0, 3.0)

    rows = []
    for blocks, backbone, x in ((model.image_attention, model.image_backbone, torch.randn(2, 3, 40, 56) * 3),
                                (model.lidar_attention, model.lidar_backbone, (torch.rand(2, 1, 16, 16, 8) < 0.3).float())):
        with torch.no_grad():
            _, taps = backbone(x)
            for block, tap in zip(blocks, taps):
                q, k, _ = block.project_qkv(tap)
                for s in (spatial_attention_map(q, k), channel_attention_map(q, k)):
                    rows.append(float((s.double().sum(-1) - 1).abs().max()))
    checks["attention_rows"] = max(rows) <= 1e-6

    alphas = []
    with torch.no_grad():
        for scale in (0.1, 1.0, 10.0, 100.0, 1000.0):
            for _ in range(2):
                img = torch.randn(100, 3, 40, 56) * scale
                vox = (torch.rand(100, 1, 16, 16, 8) < torch.rand(1)).float()
                out = model(img, vox)
                alphas.append(out.alpha)
                c1 = model.config.c1
                checks.setdefault("decomposition", True)
                checks["decomposition"] &= (torch.equal(out.descriptor[:, :c1], out.alpha[:, :1] * out.f_image)
                                            and torch.equal(out.descriptor[:, c1:], out.alpha[:, 1:] * out.f_lidar))
    alphas = torch.cat(alphas)
    checks["alpha_range_1000"] = len(alphas) == 1000 and bool(((alphas >= 0) & (alphas <= 1)).all())

    rng = np.random.default_rng(1)
    db = _db(rng.normal(size=(60, 4)), np.c_[rng.uniform(0, 100, (60, 2)), np.zeros(60)], "b")
    q = _db(rng.normal(size=(30, 4)), np.c_[rng.uniform(0, 100, (30, 2)), np.zeros(30)], "a")
    r = recall_at_n(q, db, range(1, 61))
    vals = [r.recall_at[n] for n in sorted(r.recall_at)]
    checks["recall_monotone"] = all(a <= b for a, b in zip(vals, vals[1:]))

    with torch.no_grad():
        m_i, _ = Backbone(image_stack()).eval()(torch.zeros(1, 3, 300, 400))
        m_p, _ = Backbone(voxel_stack()).eval()(torch.zeros(1, 1, 72, 72, 48))
    checks["shapes_18x25_9x9x6"] = tuple(m_i.shape[2:]) == (18, 25) and tuple(m_p.shape[2:]) == (9, 9, 6)

    bad = [k for k, v in checks.items() if not v]
    return not bad, (f"max |row sum - 1| {max(rows):.1e}; alpha in [{float(alphas.min()):.3f}, {float(alphas.max()):.3f}] "
                     f"over {len(alphas)} inputs; shapes {tuple(m_i.shape[2:])} {tuple(m_p.shape[2:])}"
                     + (f"; failing: {bad}" if bad else ""))


def criterion_protocol() -> tuple[bool, str]:
    checks = {}
    ds = generate_synthetic_dataset(SyntheticSpec(n_places=8, n_revisits=9, seed=0))
    model = AdaFusionNet(ModelConfig.tiny())
    db = build_database(ds.frames, model, MemoryStore(ds.images, ds.clouds), FramePreprocessor(synthetic_preprocess_config()))
    n_combos = len(average_recall_suite(db).combinations)
    checks["45_combinations"] = len(db.sequences) == 10 and n_combos == 45

    tc, ec = TrainConfig(), EvalConfig()
    checks["defaults_10_50_20"] = (tc.d_pos, tc.d_neg, tc.d_tp, ec.d_tp) == (10.0, 50.0, 20.0, 20.0)
    big = generate_synthetic_dataset(SyntheticSpec(n_places=100, n_revisits=3, seed=0))
    xyz = positions_of(big.frames)
    pos, neg = mine_pair_indices(xyz, tc.d_pos, tc.d_neg, neg_cap=None)
    want_pos, want_neg = oracles.pairs_oracle(xyz.tolist(), tc.d_pos, tc.d_neg)
    checks["mining_10_50"] = ({tuple(p) for p in pos.tolist()} == want_pos and {tuple(p) for p in neg.tolist()} == want_neg)

    edge_db = _db([[0.0], [0.0]], [[20.0, 0, 0], [20.0 + 1e-9, 0, 0]], "b")
    inside = recall_at_n(_db([[0.0]], [[0, 0, 0]], "a"), edge_db.subset(np.array([True, False])), d_tp=ec.d_tp)
    outside = recall_at_n(_db([[0.0]], [[0, 0, 0]], "a"), edge_db.subset(np.array([False, True])), d_tp=ec.d_tp)
    checks["adjudication_20"] = inside.n_queries == 1 and outside.n_queries == 0

    dims = []
    with torch.no_grad():
        for dim in DESCRIPTOR_DIMS:
            net = AdaFusionNet(ModelConfig(descriptor_dim=dim, width=4, attn_channels=4, fused_channels=4)).eval()
            dims.append(net(torch.zeros(1, 3, 40, 56), torch.zeros(1, 1, 16, 16, 8)).descriptor.shape[1])
    checks["dimension_knob"] = tuple(dims) == (128, 192, 256, 512)

    bad = [k for k, v in checks.items() if not v]
    n_pos, n_neg = count_pairs(big.frames)
    return not bad, (f"{n_combos} combinations from {len(db.sequences)} sequences; {n_pos} true / {n_neg} wrong "
                     f"match pairs; dims {dims}" + (f"; failing: {bad}" if bad else ""))


SMOKE_SEEDS = (0, 1, 2)


def criterion_smoke() -> tuple[bool, str]:
    runs = {}
    for seed in SMOKE_SEEDS:
        for variant, kw in (("ada", dict(adaptive=True)), ("concat", dict(adaptive=False)),
                            ("noise", dict(adaptive=True, noise_images=True))):
            t0 = time.perf_counter()
            r = run_smoke(seed, **kw)
            runs[variant, seed] = (r, time.perf_counter() - t0)
    med = lambda xs: statistics.median(xs)  # noqa: E731
    ratio = med([runs["ada", s][0].last_losses / runs["ada", s][0].first_losses for s in SMOKE_SEEDS])
    ar_ada = med([runs["ada", s][0].test_ar1 for s in SMOKE_SEEDS])
    ar_cat = med([runs["concat", s][0].test_ar1 for s in SMOKE_SEEDS])
    alpha_noise = med([runs["noise", s][0].alpha_mean[0] for s in SMOKE_SEEDS])
    slowest = max(t for _, t in runs.values())
    a, b, c = ratio < 0.5, ar_ada >= ar_cat, alpha_noise < 0.5
    per_seed = ", ".join(f"s{s} {runs['ada', s][0].test_ar1:.3f}/{runs['concat', s][0].test_ar1:.3f}" for s in SMOKE_SEEDS)
    detail = (f"(a) loss ratio {ratio:.3f} {'ok' if a else 'FAIL'}; "
              f"(b) AR@1 {ar_ada:.3f} vs concat {ar_cat:.3f} [{per_seed}] {'ok' if b else 'FAIL'}; "
              f"(c) noise alpha_I {alpha_noise:.3f} {'ok' if c else 'FAIL'}; slowest run {slowest:.0f}s")
    return a and b and c and slowest < 600, detail


def criterion_reproducibility() -> tuple[bool, str]:
    ds = generate_synthetic_dataset(SyntheticSpec(n_places=30, n_revisits=2, seed=4))
    store, pre = MemoryStore(ds.images, ds.clouds), FramePreprocessor(synthetic_preprocess_config())
    cfg = TrainConfig(epochs=100, batch_size=8, eval_every=10, max_steps=20, seed=4)
    outs = []
    with tempfile.TemporaryDirectory() as tmp:
        for k in range(2):
            res = train(cfg, ModelConfig.tiny(), ds.frames, store, pre, out_dir=Path(tmp) / str(k))
            db = build_database(ds.frames, res.model, store, pre)
            outs.append(((Path(tmp) / str(k) / "train_log.csv").read_bytes(), db))
    (log_a, db_a), (log_b, db_b) = outs
    same_db = all(np.asarray(getattr(db_a, f)).tobytes() == np.asarray(getattr(db_b, f)).tobytes()
                  for f in ("descriptors", "alphas", "positions", "frame_ids", "sequence_ids")) and db_a.built_from == db_b.built_from
    ok = log_a == log_b and same_db
    return ok, f"log {'identical' if log_a == log_b else 'DIFFERS'} ({len(log_a)} bytes); DB {'identical' if same_db else 'DIFFERS'} ({len(db_a)} rows)"


CRITERIA = {
    "oracle equivalence": criterion_oracles,
    "gradient suite": criterion_gradients,
    "structural invariants": criterion_invariants,
    "protocol plumbing": criterion_protocol,
    "training smoke": criterion_smoke,
    "reproducibility": criterion_reproducibility,
}


def _line(name: str, ok: bool, detail: str) -> str:
    return f"{'PASS' if ok else 'FAIL'} [{name}] {detail}"


@pytest.mark.parametrize("name", list(CRITERIA))
def test_criterion(name, capsys):
    ok, detail = CRITERIA[name]()
    with capsys.disabled():
        print("\n" + _line(name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for name, fn in CRITERIA.items():
        ok, detail = fn()
        failed += not ok
        print(_line(name, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
