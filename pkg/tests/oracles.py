"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the package's numerical code; each function recomputes
its quantity from the definition.
"""

import math

import numpy as np


def associate_oracle(img_ts, cld_ts, max_dt):
    """O(n*m) greedy: each image (in time order) takes the nearest unused cloud, earlier on ties."""
    used = set()
    out = []
    for t in img_ts:
        best = None
        for j, tc in enumerate(cld_ts):
            if j in used:
                continue
            key = (abs(tc - t), tc)
            if best is None or key < best[0]:
                best = (key, j)
        if best is not None and best[0][0] <= max_dt:
            used.add(best[1])
            out.append((t, cld_ts[best[1]]))
    return out


def rewalk_oracle(xyz, spacing):
    kept = [0]
    acc = 0.0
    for i in range(1, len(xyz)):
        acc += math.dist(xyz[i - 1], xyz[i])
        if acc >= spacing:
            kept.append(i)
            acc = 0.0
    return kept


def containment_oracle(xy, boxes):
    out = []
    for x, y in xy:
        inside = False
        for (cx, cy), side in boxes:
            if abs(x - cx) <= side / 2 and abs(y - cy) <= side / 2:
                inside = True
        out.append(inside)
    return out


def pairs_oracle(xyz, d_pos, d_neg):
    pos, neg = set(), set()
    n = len(xyz)
    for i in range(n):
        for j in range(i + 1, n):
            d = math.dist(xyz[i], xyz[j])
            if d <= d_pos:
                pos.add((i, j))
            elif d >= d_neg:
                neg.add((i, j))
    return pos, neg


def voxel_oracle(points, bounds, res):
    """Per-cell scan: for every cell, does any point fall in its half-open (last: closed) interval?"""
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    res = np.asarray(res)
    cell = (hi - lo) / res
    grid = np.zeros(tuple(res), dtype=np.float32)
    pts = np.asarray(points, float)
    for i in range(res[0]):
        for j in range(res[1]):
            for k in range(res[2]):
                idx = (i, j, k)
                m = np.ones(len(pts), dtype=bool)
                for a in range(3):
                    start = lo[a] + idx[a] * cell[a]
                    stop = lo[a] + (idx[a] + 1) * cell[a]
                    if idx[a] == res[a] - 1:
                        m &= (pts[:, a] >= start) & (pts[:, a] <= hi[a])
                    else:
                        m &= (pts[:, a] >= start) & (pts[:, a] < stop)
                grid[i, j, k] = float(m.any())
    return grid[None]


def conv2d_oracle(x, w, b):
    """x (C, H, W), w (O, C, 3, 3), b (O,); stride 1, zero padding 1."""
    c, h, wd = x.shape
    o = w.shape[0]
    xp = np.zeros((c, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for i in range(h):
            for j in range(wd):
                s = b[oc]
                for ic in range(c):
                    for di in range(3):
                        for dj in range(3):
                            s += w[oc, ic, di, dj] * xp[ic, i + di, j + dj]
                out[oc, i, j] = s
    return out


def relu(x):
    return np.where(x > 0, x, 0.0)


def gap_oracle(m):
    """m (C, *spatial) -> per-channel mean by explicit summation."""
    c = m.shape[0]
    out = []
    for ch in range(c):
        total, count = 0.0, 0
        for v in np.asarray(m[ch]).ravel().tolist():
            total += v
            count += 1
        out.append(total / count)
    return np.array(out)


def softmax_rows(logits):
    out = []
    for row in logits:
        mx = max(row)
        e = [math.exp(v - mx) for v in row]
        s = sum(e)
        out.append([v / s for v in e])
    return out


def spatial_attention_oracle(q, k, v):
    """q, k, v (C, N): S[i][j] = softmax_j(sum_c k[c,i] q[c,j]); out[c][j] = sum_i v[c,i] S[j][i]."""
    c, n = q.shape
    logits = [[sum(k[ch, i] * q[ch, j] for ch in range(c)) for j in range(n)] for i in range(n)]
    s = softmax_rows(logits)
    return np.array([[sum(v[ch, i] * s[j][i] for i in range(n)) for j in range(n)] for ch in range(c)]), np.array(s)


def channel_attention_oracle(q, k, v):
    """S[a][b] = softmax_b(sum_n q[a,n] k[b,n]); out[a][n] = sum_b S[a][b] v[b,n]."""
    c, n = q.shape
    logits = [[sum(q[a, p] * k[b, p] for p in range(n)) for b in range(c)] for a in range(c)]
    s = softmax_rows(logits)
    return np.array([[sum(s[a][b] * v[b, p] for b in range(c)) for p in range(n)] for a in range(c)]), np.array(s)


def dense_oracle(x, layers):
    """layers: list of (W (out, in), b); ReLU between, sigmoid at the end."""
    h = list(x)
    for li, (w, b) in enumerate(layers):
        nxt = []
        for o in range(w.shape[0]):
            s = b[o]
            for i in range(w.shape[1]):
                s += w[o, i] * h[i]
            nxt.append(s)
        if li < len(layers) - 1:
            h = [max(s, 0.0) for s in nxt]
        else:
            h = [1.0 / (1.0 + math.exp(-s)) for s in nxt]
    return np.array(h)


def margin_loss_oracle(f1, f2, y, m, a):
    d = 0.0
    for u, v in zip(f1, f2):
        d += abs(u - v)
    if y == 1:
        return max(d - (m - a), 0.0)
    return max((m + a) - d, 0.0)


def knn_oracle(db, ids, q, metric="l1"):
    scored = []
    for row, fid in zip(db, ids):
        if metric == "l1":
            d = sum(abs(a - b) for a, b in zip(row, q))
        else:
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(row, q)))
        scored.append((d, fid))
    scored.sort()
    return [fid for _, fid in scored], [d for d, _ in scored]


def recall_oracle(q_desc, q_pos, db_desc, db_pos, db_ids, n, d_tp):
    """Brute-force adjudication over the full distance matrices."""
    hits, valid = 0, 0
    for qd, qp in zip(q_desc, q_pos):
        tps = [math.dist(qp, p) <= d_tp for p in db_pos]
        if not any(tps):
            continue
        valid += 1
        ranked = sorted(range(len(db_desc)), key=lambda j: (sum(abs(a - b) for a, b in zip(qd, db_desc[j])), db_ids[j]))
        if any(tps[j] for j in ranked[:n]):
            hits += 1
    return hits / valid if valid else float("nan"), valid


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
