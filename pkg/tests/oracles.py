"""Slow, independent reference implementations used as test oracles.

Nothing here imports the code under test except plain data containers.
"""

from __future__ import annotations

import itertools

import numpy as np


def brute_radius(points, query, r):
    d = np.sqrt(((query[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    return [np.flatnonzero(row <= r) for row in d]


def brute_dbscan_partition(points, eps, min_pts):
    """Clusters as a set of frozensets of point indices, plus the noise set.

    Core points are linked when within eps; each non-core point joins every
    cluster that has a core point within eps (callers use tie-free data).
    """
    n = len(points)
    d = np.sqrt(((points[:, None] - points[None]) ** 2).sum(-1))
    near = d <= eps
    core = near.sum(1) >= min_pts
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if core[i] and core[j] and near[i, j]:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        if core[i]:
            groups.setdefault(find(i), set()).add(i)
    for i in range(n):
        if not core[i]:
            for members in groups.values():
                if any(near[i, j] for j in members if core[j]):
                    members.add(i)
    clusters = {frozenset(m) for m in groups.values()}
    clustered = set().union(*clusters) if clusters else set()
    return clusters, set(range(n)) - clustered


def partition_of(labels, noise=-1):
    groups = {}
    for i, lab in enumerate(np.asarray(labels).tolist()):
        if lab != noise:
            groups.setdefault(lab, set()).add(i)
    return {frozenset(g) for g in groups.values()}


def naive_edge_labels(cluster_ids, instance_ids, n_clusters):
    """Clusters i and j are linked when some instance has points in both (plus the diagonal)."""
    out = np.zeros((n_clusters, n_clusters), dtype=bool)
    for i in range(n_clusters):
        out[i, i] = True
    c = np.asarray(cluster_ids)
    g = np.asarray(instance_ids)
    for i in range(n_clusters):
        for j in range(n_clusters):
            if i != j:
                # scan all M points for this pair
                out[i, j] = np.intersect1d(g[c == i], g[c == j]).size > 0
    return out


def union_find_components(adj):
    """Component id per node, numbered 1.. in order of smallest member."""
    adj = np.asarray(adj)
    n = len(adj)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(n):
            if adj[i, j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = {}
    out = []
    for i in range(n):
        r = find(i)
        if r not in roots:
            roots[r] = len(roots) + 1
        out.append(roots[r])
    return np.array(out, dtype=np.int64)


def dense_conv3d(grid, weight, bias):
    """Zero-padded 3x3x3 convolution on a dense (X, Y, Z, F) grid, kernel index (dx, dy, dz) lexicographic."""
    X, Y, Z, _ = grid.shape
    padded = np.pad(grid, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((X, Y, Z, weight.shape[2])) + bias
    for k, (dx, dy, dz) in enumerate(itertools.product((-1, 0, 1), repeat=3)):
        window = padded[1 + dx : 1 + dx + X, 1 + dy : 1 + dy + Y, 1 + dz : 1 + dz + Z]
        out += np.einsum("xyzf,fo->xyzo", window, weight[k])
    return out


def brute_panoptic(frames, thing_ids):
    """Reference PQ evaluator over ``(pred_sem, pred_inst, gt_sem, gt_inst)`` tuples.

    Returns a dict with per-class (tp, fp, fn, iou_sum, pq, sq, rq, iou) and
    the aggregates. Segments are built with python sets; every pred/gt pair
    of a class is compared.
    """
    thing_ids = set(thing_ids)
    stats = {}
    inter, gt_count, pred_count = {}, {}, {}

    def segments(sem, inst):
        segs = {}
        for i, (s, k) in enumerate(zip(sem, inst)):
            if s in thing_ids:
                if k == 0:
                    continue
                segs.setdefault((s, k), set()).add(i)
            else:
                segs.setdefault((s, 0), set()).add(i)
        return segs

    for ps, pi, gs, gi in frames:
        ps, pi, gs, gi = (list(np.asarray(a).tolist()) for a in (ps, pi, gs, gi))
        for a, b in zip(gs, ps):
            gt_count[a] = gt_count.get(a, 0) + 1
            pred_count[b] = pred_count.get(b, 0) + 1
            if a == b:
                inter[a] = inter.get(a, 0) + 1
        pseg, gseg = segments(ps, pi), segments(gs, gi)
        classes = {c for c, _ in pseg} | {c for c, _ in gseg}
        for c in classes:
            st = stats.setdefault(c, {"tp": 0, "fp": 0, "fn": 0, "iou_sum": 0.0})
            pk = [k for k in pseg if k[0] == c]
            gk = [k for k in gseg if k[0] == c]
            mp, mg = set(), set()
            for a in pk:
                for b in gk:
                    u = len(pseg[a] | gseg[b])
                    iou = len(pseg[a] & gseg[b]) / u
                    if iou > 0.5:
                        st["tp"] += 1
                        st["iou_sum"] += iou
                        mp.add(a)
                        mg.add(b)
            st["fp"] += len([a for a in pk if a not in mp])
            st["fn"] += len([b for b in gk if b not in mg])
    sem_iou = {}
    for c in set(gt_count) | set(pred_count):
        i = inter.get(c, 0)
        sem_iou[c] = i / (gt_count.get(c, 0) + pred_count.get(c, 0) - i)
    for c, st in stats.items():
        d = st["tp"] + 0.5 * st["fp"] + 0.5 * st["fn"]
        st["pq"] = st["iou_sum"] / d
        st["sq"] = st["iou_sum"] / st["tp"] if st["tp"] else 0.0
        st["rq"] = st["tp"] / d
        st["iou"] = sem_iou.get(c)

    def mean(xs):
        xs = list(xs)
        return sum(xs) / len(xs) if xs else None

    present = [c for c, st in stats.items() if st["tp"] + st["fn"] > 0]
    th = [c for c in present if c in thing_ids]
    stf = [c for c in present if c not in thing_ids]
    agg = {
        "pq": mean(stats[c]["pq"] for c in present),
        "sq": mean(stats[c]["sq"] for c in present),
        "rq": mean(stats[c]["rq"] for c in present),
        "pq_dagger": mean(stats[c]["pq"] if c in thing_ids else sem_iou[c] for c in present),
        "pq_th": mean(stats[c]["pq"] for c in th),
        "sq_th": mean(stats[c]["sq"] for c in th),
        "rq_th": mean(stats[c]["rq"] for c in th),
        "pq_st": mean(stats[c]["pq"] for c in stf),
        "sq_st": mean(stats[c]["sq"] for c in stf),
        "rq_st": mean(stats[c]["rq"] for c in stf),
        "miou": mean(sem_iou.values()),
    }
    return stats, agg


def central_difference(f, x, step):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        g[i] = (hi - lo) / (2 * step)
    return grad
