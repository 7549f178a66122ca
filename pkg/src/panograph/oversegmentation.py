"""Density clustering of foreground points.

HDBSCAN produces the over-segmented clusters that become graph nodes;
DBSCAN and flat-kernel mean shift are the clustering-only baselines. All
clustering is purely spatial (x, y, z).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from panograph.scene_io import PointCloudFrame

log = logging.getLogger(__name__)

NOISE = -1


@dataclass(frozen=True)
class ClusterAssignment:
    """Per-point cluster ids; ``NOISE`` (-1) marks points in no cluster."""

    labels: np.ndarray
    n_clusters: int

    def compact(self) -> ClusterAssignment:
        """Relabel clusters to 0..n-1 in order of first appearance."""
        labels = np.asarray(self.labels, dtype=np.int64)
        valid = labels != NOISE
        if not valid.any():
            return ClusterAssignment(np.full(len(labels), NOISE, dtype=np.int64), 0)
        uniq, first = np.unique(labels[valid], return_index=True)
        order = np.argsort(first, kind="stable")
        remap = np.empty(len(uniq), dtype=np.int64)
        remap[order] = np.arange(len(uniq))
        out = np.full(len(labels), NOISE, dtype=np.int64)
        out[valid] = remap[np.searchsorted(uniq, labels[valid])]
        return ClusterAssignment(out, len(uniq))

    def members(self) -> list[np.ndarray]:
        """Point indices of each cluster, ordered by cluster id."""
        labels = np.asarray(self.labels)
        order = np.argsort(labels, kind="stable")
        sorted_labels = labels[order]
        bounds = np.searchsorted(sorted_labels, np.arange(self.n_clusters + 1))
        return [order[bounds[c] : bounds[c + 1]] for c in range(self.n_clusters)]

    def sizes(self) -> np.ndarray:
        labels = np.asarray(self.labels)
        return np.bincount(labels[labels != NOISE], minlength=self.n_clusters)


class NeighborIndex:
    """Exact radius and k-NN queries over 3-D points (kd-tree backed)."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def radius(self, query, r: float) -> list[np.ndarray]:
        """Sorted indices of indexed points within distance ``r`` (inclusive) of each query point."""
        query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            return [np.zeros(0, dtype=np.int64) for _ in range(len(query))]
        hits = self._tree.query_ball_point(query, r)
        return [np.array(sorted(h), dtype=np.int64) for h in hits]

    def knn(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the ``min(k, len(self))`` nearest points, nearest first."""
        query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
        k = min(k, len(self.points))
        if self._tree is None or k == 0:
            return np.zeros((len(query), 0)), np.zeros((len(query), 0), dtype=np.int64)
        dist, idx = self._tree.query(query, k=k)
        return dist.reshape(len(query), k), idx.reshape(len(query), k).astype(np.int64)


def build_index(points) -> NeighborIndex:
    return NeighborIndex(points)


def dbscan(points, eps: float, min_pts: int) -> ClusterAssignment:
    """DBSCAN with ``min_pts`` counting the point itself.

    Points are scanned in input order and clusters are grown breadth-first;
    a border point reachable from several clusters joins the first one that
    reaches it.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("dbscan needs eps > 0 and min_pts >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return ClusterAssignment(labels, 0)
    neighbors = build_index(points).radius(points, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    cluster = 0
    for seed in range(n):
        if labels[seed] != NOISE or not core[seed]:
            continue
        labels[seed] = cluster
        frontier = [seed]
        while frontier:
            nxt = []
            for p in frontier:
                for q in neighbors[p]:
                    if labels[q] == NOISE:
                        labels[q] = cluster
                        if core[q]:
                            nxt.append(q)
            frontier = nxt
        cluster += 1
    return ClusterAssignment(labels, cluster)


def _core_distances(points, min_samples):
    # min_samples counts the point itself, as in the common HDBSCAN implementations
    k = min(min_samples, len(points))
    dist, _ = build_index(points).knn(points, k)
    return dist[:, -1]


def _mutual_reachability_mst(points, core):
    """Prim's algorithm on the dense mutual-reachability graph.

    Returns (n-1, 3) rows ``(last_added, new, weight)`` in insertion order.
    Pairing each new node with the previously added one (rather than its true
    nearest tree node) yields the same single-linkage hierarchy once the rows
    are sorted by weight.
    """
    n = len(points)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    edges = np.empty((n - 1, 3))
    current = 0
    in_tree[0] = True
    for step in range(n - 1):
        d = np.sqrt(np.sum((points - points[current]) ** 2, axis=1))
        mr = np.maximum(np.maximum(d, core), core[current])
        better = (mr < best) & ~in_tree
        best[better] = mr[better]
        masked = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(masked))
        edges[step] = (current, nxt, best[nxt])
        in_tree[nxt] = True
        current = nxt
    return edges


def _single_linkage(edges, n):
    """Dendrogram rows ``(left, right, distance, size)``; node ``n + i`` is the i-th merge."""
    order = np.argsort(edges[:, 2])
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    tree = np.empty((n - 1, 4))
    for i, e in enumerate(order):
        u, v, w = int(edges[e, 0]), int(edges[e, 1]), edges[e, 2]
        ru, rv = find(u), find(v)
        node = n + i
        parent[ru] = parent[rv] = node
        size[node] = size[ru] + size[rv]
        tree[i] = (ru, rv, w, size[node])
    return tree


def _condense(tree, n, min_cluster_size):
    """Condensed cluster tree as parallel arrays (parent, child, lambda, child_size).

    Cluster labels start at ``n`` (the root); points keep their indices.
    """
    root = 2 * n - 2
    left = tree[:, 0].astype(np.int64)
    right = tree[:, 1].astype(np.int64)
    dist = tree[:, 2]
    sizes = np.concatenate([np.ones(n, dtype=np.int64), tree[:, 3].astype(np.int64)])

    def leaves(node):
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                stack.extend((left[x - n], right[x - n]))
        return out

    relabel = {root: n}
    next_label = n + 1
    rows = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node < n:
            continue
        i = node - n
        lam = 1.0 / dist[i] if dist[i] > 0 else np.inf
        l, r = left[i], right[i]
        ls, rs = sizes[l], sizes[r]
        parent_label = relabel[node]
        if ls >= min_cluster_size and rs >= min_cluster_size:
            for child, cs in ((l, ls), (r, rs)):
                relabel[child] = next_label
                rows.append((parent_label, next_label, lam, cs))
                next_label += 1
                stack.append(child)
        elif ls < min_cluster_size and rs < min_cluster_size:
            for child in (l, r):
                for p in leaves(child):
                    rows.append((parent_label, p, lam, 1))
        else:
            big, small = (l, r) if ls >= min_cluster_size else (r, l)
            for p in leaves(small):
                rows.append((parent_label, p, lam, 1))
            relabel[big] = parent_label
            stack.append(big)
    rows = np.array(rows, dtype=object).reshape(-1, 4)
    return (
        rows[:, 0].astype(np.int64),
        rows[:, 1].astype(np.int64),
        rows[:, 2].astype(np.float64),
        rows[:, 3].astype(np.int64),
    )


def _excess_of_mass(parent, child, lam, child_size, n):
    """Select flat clusters maximizing total stability; the root is never selected."""
    lam = np.minimum(lam, 1e200)
    is_cluster_row = child >= n
    birth = {n: 0.0}
    birth.update(zip(child[is_cluster_row].tolist(), lam[is_cluster_row].tolist()))
    stability = dict.fromkeys(np.unique(parent).tolist(), 0.0)
    for p, l, s in zip(parent.tolist(), lam.tolist(), child_size.tolist()):
        stability[p] += (l - birth[p]) * s
    children: dict[int, list[int]] = {}
    for p, c in zip(parent[is_cluster_row].tolist(), child[is_cluster_row].tolist()):
        children.setdefault(p, []).append(c)

    selected = {}
    # children always carry larger labels than their parent
    for c in sorted(stability, reverse=True):
        if c == n:
            continue
        kids = children.get(c, [])
        subtree = sum(stability.get(k, 0.0) for k in kids)
        if subtree > stability[c]:
            selected[c] = False
            stability[c] = subtree
        else:
            selected[c] = True
            stack = list(kids)
            while stack:
                k = stack.pop()
                selected[k] = False
                stack.extend(children.get(k, []))
    return sorted(c for c, keep in selected.items() if keep)


def _label_points(parent, child, selected, n):
    """Each point takes the label of its nearest selected ancestor, else NOISE."""
    labels = np.full(n, NOISE, dtype=np.int64)
    label_of = {c: i for i, c in enumerate(selected)}
    node_label = {n: NOISE}
    # rows are emitted parent-first, so a row's parent is always resolved
    for p, c in zip(parent.tolist(), child.tolist()):
        lab = node_label[p]
        if c >= n:
            node_label[c] = label_of.get(c, lab)
        else:
            labels[c] = lab
    return labels


def hdbscan(points, min_cluster_size: int = 10, min_samples: int = 5) -> ClusterAssignment:
    """HDBSCAN with excess-of-mass cluster selection (root cluster never selected).

    Pipeline: core distances -> mutual-reachability MST -> single-linkage
    tree -> condensed tree -> stability-based selection. Memory and time are
    O(n^2) in the point count.
    """
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    if min_samples < 1:
        raise ValueError("min_samples must be >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n < min_cluster_size or n < 2:
        return ClusterAssignment(np.full(n, NOISE, dtype=np.int64), 0)
    core = _core_distances(points, min_samples)
    edges = _mutual_reachability_mst(points, core)
    tree = _single_linkage(edges, n)
    parent, child, lam, child_size = _condense(tree, n, min_cluster_size)
    selected = _excess_of_mass(parent, child, lam, child_size, n)
    labels = _label_points(parent, child, selected, n)
    return ClusterAssignment(labels, len(selected)).compact()


def meanshift(points, bandwidth: float, max_iter: int = 300, tol: float = 1e-3) -> ClusterAssignment:
    """Flat-kernel mean shift seeded at every point.

    Converged modes are merged greedily, densest first, into any kept mode
    within ``bandwidth / 2``. Each point joins the cluster of the mode its
    own seed converged to; seeds still moving after ``max_iter`` iterations
    join the nearest kept mode instead.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        return ClusterAssignment(np.zeros(0, dtype=np.int64), 0)
    tree = cKDTree(points)
    modes = points.copy()
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        hits = tree.query_ball_point(modes[idx], bandwidth)
        for j, h in zip(idx, hits):
            new = points[h].mean(axis=0)
            if np.linalg.norm(new - modes[j]) < tol * bandwidth:
                active[j] = False
            modes[j] = new
    converged = ~active
    if active.any():
        log.warning("meanshift: %d seeds did not converge in %d iterations", int(active.sum()), max_iter)

    conv_idx = np.flatnonzero(converged)
    if len(conv_idx) == 0:
        conv_idx = np.arange(n)
    density = np.array([len(h) for h in tree.query_ball_point(modes[conv_idx], bandwidth)])
    order = conv_idx[np.lexsort((conv_idx, -density))]
    kept: list[int] = []
    mode_label = np.full(n, NOISE, dtype=np.int64)
    for j in order:
        if kept:
            d = np.linalg.norm(modes[kept] - modes[j], axis=1)
            k = int(np.argmin(d))
            if d[k] <= bandwidth / 2:
                mode_label[j] = mode_label[kept[k]]
                continue
        mode_label[j] = len(kept)
        kept.append(j)
    labels = mode_label.copy()
    if active.any() and kept:
        d, k = cKDTree(modes[kept]).query(points[active])
        labels[active] = mode_label[np.asarray(kept)[k]]
    return ClusterAssignment(labels, len(kept)).compact()


@dataclass(frozen=True)
class ClusteringParams:
    method: str = "hdbscan"
    min_cluster_size: int = 10
    min_samples: int = 5
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 5
    meanshift_bandwidth: float = 1.5
    per_class: bool = True


def cluster_points(points, params: ClusteringParams) -> ClusterAssignment:
    if params.method == "hdbscan":
        return hdbscan(points, params.min_cluster_size, params.min_samples)
    if params.method == "dbscan":
        return dbscan(points, params.dbscan_eps, params.dbscan_min_pts)
    if params.method == "meanshift":
        return meanshift(points, params.meanshift_bandwidth)
    raise ValueError(f"unknown clustering method {params.method!r}")


def oversegment_foreground(frame: PointCloudFrame, params: ClusteringParams = ClusteringParams()) -> ClusterAssignment:
    """Cluster the frame's thing points; returns frame-length labels with NOISE on stuff.

    With ``per_class`` each thing class is clustered on its own and cluster
    ids are offset so they stay unique across classes.
    """
    labels = np.full(len(frame), NOISE, dtype=np.int64)
    thing = frame.thing_mask
    xyz = frame.xyz.astype(np.float64)
    if params.per_class:
        groups = [np.flatnonzero(thing & (frame.semantic == c)) for c in frame.class_table.thing_ids]
    else:
        groups = [np.flatnonzero(thing)]
    offset = 0
    for idx in groups:
        if len(idx) == 0:
            continue
        sub = cluster_points(xyz[idx], params)
        hit = sub.labels != NOISE
        labels[idx[hit]] = sub.labels[hit] + offset
        offset += sub.n_clusters
    return ClusterAssignment(labels, offset)
