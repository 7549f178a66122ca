"""Cluster graph construction: point features, node/edge features and edge labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from panograph.errors import DataError
from panograph.oversegmentation import NOISE, ClusterAssignment, build_index
from panograph.scene_io import PointCloudFrame

N_PROB_CLASSES = 19
POINT_FEATURE_WIDTH = 3 + 1 + N_PROB_CLASSES + 1
EMBED_DIM = 32
NODE_FEATURE_WIDTH = EMBED_DIM + 3

# column layout of the per-point feature matrix
FEATURE_LAYOUT = {
    "normal": slice(0, 3),
    "intensity": slice(3, 4),
    "class_probs": slice(4, 4 + N_PROB_CLASSES),
    "height": slice(4 + N_PROB_CLASSES, POINT_FEATURE_WIDTH),
}


def estimate_normals(points, k: int = 16, viewpoint=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Unit normals from k-NN PCA, oriented toward ``viewpoint``.

    The normal is the eigenvector of the smallest covariance eigenvalue.
    When a normal is perpendicular to the viewing ray its largest-magnitude
    component is made positive instead. Neighborhoods that are rank
    deficient (fewer than 3 points, collinear or coincident) give a zero
    vector.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    normals = np.zeros((n, 3))
    if n < 3:
        return normals
    _, idx = build_index(points).knn(points, k)
    nb = points[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / idx.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 1] <= 1e-10 * scale) | (evals[:, 2] <= 1e-20)
    to_view = np.asarray(viewpoint, dtype=np.float64) - points
    dot = np.einsum("ni,ni->n", normals, to_view)
    tie = np.abs(dot) <= 1e-9 * np.linalg.norm(to_view, axis=1)
    flip = np.where(tie, normals[np.arange(n), np.argmax(np.abs(normals), axis=1)] < 0, dot < 0)
    normals[flip] *= -1
    normals[degenerate] = 0.0
    return normals


def one_hot_probs(semantic, n_classes: int = N_PROB_CLASSES) -> np.ndarray:
    semantic = np.asarray(semantic, dtype=np.int64)
    if np.any(semantic >= n_classes):
        raise DataError(f"class id >= {n_classes} has no probability column")
    probs = np.zeros((len(semantic), n_classes))
    probs[np.arange(len(semantic)), semantic] = 1.0
    return probs


def ground_height(frame: PointCloudFrame) -> float:
    """Ground level estimate: the 2nd percentile of all point heights."""
    if len(frame) == 0:
        return 0.0
    return float(np.percentile(frame.xyz[:, 2].astype(np.float64), 2))


def build_point_features(frame: PointCloudFrame, semantic_probs=None, index=None, k: int = 16) -> np.ndarray:
    """(M, 24) features for the points in ``index``: normal, intensity, class probabilities, height.

    Probabilities default to one-hot rows of the frame's semantic labels and
    are zero-padded or truncated to 19 columns. Normals are estimated over
    the selected points only.
    """
    index = np.arange(len(frame)) if index is None else np.asarray(index, dtype=np.int64)
    if semantic_probs is None:
        probs = one_hot_probs(frame.semantic[index])
    else:
        probs = np.asarray(semantic_probs, dtype=np.float64)
        if probs.shape[0] == len(frame) and len(index) != len(frame):
            probs = probs[index]
        if probs.shape[0] != len(index):
            raise DataError("semantic_probs rows do not match selected points")
        if len(probs) and not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-6):
            raise DataError("semantic probability rows must sum to 1")
        if probs.shape[1] < N_PROB_CLASSES:
            probs = np.pad(probs, ((0, 0), (0, N_PROB_CLASSES - probs.shape[1])))
        probs = probs[:, :N_PROB_CLASSES]
    xyz = frame.xyz[index].astype(np.float64)
    feats = np.empty((len(index), POINT_FEATURE_WIDTH))
    feats[:, FEATURE_LAYOUT["normal"]] = estimate_normals(xyz, k) if len(index) else 0.0
    feats[:, FEATURE_LAYOUT["intensity"]] = frame.intensity[index, None]
    feats[:, FEATURE_LAYOUT["class_probs"]] = probs
    feats[:, FEATURE_LAYOUT["height"]] = xyz[:, 2:3] - ground_height(frame)
    return feats


def cluster_centroids(xyz, assignment: ClusterAssignment) -> np.ndarray:
    labels = np.asarray(assignment.labels)
    keep = labels != NOISE
    xyz = np.asarray(xyz, dtype=np.float64)
    sums = np.zeros((assignment.n_clusters, 3))
    np.add.at(sums, labels[keep], xyz[keep])
    counts = np.bincount(labels[keep], minlength=assignment.n_clusters)
    return sums / np.maximum(counts, 1)[:, None]


def cosine_matrix(embeddings) -> np.ndarray:
    """Pairwise cosine similarity; any pair involving a zero vector scores 0."""
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = emb / safe[:, None]
    cos = unit @ unit.T
    cos[norms == 0, :] = 0.0
    cos[:, norms == 0] = 0.0
    return np.clip(cos, -1.0, 1.0)


def distance_matrix(centroids) -> np.ndarray:
    c = np.asarray(centroids, dtype=np.float64)
    return np.sqrt(np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1))


@dataclass
class ClusterGraph:
    """Complete graph over the clusters of one frame."""

    node_point_indices: list[np.ndarray]
    node_centroid: np.ndarray
    node_embedding: np.ndarray
    edge_feature: np.ndarray
    edge_label: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.node_point_indices)

    @property
    def node_feature(self) -> np.ndarray:
        return np.concatenate([self.node_embedding, self.node_centroid], axis=1)

    def to_json(self) -> dict:
        out = {
            "n_nodes": self.n_nodes,
            "node_point_indices": [ix.tolist() for ix in self.node_point_indices],
            "node_centroid": self.node_centroid.tolist(),
            "node_feature": self.node_feature.tolist(),
            "edge_cosine": self.edge_feature[..., 0].tolist(),
            "edge_distance": self.edge_feature[..., 1].tolist(),
        }
        if self.edge_label is not None:
            out["edge_label"] = self.edge_label.astype(int).tolist()
        return out


def build_cluster_graph(frame: PointCloudFrame, assignment: ClusterAssignment, embeddings) -> ClusterGraph:
    embeddings = np.asarray(embeddings, dtype=np.float64).reshape(-1, EMBED_DIM)
    if len(embeddings) != assignment.n_clusters:
        raise DataError(f"{len(embeddings)} embeddings for {assignment.n_clusters} clusters")
    centroids = cluster_centroids(frame.xyz, assignment)
    edge = np.stack([cosine_matrix(embeddings), distance_matrix(centroids)], axis=-1)
    return ClusterGraph(
        node_point_indices=assignment.members(),
        node_centroid=centroids,
        node_embedding=embeddings,
        edge_feature=edge.reshape(assignment.n_clusters, assignment.n_clusters, 2),
    )


OFFSET = 1 << 32


def associate_clusters(cluster_ids, gt_instance_ids, n_clusters: int | None = None, skip_instance_zero: bool = False) -> np.ndarray:
    """Ground-truth edge labels: clusters sharing any ground-truth instance are connected.

    Each point's (instance, cluster) pair is packed into one integer as
    ``cluster + 2**32 * instance``; the distinct packed values list every
    cluster observed inside every instance, and all pairs of clusters in an
    instance's list are marked True. The diagonal is True. A cluster
    touching two instances links the clusters of both.
    """
    c = np.asarray(cluster_ids, dtype=np.int64)
    g = np.asarray(gt_instance_ids, dtype=np.int64)
    if c.shape != g.shape:
        raise DataError("cluster and instance arrays differ in length")
    if len(c) and (c.min() < 0 or g.min() < 0 or c.max() >= OFFSET or g.max() >= OFFSET):
        raise DataError("cluster and instance ids must lie in [0, 2**32)")
    if n_clusters is None:
        n_clusters = int(c.max()) + 1 if len(c) else 0
    labels = np.zeros((n_clusters, n_clusters), dtype=bool)
    np.fill_diagonal(labels, True)
    if skip_instance_zero:
        keep = g != 0
        c, g = c[keep], g[keep]
    combo = np.unique(c.astype(np.uint64) + np.uint64(OFFSET) * g.astype(np.uint64))
    gt_part = combo // np.uint64(OFFSET)
    pred_part = (combo % np.uint64(OFFSET)).astype(np.int64)
    groups: dict[int, list[int]] = {}
    for gid, cid in zip(gt_part.tolist(), pred_part.tolist()):
        groups.setdefault(gid, []).append(cid)
    for members in groups.values():
        labels[np.ix_(members, members)] = True
    return labels
