"""EdgeNet: sparse-conv cluster embedding, two SAGE layers, pairwise edge MLP.

Shapes (M clustered points, V voxel sites, N clusters):

    point features  M x 24 -> voxel sites V x 24
    conv1 (ReLU)    V x 64
    conv2 (ReLU)    V x 32
    cluster pool    N x 32, concatenated with centroids -> N x 35
    sage1 (ReLU)    N x 64
    sage2           N x 32
    edge MLP        (N x N) x 32 -> (N x N) x 2, softmax

Parameters live in a plain dict of float arrays keyed by ``PARAM_SHAPES``.
Everything is computed in float64 regardless of the parameter dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from panograph.edgenet.sparse import DENSE_GATHER_MAX_SITES, SparseVoxelTensor, conv_backward, conv_preactivation, voxelize
from panograph.errors import ShapeError
from panograph.graph_builder import EMBED_DIM, NODE_FEATURE_WIDTH, POINT_FEATURE_WIDTH, build_point_features, cluster_centroids
from panograph.oversegmentation import NOISE, ClusterAssignment
from panograph.scene_io import PointCloudFrame

PARAM_SHAPES = {
    "conv1.weight": (27, POINT_FEATURE_WIDTH, 64),
    "conv1.bias": (64,),
    "conv2.weight": (27, 64, EMBED_DIM),
    "conv2.bias": (EMBED_DIM,),
    "sage1.w_self": (NODE_FEATURE_WIDTH, 64),
    "sage1.w_neigh": (NODE_FEATURE_WIDTH, 64),
    "sage1.bias": (64,),
    "sage2.w_self": (64, 32),
    "sage2.w_neigh": (64, 32),
    "sage2.bias": (32,),
    "mlp1.weight": (64, 32),
    "mlp1.bias": (32,),
    "mlp2.weight": (32, 2),
    "mlp2.bias": (2,),
}

EdgeNetParams = dict  # name -> ndarray, keys and shapes as in PARAM_SHAPES


def init_params(seed: int = 0, dtype=np.float32) -> EdgeNetParams:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shape[0] * shape[1] if len(shape) == 3 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
    return params


def check_params(params: EdgeNetParams) -> None:
    if set(params) != set(PARAM_SHAPES):
        raise ShapeError(f"parameter names differ: {sorted(set(params) ^ set(PARAM_SHAPES))}")
    for name, shape in PARAM_SHAPES.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {tuple(params[name].shape)}")


def zeros_like_params(params: EdgeNetParams) -> EdgeNetParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class EdgeNetInput:
    """Everything about one frame the network needs that does not depend on the weights."""

    voxels: SparseVoxelTensor
    point_cluster: np.ndarray
    pool: np.ndarray
    centroids: np.ndarray
    point_index: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)


def pool_matrix(point_site, point_cluster, n_sites, n_clusters) -> np.ndarray:
    """(N, V) matrix averaging site rows over each cluster's points."""
    pool = np.zeros((n_clusters, n_sites))
    np.add.at(pool, (point_cluster, point_site), 1.0)
    counts = np.bincount(point_cluster, minlength=n_clusters)
    return pool / np.maximum(counts, 1)[:, None]


def prepare_input(
    frame: PointCloudFrame,
    assignment: ClusterAssignment,
    semantic_probs=None,
    voxel_size: float = 0.1,
    normal_k: int = 16,
) -> EdgeNetInput:
    """Voxelize the clustered points of ``frame``; NOISE points are left out."""
    labels = np.asarray(assignment.labels)
    index = np.flatnonzero(labels != NOISE)
    feats = build_point_features(frame, semantic_probs, index=index, k=normal_k)
    xyz = frame.xyz[index].astype(np.float64)
    voxels = voxelize(xyz, feats, voxel_size)
    point_cluster = labels[index].astype(np.int64)
    return EdgeNetInput(
        voxels=voxels,
        point_cluster=point_cluster,
        pool=pool_matrix(voxels.point_site, point_cluster, voxels.n_sites, assignment.n_clusters),
        centroids=cluster_centroids(frame.xyz, assignment),
        point_index=index,
    )


def cluster_avg_pool(tensor: SparseVoxelTensor, point_cluster, n_clusters: int) -> np.ndarray:
    """Node embedding = mean over the cluster's points of their site features."""
    return pool_matrix(tensor.point_site, np.asarray(point_cluster), tensor.n_sites, n_clusters) @ tensor.features


def neighbor_mean(h) -> np.ndarray:
    """Mean of the other nodes' rows in a complete graph; zeros for a single node."""
    n = len(h)
    if n < 2:
        return np.zeros_like(h)
    return (h.sum(axis=0, keepdims=True) - h) / (n - 1)


def sage_conv_forward(h, w_self, w_neigh, bias, relu: bool) -> np.ndarray:
    """``act(h @ w_self + mean_{j != i} h_j @ w_neigh + bias)`` over a complete graph."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[1] != w_self.shape[0] or w_self.shape != w_neigh.shape:
        raise ShapeError(f"sage layer {w_self.shape} does not accept width {h.shape[1]}")
    pre = h @ w_self + neighbor_mean(h) @ w_neigh + bias
    return np.maximum(pre, 0.0) if relu else pre


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def edge_mlp_forward(h, w1, b1, w2, b2, edges=None) -> np.ndarray:
    """``softmax(relu([h_i, h_j] @ w1 + b1) @ w2 + b2)`` per ordered pair.

    Returns (N, N, 2) over all pairs, or (E, 2) when ``edges`` lists (i, j) rows.
    Column 1 is the probability that i and j belong to the same instance.
    """
    h = np.asarray(h, dtype=np.float64)
    d = h.shape[1]
    if w1.shape[0] != 2 * d:
        raise ShapeError(f"edge MLP expects node width {w1.shape[0] // 2}, got {d}")
    src = h @ w1[:d]
    dst = h @ w1[d:]
    if edges is None:
        hidden = np.maximum(src[:, None, :] + dst[None, :, :] + b1, 0.0)
    else:
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        hidden = np.maximum(src[edges[:, 0]] + dst[edges[:, 1]] + b1, 0.0)
    return _softmax(hidden @ w2 + b2)


def _as64(params):
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def _forward(inp: EdgeNetInput, p):
    """Forward pass keeping every intermediate needed by the reverse pass."""
    c = {}
    vox = inp.voxels
    pairs = vox.neighbor_pairs()
    gather = vox.gather_index() if vox.n_sites <= DENSE_GATHER_MAX_SITES else None
    c["pre_c1"] = conv_preactivation(vox.features, pairs, p["conv1.weight"], p["conv1.bias"], gather)
    c["x1"] = np.maximum(c["pre_c1"], 0.0)
    c["pre_c2"] = conv_preactivation(c["x1"], pairs, p["conv2.weight"], p["conv2.bias"], gather)
    c["x2"] = np.maximum(c["pre_c2"], 0.0)
    emb = inp.pool @ c["x2"]
    c["h0"] = np.concatenate([emb, inp.centroids], axis=1)
    c["m0"] = neighbor_mean(c["h0"])
    c["pre_s1"] = c["h0"] @ p["sage1.w_self"] + c["m0"] @ p["sage1.w_neigh"] + p["sage1.bias"]
    c["h1"] = np.maximum(c["pre_s1"], 0.0)
    c["m1"] = neighbor_mean(c["h1"])
    c["h2"] = c["h1"] @ p["sage2.w_self"] + c["m1"] @ p["sage2.w_neigh"] + p["sage2.bias"]
    w1 = p["mlp1.weight"]
    c["pre_e1"] = (c["h2"] @ w1[:EMBED_DIM])[:, None, :] + (c["h2"] @ w1[EMBED_DIM:])[None, :, :] + p["mlp1.bias"]
    c["e1"] = np.maximum(c["pre_e1"], 0.0)
    logits = c["e1"] @ p["mlp2.weight"] + p["mlp2.bias"]
    c["logits"] = logits
    c["probs"] = _softmax(logits)
    return c


def forward_prepared(inp: EdgeNetInput, params: EdgeNetParams) -> np.ndarray:
    """(N, N, 2) edge class probabilities for a prepared frame."""
    if inp.n_clusters == 0:
        return np.zeros((0, 0, 2))
    return _forward(inp, _as64(params))["probs"]


def embed_clusters(inp: EdgeNetInput, params: EdgeNetParams) -> np.ndarray:
    """(N, 32) pooled cluster embeddings, the sparse-conv half of the network."""
    if inp.n_clusters == 0:
        return np.zeros((0, EMBED_DIM))
    return _forward(inp, _as64(params))["h0"][:, :EMBED_DIM]


def forward(frame: PointCloudFrame, assignment: ClusterAssignment, params: EdgeNetParams, **prepare_kwargs) -> np.ndarray:
    """(N, N) probabilities that clusters i and j belong to the same instance."""
    return forward_prepared(prepare_input(frame, assignment, **prepare_kwargs), params)[..., 1]


def _unmean_grad(d_m):
    """Reverse of ``neighbor_mean``."""
    n = len(d_m)
    if n < 2:
        return np.zeros_like(d_m)
    return (d_m.sum(axis=0, keepdims=True) - d_m) / (n - 1)


def edge_class_weights(labels, mask) -> np.ndarray:
    """Inverse-frequency weights for the (disconnect, connect) classes over masked pairs."""
    counts = np.array([np.sum(~labels & mask), np.sum(labels & mask)], dtype=np.float64)
    total = counts.sum()
    return np.where(counts > 0, total / (2.0 * np.maximum(counts, 1.0)), 0.0)


def loss_and_grad_prepared(inp: EdgeNetInput, labels, params: EdgeNetParams, class_weights: bool = False, need_grad: bool = True):
    """Cross-entropy over off-diagonal ordered pairs and its gradient for every parameter.

    With ``class_weights`` each pair is weighted by the inverse frequency of
    its label in this frame and the loss is the weighted mean.
    Returns ``(loss, grads, probs)``.
    """
    p = _as64(params)
    n = inp.n_clusters
    labels = np.asarray(labels, dtype=bool)
    if labels.shape != (n, n):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} clusters")
    if n == 0:
        return 0.0, zeros_like_params(p), np.zeros((0, 0, 2))
    c = _forward(inp, p)
    probs = c["probs"]
    off = ~np.eye(n, dtype=bool)
    target = labels.astype(np.int64)
    if class_weights:
        w_class = edge_class_weights(labels, off)
    else:
        w_class = np.ones(2)
    weight = np.where(off, w_class[target], 0.0)
    total = weight.sum()
    if total == 0:
        return 0.0, zeros_like_params(p), probs
    z = c["logits"] - c["logits"].max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(log_probs, target[..., None], axis=-1)[..., 0]
    loss = float(np.sum(weight * nll) / total)
    if not need_grad:
        return loss, None, probs

    g = {}
    d_logits = probs.copy()
    d_logits[..., 0] -= target == 0
    d_logits[..., 1] -= target == 1
    d_logits *= (weight / total)[..., None]

    # edge MLP
    e1 = c["e1"].reshape(-1, 32)
    g["mlp2.weight"] = e1.T @ d_logits.reshape(-1, 2)
    g["mlp2.bias"] = d_logits.sum(axis=(0, 1))
    d_pre_e1 = (d_logits @ p["mlp2.weight"].T) * (c["pre_e1"] > 0)
    g["mlp1.bias"] = d_pre_e1.sum(axis=(0, 1))
    d_src = d_pre_e1.sum(axis=1)
    d_dst = d_pre_e1.sum(axis=0)
    h2 = c["h2"]
    g["mlp1.weight"] = np.concatenate([h2.T @ d_src, h2.T @ d_dst], axis=0)
    w1 = p["mlp1.weight"]
    d_h2 = d_src @ w1[:EMBED_DIM].T + d_dst @ w1[EMBED_DIM:].T

    # sage2 (linear)
    g["sage2.w_self"] = c["h1"].T @ d_h2
    g["sage2.w_neigh"] = c["m1"].T @ d_h2
    g["sage2.bias"] = d_h2.sum(axis=0)
    d_h1 = d_h2 @ p["sage2.w_self"].T + _unmean_grad(d_h2 @ p["sage2.w_neigh"].T)

    # sage1 (ReLU)
    d_pre_s1 = d_h1 * (c["pre_s1"] > 0)
    g["sage1.w_self"] = c["h0"].T @ d_pre_s1
    g["sage1.w_neigh"] = c["m0"].T @ d_pre_s1
    g["sage1.bias"] = d_pre_s1.sum(axis=0)
    d_h0 = d_pre_s1 @ p["sage1.w_self"].T + _unmean_grad(d_pre_s1 @ p["sage1.w_neigh"].T)

    # pooling and sparse convs; centroids carry no parameters
    d_x2 = inp.pool.T @ d_h0[:, :EMBED_DIM]
    pairs = inp.voxels.neighbor_pairs()
    d_pre_c2 = d_x2 * (c["pre_c2"] > 0)
    g["conv2.weight"], g["conv2.bias"], d_x1 = conv_backward(c["x1"], pairs, p["conv2.weight"], d_pre_c2)
    d_pre_c1 = d_x1 * (c["pre_c1"] > 0)
    g["conv1.weight"], g["conv1.bias"], _ = conv_backward(inp.voxels.features, pairs, p["conv1.weight"], d_pre_c1, need_input_grad=False)
    return loss, g, probs


def loss_and_grad(frame: PointCloudFrame, assignment: ClusterAssignment, labels, params: EdgeNetParams, class_weights: bool = False, **prepare_kwargs):
    """Loss and gradients for one frame. Returns ``(loss, grads)``."""
    inp = prepare_input(frame, assignment, **prepare_kwargs)
    loss, grads, _ = loss_and_grad_prepared(inp, labels, params, class_weights=class_weights)
    return loss, grads
