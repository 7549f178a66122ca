"""Sparse voxel tensors and submanifold 3x3x3 convolution."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from panograph.errors import ShapeError

# kernel offsets in (dx, dy, dz) lexicographic order; index 13 is the center
KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER = 13


@dataclass
class SparseVoxelTensor:
    """Active voxel sites with one feature row each.

    ``coords`` (V, 3) int64 are unique and sorted lexicographically;
    ``point_site`` maps every input point to its site row.
    """

    coords: np.ndarray
    features: np.ndarray
    point_site: np.ndarray
    voxel_size: float
    _pairs: list | None = field(default=None, repr=False, compare=False)
    _gather: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_sites(self) -> int:
        return len(self.coords)

    def with_features(self, features) -> SparseVoxelTensor:
        return SparseVoxelTensor(self.coords, features, self.point_site, self.voxel_size, self._pairs, self._gather)

    def neighbor_pairs(self) -> list[tuple[int, np.ndarray, np.ndarray]]:
        """Per kernel offset with at least one hit: ``(offset_index, out_rows, in_rows)``.

        ``in_rows[i]`` is the site at ``coords[out_rows[i]] + offset``. Each
        site occurs at most once in either array for a given offset.
        """
        if self._pairs is None:
            self._pairs = _neighbor_pairs(self.coords)
        return self._pairs

    def gather_index(self) -> np.ndarray:
        """(V, 27) neighbor site per kernel offset, ``V`` (one past the end) where absent."""
        if self._gather is None:
            gather = np.full((self.n_sites, 27), self.n_sites, dtype=np.int64)
            for k, out_rows, in_rows in self.neighbor_pairs():
                gather[out_rows, k] = in_rows
            self._gather = gather
        return self._gather


def _neighbor_pairs(coords):
    if len(coords) == 0:
        return []
    shifted = coords - coords.min(axis=0) + 1
    dims = shifted.max(axis=0) + 2
    stride = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    keys = shifted @ stride
    # lexicographic coords give increasing keys
    pairs = []
    for k, off in enumerate(KERNEL_OFFSETS):
        query = keys + off @ stride
        pos = np.searchsorted(keys, query)
        pos_c = np.minimum(pos, len(keys) - 1)
        hit = keys[pos_c] == query
        if hit.any():
            pairs.append((k, np.flatnonzero(hit), pos_c[hit]))
    return pairs


def voxelize(points, features, voxel_size: float) -> SparseVoxelTensor:
    """Site = floor(xyz / voxel_size); site feature = mean of its points' features."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be > 0")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if len(features) != len(points):
        raise ShapeError(f"{len(features)} feature rows for {len(points)} points")
    if features.ndim == 1:
        features = features[:, None]
    grid = np.floor(points / voxel_size).astype(np.int64)
    if len(grid) == 0:
        return SparseVoxelTensor(np.zeros((0, 3), dtype=np.int64), np.zeros((0, features.shape[1])), np.zeros(0, dtype=np.int64), voxel_size)
    coords, inverse = np.unique(grid, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(coords), features.shape[1]))
    np.add.at(sums, inverse, features)
    counts = np.bincount(inverse, minlength=len(coords))
    return SparseVoxelTensor(coords, sums / counts[:, None], inverse, voxel_size)


# below this many sites one gathered matmul beats looping over kernel offsets
DENSE_GATHER_MAX_SITES = 512


def conv_preactivation(features, pairs, weight, bias, gather=None) -> np.ndarray:
    """``bias + sum_k features[site + offset_k] @ weight[k]`` at every site.

    ``gather`` (from ``SparseVoxelTensor.gather_index``) selects a single
    im2col matmul instead of the per-offset loop; both give the same sums.
    """
    if weight.ndim != 3 or weight.shape[0] != 27 or features.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv weight {weight.shape} does not accept {features.shape[1]} input channels")
    if gather is not None:
        padded = np.concatenate([features, np.zeros((1, features.shape[1]))])
        cols = padded[gather].reshape(len(features), -1)
        return cols @ weight.reshape(-1, weight.shape[2]) + bias
    out = np.empty((len(features), weight.shape[2]))
    out[:] = bias
    for k, out_rows, in_rows in pairs:
        out[out_rows] += features[in_rows] @ weight[k]
    return out


def conv_backward(features, pairs, weight, d_pre, need_input_grad=True):
    """Gradients of ``conv_preactivation`` w.r.t. weight, bias and (optionally) input."""
    d_weight = np.zeros_like(weight, dtype=np.float64)
    d_in = np.zeros_like(features) if need_input_grad else None
    for k, out_rows, in_rows in pairs:
        g = d_pre[out_rows]
        d_weight[k] = features[in_rows].T @ g
        if need_input_grad:
            # in_rows has no repeats for a fixed offset
            d_in[in_rows] += g @ weight[k].T
    return d_weight, d_pre.sum(axis=0), d_in


def sparse_conv_forward(tensor: SparseVoxelTensor, weight, bias, relu: bool = True) -> SparseVoxelTensor:
    """Submanifold convolution: output sites are exactly the input sites; absent neighbors contribute zero."""
    weight = np.asarray(weight, dtype=np.float64)
    gather = tensor.gather_index() if tensor.n_sites <= DENSE_GATHER_MAX_SITES else None
    pre = conv_preactivation(tensor.features, tensor.neighbor_pairs(), weight, np.asarray(bias, dtype=np.float64), gather)
    return tensor.with_features(np.maximum(pre, 0.0) if relu else pre)
