"""Turn edge probabilities into instances and clean up their semantics."""

from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _scipy_components

from panograph.errors import DataError, ShapeError
from panograph.oversegmentation import NOISE, ClusterAssignment


def binarize(edge_probs, tau: float = 0.5) -> np.ndarray:
    """Symmetric adjacency: ``(p[i, j] + p[j, i]) / 2 > tau`` with a true diagonal.

    ``edge_probs`` is either the (N, N) connect probability or the full
    (N, N, 2) softmax output.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    p = np.asarray(edge_probs, dtype=np.float64)
    if p.ndim == 3:
        p = p[..., 1]
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ShapeError(f"edge probabilities must be square, got {p.shape}")
    adj = 0.5 * (p + p.T) > tau
    np.fill_diagonal(adj, True)
    return adj


def connected_components(adj) -> np.ndarray:
    """Instance id per node, numbered from 1 in order of each component's smallest node."""
    adj = np.asarray(adj, dtype=bool)
    n = len(adj)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    _, comp = _scipy_components(csr_matrix(adj), directed=False)
    # renumber by first appearance, which is the smallest member node
    _, first = np.unique(comp, return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(1, len(first) + 1)
    return rank[comp]


def project_instances(assignment: ClusterAssignment, partition, n_points: int | None = None) -> np.ndarray:
    """Per-point instance ids: a point inherits its cluster's instance; NOISE gets 0.

    ``assignment.labels`` is frame length, so stuff points (which are NOISE
    there) also get 0.
    """
    labels = np.asarray(assignment.labels, dtype=np.int64)
    partition = np.asarray(partition, dtype=np.int64)
    if len(partition) != assignment.n_clusters:
        raise DataError(f"partition has {len(partition)} entries for {assignment.n_clusters} clusters")
    if n_points is not None and n_points != len(labels):
        raise DataError("assignment does not cover the frame")
    out = np.zeros(len(labels), dtype=np.int64)
    keep = labels != NOISE
    out[keep] = partition[labels[keep]]
    return out


def majority_vote_refine(semantic, instance_ids) -> np.ndarray:
    """Replace each instance's classes by its most frequent class; ties go to the smaller id."""
    sem = np.asarray(semantic, dtype=np.int64)
    inst = np.asarray(instance_ids, dtype=np.int64)
    if sem.shape != inst.shape:
        raise DataError("semantic and instance arrays differ in length")
    out = sem.copy()
    mask = inst > 0
    if not mask.any():
        return out
    ids, inv = np.unique(inst[mask], return_inverse=True)
    n_cls = int(sem[mask].max()) + 1
    votes = np.zeros((len(ids), n_cls), dtype=np.int64)
    np.add.at(votes, (inv, sem[mask]), 1)
    # argmax returns the first maximum, i.e. the smallest class id
    out[mask] = np.argmax(votes, axis=1)[inv]
    return out


def quotient_adjacency(adj, partition) -> np.ndarray:
    """Adjacency between instances: two instances touch when any of their nodes do."""
    adj = np.asarray(adj, dtype=bool)
    part = np.asarray(partition, dtype=np.int64) - 1
    k = int(part.max()) + 1 if len(part) else 0
    onehot = np.zeros((len(part), k), dtype=np.int64)
    onehot[np.arange(len(part)), part] = 1
    return (onehot.T @ adj.astype(np.int64) @ onehot) > 0
