"""Per-frame pipeline stages and dataset layout shared by the CLI and scripts.

A dataset directory holds ``velodyne/<name>.bin``, ``labels/<name>.label``
and ``manifest.json``. Prediction directories hold ``<name>.label``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, TypeVar

import numpy as np

from panograph.config import PipelineConfig
from panograph.edgenet.model import EdgeNetInput, EdgeNetParams, embed_clusters, forward_prepared, prepare_input
from panograph.edgenet.optim import TrainSample
from panograph.errors import DataError
from panograph.graph_builder import associate_clusters, build_cluster_graph
from panograph.instance_merger import binarize, connected_components, majority_vote_refine, project_instances
from panograph.oversegmentation import NOISE, ClusterAssignment, oversegment_foreground
from panograph.panoptic_fusion import FusionReport, PanopticFrame, fuse
from panograph.scene_io import ClassTable, PointCloudFrame, read_frame, read_labels

T = TypeVar("T")
R = TypeVar("R")

MANIFEST = "manifest.json"


def ordered_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally across worker processes; result order is input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


@dataclass(frozen=True)
class FrameRef:
    name: str
    bin_path: Path
    label_path: Path

    def load(self, class_table: ClassTable) -> PointCloudFrame:
        return read_frame(self.bin_path, self.label_path, class_table)


def dataset_frames(root: str | Path) -> list[FrameRef]:
    """Frames of a dataset directory in name order; every scan needs a label file."""
    root = Path(root)
    vel = root / "velodyne"
    if not vel.is_dir():
        raise DataError(f"{root} has no velodyne/ directory")
    refs = []
    for bin_path in sorted(vel.glob("*.bin")):
        label = root / "labels" / (bin_path.stem + ".label")
        if not label.exists():
            raise DataError(f"missing label file for {bin_path.name}")
        refs.append(FrameRef(bin_path.stem, bin_path, label))
    return refs


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def external_semantics(semantic_dir: str | Path, name: str, n_points: int) -> np.ndarray:
    sem, _ = read_labels(Path(semantic_dir) / f"{name}.label")
    if len(sem) != n_points:
        raise DataError(f"{name}: external semantics have {len(sem)} points, scan has {n_points}")
    return sem


def with_semantics(frame: PointCloudFrame, config: PipelineConfig, name: str) -> PointCloudFrame:
    """The frame as the instance branch sees it: ground truth or external semantics, no instances."""
    sem = frame.semantic if not config.semantic_dir else external_semantics(config.semantic_dir, name, len(frame))
    return frame.with_labels(semantic=sem, instance=np.zeros(len(frame), dtype=np.uint16))


def training_sample(frame: PointCloudFrame, config: PipelineConfig, name: str = "") -> TrainSample:
    """Over-segment with ground-truth semantics and label edges from ground-truth instances."""
    assignment = oversegment_foreground(frame, config.clustering())
    inp = prepare_input(frame, assignment, voxel_size=config.voxel_size, normal_k=config.normal_k)
    keep = assignment.labels != NOISE
    labels = associate_clusters(
        assignment.labels[keep], frame.instance[keep].astype(np.int64), assignment.n_clusters, skip_instance_zero=True
    )
    return TrainSample(inp, labels, name)


@dataclass
class Inference:
    panoptic: PanopticFrame
    assignment: ClusterAssignment
    edge_probs: np.ndarray
    adjacency: np.ndarray
    fusion: FusionReport
    inp: EdgeNetInput | None = None


def merge_and_fuse(frame: PointCloudFrame, assignment: ClusterAssignment, adjacency, config: PipelineConfig):
    partition = connected_components(adjacency)
    instances = project_instances(assignment, partition, len(frame))
    semantic = majority_vote_refine(frame.semantic, instances)
    return fuse(semantic, instances, frame.class_table, config.noise_policy, frame.xyz)


def infer_frame(frame: PointCloudFrame, params: EdgeNetParams, config: PipelineConfig) -> Inference:
    """Full instance branch on a frame whose semantics are already set."""
    assignment = oversegment_foreground(frame, config.clustering())
    if assignment.n_clusters == 0:
        probs = np.zeros((0, 0, 2))
        inp = None
    else:
        inp = prepare_input(frame, assignment, voxel_size=config.voxel_size, normal_k=config.normal_k)
        probs = forward_prepared(inp, params)
    adj = binarize(probs, config.tau) if len(probs) else np.zeros((0, 0), dtype=bool)
    panoptic, report = merge_and_fuse(frame, assignment, adj, config)
    return Inference(panoptic, assignment, probs, adj, report, inp)


def clusters_as_instances(frame: PointCloudFrame, config: PipelineConfig, method: str) -> PanopticFrame:
    """Baseline: every cluster of ``method`` is an instance, no learned merging."""
    assignment = oversegment_foreground(frame, config.clustering(method))
    adj = np.eye(assignment.n_clusters, dtype=bool)
    panoptic, _ = merge_and_fuse(frame, assignment, adj, config)
    return panoptic


def graph_dump(frame: PointCloudFrame, result: Inference, params: EdgeNetParams) -> dict:
    """Cluster graph (node and edge features), edge probabilities and adjacency as JSON-ready data."""
    if result.inp is None:
        return {"graph": {"n_nodes": 0}, "edge_probs": [], "adjacency": []}
    graph = build_cluster_graph(frame, result.assignment, embed_clusters(result.inp, params))
    return {
        "graph": graph.to_json(),
        "edge_probs": result.edge_probs[..., 1].tolist(),
        "adjacency": result.adjacency.astype(int).tolist(),
    }
