"""How often does over-segmentation put two objects into one cluster?

An impure cluster links every instance it touches, so edge labels can
join objects that never share a cluster directly. This script counts
impure clusters on crowded synthetic frames and the object pairs that
end up merged in the ground-truth edge graph because of them.

    python3 scripts/label_impurity.py --frames 50
"""

from __future__ import annotations

import argparse

import numpy as np

from panograph.config import PipelineConfig
from panograph.graph_builder import associate_clusters
from panograph.instance_merger import connected_components
from panograph.oversegmentation import NOISE, oversegment_foreground
from panograph.scene_io import generate_synthetic_scene


def frame_stats(frame, params):
    a = oversegment_foreground(frame, params)
    keep = a.labels != NOISE
    inst = frame.instance[keep].astype(np.int64)
    clusters = a.labels[keep]
    impure = sum(len(np.unique(inst[clusters == c])) > 1 for c in range(a.n_clusters))
    labels = associate_clusters(clusters, inst, a.n_clusters, skip_instance_zero=True)
    # objects whose clusters fall in one component of the label graph
    comp = connected_components(labels)
    owner = {}
    for c in range(a.n_clusters):
        for i in np.unique(inst[clusters == c]):
            owner.setdefault(int(i), set()).add(int(comp[c]))
    merged = sum(1 for i in owner for j in owner if i < j and owner[i] & owner[j])
    return a.n_clusters, impure, len(owner), merged


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--method", default="hdbscan", choices=["hdbscan", "dbscan", "meanshift"])
    args = ap.parse_args()
    cfg = PipelineConfig(seed=args.seed)
    params = cfg.clustering(args.method)
    totals = np.zeros(4, dtype=np.int64)
    for i in range(args.frames):
        totals += frame_stats(generate_synthetic_scene(cfg.scene(args.seed + i)), params)
    clusters, impure, objects, merged = totals.tolist()
    print(f"frames {args.frames}  clusters {clusters}  impure {impure} ({100 * impure / max(clusters, 1):.2f}%)")
    print(f"objects {objects}  object pairs merged through impure clusters {merged}")


if __name__ == "__main__":
    main()
