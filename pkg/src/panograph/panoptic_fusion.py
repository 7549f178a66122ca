"""Fuse per-point semantics and instance ids into a panoptic labelling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from panograph.errors import DataError
from panograph.oversegmentation import build_index
from panograph.scene_io import ClassTable, encode_labels

NOISE_POLICIES = ("keep", "nearest")


@dataclass(frozen=True)
class PanopticFrame:
    semantic: np.ndarray
    instance: np.ndarray
    class_table: ClassTable

    def __post_init__(self):
        if self.semantic.shape != self.instance.shape:
            raise DataError("semantic and instance arrays differ in length")

    def __len__(self) -> int:
        return len(self.semantic)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        return self.semantic.copy(), self.instance.copy()

    def encode(self) -> np.ndarray:
        return encode_labels(self.semantic, self.instance)

    def unassigned_things(self) -> np.ndarray:
        return np.isin(self.semantic, list(self.class_table.thing_ids)) & (self.instance == 0)


@dataclass
class FusionReport:
    stuff_with_instance: int = 0
    unassigned_things: int = 0
    reassigned_noise: int = 0
    notes: list[str] = field(default_factory=list)


def fuse(semantics, instance_ids, class_table: ClassTable, noise_policy: str = "keep", xyz=None) -> tuple[PanopticFrame, FusionReport]:
    """Zip classes with instances, zeroing instances on stuff points.

    With ``noise_policy="nearest"`` a thing point without an instance joins
    the instance of its nearest instanced point of the same class (needs
    ``xyz``). The default leaves it with instance 0.
    """
    if noise_policy not in NOISE_POLICIES:
        raise ValueError(f"noise_policy must be one of {NOISE_POLICIES}")
    sem = np.asarray(semantics, dtype=np.int64)
    inst = np.asarray(instance_ids, dtype=np.int64).copy()
    if sem.shape != inst.shape:
        raise DataError("semantic and instance arrays differ in length")
    report = FusionReport()
    thing = np.isin(sem, list(class_table.thing_ids))
    bad = ~thing & (inst != 0)
    report.stuff_with_instance = int(bad.sum())
    inst[bad] = 0
    if noise_policy == "nearest":
        if xyz is None:
            raise ValueError("nearest noise policy needs point coordinates")
        report.reassigned_noise = _assign_nearest(np.asarray(xyz, dtype=np.float64), sem, inst, thing)
    report.unassigned_things = int(np.sum(thing & (inst == 0)))
    frame = PanopticFrame(sem.astype(np.uint16), inst.astype(np.uint16), class_table)
    return frame, report


def _assign_nearest(xyz, sem, inst, thing) -> int:
    moved = 0
    for c in np.unique(sem[thing]):
        cls = sem == c
        donors = np.flatnonzero(cls & (inst > 0))
        orphans = np.flatnonzero(cls & (inst == 0))
        if len(donors) == 0 or len(orphans) == 0:
            continue
        _, nn = build_index(xyz[donors]).knn(xyz[orphans], 1)
        inst[orphans] = inst[donors[nn[:, 0]]]
        moved += len(orphans)
    return moved
