"""Pipeline configuration: a flat, typed ``key = value`` text format.

Blank lines and ``#`` comments are ignored. Every key must name a field of
``PipelineConfig``; values are parsed by the field's type. Booleans accept
true/false/yes/no/1/0.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from panograph.edgenet.optim import TrainConfig
from panograph.errors import ConfigError
from panograph.oversegmentation import ClusteringParams
from panograph.panoptic_fusion import NOISE_POLICIES
from panograph.scene_io import SYNTHETIC_CLASSES, ClassTable, SyntheticSceneConfig

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


@dataclass(frozen=True)
class PipelineConfig:
    # paths; empty means "not set"
    class_table: str = ""
    data_dir: str = ""
    output_dir: str = ""
    checkpoint: str = ""
    semantic_dir: str = ""
    # synthetic data
    n_frames: int = 10
    crowding: bool = True
    # over-segmentation
    cluster_method: str = "hdbscan"
    min_cluster_size: int = 10
    min_samples: int = 5
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 5
    meanshift_bandwidth: float = 1.5
    per_class: bool = True
    # network and merging
    voxel_size: float = 0.1
    normal_k: int = 16
    tau: float = 0.5
    noise_policy: str = "keep"
    # optimisation
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 60
    batch_size: int = 1
    class_weights: bool = True
    seed: int = 0
    # evaluation
    ignore_ids: str = ""
    min_stuff_points: int = 0

    def check(self) -> None:
        if self.cluster_method not in ("hdbscan", "dbscan", "meanshift"):
            raise ConfigError(f"cluster_method must be hdbscan, dbscan or meanshift, got {self.cluster_method!r}")
        if self.noise_policy not in NOISE_POLICIES:
            raise ConfigError(f"noise_policy must be one of {NOISE_POLICIES}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        positive = ("voxel_size", "dbscan_eps", "meanshift_bandwidth", "lr", "epochs", "batch_size", "n_frames")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.min_cluster_size < 2:
            raise ConfigError("min_cluster_size must be >= 2")
        if self.min_samples < 1 or self.dbscan_min_pts < 1:
            raise ConfigError("min_samples and dbscan_min_pts must be >= 1")
        if self.normal_k < 3:
            raise ConfigError("normal_k must be >= 3")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay be >= 0")
        self.ignore_set()

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    def clustering(self, method: str | None = None) -> ClusteringParams:
        return ClusteringParams(
            method=method or self.cluster_method,
            min_cluster_size=self.min_cluster_size,
            min_samples=self.min_samples,
            dbscan_eps=self.dbscan_eps,
            dbscan_min_pts=self.dbscan_min_pts,
            meanshift_bandwidth=self.meanshift_bandwidth,
            per_class=self.per_class,
        )

    def training(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            class_weights=self.class_weights,
            tau=self.tau,
            seed=self.seed,
        )

    def scene(self, seed: int) -> SyntheticSceneConfig:
        return SyntheticSceneConfig(crowding=self.crowding, seed=seed)

    def classes(self) -> ClassTable:
        return ClassTable.from_file(self.class_table) if self.class_table else SYNTHETIC_CLASSES

    def ignore_set(self) -> frozenset[int]:
        try:
            return frozenset(int(t) for t in self.ignore_ids.split(",") if t.strip())
        except ValueError:
            raise ConfigError(f"ignore_ids must be comma separated integers, got {self.ignore_ids!r}") from None

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value) -> str:
    return str(value).lower() if isinstance(value, bool) else str(value)


def _coerce(name: str, kind: str, raw: str):
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def apply_overrides(config: PipelineConfig, pairs: dict[str, str]) -> PipelineConfig:
    unknown = sorted(set(pairs) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    changes = {k: _coerce(k, _FIELD_TYPES[k], v) for k, v in pairs.items()}
    out = config.replace(**changes)
    out.check()
    return out


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return apply_overrides(base or PipelineConfig(), pairs)


def load_config(path: str | Path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
