"""Point-cloud frames: SemanticKITTI-style ``.bin``/``.label`` I/O and synthetic scenes.

A ``.bin`` file holds little-endian float32 quadruples ``(x, y, z, intensity)``.
A ``.label`` file holds one little-endian uint32 per point: bits 0-15 are the
semantic class id, bits 16-31 the instance id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from panograph.errors import ConfigError, DataError, FormatError

BIN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
MAX_ID = 0xFFFF


@dataclass(frozen=True)
class ClassTable:
    """Class id -> display name, plus the set of thing ("countable") classes."""

    names: dict[int, str]
    things: frozenset[int]

    @property
    def thing_ids(self) -> list[int]:
        return sorted(self.things)

    @property
    def stuff_ids(self) -> list[int]:
        return sorted(c for c in self.names if c not in self.things)

    @property
    def n_classes(self) -> int:
        return max(self.names) + 1 if self.names else 0

    def is_thing(self, semantic: np.ndarray) -> np.ndarray:
        semantic = np.asarray(semantic)
        if not self.things:
            return np.zeros(semantic.shape, dtype=bool)
        return np.isin(semantic, np.fromiter(self.things, dtype=np.int64))

    @classmethod
    def parse(cls, text: str) -> ClassTable:
        """Parse ``id,name,thing|stuff`` lines; blank lines and ``#`` comments are skipped."""
        names: dict[int, str] = {}
        things = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ConfigError(f"class table line {lineno}: expected 'id,name,thing|stuff', got {raw!r}")
            try:
                cid = int(parts[0])
            except ValueError:
                raise ConfigError(f"class table line {lineno}: bad class id {parts[0]!r}") from None
            if not 0 <= cid <= MAX_ID:
                raise ConfigError(f"class table line {lineno}: class id {cid} outside 0..{MAX_ID}")
            if cid in names:
                raise ConfigError(f"class table line {lineno}: duplicate class id {cid}")
            kind = parts[2].lower()
            if kind not in ("thing", "stuff"):
                raise ConfigError(f"class table line {lineno}: kind must be thing or stuff, got {parts[2]!r}")
            names[cid] = parts[1]
            if kind == "thing":
                things.add(cid)
        return cls(names=names, things=frozenset(things))

    @classmethod
    def from_file(cls, path: str | Path) -> ClassTable:
        return cls.parse(Path(path).read_text())

    def to_text(self) -> str:
        lines = [f"{cid},{self.names[cid]},{'thing' if cid in self.things else 'stuff'}" for cid in sorted(self.names)]
        return "\n".join(lines) + "\n"


# Classes used by the synthetic generator.
ROAD, CAR, TRUCK, PEDESTRIAN, BUILDING = 0, 1, 2, 3, 4
SYNTHETIC_CLASSES = ClassTable(
    names={ROAD: "road", CAR: "car", TRUCK: "truck", PEDESTRIAN: "pedestrian", BUILDING: "building"},
    things=frozenset({CAR, TRUCK, PEDESTRIAN}),
)


@dataclass(frozen=True)
class PointCloudFrame:
    """One LiDAR sweep with per-point semantic class and instance id.

    ``xyz`` is (N, 3) float32 in meters, ``intensity`` is (N,) float32,
    ``semantic`` and ``instance`` are (N,) uint16.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    class_table: ClassTable | None = None

    def __post_init__(self):
        n = len(self.xyz)
        if self.xyz.shape != (n, 3):
            raise FormatError(f"xyz must have shape (N, 3), got {self.xyz.shape}")
        for name in ("intensity", "semantic", "instance"):
            if getattr(self, name).shape != (n,):
                raise FormatError(f"{name} must have shape ({n},), got {getattr(self, name).shape}")

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def thing_mask(self) -> np.ndarray:
        if self.class_table is None:
            raise DataError("frame has no class table; thing/stuff split unknown")
        return self.class_table.is_thing(self.semantic)

    def validate(self) -> None:
        """Raise ``DataError`` unless the frame satisfies the thing/stuff invariants."""
        if not np.all(np.isfinite(self.xyz)) or not np.all(np.isfinite(self.intensity)):
            raise DataError("non-finite coordinates or intensity")
        if np.any(self.intensity < 0) or np.any(self.intensity > 1):
            raise DataError("intensity outside [0, 1]")
        if self.class_table is None:
            return
        thing = self.thing_mask
        if np.any(self.instance[~thing] != 0):
            raise DataError("stuff point carries a nonzero instance id")

    def with_labels(self, semantic=None, instance=None) -> PointCloudFrame:
        return PointCloudFrame(
            xyz=self.xyz,
            intensity=self.intensity,
            semantic=self.semantic if semantic is None else np.asarray(semantic, dtype=np.uint16),
            instance=self.instance if instance is None else np.asarray(instance, dtype=np.uint16),
            class_table=self.class_table,
        )


def encode_labels(semantic: np.ndarray, instance: np.ndarray) -> np.ndarray:
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if np.any((semantic < 0) | (semantic > MAX_ID)) or np.any((instance < 0) | (instance > MAX_ID)):
        raise DataError("label ids must lie in 0..65535")
    return (semantic.astype(np.uint32) | (instance.astype(np.uint32) << 16)).astype(LABEL_DTYPE)


def decode_labels(words: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    words = np.asarray(words, dtype=np.uint32)
    return (words & 0xFFFF).astype(np.uint16), (words >> 16).astype(np.uint16)


def read_labels(label_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(label_path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{label_path}: size {len(raw)} is not a multiple of 4 bytes")
    return decode_labels(np.frombuffer(raw, dtype=LABEL_DTYPE))


def write_labels(label_path: str | Path, semantic: np.ndarray, instance: np.ndarray) -> None:
    Path(label_path).write_bytes(encode_labels(semantic, instance).tobytes())


def read_frame(bin_path: str | Path, label_path: str | Path, class_table: ClassTable | None = None) -> PointCloudFrame:
    """Load a frame. Intensities stored on a 0-255 scale are rescaled to [0, 1]."""
    raw = Path(bin_path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{bin_path}: size {len(raw)} is not a multiple of 16 bytes")
    data = np.frombuffer(raw, dtype=BIN_DTYPE).reshape(-1, 4)
    semantic, instance = read_labels(label_path)
    if len(semantic) != len(data):
        raise FormatError(f"{label_path}: {len(semantic)} labels for {len(data)} points")
    if not np.all(np.isfinite(data)):
        raise DataError(f"{bin_path}: non-finite values")
    xyz = np.ascontiguousarray(data[:, :3])
    intensity = np.ascontiguousarray(data[:, 3])
    if len(intensity) and (intensity.max() > 1.0 or intensity.min() < 0.0):
        intensity = np.clip(intensity / np.float32(255.0), 0.0, 1.0).astype(np.float32)
    return PointCloudFrame(xyz=xyz, intensity=intensity, semantic=semantic, instance=instance, class_table=class_table)


def write_frame(frame: PointCloudFrame, bin_path: str | Path, label_path: str | Path) -> None:
    frame.validate()
    data = np.empty((len(frame), 4), dtype=BIN_DTYPE)
    data[:, :3] = frame.xyz
    data[:, 3] = frame.intensity
    Path(bin_path).write_bytes(data.tobytes())
    write_labels(label_path, frame.semantic, frame.instance)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Object counts and geometry for one synthetic street scene.

    Vehicles are split by ``occlusion_gaps`` point-free strips across their
    long axis, which makes density clustering over-segment them. With
    ``crowding`` set, pedestrians stand in tight groups and next to vehicles,
    ``crowd_gap`` meters apart.
    """

    n_cars: int = 4
    n_trucks: int = 1
    n_pedestrians: int = 6
    car_size: tuple[tuple[float, float], ...] = ((3.8, 4.8), (1.6, 1.9), (1.4, 1.7))
    truck_size: tuple[tuple[float, float], ...] = ((7.0, 10.0), (2.3, 2.6), (2.8, 3.5))
    pedestrian_size: tuple[tuple[float, float], ...] = ((0.22, 0.32), (1.6, 1.9))
    extent: float = 20.0
    min_range: float = 3.0
    ground_density: float = 0.5
    building_density: float = 1.0
    vehicle_density: float = 20.0
    pedestrian_density: float = 60.0
    noise_sigma: float = 0.02
    sensor_height: float = 1.73
    occlusion_gaps: tuple[int, int] = (1, 2)
    gap_width: tuple[float, float] = (0.6, 0.9)
    min_separation: float = 3.0
    crowding: bool = False
    crowd_gap: tuple[float, float] = (0.35, 0.6)
    crowd_size: tuple[int, int] = (2, 4)
    seed: int = 0

    def check(self) -> None:
        for name in ("n_cars", "n_trucks", "n_pedestrians"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("ground_density", "building_density", "vehicle_density", "pedestrian_density"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.extent <= self.min_range or self.min_range < 0:
            raise ConfigError("extent must exceed min_range >= 0")
        ranges = list(self.car_size) + list(self.truck_size) + list(self.pedestrian_size)
        ranges += [self.gap_width, self.crowd_gap]
        for lo, hi in ranges:
            if not 0 < lo <= hi:
                raise ConfigError(f"degenerate size range ({lo}, {hi})")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.occlusion_gaps[0] <= self.occlusion_gaps[1]:
            raise ConfigError("occlusion_gaps must be an ordered non-negative range")
        if not 1 <= self.crowd_size[0] <= self.crowd_size[1]:
            raise ConfigError("crowd_size must be an ordered range >= 1")


@dataclass
class _Placed:
    kind: int
    center: np.ndarray
    radius: float
    yaw: float = 0.0
    dims: tuple = field(default_factory=tuple)


def _sample_rect(rng, density, u_len, v_len):
    n = rng.poisson(density * u_len * v_len)
    return rng.uniform(0, u_len, n), rng.uniform(0, v_len, n)


def _box_surface(rng, length, width, height, density, gaps):
    """Points on the four sides and top of an axis-aligned box centered on the
    origin in x/y with its base at z=0, minus the x-strips listed in ``gaps``."""
    pts = []
    for y0 in (-width / 2, width / 2):
        u, v = _sample_rect(rng, density, length, height)
        pts.append(np.stack([u - length / 2, np.full_like(u, y0), v], 1))
    for x0 in (-length / 2, length / 2):
        u, v = _sample_rect(rng, density, width, height)
        pts.append(np.stack([np.full_like(u, x0), u - width / 2, v], 1))
    u, v = _sample_rect(rng, density, length, width)
    pts.append(np.stack([u - length / 2, v - width / 2, np.full_like(u, height)], 1))
    pts = np.concatenate(pts)
    keep = np.ones(len(pts), dtype=bool)
    for lo, hi in gaps:
        keep &= ~((pts[:, 0] >= lo) & (pts[:, 0] <= hi))
    return pts[keep]


def _cylinder_surface(rng, radius, height, density):
    n = rng.poisson(density * 2 * np.pi * radius * height)
    theta = rng.uniform(0, 2 * np.pi, n)
    side = np.stack([radius * np.cos(theta), radius * np.sin(theta), rng.uniform(0, height, n)], 1)
    m = rng.poisson(density * np.pi * radius**2)
    r = radius * np.sqrt(rng.uniform(0, 1, m))
    phi = rng.uniform(0, 2 * np.pi, m)
    top = np.stack([r * np.cos(phi), r * np.sin(phi), np.full(m, height)], 1)
    return np.concatenate([side, top])


def _rotate_z(pts, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    out = pts.copy()
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1]
    return out


def _occlusion_strips(rng, length, cfg):
    n_gaps = int(rng.integers(cfg.occlusion_gaps[0], cfg.occlusion_gaps[1] + 1))
    if n_gaps == 0:
        return []
    # evenly spread strip centers with jitter so pieces stay comparable in size
    slots = np.linspace(-length / 2, length / 2, n_gaps + 2)[1:-1]
    spacing = length / (n_gaps + 1)
    strips = []
    for c in slots:
        c = c + rng.uniform(-0.15, 0.15) * spacing
        w = rng.uniform(*cfg.gap_width)
        strips.append((c - w / 2, c + w / 2))
    return strips


def _free(center, radius, placed, sep):
    return all(np.hypot(*(center - p.center)) >= radius + p.radius + sep for p in placed)


def _random_position(rng, cfg):
    r = rng.uniform(cfg.min_range, cfg.extent - 2.0)
    a = rng.uniform(0, 2 * np.pi)
    return np.array([r * np.cos(a), r * np.sin(a)])


def generate_synthetic_scene(config: SyntheticSceneConfig) -> PointCloudFrame:
    """Deterministic labeled street scene: road, two building walls, vehicles and pedestrians.

    Objects are placed by rejection sampling; one that finds no free spot
    (most likely a crowded pedestrian) is dropped, so a scene can hold fewer
    objects than requested.
    """
    config.check()
    rng = np.random.default_rng(config.seed)
    ground_z = -config.sensor_height
    ext = config.extent

    xyz_parts, sem_parts, inst_parts, inten_parts = [], [], [], []

    def emit(pts, cls, inst, base):
        xyz_parts.append(pts)
        sem_parts.append(np.full(len(pts), cls, dtype=np.uint16))
        inst_parts.append(np.full(len(pts), inst, dtype=np.uint16))
        inten_parts.append(base + rng.normal(0, 0.03, len(pts)))

    # stuff: road plane and two walls at the scene border
    u, v = _sample_rect(rng, config.ground_density, 2 * ext, 2 * ext)
    emit(np.stack([u - ext, v - ext, np.full_like(u, ground_z)], 1), ROAD, 0, rng.uniform(0.05, 0.15))
    for sign in (-1.0, 1.0):
        u, v = _sample_rect(rng, config.building_density, 2 * ext, 6.0)
        emit(np.stack([u - ext, np.full_like(u, sign * ext), v + ground_z], 1), BUILDING, 0, rng.uniform(0.2, 0.4))

    placed: list[_Placed] = []

    def place(radius, tries=200):
        for _ in range(tries):
            center = _random_position(rng, config)
            if _free(center, radius, placed, config.min_separation) and np.all(np.abs(center) <= ext - radius - 0.5):
                return center
        return None

    def place_beside(radius, anchor, gap, tries=50):
        """Center a pedestrian ``gap`` meters from the anchor's surface."""
        others = [p for p in placed if p is not anchor]
        for _ in range(tries):
            if anchor.kind == PEDESTRIAN:
                a = rng.uniform(0, 2 * np.pi)
                center = anchor.center + (anchor.dims[0] + radius + gap) * np.array([np.cos(a), np.sin(a)])
            else:
                length, width, _ = anchor.dims
                local = np.array([rng.uniform(-length / 2, length / 2), rng.choice([-1.0, 1.0]) * (width / 2 + gap + radius)])
                c, s_ = np.cos(anchor.yaw), np.sin(anchor.yaw)
                center = anchor.center + np.array([c * local[0] - s_ * local[1], s_ * local[0] + c * local[1]])
            if _free(center, radius, others, gap * 0.999) and np.all(np.abs(center) <= ext - radius - 0.5):
                return center
        return None

    vehicles = [(TRUCK, config.truck_size, config.n_trucks), (CAR, config.car_size, config.n_cars)]
    for kind, size, count in vehicles:
        for _ in range(count):
            length, width, height = (rng.uniform(lo, hi) for lo, hi in size)
            radius = 0.5 * float(np.hypot(length, width))
            center = place(radius)
            if center is not None:
                placed.append(_Placed(kind, center, radius, rng.uniform(0, np.pi), (length, width, height)))

    peds_left = config.n_pedestrians
    while peds_left > 0:
        group = 1
        anchor = None
        if config.crowding:
            group = min(peds_left, int(rng.integers(config.crowd_size[0], config.crowd_size[1] + 1)))
            parked = [p for p in placed if p.kind != PEDESTRIAN]
            if parked and rng.uniform() < 0.5:
                anchor = parked[int(rng.integers(len(parked)))]
        for _ in range(group):
            radius = rng.uniform(*config.pedestrian_size[0])
            height = rng.uniform(*config.pedestrian_size[1])
            peds_left -= 1
            if anchor is None:
                center = place(radius)
            else:
                center = place_beside(radius, anchor, rng.uniform(*config.crowd_gap))
            if center is None:
                continue
            ped = _Placed(PEDESTRIAN, center, radius, 0.0, (radius, height))
            placed.append(ped)
            if config.crowding:
                anchor = ped

    next_id = 1
    for obj in placed:
        if obj.kind == PEDESTRIAN:
            radius, height = obj.dims
            pts = _cylinder_surface(rng, radius, height, config.pedestrian_density)
            base = rng.uniform(0.1, 0.3)
        else:
            length, width, height = obj.dims
            pts = _box_surface(rng, length, width, height, config.vehicle_density, _occlusion_strips(rng, length, config))
            pts = _rotate_z(pts, obj.yaw)
            base = rng.uniform(0.3, 0.6) if obj.kind == CAR else rng.uniform(0.2, 0.5)
        pts[:, 0] += obj.center[0]
        pts[:, 1] += obj.center[1]
        pts[:, 2] += ground_z
        emit(pts, obj.kind, next_id, base)
        next_id += 1

    xyz = np.concatenate(xyz_parts) if xyz_parts else np.zeros((0, 3))
    if config.noise_sigma > 0:
        xyz = xyz + rng.normal(0, config.noise_sigma, xyz.shape)
    intensity = np.clip(np.concatenate(inten_parts), 0.0, 1.0)
    return PointCloudFrame(
        xyz=xyz.astype(np.float32),
        intensity=intensity.astype(np.float32),
        semantic=np.concatenate(sem_parts),
        instance=np.concatenate(inst_parts),
        class_table=SYNTHETIC_CLASSES,
    )
