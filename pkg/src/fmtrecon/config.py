"""Experiment configuration: one JSON document with a schema version."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .ddpm import DATA_RANGES, DESK_SCHEDULE, PAPER_SCHEDULE, ShapeConfig, make_schedule
from .forward import OpticalProps, SensorLayout
from .geometry import GridSpec, SamplerConfig
from .netmodel import NetConfig
from .solvers import SolverConfig

SCHEMA_VERSION = 1


@dataclass
class GridSection:
    n: int = 32
    b: int = 16


@dataclass
class LayoutSection:
    src_angles: int = 8
    src_heights: int = 2
    det_angles: int = 16
    det_heights: int = 8


@dataclass
class OpticsSection:
    mu_a: float = 0.02
    mu_s_prime: float = 10.0
    robin_a: float = 1.0


@dataclass
class MeasurementSection:
    noise_level: float = 0.01
    num_views: int = 4
    normalized_born: bool = True


@dataclass
class ScheduleSection:
    preset: str = "desk"
    T: int | None = None
    beta_start: float | None = None
    beta_end: float | None = None
    # latent value of empty background: "unit" puts it at 0, "signed" at -1
    data_range: str = "unit"


@dataclass
class NetSection:
    base_width: int = 32
    levels: int = 3
    blocks_per_level: int = 2
    time_embed_dim: int = 64
    norm_groups: int = 8
    channel_mult: list[int] | None = None


@dataclass
class TrainSection:
    steps: int = 2000
    epochs: int | None = None
    batch_size: int = 32
    lr: float = 1e-4
    checkpoint_every: int = 500
    log_every: int = 1


@dataclass
class ArtSection:
    iters: int = 10_000
    relax: float = 0.001
    damping: float = 0.0
    nonneg: bool = True


@dataclass
class StompSection:
    iters: int = 20
    threshold: float = 0.8
    nonneg: bool = True


@dataclass
class CompareSection:
    held_out: int = 10
    seed_offset: int = 1_000_003


@dataclass
class ExperimentConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    count: int = 1000
    grid: GridSection = field(default_factory=GridSection)
    phantom: SamplerConfig = field(default_factory=SamplerConfig)
    layout: LayoutSection = field(default_factory=LayoutSection)
    optics: OpticsSection = field(default_factory=OpticsSection)
    measurement: MeasurementSection = field(default_factory=MeasurementSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    art: ArtSection = field(default_factory=ArtSection)
    stomp: StompSection = field(default_factory=StompSection)
    compare: CompareSection = field(default_factory=CompareSection)
    threshold: float = 0.5

    def __post_init__(self):
        if self.version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {self.version}")
        if self.schedule.data_range not in DATA_RANGES:
            raise ValueError(f"unknown data range {self.schedule.data_range!r}")
        if self.threshold <= 0 or self.threshold >= 1:
            raise ValueError("metric threshold must lie in (0, 1)")
        if self.layout.src_angles * self.layout.src_heights % self.measurement.num_views:
            raise ValueError("sources do not split evenly into the configured views")

    # derived objects
    def grid_spec(self) -> GridSpec:
        return GridSpec.enclosing(self.grid.n, self.grid.n, self.grid.b,
                                  self.phantom.cyl_radius, self.phantom.cyl_height)

    def sensor_layout(self) -> SensorLayout:
        lay = self.layout
        return SensorLayout.ring(self.phantom.cyl_radius, self.phantom.cyl_height, lay.src_angles,
                                 lay.src_heights, lay.det_angles, lay.det_heights)

    def optical_props(self) -> OpticalProps:
        return OpticalProps(self.optics.mu_a, self.optics.mu_s_prime, self.optics.robin_a)

    def shape(self) -> ShapeConfig:
        return ShapeConfig(self.measurement.num_views, self.grid.b, self.grid.n)

    def noise_schedule(self):
        sch = self.schedule
        if sch.preset == "paper":
            params = dict(PAPER_SCHEDULE)
        elif sch.preset == "desk":
            params = dict(DESK_SCHEDULE)
        elif sch.preset == "custom":
            params = {}
        else:
            raise ValueError(f"unknown schedule preset {sch.preset!r}")
        for key in ("T", "beta_start", "beta_end"):
            if getattr(sch, key) is not None:
                params[key] = getattr(sch, key)
        if len(params) != 3:
            raise ValueError("custom schedule needs T, beta_start and beta_end")
        return make_schedule(**params)

    def net_config(self) -> NetConfig:
        net = self.net
        return NetConfig(self.measurement.num_views + self.grid.b, self.grid.b, net.base_width, net.levels,
                         net.blocks_per_level, net.time_embed_dim, net.norm_groups,
                         None if net.channel_mult is None else tuple(net.channel_mult))

    def train_steps(self, dataset_size: int) -> int:
        """Optimizer steps; an epoch budget counts full passes over the dataset."""
        if self.train.epochs is not None:
            return self.train.epochs * math.ceil(dataset_size / self.train.batch_size)
        return self.train.steps

    def art_config(self) -> SolverConfig:
        return SolverConfig.art(self.art.iters, self.art.relax, nonneg=self.art.nonneg, damping=self.art.damping)

    def stomp_config(self) -> SolverConfig:
        return SolverConfig.stomp(self.stomp.iters, self.stomp.threshold, nonneg=self.stomp.nonneg)

    # serialization
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["phantom"] = self.phantom.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            if f.name == "phantom":
                value = SamplerConfig.from_dict(value)
            elif isinstance(value, dict):
                section = f.default_factory
                known = {sf.name for sf in dataclasses.fields(section)}
                unknown = set(value) - known
                if unknown:
                    raise ValueError(f"unknown keys in [{f.name}]: {sorted(unknown)}")
                value = section(**value)
            kwargs[f.name] = value
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
        return cls(**kwargs)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def paper_config() -> ExperimentConfig:
    """Full-scale budget: 1000 records, 10,000 epochs, T=1000 linear schedule."""
    cfg = ExperimentConfig()
    cfg.schedule = ScheduleSection("paper")
    cfg.train.epochs = 10_000
    return cfg


def desk_config() -> ExperimentConfig:
    """Reduced setting used by the acceptance run: 8 slices, 300 records, 2000 steps.

    The learning rate is ten times the full-scale one so the short budget
    gets further down the loss curve.
    """
    cfg = ExperimentConfig(count=300)
    cfg.grid = GridSection(32, 8)
    cfg.train.lr = 1e-3
    return cfg
