import pytest

from fmtrecon.config import ExperimentConfig, GridSection, LayoutSection, NetSection, ScheduleSection


def tiny_config(seed: int = 0) -> ExperimentConfig:
    """A configuration small enough for end-to-end runs in a few seconds."""
    cfg = ExperimentConfig(seed=seed, count=6)
    cfg.grid = GridSection(16, 4)
    cfg.layout = LayoutSection(4, 1, 8, 4)
    cfg.schedule = ScheduleSection("custom", 10, 1e-3, 0.2)
    cfg.net = NetSection(base_width=8, levels=2, blocks_per_level=1, time_embed_dim=16, norm_groups=4)
    cfg.train.batch_size = 4
    cfg.train.checkpoint_every = 5
    cfg.art.iters = 20
    cfg.art.relax = 0.5
    cfg.compare.held_out = 2
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()
