"""Simulated training datasets: phantoms, measurements and condition views on disk.

Layout of a dataset directory::

    dataset.json        configuration, seed, record count, dataset-wide max yield
    manifest.jsonl      one JSON object per record
    weights.trip        sensitivity matrix shared by all records (optional)
    records/NNNNNN_*    per-record volume, measurement and condition files
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .ddpm import to_unit_range
from .forward import WeightMatrix, build_weight_matrix, encode_condition_images, simulate_measurements
from .geometry import PhantomSpec, rasterize_phantom, sample_phantom_spec

log = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    pass


def record_seed(seed: int, index: int) -> int:
    """Independent per-record seed derived from the dataset seed."""
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(index,)).generate_state(1, np.uint64)[0])


def forward_operator(cfg: ExperimentConfig) -> WeightMatrix:
    return build_weight_matrix(cfg.grid_spec(), cfg.optical_props(), cfg.sensor_layout(),
                               normalized=cfg.measurement.normalized_born)


def simulate_record(cfg: ExperimentConfig, W: WeightMatrix, spec: PhantomSpec, rng: np.random.Generator):
    """Ground truth, noisy measurement and condition views for one phantom."""
    vol = rasterize_phantom(spec, cfg.grid_spec())
    meas = simulate_measurements(W, vol, cfg.measurement.noise_level, rng)
    cond = encode_condition_images(meas, cfg.sensor_layout(), cfg.measurement.num_views, cfg.grid.n)
    return vol, meas, cond


def generate_dataset(out_dir, cfg: ExperimentConfig, count: int | None = None, seed: int | None = None,
                     W: WeightMatrix | None = None, save_weights: bool = True) -> Path:
    count = cfg.count if count is None else count
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    W = W if W is not None else forward_operator(cfg)
    if save_weights:
        io.write_weight_matrix(out / "weights.trip", W)
    lines, v_max = [], 0.0
    for index in range(count):
        rs = record_seed(seed, index)
        rng = np.random.default_rng(rs)
        try:
            spec = sample_phantom_spec(rng, cfg.phantom)
            vol, meas, cond = simulate_record(cfg, W, spec, rng)
        except Exception as err:
            raise DatasetError(f"record {index} (seed {rs}) failed: {err}") from err
        stem = f"records/{index:06d}"
        io.write_volume(out / f"{stem}_volume", vol)
        io.write_measurement(out / f"{stem}_meas", meas)
        io.write_stack(out / f"{stem}_cond", cond, "cond")
        peak = float(vol.data.max())
        v_max = max(v_max, peak)
        lines.append({"index": index, "seed": rs, "phantom": spec.to_dict(),
                      "volume": f"{stem}_volume.json", "measurement": f"{stem}_meas.json",
                      "condition": f"{stem}_cond.json", "yield_max": peak})
        if index and index % 100 == 0:
            log.info("generated %d/%d records", index, count)
    with open(out / "manifest.jsonl", "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    io.dump_json({"config": cfg.to_dict(), "seed": seed, "count": count, "v_max": v_max or 1.0,
                  "weights": "weights.trip" if save_weights else None}, out / "dataset.json")
    return out


@dataclass
class Dataset:
    root: Path
    config: ExperimentConfig
    records: list[dict]
    v_max: float

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        try:
            meta = io.load_json(root / "dataset.json")
            records = [json.loads(line) for line in (root / "manifest.jsonl").read_text().splitlines() if line]
        except (OSError, ValueError) as err:
            raise DatasetError(f"cannot read dataset at {root}: {err}") from err
        return cls(root, ExperimentConfig.from_dict(meta["config"]), records, float(meta["v_max"]))

    def __len__(self) -> int:
        return len(self.records)

    def phantom(self, index: int) -> PhantomSpec:
        return PhantomSpec.from_dict(self.records[index]["phantom"])

    def weights(self) -> WeightMatrix:
        path = self.root / "weights.trip"
        return io.read_weight_matrix(path) if path.exists() else forward_operator(self.config)

    def training_arrays(self, skip_corrupt: bool = False,
                        data_range: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Latents and condition views, both float32 with a leading record axis.

        The latent mapping defaults to the one in the dataset's own config.
        """
        data_range = data_range or self.config.schedule.data_range
        latents, conds = [], []
        for rec in self.records:
            try:
                vol = io.read_volume(self.root / rec["volume"])
                cond = io.read_stack(self.root / rec["condition"])
            except (OSError, ValueError, KeyError) as err:
                if not skip_corrupt:
                    raise DatasetError(f"record {rec.get('index')}: {err}") from err
                log.warning("skipping corrupt record %s: %s", rec.get("index"), err)
                continue
            latents.append(to_unit_range(vol.data, self.v_max, data_range))
            conds.append(cond)
        if not latents:
            raise DatasetError("dataset has no usable records")
        return np.stack(latents).astype(np.float32), np.stack(conds).astype(np.float32)
