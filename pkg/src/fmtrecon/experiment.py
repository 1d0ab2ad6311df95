"""Experiment workflows behind the command-line interface."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import ExperimentConfig
from .dataset import Dataset, forward_operator, simulate_record
from .ddpm import NetDenoiser, NoiseSchedule, TrainingError, sample, training_step
from .forward import WeightMatrix
from .geometry import GridSpec, PhantomSpec, Volume, case_phantom, edge_to_edge_distance, sample_phantom_spec
from .metrics import MetricsReport, evaluate, write_report_csv
from .netmodel import OptState, UNet, init_params
from .solvers import art_reconstruct, stomp_reconstruct

log = logging.getLogger(__name__)

METHODS = ("art", "stomp", "mdiff")


@dataclass
class TrainResult:
    losses: list[float]
    steps: int
    checkpoint: Path


def _training_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x7261696E,)))


def train(cfg: ExperimentConfig, dataset: Dataset, checkpoint, steps: int | None = None,
          resume=None, log_path=None, skip_corrupt: bool = False, progress: bool = False) -> TrainResult:
    """Run the noise-prediction training loop with periodic checkpoints.

    ``steps`` counts the total optimizer steps; when resuming, training
    continues from the stored step until that total is reached.
    """
    torch.use_deterministic_algorithms(True)
    x0, cond = dataset.training_arrays(skip_corrupt, cfg.schedule.data_range)
    steps = cfg.train_steps(len(x0)) if steps is None else steps
    if resume is not None:
        net, opt, schedule, shape, rng, meta = io.load_checkpoint(resume)
        start = meta.get("step", opt.step)
        v_max = meta.get("v_max", dataset.v_max)
    else:
        schedule, shape = cfg.noise_schedule(), cfg.shape()
        net = init_params(cfg.net_config(), cfg.seed)
        opt = OptState.for_params(net, lr=cfg.train.lr)
        rng = _training_rng(cfg.seed)
        start, v_max = 0, dataset.v_max
    if x0.shape[1:] != (shape.b, shape.n, shape.n) or cond.shape[1] != shape.num:
        raise ValueError(f"dataset shapes {x0.shape[1:]}/{cond.shape[1:]} do not match the model {shape}")
    checkpoint = Path(checkpoint)
    log_path = Path(log_path) if log_path else checkpoint.with_suffix(".csv")
    mode = "a" if resume is not None and log_path.exists() else "w"
    batch = min(cfg.train.batch_size, len(x0))
    losses = []
    t0 = time.time()

    def save(step):
        io.save_checkpoint(checkpoint, net, opt, schedule, shape, rng,
                           {"step": step, "v_max": v_max, "data_range": cfg.schedule.data_range,
                            "config": cfg.to_dict()})

    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(["step", "loss", "wall_time"])
        for step in range(start, steps):
            idx = np.sort(rng.choice(len(x0), size=batch, replace=False))
            try:
                loss = training_step(net, opt, x0[idx], cond[idx], schedule, rng, step)
            except TrainingError:
                save(step)
                raise
            losses.append(loss)
            if (step + 1) % cfg.train.log_every == 0:
                writer.writerow([step + 1, f"{loss:.8g}", f"{time.time() - t0:.3f}"])
            if progress and (step + 1) % 100 == 0:
                log.info("step %d loss(100) %.4f", step + 1, float(np.mean(losses[-100:])))
            if cfg.train.checkpoint_every and (step + 1) % cfg.train.checkpoint_every == 0:
                save(step + 1)
    save(max(steps, start))
    return TrainResult(losses, max(steps, start), checkpoint)


def load_model(checkpoint):
    net, _, schedule, shape, _, meta = io.load_checkpoint(checkpoint)
    net.eval()
    return net, schedule, shape, meta


def mdiff_reconstruct(net: UNet, schedule: NoiseSchedule, cond: np.ndarray, grid: GridSpec,
                      seed: int, meta: dict):
    """Sample reconstructions; ``cond`` may carry a leading batch axis."""
    return sample(cond, NetDenoiser(net), schedule, np.random.default_rng(seed), grid,
                  meta.get("v_max", 1.0), data_range=meta.get("data_range", "signed"))


def solver_reconstruct(method: str, W: WeightMatrix, values: np.ndarray, cfg: ExperimentConfig) -> list[Volume]:
    """ART or StOMP on one or more measurement vectors (columns of ``values``)."""
    values = np.asarray(values, dtype=float).reshape(W.shape[0], -1)
    if method == "art":
        x = art_reconstruct(W, values, cfg.art_config()).x
        cols = [x[:, k] for k in range(values.shape[1])]
    elif method == "stomp":
        cols = [stomp_reconstruct(W, values[:, k], cfg.stomp_config()).x for k in range(values.shape[1])]
    else:
        raise ValueError(f"not a solver method: {method}")
    return [Volume.from_flat(c, W.grid) for c in cols]


def write_reconstruction(out_dir, vol: Volume, name: str, extra: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = io.write_volume(out_dir / name, vol, extra)
    io.write_slice_pngs(out_dir / f"{name}_slices", vol)
    return path


def evaluate_files(recon_paths, out_csv, phantoms: list[PhantomSpec] | None = None,
                   method: str | None = None, threshold: float = 0.5) -> list[MetricsReport]:
    """Metrics for stored reconstructions; phantom and method default to the file metadata."""
    reports = []
    for k, path in enumerate(recon_paths):
        vol = io.read_volume(path)
        extra = io.read_volume_meta(path).get("extra", {})
        if phantoms:
            phantom = phantoms[k] if len(phantoms) > 1 else phantoms[0]
        elif "phantom" in extra:
            phantom = PhantomSpec.from_dict(extra["phantom"])
        else:
            raise ValueError(f"{path}: no phantom given and none recorded in the file")
        reports.append(evaluate(vol, phantom, method or extra.get("method", "unknown"), threshold,
                                extra.get("case", ""), extra.get("eed"), extra.get("phantom_id", Path(path).stem)))
    write_report_csv(out_csv, reports)
    return reports


@dataclass
class EvalPhantom:
    spec: PhantomSpec
    case: str
    eed: float | None
    ident: str


def held_out_phantoms(cfg: ExperimentConfig, count: int) -> list[EvalPhantom]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed + cfg.compare.seed_offset))
    out = []
    for k in range(count):
        spec = sample_phantom_spec(rng, cfg.phantom)
        eed = None
        if len(spec.targets) == 2:
            eed = edge_to_edge_distance(*spec.targets)
        out.append(EvalPhantom(spec, "random", eed, f"heldout{k:03d}"))
    return out


def case_phantoms(eeds=(0.1, 0.2, 0.3), cases=(1, 2)) -> list[EvalPhantom]:
    return [EvalPhantom(case_phantom(e, c), f"case{c}", e, f"case{c}_eed{round(e * 10)}mm")
            for c in cases for e in eeds]


def compare(cfg: ExperimentConfig, methods, out_dir, checkpoint=None, phantoms: list[EvalPhantom] | None = None,
            W: WeightMatrix | None = None, seed: int | None = None, write_images: bool = True) -> dict:
    """Reconstruct every phantom with every method, evaluate, and summarize."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    phantoms = phantoms if phantoms is not None else held_out_phantoms(cfg, cfg.compare.held_out)
    W = W if W is not None else forward_operator(cfg)
    grid = W.grid
    sims = []
    for k, ph in enumerate(phantoms):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, k)))
        sims.append(simulate_record(cfg, W, ph.spec, rng))
    reports: list[MetricsReport] = []
    recons: dict[str, list[Volume]] = {}
    for method in methods:
        if method == "mdiff":
            if checkpoint is None:
                raise ValueError("mdiff needs a trained checkpoint")
            net, schedule, _, meta = load_model(checkpoint)
            cond = np.stack([c for _, _, c in sims])
            vols = mdiff_reconstruct(net, schedule, cond, grid, seed, meta)
        elif method in ("art", "stomp"):
            values = np.stack([m.values for _, m, _ in sims], axis=1)
            vols = solver_reconstruct(method, W, values, cfg)
        else:
            raise ValueError(f"unknown method {method!r}")
        recons[method] = vols
        for ph, vol in zip(phantoms, vols):
            reports.append(evaluate(vol, ph.spec, method, cfg.threshold, ph.case, ph.eed, ph.ident))
    write_report_csv(out / "metrics.csv", reports)
    summary = summarize(reports)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "n", "CNR_mean", "CNR_std", "LE_mean", "LE_std", "Dice_mean", "Dice_std"])
        for method, s in summary.items():
            writer.writerow([method, s["n"]] + [f"{s[k]:.6g}" for k in
                            ("CNR_mean", "CNR_std", "LE_mean", "LE_std", "Dice_mean", "Dice_std")])
    if write_images:
        truth = [sim[0] for sim in sims]
        for k, ph in enumerate(phantoms):
            panels = [truth[k]] + [recons[m][k] for m in methods]
            save_slice_grid(out / "images" / f"{ph.ident}.png", panels)
    return {"reports": reports, "summary": summary, "recons": recons, "truth": [s[0] for s in sims]}


def summarize(reports: list[MetricsReport]) -> dict:
    out = {}
    for method in dict.fromkeys(r.method for r in reports):
        rows = [r for r in reports if r.method == method]
        cnr = np.array([r.cnr for r in rows], dtype=float)
        le = np.array([np.mean(r.le) for r in rows])
        dice = np.array([r.dice for r in rows])
        out[method] = {"n": len(rows), "CNR_mean": float(np.nanmean(cnr)) if np.isfinite(cnr).any() else float("nan"),
                       "CNR_std": float(np.nanstd(cnr)) if np.isfinite(cnr).any() else float("nan"),
                       "LE_mean": float(le.mean()), "LE_std": float(le.std()),
                       "Dice_mean": float(dice.mean()), "Dice_std": float(dice.std())}
    return out


def save_slice_grid(path, volumes: list[Volume]) -> None:
    """Tile volumes as rows and z-slices as columns into one 8-bit PNG."""
    from PIL import Image

    rows = []
    for vol in volumes:
        peak = vol.data.max()
        scaled = np.clip(vol.data / peak, 0, 1) if peak > 0 else np.zeros_like(vol.data)
        rows.append(np.concatenate(list(scaled), axis=1))
    tile = np.rint(np.concatenate(rows, axis=0) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tile).save(path)
