"""Reconstruction quality metrics: Dice, CNR and localization error."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PhantomSpec, TargetSpec, Volume, rasterize_phantom

CSV_COLUMNS = ["method", "CNR", "LE1", "LE2", "Dice", "case", "EED", "phantom", "threshold"]


class UndefinedMetricError(ValueError):
    pass


def _check_same_grid(a: Volume, b: Volume) -> None:
    if a.grid != b.grid:
        raise ValueError("volumes are on different grids")


def binarize(vol: Volume, threshold_frac: float) -> np.ndarray:
    """Voxels at or above ``threshold_frac`` times the volume maximum."""
    peak = vol.data.max()
    if peak <= 0:
        return np.zeros(vol.data.shape, dtype=bool)
    return vol.data >= threshold_frac * peak


def dice(recon: Volume, truth: Volume, threshold_frac: float = 0.5) -> float:
    _check_same_grid(recon, truth)
    if not 0 < threshold_frac < 1:
        raise ValueError("threshold_frac must lie in (0, 1)")
    a, b = binarize(recon, threshold_frac), binarize(truth, threshold_frac)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / total


def cnr(recon: Volume, roi: np.ndarray, domain: np.ndarray | None = None) -> float:
    """Contrast-to-noise ratio between ROI and the rest of the domain.

    The noise term pools the two population variances weighted by their
    voxel-count fractions.
    """
    roi = np.asarray(roi, dtype=bool).reshape(recon.data.shape)
    domain = np.ones_like(roi) if domain is None else np.asarray(domain, dtype=bool).reshape(roi.shape)
    roi = roi & domain
    bck = domain & ~roi
    if not roi.any() or not bck.any():
        raise UndefinedMetricError("ROI and background must both be non-empty")
    v_roi, v_bck = recon.data[roi], recon.data[bck]
    w_roi = roi.sum() / domain.sum()
    denom = math.sqrt(w_roi * v_roi.var() + (1 - w_roi) * v_bck.var())
    if denom == 0:
        raise UndefinedMetricError("both regions have zero variance")
    return float((v_roi.mean() - v_bck.mean()) / denom)


@dataclass
class Localization:
    errors: list[float]
    missing: list[bool]


def localization_error(recon: Volume, targets, threshold_frac: float = 0.5) -> Localization:
    """Distance from each target centre to the weighted centroid of the voxels nearest to it.

    Above-threshold voxels are assigned to the closest target centre. A target
    with no assigned voxels gets the grid diameter and is flagged missing.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("need at least one target")
    mask = binarize(recon, threshold_frac)
    xx, yy, zz = recon.grid.centers()
    pts = np.stack([xx[mask], yy[mask], zz[mask]], axis=1)
    w = recon.data[mask]
    centers = np.array([t.center for t in targets])
    errors, missing = [], []
    if len(pts):
        owner = np.argmin(((pts[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    else:
        owner = np.zeros(0, dtype=int)
    for k, c in enumerate(centers):
        sel = owner == k
        if not sel.any():
            errors.append(recon.grid.diameter)
            missing.append(True)
            continue
        centroid = (pts[sel] * w[sel, None]).sum(0) / w[sel].sum()
        errors.append(float(np.linalg.norm(centroid - c)))
        missing.append(False)
    return Localization(errors, missing)


@dataclass
class MetricsReport:
    method: str
    dice: float
    cnr: float
    le: list[float]
    le_missing: list[bool]
    threshold: float
    case: str = ""
    eed: float | None = None
    phantom: str = ""
    notes: list[str] = field(default_factory=list)

    def row(self) -> dict:
        le = self.le + [float("nan")] * (2 - len(self.le))
        return {"method": self.method, "CNR": _fmt(self.cnr), "LE1": _fmt(le[0]), "LE2": _fmt(le[1]),
                "Dice": _fmt(self.dice), "case": self.case,
                "EED": "" if self.eed is None else _fmt(self.eed), "phantom": self.phantom,
                "threshold": _fmt(self.threshold)}


def _fmt(v: float) -> str:
    return "nan" if v is None or not np.isfinite(v) else f"{v:.6g}"


def evaluate(recon: Volume, phantom: PhantomSpec, method: str, threshold_frac: float = 0.5,
             case: str = "", eed: float | None = None, phantom_id: str = "") -> MetricsReport:
    truth = rasterize_phantom(phantom, recon.grid)
    domain = recon.grid.cylinder_mask(phantom.cyl_radius, phantom.cyl_height)
    notes = []
    try:
        contrast = cnr(recon, truth.data > phantom.background_yield, domain)
    except UndefinedMetricError as err:
        contrast = float("nan")
        notes.append(f"CNR undefined: {err}")
    loc = localization_error(recon, phantom.targets, threshold_frac)
    if any(loc.missing):
        notes.append("LE sentinel: target without reconstructed voxels")
    return MetricsReport(method, dice(recon, truth, threshold_frac), contrast, loc.errors, loc.missing,
                         threshold_frac, case, eed, phantom_id, notes)


def write_report_csv(path, reports: list[MetricsReport], append: bool = False) -> None:
    path = Path(path)
    new_file = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if new_file:
            writer.writeheader()
        for rep in reports:
            writer.writerow(rep.row())
