"""Reconstruction quality metrics and the tabular report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .phantom import Ellipsoid, ellipsoid_table, voxel_centers

__all__ = [
    "RoiSpec",
    "cnr",
    "middle_slices",
    "nrss",
    "phantom_roi",
    "relative_change",
    "report_table",
    "snr_db",
    "ssim_global",
]

INF = math.inf


def snr_db(estimate, truth) -> float:
    """10 log10( sum (f - mean f)^2 / sum (f_hat - f)^2 ); +inf when exact."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth differ in shape")
    signal = float(np.sum((truth - truth.mean()) ** 2))
    if signal == 0.0:
        raise ValueError("SNR undefined for a constant truth image")
    err = float(np.sum((estimate - truth) ** 2))
    if err == 0.0:
        return INF
    return 10.0 * math.log10(signal / err)


def ssim_global(estimate, truth, c1: float | None = None, c2: float | None = None) -> float:
    """Single-window SSIM over the whole image.

    Constants default to (0.01 R)^2 and (0.03 R)^2 with R the value range of
    ``truth``; a constant truth falls back to R = 1.
    """
    x = np.asarray(estimate, dtype=float).ravel()
    y = np.asarray(truth, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("estimate and truth differ in shape")
    value_range = float(y.max() - y.min()) or 1.0
    c1 = (0.01 * value_range) ** 2 if c1 is None else c1
    c2 = (0.03 * value_range) ** 2 if c2 is None else c2
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = np.mean((x - mx) * (y - my))
    return float((2 * mx * my + c1) * (2 * cov + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))


@dataclass
class RoiSpec:
    target: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=bool)
        self.background = np.asarray(self.background, dtype=bool)
        if self.target.shape != self.background.shape:
            raise ValueError("ROI masks differ in shape")
        if not self.target.any() or not self.background.any():
            raise ValueError("ROI masks must be nonempty")
        if np.any(self.target & self.background):
            raise ValueError("target and background masks overlap")


def cnr(image, roi: RoiSpec) -> float:
    """|mean_t - mean_b| / sqrt(var_t + var_b)."""
    image = np.asarray(image, dtype=float)
    t = image[roi.target]
    b = image[roi.background]
    # centre on a shared value so constant regions give exactly equal means
    ref = t[0]
    t, b = t - ref, b - ref
    diff = abs(float(t.mean()) - float(b.mean()))
    if diff == 0.0:
        return 0.0
    spread = float(t.var()) + float(b.var())
    if spread == 0.0:
        return INF
    return diff / math.sqrt(spread)


def nrss(image) -> float:
    """Sum of squared forward differences along both axes (in-range pairs only)."""
    f = np.asarray(image, dtype=float)
    return float(np.sum(np.diff(f, axis=0) ** 2) + np.sum(np.diff(f, axis=1) ** 2))


def relative_change(current, previous) -> float:
    """||current - previous||_2 / ||previous||_2; +inf for a zero ``previous``."""
    current = np.asarray(current, dtype=float)
    previous = np.asarray(previous, dtype=float)
    if current.shape != previous.shape:
        raise ValueError("volumes differ in shape")
    denom = float(np.linalg.norm(previous))
    if denom == 0.0:
        return INF
    return float(np.linalg.norm(current - previous)) / denom


def middle_slices(slice_count: int, count: int = 20) -> np.ndarray:
    """Indices of the ``count`` slices straddling the volume centre."""
    count = min(count, slice_count)
    start = (slice_count - count) // 2
    return np.arange(start, start + count)


def _slice_masks(table, side_length: int, z: float):
    c = voxel_centers(side_length)
    y = c[::-1][:, None]
    x = c[None, :]
    return [e.contains(x, y, z) for e in table]


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] &= mask[:-1, :]
    out[:-1, :] &= mask[1:, :]
    out[:, 1:] &= mask[:, :-1]
    out[:, :-1] &= mask[:, 1:]
    return out


def phantom_roi(side_length: int, slice_index: int, variant: str = "modified") -> RoiSpec:
    """CNR regions for one phantom slice.

    Target: the small positive-contrast ellipsoids inside the brain that cut
    this slice. Background: brain tissue outside every inner ellipsoid. Both
    masks are eroded by one pixel so partial-volume edges do not count.
    """
    table: tuple[Ellipsoid, ...] = ellipsoid_table(variant)
    z = voxel_centers(side_length)[::-1][slice_index]
    masks = _slice_masks(table, side_length, z)
    brain = masks[1]
    inner = np.zeros_like(brain)
    target = np.zeros_like(brain)
    for e, m in zip(table[2:], masks[2:]):
        inner |= m
        if e.value > 0:
            target |= m
    target = _erode(target & brain)
    background = _erode(brain & ~inner)
    if not target.any():
        raise ValueError(f"slice {slice_index} cuts no target ellipsoid")
    return RoiSpec(target, background)


_COLUMNS = ("method", "scenario", "SNR", "SSIM", "CNR", "NRSS", "iterations", "seconds")


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if value is None:
        return ""
    value = float(value)
    if math.isnan(value):
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6g}"


def report_table(runs) -> str:
    """CSV with fixed columns, one row per run in input order."""
    runs = list(runs)
    if not runs:
        raise ValueError("report_table needs at least one run")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_COLUMNS)
    for r in runs:
        writer.writerow([r.method, r.scenario, _fmt(r.snr_db), _fmt(r.ssim), _fmt(r.cnr),
                         _fmt(r.nrss), str(int(r.iterations)), _fmt(r.seconds)])
    return buf.getvalue()
