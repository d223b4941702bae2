"""Gaussian noise and blank-edge corruption of clean sinograms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BlankEdgeMask, SinogramStack

__all__ = ["BlankEdgeModel", "add_gaussian_noise", "apply_blank_edges", "draw_edge_shifts"]


@dataclass(frozen=True)
class BlankEdgeModel:
    """Random loss of detector bins at both edges.

    ``max_shift`` defaults to ceil(0.05 * L) when left as None and resolved
    against a geometry with :meth:`resolve`.
    """

    max_shift: int | None = None
    per_angle: bool = True

    def resolve(self, detector_count: int) -> int:
        shift = math.ceil(0.05 * detector_count) if self.max_shift is None else int(self.max_shift)
        if shift < 0:
            raise ValueError("max_shift must be nonnegative")
        if not shift < detector_count / 2:
            raise ValueError(
                f"max_shift {shift} must be smaller than detector_count/2 = {detector_count / 2}")
        return shift


def add_gaussian_noise(sino: SinogramStack, sigma: float, seed: int) -> SinogramStack:
    """Add i.i.d. N(0, sigma^2) to valid entries only."""
    if not sigma >= 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    data = sino.data.copy()
    if sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, sigma, size=data.shape)
        data[sino.valid] += noise[sino.valid]
    return SinogramStack(sino.geometry, data, BlankEdgeMask(sino.valid.copy()))


def draw_edge_shifts(angle_count: int, max_shift: int, seed: int) -> np.ndarray:
    """``(angle_count, 2)`` integer array of (top, bottom) shifts in [0, max_shift]."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, max_shift + 1, size=(angle_count, 2))


def apply_blank_edges(sino: SinogramStack, model: BlankEdgeModel, seed: int,
                      shifts: np.ndarray | None = None) -> SinogramStack:
    """Invalidate random edge runs per angle, identically for every slice.

    ``shifts`` overrides the random draw with explicit (top, bottom) counts per
    angle. The top edge is detector bin 0.
    """
    g = sino.geometry
    max_shift = model.resolve(g.detector_count)
    if shifts is None:
        if model.per_angle:
            shifts = draw_edge_shifts(g.angle_count, max_shift, seed)
        else:
            one = draw_edge_shifts(1, max_shift, seed)
            shifts = np.repeat(one, g.angle_count, axis=0)
    shifts = np.asarray(shifts, dtype=int)
    if shifts.shape != (g.angle_count, 2):
        raise ValueError("shifts must have shape (angle_count, 2)")
    if np.any(shifts < 0) or np.any(shifts > g.detector_count / 2):
        raise ValueError("edge shifts must lie in [0, detector_count/2]")
    bins = np.arange(g.detector_count)
    plane = (bins[None, :] >= shifts[:, :1]) & (bins[None, :] < g.detector_count - shifts[:, 1:])
    valid = sino.valid & plane[None, :, :]
    data = np.where(valid, sino.data, 0.0)
    return SinogramStack(g, data, BlankEdgeMask(valid))
