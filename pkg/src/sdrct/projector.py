"""Parallel-beam system matrix, forward/back projection and the data simulator.

Frame convention: a pixel in row ``m`` and column ``k`` has centre
``(x_k, y_m)`` with both coordinates increasing with the index and the origin
at the grid centre. The ray of angle ``theta`` and detector offset ``t`` is
the line ``x cos(theta) + y sin(theta) = t``; it runs along
``(-sin(theta), cos(theta))``.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import scipy.sparse as sp

from .core import GeometryMismatchError, GridGeometry
from .phantom import bilinear_sample_many

__all__ = [
    "SparseSystemMatrix",
    "back_project",
    "build_system_matrix",
    "estimate_system_matrix_bytes",
    "forward_project",
    "ray_direction",
    "simulate_projection",
    "simulate_sinogram",
    "trace_ray",
]

log = logging.getLogger(__name__)

_AXIS_SNAP = 1e-12
INDEX_BYTES = 4
WEIGHT_BYTES = 8


def ray_direction(theta: float) -> tuple[float, float]:
    """``(cos, sin)`` of the ray normal, snapped to exact axes near multiples of pi/2."""
    c, s = math.cos(theta), math.sin(theta)
    if abs(c) < _AXIS_SNAP:
        c, s = 0.0, math.copysign(1.0, s)
    if abs(s) < _AXIS_SNAP:
        c, s = math.copysign(1.0, c), 0.0
    return c, s


def trace_ray(side_length: int, pixel_size: float, theta: float, t: float):
    """Exact intersection lengths of one ray with the pixels it crosses.

    Parametric marching: the ray is clipped to the grid square, all crossings
    with vertical and horizontal grid lines are merged, and each segment is
    credited to the cell containing its midpoint. A ray lying on a grid line
    lands in the cell on its positive-normal side because ``floor`` rounds the
    boundary coordinate up into that cell.

    Returns ``(pixel_indices, lengths)`` with indices sorted ascending.
    """
    L = side_length
    h = L * pixel_size / 2.0
    c, s = ray_direction(theta)
    px, py = t * c, t * s  # foot point of the normal
    dx, dy = -s, c  # unit direction

    s_lo, s_hi = -math.inf, math.inf
    for p0, d in ((px, dx), (py, dy)):
        if d == 0.0:
            if not (-h <= p0 < h):
                return np.empty(0, np.int32), np.empty(0)
        else:
            a1, a2 = (-h - p0) / d, (h - p0) / d
            s_lo = max(s_lo, min(a1, a2))
            s_hi = min(s_hi, max(a1, a2))
    if not s_hi > s_lo:
        return np.empty(0, np.int32), np.empty(0)

    params = [np.array([s_lo, s_hi])]
    lines = -h + pixel_size * np.arange(L + 1)
    for p0, d in ((px, dx), (py, dy)):
        if d != 0.0:
            cross = (lines - p0) / d
            params.append(cross[(cross > s_lo) & (cross < s_hi)])
    a = np.unique(np.concatenate(params))
    seg = np.diff(a)
    keep = seg > 0
    mid = 0.5 * (a[:-1] + a[1:])[keep]
    seg = seg[keep]
    k = np.floor((px + mid * dx + h) / pixel_size).astype(np.int64)
    m = np.floor((py + mid * dy + h) / pixel_size).astype(np.int64)
    inside = (k >= 0) & (k < L) & (m >= 0) & (m < L)
    idx = m[inside] * L + k[inside]
    w = seg[inside]
    if idx.size > 1:
        order = np.argsort(idx, kind="stable")
        idx, w = idx[order], w[order]
        # merge duplicates (can only arise from degenerate zero-length splits)
        uniq, start = np.unique(idx, return_index=True)
        if uniq.size != idx.size:
            w = np.add.reduceat(w, start)
            idx = uniq
    return idx.astype(np.int32), w


class SparseSystemMatrix:
    """Rows = rays (angle-major, detector-minor), columns = pixels (row-major).

    Storage is CSR with 32-bit indices and 64-bit weights; a CSC copy is kept
    for column access in coordinate descent.
    """

    def __init__(self, geometry: GridGeometry, csr: sp.csr_matrix):
        self.geometry = geometry
        self.csr = csr
        self.csr.sort_indices()
        self._csc = None
        self._row_norm_sq = None

    @property
    def shape(self):
        return self.csr.shape

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    @property
    def csc(self) -> sp.csc_matrix:
        if self._csc is None:
            self._csc = self.csr.tocsc()
            self._csc.sort_indices()
        return self._csc

    @property
    def row_norm_sq(self) -> np.ndarray:
        if self._row_norm_sq is None:
            self._row_norm_sq = np.asarray(self.csr.multiply(self.csr).sum(axis=1)).ravel()
        return self._row_norm_sq

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.csr.indptr[i], self.csr.indptr[i + 1]
        return self.csr.indices[lo:hi], self.csr.data[lo:hi]

    def stored_bytes(self) -> int:
        return self.nnz * (INDEX_BYTES + WEIGHT_BYTES) + (self.shape[0] + 1) * INDEX_BYTES


def build_system_matrix(geometry: GridGeometry) -> SparseSystemMatrix:
    """Exact ray/pixel intersection-length matrix for ``geometry``."""
    L, ps = geometry.side_length, geometry.pixel_size
    offsets = geometry.detector_offsets()
    n_rows = geometry.ray_count
    estimate = estimate_system_matrix_bytes(geometry)
    log.info("system matrix %dx%d: estimated %.3f GB", n_rows, L * L, estimate / 1e9)
    try:
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        chunks_idx, chunks_w = [], []
        row = 0
        for theta in geometry.angles:
            for t in offsets:
                idx, w = trace_ray(L, ps, theta, t)
                chunks_idx.append(idx)
                chunks_w.append(w)
                row += 1
                indptr[row] = indptr[row - 1] + idx.size
        indices = np.concatenate(chunks_idx).astype(np.int32) if chunks_idx else np.empty(0, np.int32)
        data = np.concatenate(chunks_w) if chunks_w else np.empty(0)
    except MemoryError as exc:
        raise MemoryError(f"system matrix needs about {estimate} bytes") from exc
    csr = sp.csr_matrix((data, indices, indptr.astype(np.int32)), shape=(n_rows, L * L))
    return SparseSystemMatrix(geometry, csr)


def estimate_system_matrix_bytes(geometry: GridGeometry) -> int:
    """Upper-bound storage of the matrix without building it.

    A ray crosses at most one more cell than the number of interior grid lines
    it meets, so per-row nonzeros are bounded by counting line crossings along
    the clipped chord.
    """
    L, ps = geometry.side_length, geometry.pixel_size
    h = L * ps / 2.0
    t = geometry.detector_offsets()
    total = 0
    for theta in geometry.angles:
        c, s = ray_direction(theta)
        # chord extent projected on x and y
        if c == 0.0 or s == 0.0:
            inside = np.abs(t) < h
            total += int(inside.sum()) * L
            continue
        px, py = t * c, t * s
        dx, dy = -s, c
        a1, a2 = (-h - px) / dx, (h - px) / dx
        b1, b2 = (-h - py) / dy, (h - py) / dy
        lo = np.maximum(np.minimum(a1, a2), np.minimum(b1, b2))
        hi = np.minimum(np.maximum(a1, a2), np.maximum(b1, b2))
        chord = np.clip(hi - lo, 0.0, None)
        crossings = np.ceil(chord * (abs(dx) + abs(dy)) / ps)
        total += int(np.where(chord > 0, np.minimum(crossings + 1, 2 * L - 1), 0).sum())
    return total * (INDEX_BYTES + WEIGHT_BYTES) + (geometry.ray_count + 1) * INDEX_BYTES


def _check_image(W: SparseSystemMatrix, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    L = W.geometry.side_length
    if image.shape not in ((L, L), (L * L,)):
        raise GeometryMismatchError(f"image shape {image.shape} does not match {L}x{L} geometry")
    return image.ravel()


def forward_project(W: SparseSystemMatrix, image: np.ndarray, valid: np.ndarray | None = None):
    """``W f`` with rays flagged invalid set to zero.

    Returns ``(values, valid)``; ``valid`` is all True when no filter is given.
    """
    f = _check_image(W, image)
    p = W.csr @ f
    if valid is None:
        valid = np.ones(p.size, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool).ravel()
        if valid.size != p.size:
            raise GeometryMismatchError("validity filter length does not match ray count")
        p[~valid] = 0.0
    return p, valid


def back_project(W: SparseSystemMatrix, ray_values, valid: np.ndarray | None = None) -> np.ndarray:
    """``W^T p`` over valid rays, returned as an L x L image."""
    p = np.asarray(ray_values, dtype=float).ravel()
    if p.size != W.shape[0]:
        raise GeometryMismatchError(f"expected {W.shape[0]} ray values, got {p.size}")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool).ravel()
        if valid.size != p.size:
            raise GeometryMismatchError("validity filter length does not match ray count")
        p = np.where(valid, p, 0.0)
    L = W.geometry.side_length
    return (W.csr.T @ p).reshape(L, L)


def simulate_projection(image: np.ndarray, angle: float, step: float = 0.5,
                        pixel_size: float = 1.0, detector_count: int | None = None) -> np.ndarray:
    """Line integrals by midpoint-rule sampling of the bilinear interpolant.

    Samples are spaced ``step`` pixels along each ray and cover the whole
    support of the interpolant; the sum is scaled by ``step * pixel_size``.
    """
    if not math.isfinite(angle):
        raise ValueError("angle must be finite")
    if not (0 < step <= 1):
        raise ValueError("step must lie in (0, 1] pixels")
    image = np.asarray(image, dtype=float)
    L = image.shape[0]
    D = L if detector_count is None else detector_count
    t = (np.arange(D) - (D - 1) / 2.0)  # pixel units
    # support of the interpolant is within one pixel of the outermost centres
    half = math.hypot((L + 1) / 2.0, (L + 1) / 2.0)
    n = int(math.ceil(2 * half / step))
    s = (np.arange(n) + 0.5) * step - n * step / 2.0
    c, sn = ray_direction(angle)
    x = t[:, None] * c - s[None, :] * sn
    y = t[:, None] * sn + s[None, :] * c
    centre = (L - 1) / 2.0
    vals = bilinear_sample_many(image, x + centre, y + centre)
    return vals.sum(axis=1) * step * pixel_size


def simulate_sinogram(volume_data: np.ndarray, geometry: GridGeometry, step: float = 0.5) -> np.ndarray:
    """Clean sinogram array ``(slice, angle, detector)`` from a volume array."""
    out = np.empty((volume_data.shape[0], geometry.angle_count, geometry.detector_count))
    for l, image in enumerate(volume_data):
        for a, theta in enumerate(geometry.angles):
            out[l, a] = simulate_projection(image, theta, step, geometry.pixel_size,
                                            geometry.detector_count)
    return out
