"""Reference reconstructors (FBP, ART/Kaczmarz, SIRT/OSSIRT, TVART) and the
TV-gradient and Barzilai-Borwein primitives they share with SDR."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import GeometryMismatchError, GridGeometry, ReconConfig
from .projector import SparseSystemMatrix

log = logging.getLogger(__name__)

__all__ = [
    "BB_FALLBACK_FLOOR",
    "SolverInfo",
    "TVState",
    "bb_step",
    "fbp_reconstruct",
    "kaczmarz_sweep",
    "ossirt_reconstruct",
    "ramp_filter",
    "sirt_reconstruct",
    "tv_gradient",
    "tv_step",
    "tv_value",
    "tvart_reconstruct",
]

BB_FALLBACK_FLOOR = 1e-8


@dataclass
class SolverInfo:
    """Per-iteration bookkeeping returned next to an iterative solution."""

    iterations: int = 0
    change_sq: list = field(default_factory=list)  # ||f_k - f_{k-1}||^2
    norm_sq: list = field(default_factory=list)  # ||f_{k-1}||^2
    skipped_subsets: int = 0

    @property
    def relative_change(self) -> list:
        return [math.sqrt(c / n) if n > 0 else math.inf
                for c, n in zip(self.change_sq, self.norm_sq)]

    def record(self, new: np.ndarray, old: np.ndarray) -> None:
        self.change_sq.append(float(np.sum((new - old) ** 2)))
        self.norm_sq.append(float(np.sum(old ** 2)))
        self.iterations += 1


# ---------------------------------------------------------------------------
# FBP
# ---------------------------------------------------------------------------


def ramp_filter(detector_count: int, pixel_size: float = 1.0, window: str = "ram-lak") -> np.ndarray:
    """Frequency response of the band-limited ramp on the padded detector grid.

    Built as the FFT of the spatial Ram-Lak kernel, which avoids the DC bias of
    sampling ``|w|`` directly.
    """
    size = max(64, int(2 ** math.ceil(math.log2(2 * detector_count))))
    n = np.concatenate([np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)])
    kernel = np.zeros(size)
    kernel[0] = 0.25
    kernel[1::2] = -1.0 / (np.pi * n) ** 2
    response = np.real(np.fft.fft(kernel)) / pixel_size
    if window == "hamming":
        freq = np.fft.fftfreq(size)
        response *= 0.54 + 0.46 * np.cos(2 * np.pi * freq)
    elif window != "ram-lak":
        raise ValueError(f"unknown filter {window!r}; use 'ram-lak' or 'hamming'")
    return response


def fbp_reconstruct(sinogram: np.ndarray, geometry: GridGeometry, filter: str = "ram-lak") -> np.ndarray:
    """Filtered backprojection of one slice, ``sinogram`` shaped (angle, detector).

    Masked bins are expected to hold zeros already; FBP has no notion of
    validity.
    """
    sinogram = np.asarray(sinogram, dtype=float)
    if sinogram.shape != (geometry.angle_count, geometry.detector_count):
        raise GeometryMismatchError("sinogram shape does not match geometry")
    if geometry.angle_count < 2:
        raise ValueError("FBP needs at least 2 angles")
    D = geometry.detector_count
    response = ramp_filter(D, geometry.pixel_size, filter)
    size = response.size
    padded = np.zeros((geometry.angle_count, size))
    padded[:, :D] = sinogram
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * response, axis=1))[:, :D]

    centers = geometry.pixel_centers()
    X, Y = np.meshgrid(centers, centers)  # rows follow y, columns follow x
    offsets = geometry.detector_offsets()
    image = np.zeros_like(X)
    for q, theta in zip(filtered, geometry.angles):
        t = X * math.cos(theta) + Y * math.sin(theta)
        image += np.interp(t.ravel(), offsets, q, left=0.0, right=0.0).reshape(t.shape)
    return image * (math.pi / geometry.angle_count)


# ---------------------------------------------------------------------------
# row-action and simultaneous iterations
# ---------------------------------------------------------------------------


def _kernel_arrays(W: SparseSystemMatrix):
    cached = getattr(W, "_kernel_csr", None)
    if cached is None:
        cached = _kernels.as_arrays(W.csr) + (np.ascontiguousarray(W.row_norm_sq),)
        W._kernel_csr = cached
    return cached


def kaczmarz_sweep(W: SparseSystemMatrix, p, valid, f, alpha: float = 1.0) -> np.ndarray:
    """One Kaczmarz pass over every valid ray in row order; returns a new image."""
    L = W.geometry.side_length
    f = np.array(f, dtype=float).reshape(-1)
    if f.size != L * L:
        raise GeometryMismatchError("image does not match system matrix")
    p = np.ascontiguousarray(p, dtype=float).ravel()
    valid = np.ones(p.size, bool) if valid is None else np.ascontiguousarray(valid, dtype=bool).ravel()
    indptr, indices, data, rn = _kernel_arrays(W)
    _kernels.kaczmarz_sweep(indptr, indices, data, rn, p, valid, f, float(alpha))
    return f.reshape(L, L)


def _sirt_weights(W: SparseSystemMatrix, rows: np.ndarray, valid: np.ndarray):
    sub = W.csr[rows]
    v = valid[rows].astype(float)
    row_sum = np.asarray(sub.sum(axis=1)).ravel()
    inv_row = np.divide(v, row_sum, out=np.zeros_like(row_sum), where=row_sum > 0)
    col_sum = np.asarray(sub.T @ v).ravel()
    inv_col = np.divide(1.0, col_sum, out=np.zeros_like(col_sum), where=col_sum > 0)
    return sub, inv_row, inv_col


def ossirt_reconstruct(W: SparseSystemMatrix, p, valid, config: ReconConfig, f0=None,
                       info: SolverInfo | None = None, subsets: int | None = None) -> np.ndarray:
    """Ordered-subset SIRT with interleaved angle subsets.

    Subset ``k`` holds angles ``k, k+S, k+2S, ...``. Each subset update is
    ``f += C W_s^T R (p_s - W_s f)`` with R and C the inverse row and column
    sums over valid rays. A nonnegativity clamp follows every full pass.
    """
    g = W.geometry
    L = g.side_length
    S = config.ossirt_subsets if subsets is None else subsets
    p = np.asarray(p, dtype=float).ravel()
    valid = np.ones(p.size, bool) if valid is None else np.asarray(valid, dtype=bool).ravel()
    f = np.zeros(L * L) if f0 is None else np.array(f0, dtype=float).ravel()
    angle_rows = np.arange(g.ray_count).reshape(g.angle_count, g.detector_count)
    plans = []
    for k in range(min(S, g.angle_count)):
        rows = angle_rows[k::S].ravel()
        sub, inv_row, inv_col = _sirt_weights(W, rows, valid)
        if not np.any(inv_row):
            if info is not None:
                info.skipped_subsets += 1
            continue
        plans.append((sub, p[rows], inv_row, inv_col))
    if info is not None and info.skipped_subsets:
        log.warning("OSSIRT skipped %d subsets with no valid rays", info.skipped_subsets)
    for _ in range(config.max_outer_iterations):
        old = f.copy()
        for sub, ps, inv_row, inv_col in plans:
            f += inv_col * (sub.T @ (inv_row * (ps - sub @ f)))
        np.maximum(f, 0.0, out=f)
        if info is not None:
            info.record(f, old)
    return f.reshape(L, L)


def sirt_reconstruct(W: SparseSystemMatrix, p, valid, iterations: int, f0=None,
                     clamp: bool = True) -> np.ndarray:
    """Plain SIRT ``f += C W^T R (p - W f)`` over all valid rays at once."""
    L = W.geometry.side_length
    p = np.asarray(p, dtype=float).ravel()
    valid = np.ones(p.size, bool) if valid is None else np.asarray(valid, dtype=bool).ravel()
    A = W.csr.toarray()
    v = valid.astype(float)
    row_sum = A.sum(axis=1)
    R = np.where(row_sum > 0, v / np.where(row_sum > 0, row_sum, 1.0), 0.0)
    col_sum = A.T @ v
    C = np.where(col_sum > 0, 1.0 / np.where(col_sum > 0, col_sum, 1.0), 0.0)
    f = np.zeros(L * L) if f0 is None else np.array(f0, dtype=float).ravel()
    for _ in range(iterations):
        f = f + C * (A.T @ (R * (p - A @ f)))
        if clamp:
            f = np.maximum(f, 0.0)
    return f.reshape(L, L)


# ---------------------------------------------------------------------------
# total variation
# ---------------------------------------------------------------------------


def _shift(f: np.ndarray, axis: int, step: int) -> np.ndarray:
    """f evaluated at index+step along ``axis`` with clamped (replicated) edges."""
    n = f.shape[axis]
    idx = np.clip(np.arange(n) + step, 0, n - 1)
    return np.take(f, idx, axis=axis)


def tv_value(f: np.ndarray, epsilon: float = 0.0) -> float:
    """sum sqrt(eps + |grad f|^2) with backward differences and clamped edges."""
    f = np.asarray(f, dtype=float)
    dx = f - _shift(f, 1, -1)
    dy = f - _shift(f, 0, -1)
    return float(np.sum(np.sqrt(epsilon + dx**2 + dy**2)))


def tv_gradient(f: np.ndarray, epsilon: float = 1e-8, variant: str = "symmetric") -> np.ndarray:
    """Gradient of the smoothed TV functional.

    ``f[y, x]``; x runs along axis 1. The ``as_printed`` variant repeats the
    x-difference in the third term instead of the y-difference.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    f = np.asarray(f, dtype=float)
    xm = _shift(f, 1, -1)
    ym = _shift(f, 0, -1)
    xp = _shift(f, 1, 1)
    yp = _shift(f, 0, 1)
    dx = f - xm
    dy = f - ym
    denom = np.sqrt(epsilon + dx**2 + dy**2)
    # denominators at the forward neighbours (x+1, y) and (x, y+1)
    denom_xp = _shift(denom, 1, 1)
    denom_yp = _shift(denom, 0, 1)
    grad = (dx + dy) / denom - (xp - f) / denom_xp
    if variant == "symmetric":
        grad -= (yp - f) / denom_yp
    elif variant == "as_printed":
        grad -= (xp - f) / denom_yp
    else:
        raise ValueError(f"unknown tv gradient variant {variant!r}")
    return grad


@dataclass
class TVState:
    """Barzilai-Borwein iterates of the TV descent on one slice."""

    image: np.ndarray | None = None
    previous: np.ndarray | None = None
    gradient: np.ndarray | None = None
    previous_gradient: np.ndarray | None = None
    step: float = 1.0

    def push(self, image: np.ndarray, gradient: np.ndarray) -> None:
        self.previous, self.previous_gradient = self.image, self.gradient
        self.image, self.gradient = image, gradient


def bb_step(state: TVState) -> float:
    """BB1 step <s,s>/<s,y>; halves the previous step (floor 1e-8) when the
    curvature estimate is not positive and finite."""
    s = state.image - state.previous
    y = state.gradient - state.previous_gradient
    ss = float(np.vdot(s, s))
    sy = float(np.vdot(s, y))
    step = ss / sy if sy > 0 else math.nan
    if not (math.isfinite(step) and step > 0):
        step = max(state.step / 2.0, BB_FALLBACK_FLOOR)
    return step


def tv_step(f: np.ndarray, state: TVState, config: ReconConfig,
            data_change: float | None = None) -> np.ndarray:
    """One descent step ``f - step * lambda1 * grad TV(f)``, updating ``state``.

    ``state.step`` holds the BB step measured across the previous TV move:
    after each move the secant pair is (image before, image after) with the
    TV gradients at both ends. ``data_change`` is the length of the
    data-fidelity move that preceded this step; when given, the step is capped
    so the TV move is never longer than that.
    """
    grad = tv_gradient(f, config.tv_epsilon, config.tv_grad_variant)
    step = state.step
    if data_change is not None:
        gnorm = float(np.linalg.norm(grad))
        if gnorm > 0:
            step = min(step, data_change / gnorm)
    new = f - step * config.lambda1 * grad
    state.image, state.gradient = f, grad
    state.push(new, tv_gradient(new, config.tv_epsilon, config.tv_grad_variant))
    state.step = bb_step(state)
    return new


# ---------------------------------------------------------------------------
# TVART
# ---------------------------------------------------------------------------


def tvart_round(W, p, valid, f, state: TVState, config: ReconConfig) -> np.ndarray:
    """Kaczmarz sweep, TV descent step, nonnegativity clamp."""
    return np.maximum(data_tv_update(W, p, valid, f, state, config), 0.0)


def data_tv_update(W, p, valid, f, state: TVState, config: ReconConfig) -> np.ndarray:
    """Kaczmarz sweep followed by one capped TV descent step (no clamp)."""
    g = kaczmarz_sweep(W, p, valid, f, config.alpha)
    if config.lambda1 > 0:
        g = tv_step(g, state, config, data_change=float(np.linalg.norm(g - f)))
    return g


def tvart_initial(W, p, valid, config: ReconConfig) -> np.ndarray:
    """Starting image: one Kaczmarz pass from zero."""
    L = W.geometry.side_length
    return kaczmarz_sweep(W, p, valid, np.zeros((L, L)), config.alpha)


def tvart_reconstruct(W: SparseSystemMatrix, p, valid, config: ReconConfig,
                      info: SolverInfo | None = None) -> np.ndarray:
    """ART interleaved with TV descent, ``max_outer_iterations`` rounds.

    Starts from one Kaczmarz pass on a zero image; each round is a Kaczmarz
    sweep, a TV step weighted by ``lambda1`` with BB step length, and a
    nonnegativity clamp.
    """
    if config.lambda1 < 0:
        raise ValueError("lambda1 must be nonnegative")
    p = np.asarray(p, dtype=float).ravel()
    valid = np.ones(p.size, bool) if valid is None else np.asarray(valid, dtype=bool).ravel()
    f = tvart_initial(W, p, valid, config)
    state = TVState(step=config.tv_initial_step)
    for _ in range(config.max_outer_iterations):
        old = f
        f = tvart_round(W, p, valid, f, state, config)
        if info is not None:
            info.record(f, old)
    return f
