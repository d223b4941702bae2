"""Double-regularised multi-slice reconstruction.

Adjacent-slice differences are estimated by a lasso fitted to differences of
projections; slices are then reconstructed with Kaczmarz sweeps and TV descent
and, after every round, replaced by the average of three estimates of the same
slice: its own, the upper neighbour plus the upper difference, and the lower
neighbour minus the lower difference.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .baseline import (
    TVState,
    data_tv_update,
    tv_value,
    tvart_initial,
    tvart_reconstruct,
    tvart_round,
)
from .core import GeometryMismatchError, ReconConfig, SinogramStack
from .metrics import relative_change, snr_db
from .projector import SparseSystemMatrix

log = logging.getLogger(__name__)

__all__ = [
    "DiffEstimate",
    "SDRResult",
    "fuse_slices",
    "grid_search_lambda2",
    "kkt_violation",
    "l_curve_tune_lambda1",
    "lasso_cd",
    "menger_curvature",
    "projection_difference",
    "sdr_reconstruct",
    "soft_threshold",
]


def soft_threshold(zeta: float, eta: float) -> float:
    if eta < 0:
        raise ValueError("threshold must be nonnegative")
    if zeta > eta:
        return zeta - eta
    if zeta < -eta:
        return zeta + eta
    return 0.0


def projection_difference(sino: SinogramStack, l: int):
    """``p^{l+1} - p^l`` (0-based ``l``) on rays valid in both slices."""
    if not 0 <= l < sino.geometry.slice_count - 1:
        raise IndexError(f"slice pair ({l}, {l + 1}) out of range")
    p0, v0 = sino.slice_rays(l)
    p1, v1 = sino.slice_rays(l + 1)
    valid = v0 & v1
    return np.where(valid, p1 - p0, 0.0), valid


@dataclass
class DiffEstimate:
    """Lasso estimate of ``f^{l+1} - f^l``."""

    pair: tuple
    image: np.ndarray
    sweeps: int
    converged: bool
    kkt: float


def _masked_columns(W: SparseSystemMatrix, valid: np.ndarray):
    csc = W.csc
    indptr, indices, data = _kernels.as_arrays(csc)
    data = data * valid[indices]
    col_sq = np.bincount(np.repeat(np.arange(csc.shape[1]), np.diff(indptr)),
                         weights=data**2, minlength=csc.shape[1])
    return indptr, indices, data, col_sq


def _lasso_n(valid: np.ndarray, config: ReconConfig) -> int:
    if config.lasso_normalization == "valid_rays":
        return max(int(valid.sum()), 1)
    return valid.size


def kkt_violation(W: SparseSystemMatrix, p, valid, f, lam: float, n: int) -> float:
    """Largest violation of the lasso optimality conditions.

    With ``r = W f - p`` on valid rays and ``g = W^T r / n``: for nonzero
    ``f_j`` the quantity ``|g_j + lam sign f_j|``, otherwise
    ``max(|g_j| - lam, 0)``.
    """
    f = np.asarray(f, dtype=float).ravel()
    r = np.where(valid, W.csr @ f - p, 0.0)
    g = (W.csr.T @ r) / n
    nz = f != 0
    viol = np.where(nz, np.abs(g + lam * np.sign(f)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max()) if viol.size else 0.0


def lasso_cd(W: SparseSystemMatrix, p_diff, valid, lambda2: float, config: ReconConfig,
             pair=(0, 1)) -> DiffEstimate:
    """Coordinate descent for ``(1/2n)||W f - p||^2 + lambda2 ||f||_1`` from zero.

    Each coordinate is set to ``S(z_j, lambda2) / c_j`` where
    ``z_j = (1/n) W_j^T (p - sum_{k != j} W_k f_k)`` and ``c_j = ||W_j||^2 / n``;
    invalid rays drop out of every sum.
    """
    if lambda2 < 0:
        raise ValueError("lambda2 must be nonnegative")
    L = W.geometry.side_length
    p = np.asarray(p_diff, dtype=float).ravel()
    valid = np.asarray(valid, dtype=bool).ravel()
    if p.size != W.shape[0] or valid.size != W.shape[0]:
        raise GeometryMismatchError("projection difference does not match system matrix")
    indptr, indices, data, col_sq = _masked_columns(W, valid)
    n = _lasso_n(valid, config)
    r = np.where(valid, p, 0.0)
    f = np.zeros(L * L)
    sweeps, converged = _kernels.lasso_cd(indptr, indices, data, col_sq, r, f, float(lambda2),
                                          1.0 / n, float(config.lasso_tolerance),
                                          int(config.lasso_max_sweeps))
    if not converged:
        log.debug("lasso for pair %s stopped at the sweep cap (%d)", pair, sweeps)
    kkt = kkt_violation(W, p, valid, f, lambda2, n)
    return DiffEstimate(tuple(pair), f.reshape(L, L), int(sweeps), bool(converged), kkt)


def fuse_slices(estimates, diffs, l: int, signs: str = "consistent") -> np.ndarray:
    """Average of the available estimates of slice ``l``.

    ``estimates[k]`` approximates slice ``k`` and ``diffs[k]`` approximates
    ``f^{k+1} - f^k`` (either images or DiffEstimates). Interior slices
    average three estimates, the first and last slice two.
    """
    n = len(estimates)
    if not 0 <= l < n:
        raise IndexError(f"slice {l} out of range")
    if len(diffs) != n - 1:
        raise ValueError("need exactly one difference per adjacent pair")

    def d(k):
        item = diffs[k]
        return item.image if isinstance(item, DiffEstimate) else np.asarray(item, dtype=float)

    if signs not in ("consistent", "as_printed"):
        raise ValueError(f"unknown fusion sign convention {signs!r}")
    sign = 1.0 if signs == "consistent" else -1.0
    total = np.array(estimates[l], dtype=float)
    count = 1
    if l > 0:
        total = total + estimates[l - 1] + sign * d(l - 1)
        count += 1
    if l < n - 1:
        total = total + estimates[l + 1] - sign * d(l)
        count += 1
    return total / count


@dataclass
class SDRResult:
    volume: np.ndarray
    trace: list = field(default_factory=list)  # relative change per round
    diffs: list = field(default_factory=list)
    rounds: int = 0


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def estimate_differences(sino: SinogramStack, W: SparseSystemMatrix, config: ReconConfig):
    """Lasso estimates of every adjacent-slice difference, computed once up front."""
    def one(l):
        p, valid = projection_difference(sino, l)
        return lasso_cd(W, p, valid, config.lambda2, config, pair=(l, l + 1))

    diffs = _map(one, range(sino.geometry.slice_count - 1), config.threads)
    capped = [d.pair for d in diffs if not d.converged]
    if capped:
        log.warning("%d of %d difference estimates stopped at the sweep cap (%d), first %s",
                    len(capped), len(diffs), config.lasso_max_sweeps, capped[0])
    return diffs


def sdr_reconstruct(sino: SinogramStack, W: SparseSystemMatrix, config: ReconConfig,
                    diffs=None, order=None) -> SDRResult:
    """Full multi-slice reconstruction; returns the volume and the change trace.

    Every round first applies the data and TV step to all slices, then fuses
    each slice with its neighbours (their values after this round's step, or
    at the start of the round when ``fusion_neighbors == "previous"``). Fusion
    reads only completed steps, so ``order``, which permutes the processing
    sequence, cannot change the result. ``diffs`` reuses precomputed
    difference estimates.
    """
    S = sino.geometry.slice_count
    if S < 2:
        raise ValueError("SDR needs at least 2 slices; use tvart_reconstruct for a single slice")
    if W.geometry.side_length != sino.geometry.side_length or W.shape[0] != sino.geometry.ray_count:
        raise GeometryMismatchError("system matrix does not match sinogram geometry")
    if diffs is None:
        diffs = estimate_differences(sino, W, config) if config.fusion else []
    rays = [sino.slice_rays(l) for l in range(S)]
    vol = np.stack(_map(lambda l: tvart_initial(W, rays[l][0], rays[l][1], config), range(S),
                        config.threads))
    states = [TVState(step=config.tv_initial_step) for _ in range(S)]
    order = list(range(S)) if order is None else list(order)
    if sorted(order) != list(range(S)):
        raise ValueError("order must be a permutation of the slice indices")
    result = SDRResult(volume=vol, diffs=list(diffs))

    for _ in range(config.max_outer_iterations):
        prev = vol

        def data_step(l):
            p, valid = rays[l]
            if not config.fusion:
                return tvart_round(W, p, valid, prev[l], states[l], config)
            return data_tv_update(W, p, valid, prev[l], states[l], config)

        stepped = np.empty_like(prev)
        for l, f in zip(order, _map(data_step, order, config.threads)):
            stepped[l] = f
        if config.fusion:
            source = stepped if config.fusion_neighbors == "current" else prev
            new = np.empty_like(prev)
            for l in order:
                lo, hi = max(l - 1, 0), min(l + 2, S)
                local = [stepped[k] if k == l else source[k] for k in range(lo, hi)]
                fused = fuse_slices(local, diffs[lo:hi - 1], l - lo, config.fusion_signs)
                new[l] = np.maximum(fused, 0.0)
        else:
            new = stepped
        vol = new
        change = relative_change(vol, prev)
        result.trace.append(change)
        result.rounds += 1
        log.info("SDR round %d: relative change %.3g", result.rounds, change)
        if change < config.convergence_threshold:
            break
    result.volume = vol
    return result


# ---------------------------------------------------------------------------
# parameter tuning
# ---------------------------------------------------------------------------


def menger_curvature(points) -> np.ndarray:
    """Signed curvature at interior points of a polyline (NaN at endpoints).

    Positive for counter-clockwise turns, which is the corner orientation of
    an L-curve traversed with increasing regularisation.
    """
    pts = np.asarray(points, dtype=float)
    kappa = np.full(len(pts), np.nan)
    for i in range(1, len(pts) - 1):
        a, b, c = pts[i - 1], pts[i], pts[i + 1]
        ab, bc, ca = np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(a - c)
        if ab == 0 or bc == 0 or ca == 0:
            kappa[i] = 0.0
            continue
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        kappa[i] = 2.0 * cross / (ab * bc * ca)
    return kappa


def select_corner(points) -> int:
    """Index of the interior point of maximum curvature."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise ValueError("curvature undefined: need at least 3 candidates")
    if np.ptp(pts[:, 0]) == 0 and np.ptp(pts[:, 1]) == 0:
        raise ValueError("curvature undefined: all candidates give the same point")
    kappa = menger_curvature(pts)
    return int(np.nanargmax(kappa))


def l_curve_tune_lambda1(p, valid, W: SparseSystemMatrix, candidate_grid, config: ReconConfig):
    """Pick lambda1 at the corner of the (log residual, log TV) curve of TVART runs.

    Returns ``(selected, rows)`` with one ``(lambda1, residual, tv)`` row per
    candidate.
    """
    grid = [float(x) for x in candidate_grid]
    if len(grid) < 3:
        raise ValueError("curvature undefined: need at least 3 candidates")
    p = np.asarray(p, dtype=float).ravel()
    valid = np.asarray(valid, dtype=bool).ravel()
    rows = []
    for lam in grid:
        f = tvart_reconstruct(W, p, valid, replace(config, lambda1=lam))
        res = float(np.linalg.norm(np.where(valid, W.csr @ f.ravel() - p, 0.0)))
        rows.append((lam, res, tv_value(f)))
    tiny = np.finfo(float).tiny
    pts = [(math.log(max(r, tiny)), math.log(max(t, tiny))) for _, r, t in rows]
    return grid[select_corner(pts)], rows


def default_probe_slices(slice_count: int) -> list:
    return sorted({slice_count // 4, slice_count // 2, (3 * slice_count) // 4})


def grid_search_lambda2(sino: SinogramStack, W: SparseSystemMatrix, candidate_grid,
                        config: ReconConfig, probe_slices=None, truth=None,
                        rounds: int = 5, window: int = 2):
    """Score each lambda2 by a short SDR run around the probe slices.

    Every probe slice is reconstructed inside a sub-stack of ``2*window+1``
    slices. With ``truth`` (a volume array) the score is minus the mean SNR of
    the probe slices; without it, the data residual on valid rays plus
    ``lambda1`` times TV. Returns ``(selected, rows)`` with rows
    ``(lambda2, score)``; ties go to the smaller lambda2.
    """
    grid = sorted(float(x) for x in candidate_grid)
    if not grid:
        raise ValueError("lambda2 grid is empty")
    S = sino.geometry.slice_count
    probes = default_probe_slices(S) if probe_slices is None else list(probe_slices)
    short = replace(config, max_outer_iterations=rounds, convergence_threshold=0.0)
    rows = []
    best, best_score = None, math.inf
    for lam in grid:
        cfg = replace(short, lambda2=lam)
        scores = []
        for probe in probes:
            lo, hi = max(probe - window, 0), min(probe + window + 1, S)
            if hi - lo < 2:
                raise ValueError("SDR needs at least 2 slices around a probe")
            sub = SinogramStack(sino.geometry.with_slices(hi - lo), sino.data[lo:hi],
                                type(sino.mask)(sino.valid[lo:hi]))
            f = sdr_reconstruct(sub, W, cfg).volume[probe - lo]
            if truth is not None:
                scores.append(-snr_db(f, truth[probe]))
            else:
                p, valid = sino.slice_rays(probe)
                res = float(np.linalg.norm(np.where(valid, W.csr @ f.ravel() - p, 0.0)))
                scores.append(res + config.lambda1 * tv_value(f))
        score = float(np.mean(scores))
        rows.append((lam, score))
        if score < best_score:
            best, best_score = lam, score
    return best, rows
