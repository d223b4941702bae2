"""Scenario configs, per-method volume reconstruction and metric evaluation.

These are the building blocks of the command-line pipeline. Every stage that
would pass through a file in the step-by-step commands is rounded to float32
here as well, so a one-shot experiment reproduces the chained commands.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baseline import SolverInfo, fbp_reconstruct, ossirt_reconstruct, tvart_reconstruct
from .core import GridGeometry, MetricReport, ReconConfig, SinogramStack
from .degrade import BlankEdgeModel, add_gaussian_noise, apply_blank_edges
from .metrics import cnr, middle_slices, nrss, phantom_roi, snr_db, ssim_global
from .phantom import shepp_logan_3d
from .projector import build_system_matrix, simulate_sinogram
from .sdr import sdr_reconstruct

log = logging.getLogger(__name__)

METHODS = ("fbp", "ossirt", "tvart", "sdr")
NOISE_PRESETS = {"noiseless": 0.0, "low": 0.5, "high": 1.0}


def as_f32(a) -> np.ndarray:
    """Round to float32 and back, the precision of every file on disk."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# scenario config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    side_length: int = 64
    angle_count: int = 60
    noise: str = "high"
    sigma: float | None = None  # overrides the preset when given
    max_shift: int | None = 3
    per_angle_shift: bool = True
    phantom_variant: str = "modified"
    projection_step: float = 0.5
    seed: int = 1
    methods: tuple = METHODS
    recon: ReconConfig = field(default_factory=ReconConfig)
    output_dir: str = "results"
    figures: bool = True

    def __post_init__(self):
        if self.noise not in NOISE_PRESETS:
            raise ValueError(f"noise must be one of {sorted(NOISE_PRESETS)}, got {self.noise!r}")
        if self.side_length < 8:
            raise ValueError("side_length must be >= 8")
        if self.angle_count < 1:
            raise ValueError("angle_count must be >= 1")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ValueError(f"methods must be a nonempty subset of {list(METHODS)}")

    @property
    def noise_sigma(self) -> float:
        return NOISE_PRESETS[self.noise] if self.sigma is None else float(self.sigma)

    @property
    def geometry(self) -> GridGeometry:
        L = self.side_length
        return GridGeometry(L, self.angle_count, L)


def _strict(cls, data: dict, where: str) -> dict:
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise ValueError(f"unknown key {key!r} in {where}")
    return data


def parse_scenario(text: str, base_dir=None) -> ScenarioConfig:
    """Build a ScenarioConfig from JSON text; unknown keys are an error.

    A relative ``output_dir`` is resolved against ``base_dir`` when given.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    _strict(ScenarioConfig, raw, "scenario config")
    if "name" not in raw:
        raise ValueError("scenario config needs a 'name'")
    recon = raw.pop("recon", {})
    if not isinstance(recon, dict):
        raise ValueError("'recon' must be a JSON object")
    _strict(ReconConfig, recon, "recon section")
    if "methods" in raw:
        raw["methods"] = tuple(raw["methods"])
    if base_dir is not None and "output_dir" in raw and not Path(raw["output_dir"]).is_absolute():
        raw["output_dir"] = str(Path(base_dir) / raw["output_dir"])
    return ScenarioConfig(recon=ReconConfig(**recon), **raw)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    return parse_scenario(path.read_text())


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def make_phantom(side_length: int, variant: str = "modified") -> np.ndarray:
    g = GridGeometry(side_length, 1, side_length)
    return as_f32(shepp_logan_3d(g, variant).data)


def project_volume(volume: np.ndarray, angle_count: int, step: float = 0.5) -> SinogramStack:
    S, L, _ = volume.shape
    g = GridGeometry(L, angle_count, S)
    return SinogramStack(g, as_f32(simulate_sinogram(volume, g, step)))


def degrade_sinogram(sino: SinogramStack, sigma: float, max_shift, seed: int,
                     per_angle: bool = True) -> SinogramStack:
    """Blank edges drawn from ``seed``, then noise on valid bins from ``seed + 1``."""
    if max_shift != 0:
        sino = apply_blank_edges(sino, BlankEdgeModel(max_shift, per_angle), seed=seed)
    if sigma > 0:
        sino = add_gaussian_noise(sino, sigma, seed=seed + 1)
    return SinogramStack(sino.geometry, as_f32(sino.data), sino.mask)


@dataclass
class MethodRun:
    method: str
    volume: np.ndarray
    trace: list
    iterations: int
    seconds: float


def _volume_trace(infos) -> list:
    change = np.sum([i.change_sq for i in infos], axis=0)
    norm = np.sum([i.norm_sq for i in infos], axis=0)
    return [math.sqrt(c / n) if n > 0 else math.inf for c, n in zip(change, norm)]


def reconstruct(method: str, sino: SinogramStack, config: ReconConfig, W=None) -> MethodRun:
    """Reconstruct every slice of ``sino`` with one method.

    The trace holds the whole-volume relative change per round; FBP has none.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    g = sino.geometry
    t0 = time.perf_counter()
    if method == "fbp":
        vol = np.stack([fbp_reconstruct(sino.data[l], g) for l in range(g.slice_count)])
        return MethodRun(method, vol, [], 0, time.perf_counter() - t0)
    if W is None:
        W = build_system_matrix(g.with_slices(1))
    if method == "sdr":
        res = sdr_reconstruct(sino, W, config)
        return MethodRun(method, res.volume, list(res.trace), res.rounds, time.perf_counter() - t0)
    solver = ossirt_reconstruct if method == "ossirt" else tvart_reconstruct
    infos = [SolverInfo() for _ in range(g.slice_count)]
    vol = np.stack([solver(W, *sino.slice_rays(l), config, info=infos[l])
                    for l in range(g.slice_count)])
    trace = _volume_trace(infos)
    return MethodRun(method, vol, trace, len(trace), time.perf_counter() - t0)


def evaluate(volume: np.ndarray, truth=None, roi=None, roi_slice: int | None = None,
             method: str = "", scenario: str = "mid20", iterations: int = 0,
             seconds: float = math.nan) -> MetricReport:
    """Metrics averaged over the middle slices; CNR on ``roi_slice`` only.

    Without ``truth`` only NRSS is filled in. ``roi`` is a RoiSpec for the
    slice ``roi_slice`` (default: the slice just above the volume centre).
    """
    volume = np.asarray(volume, dtype=float)
    S = volume.shape[0]
    mid = middle_slices(S)
    per = {"nrss": [nrss(volume[l]) for l in range(S)]}
    rep = dict(nrss=float(np.mean([per["nrss"][l] for l in mid])))
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        if truth.shape != volume.shape:
            raise ValueError("reconstruction and truth differ in shape")
        # SNR is undefined on slices where the truth is constant (outside the object)
        per["snr_db"] = [snr_db(volume[l], truth[l]) if np.ptp(truth[l]) > 0 else math.nan
                         for l in range(S)]
        per["ssim"] = [ssim_global(volume[l], truth[l]) for l in range(S)]
        snr_mid = [per["snr_db"][l] for l in mid if not math.isnan(per["snr_db"][l])]
        rep["snr_db"] = float(np.mean(snr_mid)) if snr_mid else math.nan
        rep["ssim"] = float(np.mean([per["ssim"][l] for l in mid]))
    if roi is not None:
        k = S // 2 - 1 if roi_slice is None else roi_slice
        rep["cnr"] = cnr(volume[k], roi)
    return MetricReport(method=method, scenario=scenario, iterations=iterations,
                        seconds=seconds, per_slice=per, **rep)


# ---------------------------------------------------------------------------
# whole scenario
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    truth: np.ndarray
    sinogram: SinogramStack
    runs: list
    reports: list


def run_scenario(sc: ScenarioConfig, stage_hook=None) -> ScenarioResult:
    """phantom, projection, degradation, every method, metrics.

    ``stage_hook(name)`` is called as each stage starts, so callers can name
    the stage that failed.
    """
    hook = stage_hook or (lambda name: None)
    hook("phantom")
    truth = make_phantom(sc.side_length, sc.phantom_variant)
    hook("project")
    clean = project_volume(truth, sc.angle_count, sc.projection_step)
    hook("degrade")
    sino = degrade_sinogram(clean, sc.noise_sigma, sc.max_shift, sc.seed, sc.per_angle_shift)
    hook("system matrix")
    W = build_system_matrix(sino.geometry.with_slices(1))
    hook("roi")
    roi_slice = sc.side_length // 2 - 1
    try:
        roi = phantom_roi(sc.side_length, roi_slice, sc.phantom_variant)
    except ValueError as exc:  # tiny grids erode the target away
        log.warning("no CNR: %s", exc)
        roi = None
    runs, reports = [], []
    for method in sc.methods:
        hook(f"recon:{method}")
        run = reconstruct(method, sino, sc.recon, W)
        log.info("%s %s: %d rounds, %.1f s", sc.name, method, run.iterations, run.seconds)
        runs.append(run)
        hook(f"metrics:{method}")
        reports.append(evaluate(as_f32(run.volume), truth, roi, roi_slice, method=method,
                                scenario=sc.name, iterations=run.iterations, seconds=run.seconds))
    return ScenarioResult(truth, sino, runs, reports)


def deterministic_reports(reports) -> list:
    """Copies with the wall-clock column blanked, for byte-stable tables."""
    return [replace(r, seconds=math.nan) for r in reports]
