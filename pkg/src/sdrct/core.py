"""Shared domain types, reconstruction settings and the raw+header file format.

Volumes and sinograms are kept in memory as float64 numpy arrays; on disk the
payload is little-endian float32 with a JSON sidecar header written next to it
(``<path>.json``).
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "BlankEdgeMask",
    "DimensionError",
    "DtypeMismatchError",
    "FileFormatError",
    "GeometryMismatchError",
    "GridGeometry",
    "HeaderError",
    "KindMismatchError",
    "MaskStructureError",
    "MetricReport",
    "PayloadSizeError",
    "ReconConfig",
    "SinogramStack",
    "Volume",
    "header_path",
    "read_sinogram",
    "read_volume",
    "write_sinogram",
    "write_volume",
]


class FileFormatError(Exception):
    """Base class for problems reading or writing raw+header files."""


class HeaderError(FileFormatError):
    """Header missing, not valid JSON, or lacking required fields."""


class PayloadSizeError(FileFormatError):
    """Payload byte count disagrees with the header."""


class DtypeMismatchError(FileFormatError):
    """Header declares a dtype other than ``f32le``."""


class KindMismatchError(FileFormatError):
    """A volume file was handed to the sinogram reader or vice versa."""


class DimensionError(FileFormatError):
    """Dimensions overflow the addressable size."""


class MaskStructureError(ValueError):
    """A validity mask has invalid bins that do not sit on the detector edges."""


class GeometryMismatchError(ValueError):
    """Array shapes disagree with the geometry they are paired with."""


# ---------------------------------------------------------------------------
# geometry and containers
# ---------------------------------------------------------------------------


def _uniform_angles(angle_count: int) -> tuple[float, ...]:
    return tuple(math.pi * k / angle_count for k in range(angle_count))


@dataclass(frozen=True)
class GridGeometry:
    """Parallel-beam acquisition geometry.

    Slices are ``side_length`` x ``side_length`` pixels centred on the rotation
    axis. Detector bins are centred on the grid centre with spacing
    ``pixel_size``. Angles are equally spaced on ``[0, pi)``.
    """

    side_length: int
    angle_count: int
    slice_count: int
    pixel_size: float = 1.0
    detector_count: int | None = None
    angles: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("side_length", "angle_count", "slice_count"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not (self.pixel_size > 0 and math.isfinite(self.pixel_size)):
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size!r}")
        if self.detector_count is None:
            object.__setattr__(self, "detector_count", int(self.side_length))
        if self.detector_count < 1:
            raise ValueError("detector_count must be >= 1")
        if self.angles is None:
            object.__setattr__(self, "angles", _uniform_angles(self.angle_count))
        else:
            object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        angles = np.asarray(self.angles)
        if angles.size != self.angle_count:
            raise ValueError("len(angles) must equal angle_count")
        if not np.all(np.isfinite(angles)):
            raise ValueError("angles must be finite")
        if angles.size > 1:
            steps = np.diff(angles)
            if np.any(steps <= 0):
                raise ValueError("angles must be strictly increasing")
            if np.max(np.abs(steps - steps[0])) > 1e-12:
                raise ValueError("angles must be uniformly spaced")
        if angles[0] < 0 or angles[-1] >= math.pi:
            raise ValueError("angles must lie in [0, pi)")

    @property
    def pixel_count(self) -> int:
        return self.side_length * self.side_length

    @property
    def ray_count(self) -> int:
        return self.angle_count * self.detector_count

    def detector_offsets(self) -> np.ndarray:
        """Signed distance of each detector bin centre from the rotation axis."""
        k = np.arange(self.detector_count, dtype=float)
        return (k - (self.detector_count - 1) / 2.0) * self.pixel_size

    def pixel_centers(self) -> np.ndarray:
        """Coordinates of pixel centres along one axis."""
        k = np.arange(self.side_length, dtype=float)
        return (k - (self.side_length - 1) / 2.0) * self.pixel_size

    def with_slices(self, slice_count: int) -> GridGeometry:
        return replace(self, slice_count=slice_count)

    def to_dict(self) -> dict:
        return {
            "side_length": self.side_length,
            "angle_count": self.angle_count,
            "slice_count": self.slice_count,
            "pixel_size": self.pixel_size,
            "detector_count": self.detector_count,
            "angles": list(self.angles),
        }


@dataclass
class Volume:
    """A stack of slices, array shape ``(slice, y, x)``; index 0 is the top slice."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        g = self.geometry
        expected = (g.slice_count, g.side_length, g.side_length)
        if self.data.shape != expected:
            raise GeometryMismatchError(f"volume shape {self.data.shape} != {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    def slice(self, l: int) -> np.ndarray:
        return self.data[l]

    @property
    def slice_count(self) -> int:
        return self.data.shape[0]


@dataclass
class BlankEdgeMask:
    """Per-ray validity, shape ``(slice, angle, detector)``.

    Invalid bins must form runs at the top and/or bottom detector edge.
    """

    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.ndim != 3:
            raise GeometryMismatchError("mask must be 3-D (slice, angle, detector)")
        check_edge_structure(self.valid)

    @classmethod
    def all_valid(cls, shape) -> BlankEdgeMask:
        return cls(np.ones(shape, dtype=bool))

    @property
    def invalid_fraction(self) -> float:
        return float(1.0 - self.valid.mean()) if self.valid.size else 0.0


def check_edge_structure(valid: np.ndarray) -> None:
    """Raise MaskStructureError unless every detector row is ``F* T* F*``."""
    rows = valid.reshape(-1, valid.shape[-1]).astype(np.int8)
    # a row is well formed iff it switches invalid->valid at most once and
    # valid->invalid at most once, in that order
    d = np.diff(rows, axis=1)
    ups = (d == 1).sum(axis=1)
    downs = (d == -1).sum(axis=1)
    bad = (ups > 1) | (downs > 1)
    if rows.shape[1] > 1:
        first_down = np.where(downs > 0, np.argmax(d == -1, axis=1), rows.shape[1])
        first_up = np.where(ups > 0, np.argmax(d == 1, axis=1), -1)
        bad |= (ups > 0) & (downs > 0) & (first_down < first_up)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise MaskStructureError(f"interior hole in validity mask at row {idx}")


@dataclass
class SinogramStack:
    """Log-domain projections, shape ``(slice, angle, detector)``.

    Row order within one slice (angle-major, detector-minor) matches the rows
    of the system matrix, so ``data[l].ravel()`` is the projection vector of
    slice ``l``. Invalid entries are forced to zero.
    """

    geometry: GridGeometry
    data: np.ndarray
    mask: BlankEdgeMask | None = None

    def __post_init__(self):
        self.data = np.array(self.data, dtype=np.float64)
        g = self.geometry
        expected = (g.slice_count, g.angle_count, g.detector_count)
        if self.data.shape != expected:
            raise GeometryMismatchError(f"sinogram shape {self.data.shape} != {expected}")
        if self.mask is None:
            self.mask = BlankEdgeMask.all_valid(expected)
        if self.mask.valid.shape != expected:
            raise GeometryMismatchError("mask shape does not match sinogram")
        self.data[~self.mask.valid] = 0.0
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram contains non-finite values")

    @property
    def valid(self) -> np.ndarray:
        return self.mask.valid

    def slice_rays(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        """Projection vector and validity vector of slice ``l``."""
        return self.data[l].ravel(), self.mask.valid[l].ravel()


# ---------------------------------------------------------------------------
# configuration and reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReconConfig:
    """Tunables shared by the iterative reconstructors."""

    lambda1: float = 0.5
    lambda2: float = 0.005
    alpha: float = 1.0
    tv_epsilon: float = 1e-8
    max_outer_iterations: int = 20
    convergence_threshold: float = 1e-3
    lasso_tolerance: float = 1e-6
    lasso_max_sweeps: int = 1000
    ossirt_subsets: int = 10
    rng_seed: int = 0
    tv_grad_variant: str = "symmetric"
    fusion_signs: str = "consistent"
    fusion: bool = True
    fusion_neighbors: str = "current"
    lasso_normalization: str = "all_rays"
    tv_initial_step: float = 1.0
    threads: int = 1

    def __post_init__(self):
        if not (self.lambda1 >= 0 and math.isfinite(self.lambda1)):
            raise ValueError("lambda1 must be a finite nonnegative number")
        if not (self.lambda2 >= 0 and math.isfinite(self.lambda2)):
            raise ValueError("lambda2 must be a finite nonnegative number")
        if not (0 < self.alpha <= 2):
            raise ValueError("alpha must lie in (0, 2]")
        if not self.tv_epsilon > 0:
            raise ValueError("tv_epsilon must be positive")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if self.convergence_threshold < 0:
            raise ValueError("convergence_threshold must be >= 0")
        if not self.lasso_tolerance > 0:
            raise ValueError("lasso_tolerance must be positive")
        if self.lasso_max_sweeps < 1:
            raise ValueError("lasso_max_sweeps must be >= 1")
        if self.ossirt_subsets < 1:
            raise ValueError("ossirt_subsets must be >= 1")
        if not (0 <= self.rng_seed < 2**64):
            raise ValueError("rng_seed must be a 64-bit unsigned integer")
        if self.tv_grad_variant not in ("symmetric", "as_printed"):
            raise ValueError("tv_grad_variant must be 'symmetric' or 'as_printed'")
        if self.fusion_signs not in ("consistent", "as_printed"):
            raise ValueError("fusion_signs must be 'consistent' or 'as_printed'")
        if self.fusion_neighbors not in ("current", "previous"):
            raise ValueError("fusion_neighbors must be 'current' or 'previous'")
        if self.lasso_normalization not in ("all_rays", "valid_rays"):
            raise ValueError("lasso_normalization must be 'all_rays' or 'valid_rays'")
        if not self.tv_initial_step > 0:
            raise ValueError("tv_initial_step must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricReport:
    """Quality figures of one reconstruction run.

    ``per_slice`` maps a metric name to one value per slice (NaN where the
    metric was not computed); the aggregate fields hold the summary values.
    """

    method: str
    scenario: str = ""
    snr_db: float = math.nan
    ssim: float = math.nan
    cnr: float = math.nan
    nrss: float = math.nan
    iterations: int = 0
    seconds: float = 0.0
    per_slice: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isnan(self.ssim) and not (-1.0 - 1e-12 <= self.ssim <= 1.0 + 1e-12):
            raise ValueError("ssim must lie in [-1, 1]")
        if not math.isnan(self.nrss) and self.nrss < 0:
            raise ValueError("nrss must be >= 0")
        if not math.isnan(self.cnr) and self.cnr < 0:
            raise ValueError("cnr must be >= 0")


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_DTYPE = "f32le"
_MAX_BYTES = sys.maxsize


def header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _payload_bytes(dims) -> int:
    count = 1
    for d in dims:
        count *= int(d)
    nbytes = count * 4
    if nbytes > _MAX_BYTES:
        raise DimensionError(f"dimensions {list(dims)} exceed the addressable size")
    return nbytes


def _write(path, header: dict, payload: bytes) -> None:
    path = Path(path)
    try:
        path.write_bytes(payload)
        header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _read_header(path, kind: str) -> dict:
    hpath = header_path(path)
    try:
        text = hpath.read_text(encoding="utf-8")
    except OSError as exc:
        raise HeaderError(f"cannot read header {hpath}: {exc}") from exc
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HeaderError(f"malformed header {hpath}: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError(f"malformed header {hpath}: not an object")
    for key in ("dims", "dtype", "pixel_size", "kind"):
        if key not in header:
            raise HeaderError(f"malformed header {hpath}: missing '{key}'")
    if header["kind"] != kind:
        raise KindMismatchError(f"kind mismatch: {path} holds a {header['kind']!r}, expected {kind!r}")
    if header["dtype"] != _DTYPE:
        raise DtypeMismatchError(f"dtype mismatch: {header['dtype']!r} (only {_DTYPE!r} is supported)")
    dims = header["dims"]
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d >= 1 for d in dims)):
        raise HeaderError(f"malformed header {hpath}: bad dims {dims!r}")
    return header


def _read_payload(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def write_volume(volume: Volume, path) -> None:
    """Write ``volume`` as f32le voxels (x fastest, then y, then slice) plus header."""
    g = volume.geometry
    dims = [g.side_length, g.side_length, g.slice_count]
    _payload_bytes(dims)
    header = {
        "dims": dims,
        "dtype": _DTYPE,
        "pixel_size": g.pixel_size,
        "kind": "volume",
    }
    _write(path, header, volume.data.astype("<f4").tobytes())


def read_volume(path) -> Volume:
    header = _read_header(path, "volume")
    nx, ny, ns = header["dims"]
    if nx != ny:
        raise HeaderError("volume slices must be square")
    expected = _payload_bytes(header["dims"])
    raw = _read_payload(path)
    if len(raw) != expected:
        raise PayloadSizeError(f"payload size mismatch: {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(ns, ny, nx).astype(np.float64)
    # angle data is not part of a volume file; a single dummy angle keeps the geometry valid
    geometry = GridGeometry(side_length=nx, angle_count=1, slice_count=ns,
                            pixel_size=float(header["pixel_size"]))
    return Volume(geometry, data)


def write_sinogram(sino: SinogramStack, path) -> None:
    """Write projections as f32le followed by the packed validity bit plane.

    Dims are ``[detector, angle, slice]`` (detector fastest). The mask is
    packed MSB-first in (slice, angle, detector) row-major order.
    """
    g = sino.geometry
    dims = [g.detector_count, g.angle_count, g.slice_count]
    data_bytes = _payload_bytes(dims)
    bits = np.packbits(sino.mask.valid.ravel(), bitorder="big").tobytes()
    header = {
        "dims": dims,
        "dtype": _DTYPE,
        "pixel_size": g.pixel_size,
        "kind": "sinogram",
        "side_length": g.side_length,
        "angles": list(g.angles),
        "data_bytes": data_bytes,
        "mask": {"encoding": "packbits-msb", "order": "slice,angle,detector", "bytes": len(bits)},
    }
    _write(path, header, sino.data.astype("<f4").tobytes() + bits)


def read_sinogram(path) -> SinogramStack:
    header = _read_header(path, "sinogram")
    nd, na, ns = header["dims"]
    for key in ("side_length", "angles", "mask"):
        if key not in header:
            raise HeaderError(f"malformed header {header_path(path)}: missing '{key}'")
    mask_info = header["mask"]
    if not isinstance(mask_info, dict) or mask_info.get("encoding") != "packbits-msb":
        raise HeaderError("unsupported mask encoding")
    data_bytes = _payload_bytes(header["dims"])
    mask_bytes = (nd * na * ns + 7) // 8
    if mask_info.get("bytes") != mask_bytes:
        raise HeaderError("mask byte count inconsistent with dims")
    raw = _read_payload(path)
    if len(raw) != data_bytes + mask_bytes:
        raise PayloadSizeError(
            f"payload size mismatch: {len(raw)} bytes, expected {data_bytes + mask_bytes}")
    data = np.frombuffer(raw[:data_bytes], dtype="<f4").reshape(ns, na, nd).astype(np.float64)
    bits = np.frombuffer(raw[data_bytes:], dtype=np.uint8)
    valid = np.unpackbits(bits, count=nd * na * ns, bitorder="big").astype(bool).reshape(ns, na, nd)
    try:
        geometry = GridGeometry(side_length=int(header["side_length"]), angle_count=na,
                                slice_count=ns, pixel_size=float(header["pixel_size"]),
                                detector_count=nd, angles=tuple(header["angles"]))
    except ValueError as exc:
        raise HeaderError(f"malformed header geometry: {exc}") from exc
    return SinogramStack(geometry, data, BlankEdgeMask(valid))
