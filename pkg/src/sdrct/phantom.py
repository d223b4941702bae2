"""3-D Shepp-Logan ground truth and the bilinear sampler used for data simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import GridGeometry, Volume

__all__ = [
    "Ellipsoid",
    "KAK_SLANEY",
    "MODIFIED_KAK_SLANEY",
    "bilinear_sample",
    "bilinear_sample_many",
    "ellipsoid_table",
    "evaluate_point",
    "shepp_logan_3d",
    "voxel_centers",
]


@dataclass(frozen=True)
class Ellipsoid:
    x0: float
    y0: float
    z0: float
    a: float
    b: float
    c: float
    phi: float  # rotation about z, radians
    value: float

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError("semi-axes must be positive")

    def contains(self, x, y, z):
        """Boolean mask of points inside (boundary inclusive)."""
        dx, dy, dz = x - self.x0, y - self.y0, z - self.z0
        cp, sp = math.cos(self.phi), math.sin(self.phi)
        u = dx * cp + dy * sp
        v = -dx * sp + dy * cp
        return (u / self.a) ** 2 + (v / self.b) ** 2 + (dz / self.c) ** 2 <= 1.0


def _table(values):
    geometry = [
        # x0     y0     z0      a       b      c     phi(deg)
        (0.0, 0.0, 0.0, 0.69, 0.92, 0.90, 0.0),
        (0.0, 0.0, 0.0, 0.6624, 0.874, 0.88, 0.0),
        (-0.22, 0.0, -0.25, 0.41, 0.16, 0.21, 108.0),
        (0.22, 0.0, -0.25, 0.31, 0.11, 0.22, 72.0),
        (0.0, 0.35, -0.25, 0.21, 0.25, 0.50, 0.0),
        (0.0, 0.1, -0.25, 0.046, 0.046, 0.046, 0.0),
        (-0.08, -0.65, -0.25, 0.046, 0.023, 0.02, 0.0),
        (0.06, -0.65, -0.25, 0.046, 0.023, 0.02, 90.0),
        (0.06, -0.105, 0.625, 0.056, 0.04, 0.10, 90.0),
        (0.0, 0.1, 0.625, 0.056, 0.056, 0.10, 0.0),
    ]
    return tuple(Ellipsoid(x0, y0, z0, a, b, c, math.radians(phi), v)
                 for (x0, y0, z0, a, b, c, phi), v in zip(geometry, values))


# Kak & Slaney ellipsoids with the original attenuation values ...
KAK_SLANEY = _table([2.0, -0.98, -0.02, -0.02, 0.02, 0.02, 0.01, 0.01, 0.02, -0.02])
# ... and with the high-contrast values commonly used for display.
MODIFIED_KAK_SLANEY = _table([1.0, -0.8, -0.2, -0.2, 0.2, 0.2, 0.1, 0.1, 0.2, -0.2])


def ellipsoid_table(variant: str = "modified") -> tuple[Ellipsoid, ...]:
    if variant == "modified":
        return MODIFIED_KAK_SLANEY
    if variant == "standard":
        return KAK_SLANEY
    raise ValueError(f"unknown phantom variant {variant!r}; use 'modified' or 'standard'")


def voxel_centers(n: int) -> np.ndarray:
    """Centres of ``n`` equal cells tiling [-1, 1]."""
    return (np.arange(n) + 0.5) * (2.0 / n) - 1.0


def evaluate_point(x: float, y: float, z: float, ellipsoids=MODIFIED_KAK_SLANEY) -> float:
    """Phantom value at one point, by plain summation over the table."""
    total = 0.0
    for e in ellipsoids:
        if e.contains(x, y, z):
            total += e.value
    return max(total, 0.0)


def shepp_logan_3d(geometry: GridGeometry, variant: str = "modified") -> Volume:
    """Sample the phantom at voxel centres of a cubic grid spanning [-1, 1]^3.

    Array axes are (slice, y, x); slice 0 is the top of the object (largest z).
    """
    L = geometry.side_length
    if geometry.slice_count != L:
        raise ValueError(f"phantom needs a cubic grid, got {L}x{L}x{geometry.slice_count}")
    c = voxel_centers(L)
    z = c[::-1][:, None, None]
    y = c[::-1][None, :, None]
    x = c[None, None, :]
    vol = np.zeros((L, L, L))
    for e in ellipsoid_table(variant):
        vol[e.contains(x, y, z)] += e.value
    np.maximum(vol, 0.0, out=vol)
    return Volume(geometry, vol)


def bilinear_sample_many(image: np.ndarray, x, y) -> np.ndarray:
    """Bilinear interpolation at fractional pixel coordinates.

    ``x`` indexes columns and ``y`` rows, in pixel units, so ``(k, m)`` is the
    centre of ``image[m, k]``. Nodes beyond the grid count as zero, which makes
    the result vanish once a point is a full pixel outside the outermost
    centres.
    """
    image = np.asarray(image, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("sample coordinates must be finite")
    ny, nx = image.shape
    padded = np.zeros((ny + 2, nx + 2))
    padded[1:-1, 1:-1] = image
    # shift into padded coordinates and clip far-away points onto the zero border
    xp = np.clip(x + 1.0, 0.0, nx + 1.0)
    yp = np.clip(y + 1.0, 0.0, ny + 1.0)
    k = np.minimum(np.floor(xp).astype(np.intp), nx)
    m = np.minimum(np.floor(yp).astype(np.intp), ny)
    tx = xp - k
    ty = yp - m
    f00 = padded[m, k]
    f10 = padded[m, k + 1]
    f01 = padded[m + 1, k]
    f11 = padded[m + 1, k + 1]
    return ((1 - tx) * (1 - ty) * f00 + tx * (1 - ty) * f10
            + (1 - tx) * ty * f01 + tx * ty * f11)


def bilinear_sample(image: np.ndarray, x: float, y: float) -> float:
    """Scalar form of :func:`bilinear_sample_many`."""
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("sample coordinates must be finite")
    return float(bilinear_sample_many(image, x, y))
