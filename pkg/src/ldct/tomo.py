"""Parallel-beam tomography: Radon transform, backprojection, low-dose
simulation, filtered backprojection and mirror padding.

Coordinates: the image is centred on the origin, x runs along columns and
y along rows, both in physical units of ``pixel_spacing``.  A projection at
angle ``theta`` collects line integrals along rays
``s * (cos t, sin t) + u * (-sin t, cos t)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class ScanGeometry:
    n: int
    num_angles: int
    num_bins: int
    bin_spacing: float = 1.0
    pixel_spacing: float = 1.0

    def __post_init__(self):
        if self.n < 1 or self.num_angles < 1 or self.num_bins < 1:
            raise ConfigError("geometry sizes must be positive")
        if self.bin_spacing <= 0 or self.pixel_spacing <= 0:
            raise ConfigError("spacings must be positive")
        if self.num_bins * self.bin_spacing < self.n * math.sqrt(2) * self.pixel_spacing - 1e-9:
            raise ConfigError(
                f"detector ({self.num_bins} bins x {self.bin_spacing}) does not cover the image diagonal"
            )

    @classmethod
    def default(cls, n, num_angles=None, pixel_spacing=1.0):
        """Desk geometry: ``num_angles = n`` and an even bin count covering the diagonal."""
        bins = math.ceil(n * math.sqrt(2))
        bins += bins % 2
        return cls(n=n, num_angles=num_angles or n, num_bins=bins,
                   bin_spacing=pixel_spacing, pixel_spacing=pixel_spacing)

    @property
    def angles(self):
        return np.arange(self.num_angles) * (np.pi / self.num_angles)

    @property
    def bin_centers(self):
        return (np.arange(self.num_bins) - (self.num_bins - 1) / 2) * self.bin_spacing

    def pixel_coords(self):
        c = (np.arange(self.n) - (self.n - 1) / 2) * self.pixel_spacing
        y, x = np.meshgrid(c, c, indexing="ij")
        return x, y

    def to_dict(self):
        return asdict(self)


@dataclass
class Sinogram:
    values: np.ndarray
    geometry: ScanGeometry

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (self.geometry.num_angles, self.geometry.num_bins)
        if self.values.shape != expected:
            raise DataError(f"sinogram shape {self.values.shape} does not match geometry {expected}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("sinogram contains non-finite values")


class FilterKind(str, Enum):
    RAMLAK = "ramlak"
    HANN = "hann"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ConfigError(f"unknown filter {value!r}; expected one of {[k.value for k in cls]}")


@dataclass(frozen=True)
class NoiseModel:
    photons_per_ray: float = 4096.0
    min_count: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.photons_per_ray > 0:
            raise ConfigError("photons_per_ray must be positive")
        if not 0 < self.min_count <= 1:
            raise ConfigError("min_count must lie in (0, 1]")


def _check_image(image, geom):
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (geom.n, geom.n):
        raise DataError(f"image shape {image.shape} does not match geometry size {geom.n}")
    return image


def radon_forward(image, geom: ScanGeometry) -> Sinogram:
    """Ray-driven projection with bilinear interpolation at half-pixel steps."""
    image = _check_image(image, geom)
    ps = geom.pixel_spacing
    half_diag = geom.n * math.sqrt(2) / 2 * ps
    step = 0.5 * ps
    n_samples = int(math.ceil(half_diag / step))
    u = np.arange(-n_samples, n_samples + 1) * step
    s = geom.bin_centers
    # one-pixel zero border so interpolation ramps to zero outside the grid
    padded = np.pad(image, 1)
    centre = (geom.n - 1) / 2 + 1
    out = np.empty((geom.num_angles, geom.num_bins))
    for k, theta in enumerate(geom.angles):
        c, si = math.cos(theta), math.sin(theta)
        x = s[:, None] * c - u[None, :] * si
        y = s[:, None] * si + u[None, :] * c
        rows = y / ps + centre
        cols = x / ps + centre
        vals = ndimage.map_coordinates(padded, [rows.ravel(), cols.ravel()], order=1,
                                       mode="constant", cval=0.0)
        out[k] = vals.reshape(s.size, u.size).sum(axis=1) * step
    return Sinogram(out, geom)


def _smear(rows, geom):
    # pixel-driven: linear interpolation of each detector row at s = x cos + y sin
    x, y = geom.pixel_coords()
    s = geom.bin_centers
    out = np.zeros((geom.n, geom.n))
    for theta, row in zip(geom.angles, rows):
        proj = x * math.cos(theta) + y * math.sin(theta)
        out += np.interp(proj, s, row, left=0.0, right=0.0)
    return out


def backproject(sino: Sinogram) -> np.ndarray:
    """Unfiltered backprojection, scaled to pair with :func:`radon_forward` as its adjoint."""
    g = sino.geometry
    return _smear(sino.values, g) * (g.pixel_spacing ** 2 / g.bin_spacing)


def simulate_low_dose(sino: Sinogram, nm: NoiseModel) -> Sinogram:
    """Beer-Lambert Poisson counts, clamped and log-transformed back."""
    if np.any(sino.values < 0):
        raise DataError("attenuation integrals must be non-negative")
    rng = np.random.default_rng(nm.seed)
    counts = rng.poisson(nm.photons_per_ray * np.exp(-sino.values)).astype(np.float64)
    out = -np.log(np.maximum(counts, nm.min_count) / nm.photons_per_ray)
    return Sinogram(out, sino.geometry)


def padded_length(num_bins):
    return 1 << int(math.ceil(math.log2(2 * num_bins)))


def filter_response(kind, length, spacing=1.0):
    """Frequency response sampled on ``np.fft.fftfreq(length, spacing)``."""
    kind = FilterKind.parse(kind)
    freq = np.fft.fftfreq(length, d=spacing)
    resp = np.abs(freq)
    if kind is FilterKind.HANN:
        nyquist = 0.5 / spacing
        resp = resp * 0.5 * (1 + np.cos(np.pi * freq / nyquist))
    return resp


def filter_sinogram(sino: Sinogram, kind) -> np.ndarray:
    g = sino.geometry
    length = padded_length(g.num_bins)
    spectrum = np.fft.rfft(sino.values, n=length, axis=1)
    resp = filter_response(kind, length, g.bin_spacing)[: length // 2 + 1]
    return np.fft.irfft(spectrum * resp, n=length, axis=1)[:, : g.num_bins]


def fbp(sino: Sinogram, kind=FilterKind.RAMLAK) -> np.ndarray:
    filtered = filter_sinogram(sino, kind)
    return _smear(filtered, sino.geometry) * (np.pi / sino.geometry.num_angles)


@dataclass(frozen=True)
class PadRecord:
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    @property
    def empty(self):
        return not (self.top or self.bottom or self.left or self.right)


def _split(total):
    return total // 2, total - total // 2


def pad_record(shape, multiple):
    """Padding that brings ``shape`` to the next multiple, split evenly with the extra pixel last."""
    h, w = shape
    return PadRecord(*_split(-h % multiple), *_split(-w % multiple))


def mirror_pad(image, multiple):
    """Reflect-pad up to the next multiple of ``multiple`` in both dimensions."""
    if multiple < 1:
        raise ConfigError("multiple must be >= 1")
    image = np.asarray(image)
    rec = pad_record(image.shape[-2:], multiple)
    if rec.empty:
        return image.copy(), rec
    widths = [(0, 0)] * (image.ndim - 2) + [(rec.top, rec.bottom), (rec.left, rec.right)]
    return np.pad(image, widths, mode="symmetric"), rec


def crop_back(image, rec: PadRecord):
    h, w = image.shape[-2:]
    return image[..., rec.top: h - rec.bottom, rec.left: w - rec.right]


def write_sinogram(sino: Sinogram, path):
    """Raw little-endian f32 + ``.json`` sidecar with the geometry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = sino.values.astype("<f4")
    path.write_bytes(data.tobytes())
    meta = {"version": 1, "shape": list(data.shape), "dtype": "<f4",
            "geometry": sino.geometry.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def read_sinogram(path) -> Sinogram:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.exists() or not sidecar.exists():
        raise DataError(f"missing sinogram file or sidecar for {path}")
    meta = json.loads(sidecar.read_text())
    geom = ScanGeometry(**meta["geometry"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != geom.num_angles * geom.num_bins:
        raise DataError(f"{path}: size {raw.size} does not match geometry")
    return Sinogram(raw.reshape(geom.num_angles, geom.num_bins).astype(np.float64), geom)
