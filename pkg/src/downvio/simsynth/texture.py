"""Procedural ground textures stored as rasters and sampled bilinearly."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

#: intensity returned off the textured region and for rays missing the plane
BACKGROUND = 0.5
_BASE_STD = 0.25


@dataclass(frozen=True)
class TextureSpec:
    kind: str = "noise"  # "noise", "checker" or "flat"
    seed: int = 0
    contrast: float = 1.0
    extent_m: float = 12.0
    texel_m: float = 0.008
    min_wavelength_m: float = 0.2
    max_wavelength_m: float = 2.0
    spectral_slope: float = 1.0  # amplitude ~ 1/f**slope inside the band
    checker_period_m: float = 0.2

    def __post_init__(self) -> None:
        if self.kind not in ("noise", "checker", "flat"):
            raise ValueError(f"unknown texture kind {self.kind!r}")
        if self.contrast < 0:
            raise ValueError("contrast must be non-negative")
        if self.extent_m <= 0 or self.texel_m <= 0:
            raise ValueError("texture extent and texel size must be positive")


@dataclass(frozen=True, eq=False)
class Texture:
    """Raster covering ``[-extent/2, extent/2]^2`` in plane coordinates (m)."""

    raster: np.ndarray
    texel_m: float
    extent_m: float

    @property
    def half_extent(self) -> float:
        return 0.5 * (self.raster.shape[0] - 1) * self.texel_m

    def contains(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        he = self.half_extent
        return (np.abs(a) <= he) & (np.abs(b) <= he)

    def sample(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Bilinear lookup at plane coordinates; off-texture points get ``BACKGROUND``."""
        size = self.raster.shape[0]
        he = self.half_extent
        u = (a + he) / self.texel_m
        v = (b + he) / self.texel_m
        inside = (u >= 0) & (u <= size - 1) & (v >= 0) & (v <= size - 1)
        out = np.full(np.shape(a), BACKGROUND)
        u, v = u[inside], v[inside]
        u0 = np.minimum(np.floor(u).astype(np.intp), size - 2)
        v0 = np.minimum(np.floor(v).astype(np.intp), size - 2)
        fu = u - u0
        fv = v - v0
        r = self.raster
        top = r[v0, u0] + fu * (r[v0, u0 + 1] - r[v0, u0])
        bot = r[v0 + 1, u0] + fu * (r[v0 + 1, u0 + 1] - r[v0 + 1, u0])
        out[inside] = top + fv * (bot - top)
        return out


def _band_limited_noise(
    size: int, texel: float, lo_wl: float, hi_wl: float, seed: int, slope: float = 1.0
) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian noise filtered to wavelengths in ``[lo_wl, hi_wl]``.

    Inside the band the amplitude falls as ``f**-slope``; ``slope = 1`` gives
    the equal-energy-per-octave look of fractal (Perlin-like) ground.
    """
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((size, size))
    spec = np.fft.rfft2(white)
    fy = np.fft.fftfreq(size, d=texel)[:, None]
    fx = np.fft.rfftfreq(size, d=texel)[None, :]
    f = np.hypot(fx, fy)
    f_hi = 1.0 / lo_wl
    f_lo = 1.0 / hi_wl
    with np.errstate(divide="ignore"):
        tilt = np.where(f > 0, (f / f_lo) ** -slope, 0.0)
    gain = np.exp(-((f / f_hi) ** 2)) * (1.0 - np.exp(-((f / f_lo) ** 2))) * tilt
    field = np.fft.irfft2(spec * gain, s=(size, size))
    field -= field.mean()
    return field / field.std()


@functools.lru_cache(maxsize=8)
def make_texture(spec: TextureSpec) -> Texture:
    size = int(round(spec.extent_m / spec.texel_m)) + 1
    if spec.kind == "flat" or spec.contrast == 0.0:
        raster = np.full((size, size), BACKGROUND)
    elif spec.kind == "checker":
        coords = (np.arange(size) - (size - 1) / 2) * spec.texel_m
        cells = np.floor(coords / (0.5 * spec.checker_period_m)).astype(np.int64)
        board = ((cells[:, None] + cells[None, :]) % 2).astype(np.float64)
        raster = BACKGROUND + spec.contrast * 0.5 * (2.0 * board - 1.0)
    else:
        noise = _band_limited_noise(
            size, spec.texel_m, spec.min_wavelength_m, spec.max_wavelength_m, spec.seed, spec.spectral_slope
        )
        raster = BACKGROUND + spec.contrast * _BASE_STD * noise
    raster = np.clip(raster, 0.0, 1.0)
    raster.setflags(write=False)
    return Texture(raster=raster, texel_m=spec.texel_m, extent_m=spec.extent_m)
