"""Grayscale image storage, bilinear sampling, gradients and pixel selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

#: pixels closer than this to any border are never selected or sampled
BORDER_MARGIN = 1


class OutOfImageError(ValueError):
    """Raised when a sample location falls outside the image."""


class ImageDimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Row-major intensity raster in [0, 1].

    ``data`` has shape ``(height, width)``. The array is copied and frozen on
    construction so instances can be shared between threads.
    """

    data: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ImageDimensionError(f"expected a 2-D raster, got shape {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 or not np.isfinite(arr).all()):
            raise ValueError("intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_uint8(cls, raw: np.ndarray, timestamp: float = 0.0) -> GrayImage:
        return cls(np.asarray(raw, dtype=np.float64) / 255.0, timestamp)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.gx, self.gy)


@dataclass(frozen=True, eq=False)
class PixelSet:
    """Evaluation pixels as an ``(N, 2)`` array of ``(x, y)`` coordinates."""

    coords: np.ndarray
    source_image_id: str = ""
    magnitudes: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        arr = np.array(self.coords, dtype=np.float64).reshape(-1, 2)
        arr.setflags(write=False)
        object.__setattr__(self, "coords", arr)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def xs(self) -> np.ndarray:
        return self.coords[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.coords[:, 1]


def sample_bilinear(img: GrayImage, x: float, y: float) -> float:
    """Bilinearly interpolated intensity at ``(x, y)``.

    Raises
    ------
    OutOfImageError
        If the coordinate lies outside ``[0, width-1] x [0, height-1]``.
    """
    w, h = img.width, img.height
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise OutOfImageError(f"({x}, {y}) outside {w}x{h} image")
    x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
    ax = x - x0
    ay = y - y0
    d = img.data
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    top = (1.0 - ax) * d[y0, x0] + ax * d[y0, x1]
    bottom = (1.0 - ax) * d[y1, x0] + ax * d[y1, x1]
    return float((1.0 - ay) * top + ay * bottom)


def sample_many(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorised bilinear sampling; coordinates must already be in bounds."""
    h, w = data.shape
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    ax = xs - x0
    ay = ys - y0
    i00 = data[y0, x0]
    i01 = data[y0, x0 + 1]
    i10 = data[y0 + 1, x0]
    i11 = data[y0 + 1, x0 + 1]
    top = i00 + ax * (i01 - i00)
    bottom = i10 + ax * (i11 - i10)
    return top + ay * (bottom - top)


def sample_with_gradient(
    data: np.ndarray, xs: np.ndarray, ys: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample intensities and the spatial derivative of the bilinear interpolant.

    Inside a cell the derivative is that of the bilinear surface. On a grid
    line, where the interpolant has a kink, the mean of the two one-sided
    slopes is returned; at pixel centres this reduces to the central
    difference of :func:`gradient`. Coordinates must satisfy
    ``1 <= x <= width-2`` and ``1 <= y <= height-2``.
    """
    fx = np.floor(xs)
    fy = np.floor(ys)
    x0 = fx.astype(np.intp)
    y0 = fy.astype(np.intp)
    ax = xs - fx
    ay = ys - fy

    i00 = data[y0, x0]
    i01 = data[y0, x0 + 1]
    i10 = data[y0 + 1, x0]
    i11 = data[y0 + 1, x0 + 1]

    top = i00 + ax * (i01 - i00)
    bottom = i10 + ax * (i11 - i10)
    values = top + ay * (bottom - top)

    gx = (1.0 - ay) * (i01 - i00) + ay * (i11 - i10)
    gy = bottom - top

    on_x = ax == 0.0
    if on_x.any():
        yy0, yy1, xx = y0[on_x], y0[on_x] + 1, x0[on_x]
        a = ay[on_x]
        left = (1.0 - a) * (data[yy0, xx] - data[yy0, xx - 1]) + a * (data[yy1, xx] - data[yy1, xx - 1])
        gx[on_x] = 0.5 * (gx[on_x] + left)
    on_y = ay == 0.0
    if on_y.any():
        xx0, xx1, yy = x0[on_y], x0[on_y] + 1, y0[on_y]
        a = ax[on_y]
        up = (1.0 - a) * (data[yy, xx0] - data[yy - 1, xx0]) + a * (data[yy, xx1] - data[yy - 1, xx1])
        gy[on_y] = 0.5 * (gy[on_y] + up)
    return values, gx, gy


def gradient(img: GrayImage) -> GradientField:
    """Central differences in the interior, one-sided differences on the border."""
    if img.width < 3 or img.height < 3:
        raise ImageDimensionError(f"gradient needs at least 3x3, got {img.width}x{img.height}")
    gy, gx = np.gradient(img.data)
    return GradientField(gx=gx, gy=gy)


def select_pixels(
    field: GradientField,
    budget: int = 2000,
    threshold: float = 0.005,
    source_image_id: str = "",
) -> PixelSet:
    """Pick up to ``budget`` interior pixels with the largest gradient magnitude.

    Candidates must have magnitude ``>= threshold``. Ordering is by descending
    magnitude, ties broken in row-major order, so the result is deterministic.
    An empty set means the frame cannot be tracked.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    h, w = field.gx.shape
    m = BORDER_MARGIN
    gx = field.gx[m : h - m, m : w - m]
    gy = field.gy[m : h - m, m : w - m]
    iw = w - 2 * m
    # squared magnitudes order identically and skip a sqrt over the whole frame
    flat = (gx * gx + gy * gy).ravel()
    cand = np.flatnonzero(flat >= threshold * threshold)
    if cand.size > budget:
        vals = flat[cand]
        kth = np.partition(vals, vals.size - budget)[vals.size - budget]
        above = cand[vals > kth]
        ties = cand[vals == kth][: budget - above.size]
        cand = np.concatenate([above, ties])
        cand.sort()
    order = np.argsort(-flat[cand], kind="stable")
    cand = cand[order]
    ys, xs = np.divmod(cand, iw)
    coords = np.column_stack([xs + m, ys + m]).astype(np.float64)
    return PixelSet(coords=coords, source_image_id=source_image_id, magnitudes=np.sqrt(flat[cand]))


def downsample(img: GrayImage) -> GrayImage:
    """2x2 box-filtered half-resolution copy (odd trailing rows/cols dropped)."""
    h, w = (img.height // 2) * 2, (img.width // 2) * 2
    d = img.data[:h, :w]
    small = 0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2])
    return GrayImage(small, img.timestamp)


def read_pgm(path: str | Path, timestamp: float = 0.0) -> GrayImage:
    """Read an 8-bit binary (P5) PGM file and normalise it to [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pos += 1
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return GrayImage.from_uint8(pixels.reshape(height, width), timestamp)


def write_pgm(path: str | Path, img: GrayImage) -> None:
    raw = img.to_uint8()
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raw.tobytes())
