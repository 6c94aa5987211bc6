"""Grayscale images, CLAHE, and separable resampling.

All processing works on float luminance in [0, 1]; images are only quantized
to 8 bits when written to disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

NBINS = 256


class ImageError(ValueError):
    """Invalid image data or parameters."""


class BoundsError(ImageError):
    pass


class EmptyHistogramError(ImageError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel raster, row-major, values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ImageError(f"expected a non-empty 2-D raster, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ImageError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def clipped(cls, values) -> "GrayImage":
        return cls(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0))

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


class Region(NamedTuple):
    x: int
    y: int
    width: int
    height: int


@dataclass(frozen=True, eq=False)
class Histogram:
    bins: np.ndarray

    def __post_init__(self):
        b = np.array(self.bins, dtype=np.int64)
        if b.shape != (NBINS,):
            raise ImageError(f"histogram needs {NBINS} bins, got {b.shape}")
        if b.min() < 0:
            raise ImageError("histogram counts must be non-negative")
        b.setflags(write=False)
        object.__setattr__(self, "bins", b)

    @property
    def total(self) -> int:
        return int(self.bins.sum())


@dataclass(frozen=True)
class ClaheParams:
    """Tile geometry in pixels and a clip limit as a fraction of tile area."""

    tile_width: int = 8
    tile_height: int = 8
    clip_limit: float = 0.03

    def __post_init__(self):
        if self.tile_width < 2 or self.tile_height < 2:
            raise ImageError("tile dimensions must be at least 2 pixels")
        if not 0.0 < self.clip_limit <= 1.0:
            raise ImageError(f"clip_limit must be in (0, 1], got {self.clip_limit}")

    @classmethod
    def for_grid(cls, width: int, height: int, cols: int, rows: int, clip_limit: float = 0.03) -> "ClaheParams":
        """Tile size that splits a width x height image into a cols x rows grid."""
        return cls(math.ceil(width / cols), math.ceil(height / rows), clip_limit)

    def validate_for(self, img: GrayImage) -> None:
        if self.tile_width > img.width or self.tile_height > img.height:
            raise ImageError(
                f"tile {self.tile_width}x{self.tile_height} larger than image {img.width}x{img.height}")


class ResampleFilter(str, Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"
    LANCZOS3 = "lanczos3"

    @property
    def support(self) -> float:
        return {"nearest": 0.5, "bilinear": 1.0, "lanczos3": 3.0}[self.value]


# -- histograms / CLAHE ------------------------------------------------------

def bin_index(values: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(values) * 255.0 + 0.5).astype(np.int64)


def compute_histogram(img: GrayImage, region: Region | tuple | None = None) -> Histogram:
    if region is None:
        region = Region(0, 0, img.width, img.height)
    x, y, w, h = region
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > img.width or y + h > img.height:
        raise BoundsError(f"region {tuple(region)} outside {img.width}x{img.height} image")
    patch = img.pixels[y:y + h, x:x + w]
    return Histogram(np.bincount(bin_index(patch).ravel(), minlength=NBINS))


def clip_redistribute(hist: Histogram, clip_limit: float) -> Histogram:
    """Cap each bin at ``max(1, floor(clip_limit * total))`` and spread the excess.

    The excess is shared evenly by floor division across all bins; whatever
    is left over goes one count per bin starting from bin 0.  Single pass, so
    bins may end up slightly above the ceiling.
    """
    total = hist.total
    if total == 0:
        raise EmptyHistogramError("cannot clip an empty histogram")
    ceiling = max(1, math.floor(clip_limit * total))
    bins = hist.bins.copy()
    excess = int(np.maximum(bins - ceiling, 0).sum())
    np.minimum(bins, ceiling, out=bins)
    share, rest = divmod(excess, NBINS)
    bins += share
    bins[:rest] += 1
    return Histogram(bins)


def equalization_map(hist: Histogram) -> np.ndarray:
    total = hist.total
    if total == 0:
        raise EmptyHistogramError("cannot equalize an empty histogram")
    return np.cumsum(hist.bins) / total


def _tile_layout(size: int, tile: int) -> tuple[np.ndarray, np.ndarray]:
    """Tile start offsets and (float) centers along one axis."""
    starts = np.arange(0, size, tile)
    ends = np.minimum(starts + tile, size)
    return starts, (starts + ends - 1) / 2.0


def _axis_weights(size: int, centers: np.ndarray):
    """For each coordinate: lower tile, upper tile, weight of the upper tile."""
    coords = np.arange(size, dtype=np.float64)
    last = len(centers) - 1
    lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, last)
    hi = np.minimum(lo + 1, last)
    inside = (coords >= centers[0]) & (coords < centers[last]) & (hi != lo)
    frac = np.zeros(size)
    frac[inside] = (coords[inside] - centers[lo[inside]]) / (centers[hi[inside]] - centers[lo[inside]])
    hi = np.where(inside, hi, lo)
    return lo, hi, frac


def clahe(img: GrayImage, params: ClaheParams = ClaheParams()) -> GrayImage:
    """Contrast-limited adaptive histogram equalization.

    Each tile's clipped histogram gives an equalization map.  A pixel is mapped
    through the four tile maps whose centers surround it and the results are
    blended bilinearly; outside the outermost centers the nearest map is used.
    """
    params.validate_for(img)
    xs, xc = _tile_layout(img.width, params.tile_width)
    ys, yc = _tile_layout(img.height, params.tile_height)
    maps = np.empty((len(ys), len(xs), NBINS))
    for j, y0 in enumerate(ys):
        for i, x0 in enumerate(xs):
            w = min(params.tile_width, img.width - x0)
            h = min(params.tile_height, img.height - y0)
            hist = compute_histogram(img, Region(int(x0), int(y0), w, h))
            maps[j, i] = equalization_map(clip_redistribute(hist, params.clip_limit))

    b = bin_index(img.pixels)
    x0, x1, wx = _axis_weights(img.width, xc)
    y0, y1, wy = _axis_weights(img.height, yc)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    WX, WY = wx[None, :], wy[:, None]
    top = (1.0 - WX) * maps[Y0, X0, b] + WX * maps[Y0, X1, b]
    bottom = (1.0 - WX) * maps[Y1, X0, b] + WX * maps[Y1, X1, b]
    out = (1.0 - WY) * top + WY * bottom
    return GrayImage(np.clip(out, 0.0, 1.0))


# -- resampling --------------------------------------------------------------

def lanczos3_kernel(x):
    """``sinc(x) * sinc(x / 3)`` inside ``|x| < 3``, zero outside."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sinc(x) * np.sinc(x / 3.0)
    out = np.where(np.abs(x) < 3.0, out, 0.0)
    return out if out.ndim else float(out)


def _kernel(filt: ResampleFilter, x: np.ndarray) -> np.ndarray:
    if filt is ResampleFilter.LANCZOS3:
        return lanczos3_kernel(x)
    if filt is ResampleFilter.BILINEAR:
        return np.maximum(0.0, 1.0 - np.abs(x))
    raise AssertionError(filt)


def resample_matrix(n_in: int, n_out: int, filt: ResampleFilter) -> np.ndarray:
    """(n_out, n_in) weights for one axis.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) * scale - 0.5``.
    When shrinking, the kernel is stretched by the scale factor so it also
    acts as the anti-aliasing filter.  Taps past the border reuse the edge
    sample.
    """
    filt = ResampleFilter(filt)
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in))
    if filt is ResampleFilter.NEAREST:
        src = np.minimum(np.floor((np.arange(n_out) + 0.5) * scale).astype(int), n_in - 1)
        mat[np.arange(n_out), src] = 1.0
        return mat
    stretch = max(scale, 1.0)
    reach = filt.support * stretch
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        taps = np.arange(math.floor(center - reach), math.ceil(center + reach) + 1)
        w = _kernel(filt, (taps - center) / stretch)
        keep = w != 0.0
        taps, w = taps[keep], w[keep]
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w / w.sum())
    return mat


def resize(img: GrayImage, out_width: int, out_height: int,
           filt: ResampleFilter | str = ResampleFilter.LANCZOS3) -> GrayImage:
    if out_width < 1 or out_height < 1:
        raise ImageError(f"output size must be positive, got {out_width}x{out_height}")
    filt = ResampleFilter(filt)
    rows = resample_matrix(img.height, out_height, filt)
    cols = resample_matrix(img.width, out_width, filt)
    out = rows @ img.pixels @ cols.T
    return GrayImage(np.clip(out, 0.0, 1.0))


def upscale_chain(img: GrayImage, upscale_size: int = 256, final_size: int = 224) -> GrayImage:
    """Lanczos enlarge to ``upscale_size`` then settle at ``final_size``."""
    big = resize(img, upscale_size, upscale_size, ResampleFilter.LANCZOS3)
    return resize(big, final_size, final_size, ResampleFilter.LANCZOS3)


# -- 8-bit storage -----------------------------------------------------------

def quantize(img: GrayImage) -> np.ndarray:
    # values are non-negative, so floor(v + 0.5) rounds half away from zero
    return np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)


def dequantize(raster: np.ndarray) -> GrayImage:
    raster = np.asarray(raster)
    if raster.dtype != np.uint8:
        raise ImageError(f"expected a uint8 raster, got {raster.dtype}")
    return GrayImage(raster.astype(np.float64) / 255.0)


def _read_netpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    if data[:2] != magic:
        raise ImageError(f"not a binary {magic.decode()} file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError("truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte ends the header
    width, height, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ImageError(f"only 8-bit images are supported (maxval {maxval})")
    count = width * height * channels
    if len(data) - pos < count:
        raise ImageError("truncated pixel data")
    raster = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return raster.reshape(shape).copy()


def read_image(path) -> GrayImage:
    """Load an 8-bit PGM (P5), or PNG when Pillow is installed."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise ImageError("PNG support needs Pillow") from exc
        with Image.open(path) as im:
            return dequantize(np.asarray(im.convert("L"), dtype=np.uint8))
    return dequantize(_read_netpbm(path.read_bytes(), b"P5", 1))


def write_image(path, img: GrayImage) -> None:
    path = Path(path)
    raster = quantize(img)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(raster, mode="L").save(path)
        return
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    path.write_bytes(header + raster.tobytes())


def write_rgb(path, raster: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 raster as binary PPM, or PNG by extension."""
    raster = np.asarray(raster)
    if raster.dtype != np.uint8 or raster.ndim != 3 or raster.shape[2] != 3:
        raise ImageError("expected an (H, W, 3) uint8 raster")
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(raster, mode="RGB").save(path)
        return
    h, w, _ = raster.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + raster.tobytes())


def read_rgb(path) -> np.ndarray:
    return _read_netpbm(Path(path).read_bytes(), b"P6", 3)


IMAGE_SUFFIXES = (".pgm", ".png")
