"""Raster image plumbing: strict binary PPM (P6) IO and bilinear resizing.

Images are dense float64 arrays of shape (h, w, 3) with values in [0, 1].
The resize kernel is bilinear with half-pixel centers and no anti-aliasing,
so resizing to the same size is a bit-exact copy and golden tests can pin
output bytes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_CHANNELS = 3
_MAXVAL = 255


class ContractError(ValueError):
    """An input violated a documented precondition."""


class PpmError(ContractError):
    """The byte stream is not a well-formed P6 PPM at maxval 255."""


@dataclass(frozen=True)
class ImageDims:
    """Pixel height and width of an image."""

    h_px: int
    w_px: int

    def __post_init__(self):
        if self.h_px < 1 or self.w_px < 1:
            raise ContractError(f"image dims must be positive, got {self.h_px}x{self.w_px}")


@dataclass
class RasterImage:
    """An RGB image as a (h, w, 3) float64 array with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != _CHANNELS:
            raise ContractError(f"expected (h, w, 3) pixel array, got shape {px.shape}")
        if px.dtype != np.float64:
            raise ContractError(f"expected float64 pixels, got {px.dtype}")

    @property
    def dims(self) -> ImageDims:
        return ImageDims(h_px=self.pixels.shape[0], w_px=self.pixels.shape[1])


def _lerp_axis(values: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    """Linearly interpolate one axis to ``n_out`` samples, half-pixel centers."""
    n_in = values.shape[axis]
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(centers)
    frac = centers - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.int64)
    v0 = np.take(values, i0, axis=axis)
    v1 = np.take(values, i1, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = n_out
    f = frac.reshape(shape)
    return v0 * (1.0 - f) + v1 * f


def bilinear_resize(img: RasterImage, out_h: int, out_w: int) -> RasterImage:
    """Resize with the fixed bilinear/half-pixel-center kernel.

    Identity sizes reproduce the input bit-exactly (the interpolation weight
    degenerates to 1.0 on the source sample).
    """
    if out_h < 1 or out_w < 1:
        raise ContractError(f"resize target must be positive, got {out_h}x{out_w}")
    rows = _lerp_axis(img.pixels, out_h, axis=0)
    return RasterImage(np.ascontiguousarray(_lerp_axis(rows, out_w, axis=1)))


def crop(img: RasterImage, top: int, left: int, h: int, w: int) -> RasterImage:
    if top < 0 or left < 0 or top + h > img.dims.h_px or left + w > img.dims.w_px:
        raise ContractError(
            f"crop ({top},{left},{h},{w}) exceeds image bounds {img.dims.h_px}x{img.dims.w_px}"
        )
    return RasterImage(np.ascontiguousarray(img.pixels[top : top + h, left : left + w]))


def _read_header_token(stream: io.BufferedIOBase) -> bytes:
    """One whitespace-delimited header token; '#' comments run to end of line."""
    token = b""
    while True:
        ch = stream.read(1)
        if ch == b"":
            raise PpmError("unexpected end of header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def _parse_header_int(stream: io.BufferedIOBase, field: str) -> int:
    token = _read_header_token(stream)
    if not token.isdigit():
        raise PpmError(f"bad {field} field: {token!r}")
    return int(token)


def read_ppm_bytes(data: bytes) -> RasterImage:
    """Strict P6 parser: magic, dims, maxval 255, one whitespace, raw RGB bytes."""
    stream = io.BytesIO(data)
    if _read_header_token(stream) != b"P6":
        raise PpmError("not a P6 PPM (bad magic)")
    w = _parse_header_int(stream, "width")
    h = _parse_header_int(stream, "height")
    maxval = _parse_header_int(stream, "maxval")
    if w < 1 or h < 1:
        raise PpmError(f"bad dimensions {w}x{h}")
    if maxval != _MAXVAL:
        raise PpmError(f"only maxval 255 supported, got {maxval}")
    # _read_header_token consumed exactly one whitespace byte after maxval.
    raster = stream.read()
    expected = h * w * _CHANNELS
    if len(raster) < expected:
        raise PpmError(f"truncated raster: expected {expected} bytes, got {len(raster)}")
    if len(raster) > expected:
        raise PpmError(f"trailing bytes after raster: {len(raster) - expected}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, _CHANNELS)
    return RasterImage(arr.astype(np.float64) / _MAXVAL)


def read_ppm(path: str | Path) -> RasterImage:
    return read_ppm_bytes(Path(path).read_bytes())


def write_ppm(img: RasterImage, path: str | Path) -> None:
    """Quantize to 8-bit (round half away from zero via rint) and emit P6."""
    h, w = img.pixels.shape[:2]
    data = np.rint(np.clip(img.pixels, 0.0, 1.0) * _MAXVAL).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())
