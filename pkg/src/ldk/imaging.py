"""Image-like field types and their file formats.

Four per-pixel field types share one binary raster container:

    LDK1 <tag> <width> <height> <channels>\\n
    <row-major little-endian float32 payload>

with tags IMG (RGB image, 3 channels), DEP (depth, 1), ALB (hue/saturation
albedo, 2), NRM (unit normals, 3).  The header is ASCII, the payload is exactly
width*height*channels little-endian float32 values, rows first.  NaN anywhere
in a payload is a format error.

Masks ride inside the payload: a DEP value of 0 marks an invalid depth pixel
(valid depths are strictly positive), and an NRM all-zero vector marks an
invalid normal (a unit vector cannot be zero).  IMG and ALB fields have no
mask of their own.

RGB images additionally round-trip through 8-bit PNG for interchange with
image viewers; the raster format is the lossless path.

Albedo is parameterized as (hue, saturation) with value pinned at 1, so a
surface can change chroma but not brightness; ``hsv_to_rgb`` converts with
that convention and ``hsv_to_rgb_jacobian`` returns the exact derivative of
the RGB triple with respect to (h, s), which the renderer chains through.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as _PILImage

from .errors import FormatError, ValidationError

_TAGS = {"IMG": 3, "DEP": 1, "ALB": 2, "NRM": 3}


def _as_float_array(data, shape_tail, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2 + len(shape_tail) or arr.shape[2:] != shape_tail:
        raise ValidationError(f"{what} must have shape (h, w{''.join(', %d' % c for c in shape_tail)})")
    return arr


@dataclass(frozen=True)
class Image:
    """RGB image, values in [0, 1], shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.data, (3,), "image")
        if not np.isfinite(arr).all():
            raise ValidationError("image values must be finite")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValidationError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in metres along the unit pixel ray, plus validity.

    Valid pixels hold finite depth > 0; invalid pixels are stored as 0.
    """

    data: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        arr = _as_float_array(self.data, (), "depth")
        mask = self.mask
        if mask is None:
            mask = np.isfinite(arr) & (arr > 0)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != arr.shape:
            raise ValidationError("depth mask shape must match data")
        vals = arr[mask]
        if vals.size and not (np.isfinite(vals).all() and (vals > 0).all()):
            raise ValidationError("valid depth must be finite and > 0")
        arr = np.where(mask, arr, 0.0)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class AlbedoMap:
    """Per-pixel (hue, saturation), value implicitly 1; shape (h, w, 2).

    Hue lives on the unit circle, stored in [0, 1); saturation in [0, 1].
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.data, (2,), "albedo")
        if not np.isfinite(arr).all():
            raise ValidationError("albedo values must be finite")
        h, s = arr[..., 0], arr[..., 1]
        if h.size and (h.min() < 0.0 or h.max() >= 1.0):
            raise ValidationError("hue must lie in [0, 1)")
        if s.size and (s.min() < 0.0 or s.max() > 1.0):
            raise ValidationError("saturation must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass(frozen=True)
class NormalMap:
    """Per-pixel unit normals in the camera frame, plus validity.

    Valid pixels hold unit vectors (tolerance 1e-4, so float32 round trips
    pass); invalid pixels are stored as the zero vector.  Values are kept
    verbatim, never renormalized, so write(read(file)) is bit-identical.
    """

    data: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        arr = _as_float_array(self.data, (3,), "normals")
        if not np.isfinite(arr).all():
            raise ValidationError("normal values must be finite")
        norms = np.linalg.norm(arr, axis=-1)
        mask = self.mask
        if mask is None:
            mask = norms > 0.5
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != arr.shape[:2]:
            raise ValidationError("normal mask shape must match data")
        if mask.any() and np.abs(norms[mask] - 1.0).max() > 1e-4:
            raise ValidationError("valid normals must be unit length")
        arr = np.where(mask[..., None], arr, 0.0)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.data.shape[:2]


_FIELD_TAG = {Image: "IMG", DepthMap: "DEP", AlbedoMap: "ALB", NormalMap: "NRM"}


def hsv_to_rgb(hs: np.ndarray) -> np.ndarray:
    """(..., 2) hue/saturation -> (..., 3) RGB at value 1."""
    hs = np.asarray(hs, dtype=float)
    h, s = hs[..., 0], hs[..., 1]
    hp = h * 6.0
    k = np.floor(hp).astype(int) % 6
    f = hp - np.floor(hp)
    p = 1.0 - s
    q = 1.0 - s * f
    t = 1.0 - s * (1.0 - f)
    one = np.ones_like(s)
    # Sector table: rows k = 0..5, columns R, G, B.
    table = np.stack(
        [
            np.stack([one, t, p], axis=-1),
            np.stack([q, one, p], axis=-1),
            np.stack([p, one, t], axis=-1),
            np.stack([p, q, one], axis=-1),
            np.stack([t, p, one], axis=-1),
            np.stack([one, p, q], axis=-1),
        ],
        axis=0,
    )
    return np.take_along_axis(table, k[None, ..., None], axis=0)[0]


def hsv_to_rgb_jacobian(hs: np.ndarray) -> np.ndarray:
    """Exact d(RGB)/d(h, s) as (..., 3, 2).

    Piecewise smooth; at sector boundaries (h a multiple of 1/6) the
    right-hand derivative is returned.
    """
    hs = np.asarray(hs, dtype=float)
    h, s = hs[..., 0], hs[..., 1]
    hp = h * 6.0
    k = np.floor(hp).astype(int) % 6
    f = hp - np.floor(hp)
    zero = np.zeros_like(s)
    # Derivatives of the sector primitives (1, p, q, t) wrt (h, s).
    d_one = np.stack([zero, zero], axis=-1)
    d_p = np.stack([zero, -np.ones_like(s)], axis=-1)
    d_q = np.stack([-6.0 * s, -f], axis=-1)
    d_t = np.stack([6.0 * s, f - 1.0], axis=-1)
    table = np.stack(
        [
            np.stack([d_one, d_t, d_p], axis=-2),
            np.stack([d_q, d_one, d_p], axis=-2),
            np.stack([d_p, d_one, d_t], axis=-2),
            np.stack([d_p, d_q, d_one], axis=-2),
            np.stack([d_t, d_p, d_one], axis=-2),
            np.stack([d_one, d_p, d_q], axis=-2),
        ],
        axis=0,
    )
    return np.take_along_axis(table, k[None, ..., None, None], axis=0)[0]


def _atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_field(path: str | os.PathLike, fld) -> None:
    """Serialize a field to the LDK1 raster format."""
    tag = _FIELD_TAG.get(type(fld))
    if tag is None:
        raise ValidationError(f"cannot serialize {type(fld).__name__} as a raster")
    arr = fld.data
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    payload = arr.astype("<f4")
    if tag == "ALB":
        # float32 rounding can push a hue just below 1 onto exactly 1; wrap it
        # back so the reader's [0, 1) check holds (same hue either way).
        hue = payload[..., 0]
        hue[hue >= 1.0] = 0.0
    header = f"LDK1 {tag} {w} {h} {c}\n".encode("ascii")
    _atomic_write_bytes(path, header + payload.tobytes())


def read_field(path: str | os.PathLike):
    """Parse an LDK1 raster; returns the matching field type."""
    with open(path, "rb") as fh:
        blob = fh.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise FormatError("missing raster header")
    try:
        header = blob[:newline].decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("raster header is not ASCII") from exc
    parts = header.split(" ")
    if len(parts) != 5 or parts[0] != "LDK1":
        raise FormatError(f"bad raster header {header!r}")
    tag = parts[1]
    if tag not in _TAGS:
        raise FormatError(f"unknown raster tag {tag!r}")
    try:
        w, h, c = (int(p) for p in parts[2:5])
    except ValueError as exc:
        raise FormatError(f"bad raster dimensions in {header!r}") from exc
    if w < 1 or h < 1:
        raise FormatError("raster dimensions must be positive")
    if c != _TAGS[tag]:
        raise FormatError(f"tag {tag} requires {_TAGS[tag]} channels, header says {c}")
    payload = blob[newline + 1 :]
    expected = w * h * c * 4
    if len(payload) != expected:
        raise FormatError(
            f"raster payload is {len(payload)} bytes, expected {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(float)
    if np.isnan(arr).any():
        raise FormatError("raster payload contains NaN")
    try:
        if tag == "IMG":
            return Image(arr)
        if tag == "DEP":
            dep = arr[..., 0]
            if (dep < 0).any() or not np.isfinite(dep).all():
                raise ValidationError("depth must be finite and >= 0")
            return DepthMap(dep, mask=dep > 0)
        if tag == "ALB":
            return AlbedoMap(arr)
        norms = np.linalg.norm(arr, axis=-1)
        return NormalMap(arr, mask=norms > 0.5)
    except ValidationError as exc:
        raise FormatError(f"raster payload invalid: {exc}") from exc


def write_png(path: str | os.PathLike, image: Image) -> None:
    """8-bit RGB PNG for interchange (lossy; the raster format is exact)."""
    arr = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    _PILImage.fromarray(arr, mode="RGB").save(str(path), format="PNG")


def read_png(path: str | os.PathLike) -> Image:
    with _PILImage.open(str(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=float) / 255.0
    return Image(arr)
