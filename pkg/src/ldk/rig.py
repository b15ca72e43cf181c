"""Camera, light, and rig descriptions.

The rig couples an intrinsically calibrated camera with a spotlight that is
rigidly attached to it, both expressed in the camera frame: the camera centre
is the origin, x right, y down, z forward.  The light need not sit exactly at
the origin, but everything downstream assumes it rides with the camera.

Pixel coordinates are continuous, (u, v) = (column, row), with (0, 0) at the
centre of the top-left pixel.  A pixel is in bounds when 0 <= u <= width-1 and
0 <= v <= height-1.

Two camera kinds are supported:

- ``pinhole``: the usual perspective model.
- ``fisheye_equidistant``: the angle off the optical axis is proportional to
  the radial pixel distance (theta = r / f).  Construction rejects intrinsics
  whose in-bounds pixels would reach theta >= pi/2, so every in-bounds ray has
  positive z for both kinds.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, ProjectionError, ValidationError

PINHOLE = "pinhole"
FISHEYE_EQUIDISTANT = "fisheye_equidistant"
_CAMERA_KINDS = (PINHOLE, FISHEYE_EQUIDISTANT)


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics for a single camera.

    kind: one of ``pinhole`` / ``fisheye_equidistant``.
    width, height: image size in pixels, both >= 1.
    fx, fy: focal lengths in pixels, both > 0.
    cx, cy: principal point in pixels.
    """

    kind: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.kind not in _CAMERA_KINDS:
            raise ValidationError(f"unknown camera kind {self.kind!r}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValidationError("image size must be at least 1x1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.kind == FISHEYE_EQUIDISTANT:
            # Corner pixels see the largest angle; require theta < pi/2 there
            # so in-bounds rays always point forward.
            us = np.array([0.0, self.width - 1.0, 0.0, self.width - 1.0])
            vs = np.array([0.0, 0.0, self.height - 1.0, self.height - 1.0])
            r = np.hypot((us - self.cx) / self.fx, (vs - self.cy) / self.fy)
            if float(r.max()) >= np.pi / 2:
                raise ValidationError(
                    "fisheye intrinsics reach theta >= pi/2 inside the image"
                )


@dataclass(frozen=True)
class LightModel:
    """Spotlight with inverse-square falloff and angular decay.

    position: light centre, camera frame, metres.
    axis: unit emission axis.
    mu: angular decay rate, >= 0 (0 is an isotropic point light).
    sigma0: radiant intensity along the axis, > 0.
    """

    position: np.ndarray
    axis: np.ndarray
    mu: float
    sigma0: float

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        norm = float(np.linalg.norm(axis))
        if not np.isfinite(norm) or norm == 0.0:
            raise ValidationError("light axis must be a nonzero vector")
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError("light axis must be unit length")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "axis", axis / norm)
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma0", float(self.sigma0))
        if not (self.mu >= 0.0):
            raise ValidationError("mu must be >= 0")
        if not (self.sigma0 > 0.0):
            raise ValidationError("sigma0 must be > 0")


@dataclass(frozen=True)
class PhotometricRig:
    """Camera + co-moving light + radiometric response.

    gain: sensor gain g > 0.
    gamma: display gamma >= 1; rendered colours are linear ** (1/gamma).
    """

    camera: CameraModel
    light: LightModel
    gain: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "gain", float(self.gain))
        object.__setattr__(self, "gamma", float(self.gamma))
        if not (self.gain > 0.0):
            raise ValidationError("gain must be > 0")
        if not (self.gamma >= 1.0):
            raise ValidationError("gamma must be >= 1")


def default_light() -> LightModel:
    """Light co-located with the camera centre, shining down +z."""
    return LightModel(
        position=np.zeros(3), axis=np.array([0.0, 0.0, 1.0]), mu=0.0, sigma0=1.0
    )


def _check_in_bounds(camera: CameraModel, pixels: np.ndarray) -> None:
    u = pixels[..., 0]
    v = pixels[..., 1]
    bad = (u < 0) | (u > camera.width - 1) | (v < 0) | (v > camera.height - 1)
    if bad.any():
        raise DomainError("pixel outside image bounds")


def back_project(camera: CameraModel, pixels: np.ndarray) -> np.ndarray:
    """Unit rays through the given pixels.

    pixels: (..., 2) continuous (u, v); must be in bounds.
    Returns (..., 3) unit vectors, z > 0 for every in-bounds pixel.
    """
    pixels = np.asarray(pixels, dtype=float)
    if pixels.shape[-1] != 2:
        raise DomainError("pixels must have shape (..., 2)")
    _check_in_bounds(camera, pixels)
    xn = (pixels[..., 0] - camera.cx) / camera.fx
    yn = (pixels[..., 1] - camera.cy) / camera.fy
    if camera.kind == PINHOLE:
        d = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)
    # Equidistant: theta equals the normalized radius; sin(theta)/r is smooth
    # through r = 0 so the principal ray comes out exactly (0, 0, 1).
    r = np.hypot(xn, yn)
    theta = r
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(r > 0, np.sin(theta) / np.where(r > 0, r, 1.0), 1.0)
    return np.stack([xn * scale, yn * scale, np.cos(theta)], axis=-1)


def project(camera: CameraModel, points: np.ndarray) -> np.ndarray:
    """Pixel coordinates of camera-frame points.

    points: (..., 3) with z > 0 (forward hemisphere); raises ProjectionError
    otherwise.  Results may fall outside the image; callers mask.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[-1] != 3:
        raise DomainError("points must have shape (..., 3)")
    z = points[..., 2]
    if not (z > 0).all():
        raise ProjectionError("point behind camera")
    if camera.kind == PINHOLE:
        u = camera.fx * points[..., 0] / z + camera.cx
        v = camera.fy * points[..., 1] / z + camera.cy
        return np.stack([u, v], axis=-1)
    rxy = np.hypot(points[..., 0], points[..., 1])
    theta = np.arctan2(rxy, z)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rxy > 0, theta / np.where(rxy > 0, rxy, 1.0), 0.0)
    u = camera.fx * points[..., 0] * scale + camera.cx
    v = camera.fy * points[..., 1] * scale + camera.cy
    return np.stack([u, v], axis=-1)


def camera_rays(camera: CameraModel) -> np.ndarray:
    """(height, width, 3) unit rays for the full pixel grid."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    pixels = np.stack([u, v], axis=-1).astype(float)
    return back_project(camera, pixels)


def radial_falloff(mu: float, psi: np.ndarray) -> np.ndarray:
    """Angular decay R(psi) = exp(-mu * (1 - cos psi)); R(0) = 1."""
    if not (float(mu) >= 0.0):
        raise DomainError("mu must be >= 0")
    return np.exp(-float(mu) * (1.0 - np.cos(np.asarray(psi, dtype=float))))


def irradiance_at(light: LightModel, x: np.ndarray) -> np.ndarray:
    """Irradiance scale sigma0 * R(psi) / dist^2 at points x (..., 3).

    psi is the angle between the light axis and the direction light -> x.
    x must not coincide with the light position.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise DomainError("x must have shape (..., 3)")
    v = x - light.position
    d2 = np.sum(v * v, axis=-1)
    if not (d2 > 0).all():
        raise DomainError("irradiance undefined at the light position")
    cos_psi = (v @ light.axis) / np.sqrt(d2)
    spread = np.exp(-light.mu * (1.0 - cos_psi))
    return light.sigma0 * spread / d2


def rig_to_dict(rig: PhotometricRig) -> dict:
    return {
        "camera": {
            "kind": rig.camera.kind,
            "width": rig.camera.width,
            "height": rig.camera.height,
            "fx": rig.camera.fx,
            "fy": rig.camera.fy,
            "cx": rig.camera.cx,
            "cy": rig.camera.cy,
        },
        "light": {
            "position": [float(c) for c in rig.light.position],
            "axis": [float(c) for c in rig.light.axis],
            "mu": rig.light.mu,
            "sigma0": rig.light.sigma0,
        },
        "gain": rig.gain,
        "gamma": rig.gamma,
    }


def rig_from_dict(data: dict) -> PhotometricRig:
    try:
        cam = data["camera"]
        light = data["light"]
        camera = CameraModel(
            kind=cam["kind"],
            width=cam["width"],
            height=cam["height"],
            fx=cam["fx"],
            fy=cam["fy"],
            cx=cam["cx"],
            cy=cam["cy"],
        )
        light_model = LightModel(
            position=light["position"],
            axis=light["axis"],
            mu=light["mu"],
            sigma0=light["sigma0"],
        )
        return PhotometricRig(
            camera=camera,
            light=light_model,
            gain=data.get("gain", 1.0),
            gamma=data.get("gamma", 1.0),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed rig description: {exc}") from exc


def write_rig(path: str | os.PathLike, rig: PhotometricRig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rig_to_dict(rig), fh, indent=2)
        fh.write("\n")


def read_rig(path: str | os.PathLike) -> PhotometricRig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"rig file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise FormatError("rig file must contain a JSON object")
    return rig_from_dict(data)
