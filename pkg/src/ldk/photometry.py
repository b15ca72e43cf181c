"""Forward rendering of depth + albedo under the rig's own light.

Per pixel with unit ray r, depth d, unit normal n, albedo (h, s), light at
position x_l with axis a, decay mu and intensity sigma0, gain g, gamma gam:

    x = d r                      surface point
    v = x - x_l,  D = |v|        light-to-surface offset
    A = sigma0 exp(-mu (1 - (a.v)/D)) / D^2     irradiance scale
    l = -v / D                   surface-to-light direction
    c = max(l . n, 0)            Lambertian foreshortening
    I_k = (A c g rho_k)^(1/gam)  pre-clamp colour, rho = hsv_to_rgb(h, s)

The stored image clamps I to [0, 1]; the pre-clamp values and all derivatives
are kept alongside because losses operate on the unclamped quantity.

Derivatives are the exact analytic partials of the expression above.  The
depth partial holds the normal fixed (the fan's own depth dependence is
chained at the loss level through ``NormalFan.vjp``); the normal partial is
exposed for that chain.  Wherever the foreshortening clamp or a zero linear
value makes the true one-sided derivative vanish or blow up, zero is
returned, matching the subgradient convention the optimizer expects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ValidationError
from .imaging import AlbedoMap, DepthMap, Image, NormalMap, hsv_to_rgb, hsv_to_rgb_jacobian
from .rig import PhotometricRig, back_project, camera_rays


@dataclass(frozen=True)
class RenderedPixel:
    """Single-pixel render: clamped colour plus exact partials."""

    color: np.ndarray  # (3,) in [0, 1]
    pre_clamp: np.ndarray  # (3,) unclamped
    dI_ddepth: np.ndarray  # (3,)
    dI_dalbedo: np.ndarray  # (3, 2) wrt (h, s)
    dI_dnormal: np.ndarray  # (3, 3) per-channel partial wrt the normal


@dataclass(frozen=True)
class RenderedImage:
    """Full-frame render with the same partials, arrays over (H, W)."""

    image: Image  # clamped, zeros at invalid pixels
    pre_clamp: np.ndarray  # (H, W, 3)
    dI_ddepth: np.ndarray  # (H, W, 3)
    dI_dalbedo: np.ndarray  # (H, W, 3, 2)
    dI_dnormal: np.ndarray  # (H, W, 3, 3)
    valid: np.ndarray  # (H, W) bool


def _render_core(rig: PhotometricRig, rays, depth, hs, normals, valid):
    """Vectorized render over leading dims; all inputs already validated."""
    light = rig.light
    g = rig.gain
    gam = rig.gamma
    d = np.where(valid, depth, 1.0)
    v = rays * d[..., None] - light.position
    D2 = np.sum(v * v, axis=-1)
    bad = ~(D2 > 0)
    if (bad & valid).any():
        raise DomainError("surface point coincides with the light")
    D2 = np.where(bad, 1.0, D2)
    D = np.sqrt(D2)
    a_dot_v = v @ light.axis
    cos_psi = a_dot_v / D
    R = np.exp(-light.mu * (1.0 - cos_psi))
    A = light.sigma0 * R / D2
    l = -v / D[..., None]
    c_raw = np.sum(l * normals, axis=-1)
    lit = c_raw > 0
    c = np.where(lit, c_raw, 0.0)
    rho = hsv_to_rgb(hs)
    B = A * c * g
    L = B[..., None] * rho
    pre = np.power(L, 1.0 / gam)

    # dI/dL with the zero-at-zero convention; exact 1 everywhere for gam = 1.
    if gam == 1.0:
        dIdL = np.ones_like(L)
    else:
        with np.errstate(divide="ignore"):
            dIdL = np.where(L > 0, (1.0 / gam) * np.power(np.where(L > 0, L, 1.0), 1.0 / gam - 1.0), 0.0)

    v_dot_r = np.sum(v * rays, axis=-1)
    a_dot_r = rays @ light.axis
    dcospsi_dd = a_dot_r / D - a_dot_v * v_dot_r / (D2 * D)
    dA_dd = A * (light.mu * dcospsi_dd - 2.0 * v_dot_r / D2)
    n_dot_r = np.sum(normals * rays, axis=-1)
    dc_dd = np.where(lit, -n_dot_r / D - c_raw * v_dot_r / D2, 0.0)
    dB_dd = (dA_dd * c + A * dc_dd) * g
    dI_dd = dIdL * rho * dB_dd[..., None]

    drho = hsv_to_rgb_jacobian(hs)  # (..., 3, 2)
    dI_dalb = dIdL[..., None] * B[..., None, None] * drho

    # dc/dn = l where lit; per channel k: dI_k/dn = dIdL_k rho_k A g l.
    coef = dIdL * rho * (A * g)[..., None]
    coef = np.where(lit[..., None], coef, 0.0)
    dI_dn = coef[..., None] * l[..., None, :]

    vmask = valid[..., None]
    pre = np.where(vmask, pre, 0.0)
    dI_dd = np.where(vmask, dI_dd, 0.0)
    dI_dalb = np.where(vmask[..., None], dI_dalb, 0.0)
    dI_dn = np.where(vmask[..., None], dI_dn, 0.0)
    color = np.clip(pre, 0.0, 1.0)
    return color, pre, dI_dd, dI_dalb, dI_dn


def render_pixel(
    rig: PhotometricRig,
    pixel: np.ndarray,
    depth: float,
    albedo_hs: np.ndarray,
    normal: np.ndarray,
) -> RenderedPixel:
    """Render one pixel.  depth > 0, normal unit, pixel in bounds."""
    depth = float(depth)
    if not (depth > 0 and np.isfinite(depth)):
        raise DomainError("depth must be finite and > 0")
    normal = np.asarray(normal, dtype=float).reshape(3)
    if abs(np.linalg.norm(normal) - 1.0) > 1e-6:
        raise DomainError("normal must be unit length")
    hs = np.asarray(albedo_hs, dtype=float).reshape(2)
    ray = back_project(rig.camera, np.asarray(pixel, dtype=float).reshape(2))
    color, pre, dI_dd, dI_dalb, dI_dn = _render_core(
        rig, ray, np.float64(depth), hs, normal, np.True_
    )
    return RenderedPixel(
        color=color,
        pre_clamp=pre,
        dI_ddepth=dI_dd,
        dI_dalbedo=dI_dalb,
        dI_dnormal=dI_dn,
    )


def render_image(
    rig: PhotometricRig,
    depth: DepthMap,
    albedo: AlbedoMap,
    normals: NormalMap,
) -> RenderedImage:
    """Render the full frame; valid where both depth and normal are valid."""
    H, W = rig.camera.height, rig.camera.width
    if depth.shape != (H, W) or albedo.shape != (H, W) or normals.shape != (H, W):
        raise ValidationError("field shapes must match the rig camera")
    rays = camera_rays(rig.camera)
    valid = depth.mask & normals.mask
    color, pre, dI_dd, dI_dalb, dI_dn = _render_core(
        rig, rays, depth.data, albedo.data, normals.data, valid
    )
    return RenderedImage(
        image=Image(color),
        pre_clamp=pre,
        dI_ddepth=dI_dd,
        dI_dalbedo=dI_dalb,
        dI_dnormal=dI_dn,
        valid=valid,
    )
