"""Losses over rendered and observed images, with exact gradients.

The training objective is

    total = photometric + lambda_smooth * smoothness + lambda_spec * specular

where, per frame:

- photometric: mean over valid non-specular pixels of the 3-channel squared
  difference between the observed image and the *pre-clamp* rendered colour.
- smoothness: edge-aware total variation of depth; each forward difference is
  damped by exp(-|image gradient|), image gradients averaged over channels.
  The x and y terms are each normalized by their own count of valid pixel
  pairs, so a depth ramp of slope c under a flat image costs exactly c.
- specular: at masked (saturated) pixels the mirror direction s of the
  light direction l about the normal should point back along the viewing
  ray, i.e. s . (-r) = 1; the loss is the mean squared shortfall over valid
  pixels, so its weight scales with the specular area fraction and an empty
  mask costs exactly 0.

``total_loss`` also returns exact gradients with respect to every depth and
albedo entry.  Depth gradients include the chain through the normal fan
(each normal depends on seven depths), the Lambertian term, and the
light-direction geometry; they are verified against central finite
differences in the test suite.

The module also hosts the per-pixel likelihoods used for supervised and
teacher-distilled training (Laplace negative log-likelihoods), a small 3x3
SSIM, and the multi-view photometric residual used for cross-view checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, ValidationError
from .geometry import NormalFan, PoseSE3, normal_fan, warp_grid
from .imaging import AlbedoMap, DepthMap, Image
from .photometry import RenderedImage, render_image
from .rig import PhotometricRig, camera_rays


@dataclass(frozen=True)
class LossConfig:
    """Weights and the specular cut; defaults are the validated operating point."""

    lambda_smooth: float = 0.1
    lambda_specular: float = 1.0
    specular_threshold: float = 0.98

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.lambda_specular < 0:
            raise DomainError("loss weights must be >= 0")
        if not (0.0 < self.specular_threshold <= 1.0):
            raise DomainError("specular threshold must lie in (0, 1]")


@dataclass(frozen=True)
class LossReport:
    """Loss values plus gradients wrt the depth and albedo fields."""

    total: float
    photometric: float
    smoothness: float
    specular: float
    grad_depth: Optional[np.ndarray] = None  # (H, W)
    grad_albedo: Optional[np.ndarray] = None  # (H, W, 2)


def specular_mask(observed: Image, threshold: float = 0.98) -> np.ndarray:
    """True where the observed max channel exceeds the threshold."""
    if not (0.0 < threshold <= 1.0):
        raise DomainError("specular threshold must lie in (0, 1]")
    return observed.data.max(axis=-1) > threshold


def photometric_loss(
    observed: Image, rendered: RenderedImage, mask_specular: np.ndarray
) -> float:
    """Mean squared RGB error over valid, non-specular pixels."""
    value, _ = _photometric(observed, rendered, mask_specular, want_grad=False)
    return value


def _photometric(observed, rendered, mask_specular, want_grad):
    if observed.shape != rendered.valid.shape:
        raise ValidationError("observed and rendered sizes differ")
    use = rendered.valid & ~np.asarray(mask_specular, dtype=bool)
    n = int(use.sum())
    if n == 0:
        return 0.0, (None if not want_grad else np.zeros(observed.data.shape))
    diff = np.where(use[..., None], rendered.pre_clamp - observed.data, 0.0)
    value = float(np.sum(diff * diff) / n)
    if not want_grad:
        return value, None
    return value, 2.0 * diff / n  # d value / d pre_clamp


def smoothness_loss(depth: DepthMap, observed: Image) -> float:
    """Edge-aware depth total variation (see module docstring)."""
    value, _ = _smoothness(depth, observed, want_grad=False)
    return value


def _image_weights(observed: Image):
    img = observed.data
    wx = np.exp(-np.mean(np.abs(img[:, 1:] - img[:, :-1]), axis=-1))
    wy = np.exp(-np.mean(np.abs(img[1:, :] - img[:-1, :]), axis=-1))
    return wx, wy


def _smoothness(depth: DepthMap, observed: Image, want_grad: bool):
    if depth.shape != observed.shape:
        raise ValidationError("depth and image sizes differ")
    d, m = depth.data, depth.mask
    wx, wy = _image_weights(observed)
    px = m[:, 1:] & m[:, :-1]
    py = m[1:, :] & m[:-1, :]
    dx = np.where(px, d[:, 1:] - d[:, :-1], 0.0)
    dy = np.where(py, d[1:, :] - d[:-1, :], 0.0)
    nx = int(px.sum())
    ny = int(py.sum())
    vx = float(np.sum(np.abs(dx) * wx) / nx) if nx else 0.0
    vy = float(np.sum(np.abs(dy) * wy) / ny) if ny else 0.0
    value = vx + vy
    if not want_grad:
        return value, None
    grad = np.zeros_like(d)
    if nx:
        gx = np.sign(dx) * wx / nx
        grad[:, 1:] += gx
        grad[:, :-1] -= gx
    if ny:
        gy = np.sign(dy) * wy / ny
        grad[1:, :] += gy
        grad[:-1, :] -= gy
    return value, grad


def specular_loss(
    rig: PhotometricRig,
    depth: DepthMap,
    normals,
    mask_specular: np.ndarray,
) -> float:
    """Mean squared mirror-alignment shortfall at masked pixels."""
    fan_or_map = normals
    data = fan_or_map.data if hasattr(fan_or_map, "data") else fan_or_map.normal_map.data
    nmask = fan_or_map.mask if hasattr(fan_or_map, "mask") else fan_or_map.normal_map.mask
    value, _, _ = _specular(rig, depth, data, nmask, mask_specular, want_grad=False)
    return value


def _specular(rig, depth, normals_data, normals_mask, mask_specular, want_grad):
    H, W = depth.shape
    rays = camera_rays(rig.camera)
    valid = depth.mask & normals_mask
    use = valid & np.asarray(mask_specular, dtype=bool)
    n_valid = int(valid.sum())
    zero_g = (np.zeros((H, W)), np.zeros((H, W, 3))) if want_grad else (None, None)
    if n_valid == 0 or not use.any():
        return 0.0, *zero_g
    d = np.where(valid, depth.data, 1.0)
    v = rays * d[..., None] - rig.light.position
    D = np.linalg.norm(v, axis=-1)
    if not (D[use] > 0).all():
        raise DomainError("surface point coincides with the light")
    Ds = np.where(D > 0, D, 1.0)
    l = -v / Ds[..., None]
    n = normals_data
    n_dot_l = np.sum(n * l, axis=-1)
    n_dot_r = np.sum(n * rays, axis=-1)
    l_dot_r = np.sum(l * rays, axis=-1)
    # s = l - 2 n (n.l);  e = s.(-r) - 1 = -(l.r) + 2 (n.l)(n.r) - 1
    e = np.where(use, -l_dot_r + 2.0 * n_dot_l * n_dot_r - 1.0, 0.0)
    value = float(np.sum(e * e) / n_valid)
    if not want_grad:
        return value, None, None
    w = 2.0 * e / n_valid
    # de/dl = -r + 2 n (n.r);  de/dn = 2 ((n.l) r + (n.r) l)
    de_dl = -rays + 2.0 * n * n_dot_r[..., None]
    de_dn = 2.0 * (n_dot_l[..., None] * rays + n_dot_r[..., None] * l)
    v_dot_r = np.sum(v * rays, axis=-1)
    dl_dd = -rays / Ds[..., None] + v * (v_dot_r / Ds**3)[..., None]
    g_depth = w * np.sum(de_dl * dl_dd, axis=-1)
    g_normals = w[..., None] * de_dn
    return value, g_depth, g_normals


def total_loss(
    rig: PhotometricRig,
    observed: Image,
    depth: DepthMap,
    albedo: AlbedoMap,
    config: LossConfig = LossConfig(),
    want_grad: bool = True,
) -> LossReport:
    """Full objective with exact gradients wrt depth and albedo.

    Normals are derived from the depth inside the call; depth gradients chain
    through the fan, the shading, and the mirror geometry.
    """
    fan = normal_fan(rig.camera, depth)
    rendered = render_image(rig, depth, albedo, fan.normal_map)
    spec = specular_mask(observed, config.specular_threshold)
    p_val, p_gpre = _photometric(observed, rendered, spec, want_grad)
    s_val, s_gdepth = _smoothness(depth, observed, want_grad)
    sp_val, sp_gdepth, sp_gnorm = _specular(
        rig, depth, fan.normal_map.data, fan.normal_map.mask, spec, want_grad
    )
    total = p_val + config.lambda_smooth * s_val + config.lambda_specular * sp_val
    if not want_grad:
        return LossReport(total, p_val, s_val, sp_val)
    # Photometric pulls on depth directly, on albedo, and on the normals.
    g_depth = np.sum(p_gpre * rendered.dI_ddepth, axis=-1)
    g_albedo = np.einsum("hwc,hwcj->hwj", p_gpre, rendered.dI_dalbedo)
    g_normals = np.einsum("hwc,hwcj->hwj", p_gpre, rendered.dI_dnormal)
    g_depth += config.lambda_smooth * s_gdepth
    g_depth += config.lambda_specular * sp_gdepth
    g_normals += config.lambda_specular * sp_gnorm
    g_depth += fan.vjp(g_normals)
    return LossReport(total, p_val, s_val, sp_val, g_depth, g_albedo)


def laplace_nll(pred: DepthMap, sigma: np.ndarray, gt: DepthMap) -> float:
    """Mean Laplace negative log-likelihood |d - dhat| / sigma + log sigma.

    Taken over pixels valid in both maps; sigma must be positive there.
    """
    if pred.shape != gt.shape:
        raise ValidationError("depth sizes differ")
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != pred.shape:
        raise ValidationError("sigma shape must match depth")
    use = pred.mask & gt.mask
    if not use.any():
        return 0.0
    s = sigma[use]
    if not ((s > 0) & np.isfinite(s)).all():
        raise DomainError("sigma must be finite and > 0 at valid pixels")
    r = np.abs(pred.data[use] - gt.data[use])
    return float(np.mean(r / s + np.log(s)))


def uncertain_teacher_nll(
    student: DepthMap,
    student_sigma: np.ndarray,
    teacher: DepthMap,
    teacher_sigma: np.ndarray,
) -> float:
    """Distillation likelihood with the teacher's own noise folded in.

    sigma_m^2 = sigma_teacher^2 + sigma_student^2; the loss is the mean of
    |d_T - d| / sigma_m + log sigma_m over jointly valid pixels, so a student
    cannot be penalized for disagreeing where the teacher itself is unsure.
    """
    if student.shape != teacher.shape:
        raise ValidationError("depth sizes differ")
    ss = np.asarray(student_sigma, dtype=float)
    ts = np.asarray(teacher_sigma, dtype=float)
    if ss.shape != student.shape or ts.shape != student.shape:
        raise ValidationError("sigma shapes must match depth")
    use = student.mask & teacher.mask
    if not use.any():
        return 0.0
    sm2 = ss[use] ** 2 + ts[use] ** 2
    if not ((sm2 > 0) & np.isfinite(sm2)).all():
        raise DomainError("combined sigma must be finite and > 0")
    sm = np.sqrt(sm2)
    r = np.abs(teacher.data[use] - student.data[use])
    return float(np.mean(r / sm + np.log(sm)))


def _box3_mean(arr: np.ndarray) -> np.ndarray:
    """3x3 box mean with edge windows normalized by their in-bounds count."""
    H, W = arr.shape[:2]
    padded = np.zeros((H + 2, W + 2) + arr.shape[2:])
    padded[1:-1, 1:-1] = arr
    ones = np.zeros((H + 2, W + 2))
    ones[1:-1, 1:-1] = 1.0
    total = np.zeros_like(arr, dtype=float)
    count = np.zeros((H, W))
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            total += padded[1 + dr : H + 1 + dr, 1 + dc : W + 1 + dc]
            count += ones[1 + dr : H + 1 + dr, 1 + dc : W + 1 + dc]
    if arr.ndim == 3:
        count = count[..., None]
    return total / count


def ssim(a: Image, b: Image) -> np.ndarray:
    """Per-pixel SSIM over a 3x3 window, averaged over channels.

    Standard stabilizers C1 = 0.01^2, C2 = 0.03^2 on a unit dynamic range.
    """
    if a.shape != b.shape:
        raise ValidationError("image sizes differ")
    C1, C2 = 0.01**2, 0.03**2
    x, y = a.data, b.data
    mx = _box3_mean(x)
    my = _box3_mean(y)
    vx = _box3_mean(x * x) - mx * mx
    vy = _box3_mean(y * y) - my * my
    cxy = _box3_mean(x * y) - mx * my
    num = (2 * mx * my + C1) * (2 * cxy + C2)
    den = (mx * mx + my * my + C1) * (vx + vy + C2)
    return np.mean(num / den, axis=-1)


def bilinear_sample(img: np.ndarray, coords: np.ndarray):
    """Sample (H, W, C) at continuous (u, v); returns (values, in_bounds)."""
    H, W = img.shape[:2]
    u = coords[..., 0]
    v = coords[..., 1]
    inb = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(u, 0, W - 1)
    vc = np.clip(v, 0, H - 1)
    u0 = np.clip(np.floor(uc).astype(int), 0, W - 2) if W > 1 else np.zeros_like(uc, int)
    v0 = np.clip(np.floor(vc).astype(int), 0, H - 2) if H > 1 else np.zeros_like(vc, int)
    fu = (uc - u0)[..., None]
    fv = (vc - v0)[..., None]
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    val = (
        img[v0, u0] * (1 - fu) * (1 - fv)
        + img[v0, u1] * fu * (1 - fv)
        + img[v1, u0] * (1 - fu) * fv
        + img[v1, u1] * fu * fv
    )
    return val, inb


def multiview_residual(
    camera,
    target: Image,
    target_depth: DepthMap,
    sources: Sequence[Tuple[Image, PoseSE3]],
    alpha: float = 0.85,
) -> Tuple[np.ndarray, np.ndarray]:
    """Minimum cross-view photometric residual per target pixel.

    Each source pose maps target-camera points into that source's camera
    frame.  The residual blends mean absolute colour difference with a 3x3
    SSIM term: (1 - alpha) * L1 + (alpha / 2) * (1 - SSIM).  The returned
    mask is False where no source sees the pixel (warp out of view or behind
    the source camera) or the depth is invalid; SSIM windows bordering such
    pixels use target values as neutral filler.
    """
    if not (0.0 <= alpha <= 1.0):
        raise DomainError("alpha must lie in [0, 1]")
    if not sources:
        raise DomainError("at least one source view is required")
    H, W = target.shape
    best = np.full((H, W), np.inf)
    seen = np.zeros((H, W), dtype=bool)
    for src_img, pose in sources:
        if src_img.shape != (H, W):
            raise ValidationError("source image size differs from target")
        coords, ok = warp_grid(camera, target_depth, pose)
        sampled, inb = bilinear_sample(src_img.data, coords)
        ok = ok & inb
        warped = np.where(ok[..., None], sampled, target.data)
        l1 = np.mean(np.abs(target.data - warped), axis=-1)
        sim = ssim(target, Image(np.clip(warped, 0.0, 1.0)))
        res = (1.0 - alpha) * l1 + (alpha / 2.0) * (1.0 - sim)
        res = np.where(ok, res, np.inf)
        best = np.minimum(best, res)
        seen |= ok
    best = np.where(seen, best, 0.0)
    return best, seen
