"""Per-frame refinement: fit depth and albedo to one observed image.

The fields themselves are the unknowns: one log-depth value and one (hue,
saturation) pair per pixel, driven by the exact gradients from
``losses.total_loss`` under Adam.  Log-depth keeps depth positive and makes
the step size scale-free; hue wraps on the unit circle after every step and
saturation is clipped to [0, 1] (projected update).

Initialization options:

- ``flat``: constant depth everywhere, white albedo.
- ``brightness``: closed-form depth from image brightness, inverting the
  shading model under a fronto-parallel white-albedo assumption with the
  light taken at the camera centre.  Still rough, but starts the solve on
  the right side of the inverse-square ambiguity.
- ``provided``: caller passes both fields.

``refine`` records the loss before every step and once after the last, so the
trace has steps + 1 entries.  Divergence (non-finite loss or parameters)
raises ``OptimizationError`` carrying the last finite state.

``ensemble_refine`` runs K independent solves from deterministically
perturbed initializations (global scale, a low-frequency depth field, and
albedo jitter, all drawn from one seeded generator), the field-optimization
analogue of a deep ensemble; disagreement between members is what the
uncertainty module turns into epistemic variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import DomainError, OptimizationError, ValidationError
from .geometry import normal_fan
from .imaging import AlbedoMap, DepthMap, Image, NormalMap
from .losses import LossConfig, LossReport, total_loss
from .photometry import render_image
from .rig import PhotometricRig, camera_rays

INIT_FLAT = "flat"
INIT_PROVIDED = "provided"
INIT_BRIGHTNESS = "brightness"
_INITS = (INIT_FLAT, INIT_PROVIDED, INIT_BRIGHTNESS)


@dataclass(frozen=True)
class RefineConfig:
    """Optimization settings.

    steps must be >= 1 (a zero-step "solve" would silently return the init).
    The default step size suits from-scratch field solves; warm starts from a
    good depth can run far fewer steps at a smaller rate.
    """

    steps: int = 500
    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init: str = INIT_FLAT
    flat_depth: float = 1.0
    optimize_albedo: bool = True

    def __post_init__(self):
        if int(self.steps) < 1:
            raise DomainError("steps must be >= 1")
        object.__setattr__(self, "steps", int(self.steps))
        if not (self.step_size > 0):
            raise DomainError("step size must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DomainError("betas must lie in [0, 1)")
        if self.init not in _INITS:
            raise DomainError(f"unknown init {self.init!r}")
        if not (self.flat_depth > 0):
            raise DomainError("flat depth must be > 0")


@dataclass(frozen=True)
class RefineResult:
    depth: DepthMap
    albedo: AlbedoMap
    normals: NormalMap
    rendered: Image
    loss_trace: np.ndarray  # (steps + 1,)
    report: LossReport  # final breakdown, no gradients


def brightness_init(rig: PhotometricRig, observed: Image) -> DepthMap:
    """Depth implied by brightness for a fronto-parallel white surface.

    Inverts colour = (sigma0 R(psi) g / d^2) ** (1/gamma) per pixel using the
    max channel, with the light at the camera centre and full foreshortening.
    """
    rays = camera_rays(rig.camera)
    cos_psi = rays @ rig.light.axis
    R = np.exp(-rig.light.mu * (1.0 - cos_psi))
    bright = np.maximum(observed.data.max(axis=-1), 1e-3) ** rig.gamma
    d = np.sqrt(rig.light.sigma0 * R * rig.gain / bright)
    return DepthMap(d)


def _initial_fields(rig, observed, config, init_depth, init_albedo):
    H, W = rig.camera.height, rig.camera.width
    if config.init == INIT_PROVIDED:
        if init_depth is None:
            raise DomainError("init 'provided' requires an initial depth")
        depth = init_depth
    elif config.init == INIT_BRIGHTNESS:
        depth = brightness_init(rig, observed)
    else:
        depth = DepthMap(np.full((H, W), config.flat_depth))
    if init_albedo is None:
        init_albedo = AlbedoMap(np.zeros((H, W, 2)))
    if depth.shape != (H, W) or init_albedo.shape != (H, W):
        raise ValidationError("initial fields must match the camera size")
    return depth, init_albedo


def _canonical_albedo(hs: np.ndarray) -> np.ndarray:
    out = hs.copy()
    out[..., 0] = np.mod(out[..., 0], 1.0)
    # mod can return exactly 1.0 for tiny negative inputs; fold it back.
    out[..., 0][out[..., 0] >= 1.0] = 0.0
    out[..., 1] = np.clip(out[..., 1], 0.0, 1.0)
    return out


def refine(
    rig: PhotometricRig,
    observed: Image,
    config: RefineConfig = RefineConfig(),
    loss_config: LossConfig = LossConfig(),
    init_depth: Optional[DepthMap] = None,
    init_albedo: Optional[AlbedoMap] = None,
) -> RefineResult:
    """Fit depth and albedo to one image; see module docstring."""
    if observed.shape != (rig.camera.height, rig.camera.width):
        raise ValidationError("observed image must match the camera size")
    depth0, albedo0 = _initial_fields(rig, observed, config, init_depth, init_albedo)
    mask = depth0.mask.copy()
    z = np.where(mask, np.log(np.where(mask, depth0.data, 1.0)), 0.0)
    hs = _canonical_albedo(albedo0.data)

    m_z = np.zeros_like(z)
    v_z = np.zeros_like(z)
    m_a = np.zeros_like(hs)
    v_a = np.zeros_like(hs)
    b1, b2, lr, eps = config.beta1, config.beta2, config.step_size, config.eps

    trace = []
    prev = None  # (z, hs, gradless report) of the last finite state

    def state(z_arr, hs_arr, report):
        d = DepthMap(np.exp(z_arr), mask=mask)
        a = AlbedoMap(_canonical_albedo(hs_arr))
        fan = normal_fan(rig.camera, d)
        rendered = render_image(rig, d, a, fan.normal_map)
        return RefineResult(
            depth=d,
            albedo=a,
            normals=fan.normal_map,
            rendered=rendered.image,
            loss_trace=np.array(trace),
            report=report,
        )

    def stepped_depth(z_arr):
        # e^150 keeps every downstream square and cross product finite; a
        # real solve lives within e^+-10, so past this the run has diverged
        if not (np.abs(z_arr[mask]) < 150.0).all():
            raise OptimizationError(
                "depth diverged",
                last_result=None if prev is None else state(*prev),
            )
        return DepthMap(np.exp(z_arr), mask=mask)

    for t in range(1, config.steps + 1):
        depth_t = stepped_depth(z)
        albedo_t = AlbedoMap(hs)
        report = total_loss(rig, observed, depth_t, albedo_t, loss_config, want_grad=True)
        if not np.isfinite(report.total):
            raise OptimizationError(
                "loss diverged",
                last_result=None if prev is None else state(*prev),
            )
        trace.append(report.total)
        prev = (
            z,
            hs,
            LossReport(report.total, report.photometric, report.smoothness, report.specular),
        )
        g_z = report.grad_depth * depth_t.data  # chain through exp
        g_a = report.grad_albedo
        m_z = b1 * m_z + (1 - b1) * g_z
        v_z = b2 * v_z + (1 - b2) * g_z * g_z
        z_new = z - lr * (m_z / (1 - b1**t)) / (np.sqrt(v_z / (1 - b2**t)) + eps)
        if config.optimize_albedo:
            m_a = b1 * m_a + (1 - b1) * g_a
            v_a = b2 * v_a + (1 - b2) * g_a * g_a
            hs_new = hs - lr * (m_a / (1 - b1**t)) / (np.sqrt(v_a / (1 - b2**t)) + eps)
            hs_new = _canonical_albedo(hs_new)
        else:
            hs_new = hs
        if not (np.isfinite(z_new).all() and np.isfinite(hs_new).all()):
            raise OptimizationError("parameters diverged", last_result=state(*prev))
        z, hs = z_new, hs_new

    depth_t = stepped_depth(z)
    albedo_t = AlbedoMap(hs)
    final = total_loss(rig, observed, depth_t, albedo_t, loss_config, want_grad=False)
    trace.append(final.total)
    return state(z, hs, final)


def ensemble_refine(
    rig: PhotometricRig,
    observed: Image,
    members: int,
    seed: int,
    config: RefineConfig = RefineConfig(),
    loss_config: LossConfig = LossConfig(),
    init_depth: Optional[DepthMap] = None,
    init_albedo: Optional[AlbedoMap] = None,
) -> List[RefineResult]:
    """K independent solves from seed-perturbed initializations."""
    if members < 1:
        raise DomainError("ensemble needs at least one member")
    rng = np.random.default_rng(seed)
    depth0, albedo0 = _initial_fields(rig, observed, config, init_depth, init_albedo)
    results = []
    for _ in range(members):
        gscale = np.exp(rng.normal(0.0, 0.15))
        rough = rng.normal(0.0, 1.0, depth0.shape)
        smooth = rough
        for _ in range(3):
            smooth = _blur3(smooth)
        field = np.exp(0.1 * smooth / max(smooth.std(), 1e-9))
        d = np.where(depth0.mask, depth0.data * gscale * field, 0.0)
        hs = albedo0.data.copy()
        hs[..., 0] = np.mod(hs[..., 0] + rng.uniform(0.0, 1.0), 1.0)
        hs[..., 1] = np.clip(hs[..., 1] + rng.uniform(0.0, 0.2), 0.0, 1.0)
        member_cfg = RefineConfig(
            steps=config.steps,
            step_size=config.step_size,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            init=INIT_PROVIDED,
            flat_depth=config.flat_depth,
            optimize_albedo=config.optimize_albedo,
        )
        results.append(
            refine(
                rig,
                observed,
                member_cfg,
                loss_config,
                init_depth=DepthMap(d, mask=depth0.mask),
                init_albedo=AlbedoMap(_canonical_albedo(hs)),
            )
        )
    return results


def _blur3(arr: np.ndarray) -> np.ndarray:
    H, W = arr.shape
    padded = np.pad(arr, 1, mode="edge")
    out = np.zeros_like(arr)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out += padded[dr : dr + H, dc : dc + W]
    return out / 9.0
