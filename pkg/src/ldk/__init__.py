"""ldk: depth, albedo, and uncertainty from illumination decline.

A camera with a co-located light sees nearby surfaces bright and far ones
dark; this package turns that cue into metric depth.  It provides the
differentiable forward shading model, per-frame field refinement, a ray-cast
simulator for ground truth, ensemble uncertainty with calibration and
sparsification measures, evaluation metrics, and uncertainty-filtered ICP,
plus the ``ldk`` command-line tool on top.
"""

from .errors import (
    DomainError,
    FormatError,
    LdkError,
    NumericalError,
    OptimizationError,
    ProjectionError,
    RegistrationError,
    UsageError,
    ValidationError,
)
from .geometry import (
    NormalFan,
    PointCloud,
    PoseSE3,
    backproject_cloud,
    normal_fan,
    normals_from_depth,
    read_ply,
    rotation_matrix,
    warp_grid,
    write_ply,
)
from .imaging import (
    AlbedoMap,
    DepthMap,
    Image,
    NormalMap,
    hsv_to_rgb,
    hsv_to_rgb_jacobian,
    read_field,
    read_png,
    write_field,
    write_png,
)
from .losses import (
    LossConfig,
    LossReport,
    laplace_nll,
    multiview_residual,
    photometric_loss,
    smoothness_loss,
    specular_loss,
    specular_mask,
    ssim,
    total_loss,
    uncertain_teacher_nll,
)
from .metrics import (
    DepthMetrics,
    depth_metrics,
    median_scale,
    metrics_to_dict,
    normal_mae,
    write_metrics_csv,
    write_metrics_json,
)
from .optimizer import (
    RefineConfig,
    RefineResult,
    brightness_init,
    ensemble_refine,
    refine,
)
from .photometry import RenderedImage, RenderedPixel, render_image, render_pixel
from .registration import (
    IcpConfig,
    IcpResult,
    filter_by_uncertainty,
    icp_point_to_point,
    pose_errors,
)
from .rig import (
    CameraModel,
    LightModel,
    PhotometricRig,
    back_project,
    camera_rays,
    default_light,
    irradiance_at,
    project,
    radial_falloff,
    read_rig,
    rig_from_dict,
    rig_to_dict,
    write_rig,
)
from .simulator import (
    Bvh,
    SceneFrame,
    TriangleMesh,
    make_sphere_mesh,
    make_tube_scene,
    raycast_brute,
    raycast_bvh,
    raycast_frame,
    read_obj,
    write_obj,
)
from .uncertainty import (
    CalibrationCurve,
    EnsembleOutputs,
    PredictiveDepth,
    SparsificationCurve,
    auce,
    ause,
    fuse_ensemble,
    outputs_from_refine,
    write_calibration_csv,
    write_sparsification_csv,
)

__version__ = "0.1.0"
