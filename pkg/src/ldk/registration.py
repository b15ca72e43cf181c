"""Point-cloud alignment with uncertainty-aware filtering.

``filter_by_uncertainty`` keeps the fraction of points the predictor is most
sure about; feeding only those into ICP is what turns per-pixel uncertainty
into better poses.  ICP here is classic point-to-point: nearest-neighbour
correspondences (KD-tree, optional distance gate), closed-form SVD alignment,
repeat.  Convergence is declared when the pose update moves the matched
points by less than the tolerance on average; the returned pose is the best
(lowest RMS) one seen, which makes the iteration robust to a final oscillating
step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, RegistrationError
from .geometry import PointCloud, PoseSE3


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-10  # metres, mean matched-point displacement
    max_pair_dist: float = np.inf

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise DomainError("max_iterations must be >= 1")
        object.__setattr__(self, "max_iterations", int(self.max_iterations))
        if not (self.convergence_tol >= 0):
            raise DomainError("convergence_tol must be >= 0")
        if not (self.max_pair_dist > 0):
            raise DomainError("max_pair_dist must be > 0")


@dataclass(frozen=True)
class IcpResult:
    pose: PoseSE3  # maps source points onto the target
    iterations: int
    rms: float
    converged: bool


def filter_by_uncertainty(cloud: PointCloud, percentile: float) -> PointCloud:
    """Keep the floor(percentile * n) points with smallest sigma.

    Ties break by original index; the kept points stay in their original
    order.  percentile must leave at least one point.
    """
    if cloud.sigma is None:
        raise DomainError("cloud has no per-point sigma")
    if not (0.0 < percentile <= 1.0):
        raise DomainError("percentile must lie in (0, 1]")
    n = len(cloud)
    k = int(np.floor(percentile * n))
    if k < 1:
        raise DomainError("percentile retains no points")
    order = np.argsort(cloud.sigma, kind="stable")
    keep = np.sort(order[:k])
    return PointCloud(
        cloud.points[keep],
        colors=None if cloud.colors is None else cloud.colors[keep],
        sigma=cloud.sigma[keep],
    )


def _solve_rigid(P: np.ndarray, Q: np.ndarray) -> PoseSE3:
    """Least-squares R, t with R @ P + t ~ Q (Kabsch)."""
    pbar = P.mean(axis=0)
    qbar = Q.mean(axis=0)
    H = (P - pbar).T @ (Q - qbar)
    U, S, Vt = np.linalg.svd(H)
    if S[0] == 0.0 or S[1] <= 1e-9 * S[0]:
        raise RegistrationError("degenerate correspondence covariance")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = qbar - R @ pbar
    return PoseSE3(R, t)


def icp_point_to_point(
    source: PointCloud,
    target: PointCloud,
    config: IcpConfig = IcpConfig(),
    init: PoseSE3 = None,
) -> IcpResult:
    """Align source onto target; see module docstring."""
    if len(source) < 3 or len(target) < 3:
        raise RegistrationError("need at least 3 points in each cloud")
    pose = PoseSE3.identity() if init is None else init
    tree = cKDTree(target.points)
    n_target = len(target)
    best_pose = pose
    best_rms = np.inf
    converged = False
    iterations = 0
    for _ in range(config.max_iterations):
        iterations += 1
        moved = pose.apply(source.points)
        dist, idx = tree.query(moved, distance_upper_bound=config.max_pair_dist)
        matched = idx < n_target
        if int(matched.sum()) < 3:
            raise RegistrationError("fewer than 3 correspondences")
        P = moved[matched]
        Q = target.points[idx[matched]]
        delta = _solve_rigid(P, Q)
        pose = delta.compose(pose)
        moved_new = delta.apply(P)
        rms = float(np.sqrt(np.mean(np.sum((moved_new - Q) ** 2, axis=-1))))
        if rms < best_rms:
            best_rms = rms
            best_pose = pose
        displacement = float(np.mean(np.linalg.norm(moved_new - P, axis=-1)))
        if displacement < config.convergence_tol:
            converged = True
            break
    return IcpResult(pose=best_pose, iterations=iterations, rms=best_rms, converged=converged)


def pose_errors(estimate: PoseSE3, truth: PoseSE3):
    """(rotation error in degrees, translation error in metres)."""
    R_rel = truth.R.T @ estimate.R
    cos_a = (np.trace(R_rel) - 1.0) / 2.0
    rot = float(np.degrees(np.arccos(np.clip(cos_a, -1.0, 1.0))))
    trans = float(np.linalg.norm(estimate.t - truth.t))
    return rot, trans
