"""Geometry: rigid poses, point clouds, depth-derived normals, warps.

Normals come from a fixed six-neighbour triangle fan around each pixel.  With
neighbours in the cyclic order N, NE, E, S, SW, W, the six triangles (centre +
consecutive neighbour pair) each contribute their cross product, whose length
is twice the triangle area, so summing cross products *is* the area-weighted
average up to normalization.  The sign is flipped per pixel so normals face
the camera (n . ray < 0).  Border pixels and pixels with any invalid
neighbour get no normal.

The fan keeps enough state to run a hand-written backward pass
(``NormalFan.vjp``): every normal depends on seven depths (its own and six
neighbours), and losses further down chain through that dependency.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, FormatError, ValidationError
from .imaging import DepthMap, NormalMap
from .rig import CameraModel, camera_rays, project


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform x -> R @ x + t.  R must be a proper rotation."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.isfinite(R).all() or not np.isfinite(t).all():
            raise ValidationError("pose entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValidationError("R is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValidationError("R must have determinant +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other: (self.compose(other))(x) == self(other(x))."""
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=float).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0:
        raise DomainError("rotation axis must be nonzero")
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class PointCloud:
    """n points with optional RGB colours in [0, 1] and per-point sigma >= 0."""

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValidationError("cloud points must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=float).reshape(-1, 3)
            if col.shape[0] != pts.shape[0]:
                raise ValidationError("colors must match point count")
            if col.size and (col.min() < 0 or col.max() > 1):
                raise ValidationError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", col)
        if self.sigma is not None:
            sig = np.asarray(self.sigma, dtype=float).reshape(-1)
            if sig.shape[0] != pts.shape[0]:
                raise ValidationError("sigma must match point count")
            if sig.size and (not np.isfinite(sig).all() or sig.min() < 0):
                raise ValidationError("sigma must be finite and >= 0")
            object.__setattr__(self, "sigma", sig)

    def __len__(self):
        return self.points.shape[0]


# Neighbour offsets as (drow, dcol), cyclic: N, NE, E, S, SW, W.
_FAN_OFFSETS = [(-1, 0), (-1, 1), (0, 1), (1, 0), (1, -1), (0, -1)]


class NormalFan:
    """Fan normals plus the state needed for their depth derivative."""

    def __init__(self, rays: np.ndarray, depth: np.ndarray, mask: np.ndarray):
        H, W = depth.shape
        self.shape = (H, W)
        self.rays = rays
        points = rays * depth[..., None]
        normals = np.zeros((H, W, 3))
        valid = np.zeros((H, W), dtype=bool)
        if H >= 3 and W >= 3:
            ctr = (slice(1, H - 1), slice(1, W - 1))
            p_c = points[ctr]
            r_c = rays[ctr]
            ok = mask[ctr].copy()
            edges = []
            for dr, dc in _FAN_OFFSETS:
                sl = (slice(1 + dr, H - 1 + dr), slice(1 + dc, W - 1 + dc))
                edges.append(points[sl] - p_c)
                ok &= mask[sl]
            s_vec = np.zeros_like(p_c)
            for t in range(6):
                s_vec += np.cross(edges[t], edges[(t + 1) % 6])
            s_norm = np.linalg.norm(s_vec, axis=-1)
            ok &= s_norm > 1e-20
            flip = np.where(np.sum(s_vec * r_c, axis=-1) > 0, -1.0, 1.0)
            with np.errstate(invalid="ignore", divide="ignore"):
                n_int = s_vec * (flip / np.where(ok, s_norm, 1.0))[..., None]
            n_int[~ok] = 0.0
            normals[ctr] = n_int
            valid[ctr] = ok
            self._edges = edges
            self._s_norm = s_norm
            self._flip = flip
            self._ok = ok
            self._n_int = n_int
        else:
            self._ok = None
        self.normal_map = NormalMap(normals, mask=valid)

    def vjp(self, g_normals: np.ndarray) -> np.ndarray:
        """Accumulate d(sum g_normals . n)/d(depth) as an (H, W) array."""
        H, W = self.shape
        g_depth = np.zeros((H, W))
        if self._ok is None or not self._ok.any():
            return g_depth
        ctr = (slice(1, H - 1), slice(1, W - 1))
        g_n = np.asarray(g_normals, dtype=float)[ctr]
        n = self._n_int
        # Through the flip and the normalization: S -> flip * S / |S|.
        g_s = g_n - n * np.sum(g_n * n, axis=-1, keepdims=True)
        scale = np.where(self._ok, self._flip / np.where(self._ok, self._s_norm, 1.0), 0.0)
        g_s = g_s * scale[..., None]
        r_c = self.rays[ctr]
        edges = self._edges
        neigh_rays = []
        for dr, dc in _FAN_OFFSETS:
            sl = (slice(1 + dr, H - 1 + dr), slice(1 + dc, W - 1 + dc))
            neigh_rays.append(self.rays[sl])
        per_offset = [np.zeros(g_s.shape[:2]) for _ in range(6)]
        centre = np.zeros(g_s.shape[:2])
        for t in range(6):
            p, q = t, (t + 1) % 6
            # C_t = E_p x E_q; dC/dd_p = r_p x E_q, dC/dd_q = E_p x r_q,
            # dC/dd_c = r_c x (E_p - E_q).
            per_offset[p] += np.sum(g_s * np.cross(neigh_rays[p], edges[q]), axis=-1)
            per_offset[q] += np.sum(g_s * np.cross(edges[p], neigh_rays[q]), axis=-1)
            centre += np.sum(g_s * np.cross(r_c, edges[p] - edges[q]), axis=-1)
        g_depth[ctr] += centre
        for k, (dr, dc) in enumerate(_FAN_OFFSETS):
            g_depth[1 + dr : H - 1 + dr, 1 + dc : W - 1 + dc] += per_offset[k]
        return g_depth


def normal_fan(camera: CameraModel, depth: DepthMap) -> NormalFan:
    if depth.shape != (camera.height, camera.width):
        raise ValidationError("depth shape must match camera size")
    return NormalFan(camera_rays(camera), depth.data, depth.mask)


def normals_from_depth(camera: CameraModel, depth: DepthMap) -> NormalMap:
    """Camera-facing unit normals from the six-neighbour triangle fan."""
    return normal_fan(camera, depth).normal_map


def backproject_cloud(
    camera: CameraModel,
    depth: DepthMap,
    colors: Optional[np.ndarray] = None,
    sigma: Optional[np.ndarray] = None,
) -> PointCloud:
    """One point per valid depth pixel, row-major order."""
    if depth.shape != (camera.height, camera.width):
        raise ValidationError("depth shape must match camera size")
    rays = camera_rays(camera)
    m = depth.mask
    pts = rays[m] * depth.data[m][:, None]
    col = None
    sig = None
    if colors is not None:
        colors = np.asarray(colors, dtype=float)
        col = colors[m]
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float)
        sig = sigma[m]
    return PointCloud(pts, colors=col, sigma=sig)


def warp_grid(camera: CameraModel, depth: DepthMap, pose: PoseSE3):
    """Pixel coordinates of each valid depth pixel seen from another view.

    Back-projects, applies the pose, reprojects.  Returns (coords, valid):
    coords (H, W, 2) and a mask that drops invalid depths and points landing
    behind the other camera.  Coords may fall outside the image; samplers
    handle that.
    """
    H, W = camera.height, camera.width
    if depth.shape != (H, W):
        raise ValidationError("depth shape must match camera size")
    rays = camera_rays(camera)
    moved = pose.apply(rays * depth.data[..., None])
    valid = depth.mask & (moved[..., 2] > 0)
    coords = np.zeros((H, W, 2))
    if valid.any():
        coords[valid] = project(camera, moved[valid])
    return coords, valid


def write_ply(path: str | os.PathLike, cloud: PointCloud) -> None:
    """ASCII PLY with optional uchar colours and float sigma per vertex."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += ["property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if cloud.sigma is not None:
        lines += ["property float sigma"]
    lines += ["end_header"]
    colors = None
    if cloud.colors is not None:
        colors = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(int)
    rows = []
    for i in range(len(cloud)):
        parts = ["%.17g" % c for c in cloud.points[i]]
        if colors is not None:
            parts += [str(c) for c in colors[i]]
        if cloud.sigma is not None:
            parts.append("%.17g" % cloud.sigma[i])
        rows.append(" ".join(parts))
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines + rows))
        fh.write("\n")
    os.replace(tmp, path)


def read_ply(path: str | os.PathLike) -> PointCloud:
    with open(path, "r", encoding="ascii", errors="strict") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError("not a PLY file")
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        raise FormatError("only ascii 1.0 PLY is supported")
    n_vertex = None
    props = []
    idx = 2
    current_element = None
    while idx < len(lines):
        line = lines[idx].strip()
        idx += 1
        if line == "end_header":
            break
        if line.startswith("comment"):
            continue
        if line.startswith("element"):
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"bad element line {line!r}")
            current_element = parts[1]
            if parts[1] == "vertex":
                n_vertex = int(parts[2])
            elif int(parts[2]) != 0:
                raise FormatError(f"unsupported non-empty element {parts[1]!r}")
            continue
        if line.startswith("property"):
            parts = line.split()
            if parts[1] == "list":
                raise FormatError("list properties are not supported")
            if current_element == "vertex":
                props.append((parts[2], parts[1]))
            continue
        raise FormatError(f"unexpected header line {line!r}")
    else:
        raise FormatError("missing end_header")
    if n_vertex is None:
        raise FormatError("missing vertex element")
    names = [p[0] for p in props]
    for needed in ("x", "y", "z"):
        if needed not in names:
            raise FormatError(f"vertex element lacks property {needed!r}")
    body = lines[idx : idx + n_vertex]
    if len(body) < n_vertex:
        raise FormatError("truncated PLY body")
    try:
        table = np.array(
            [[float(v) for v in row.split()] for row in body], dtype=float
        ).reshape(n_vertex, len(props)) if n_vertex else np.zeros((0, len(props)))
    except ValueError as exc:
        raise FormatError(f"bad PLY vertex row: {exc}") from exc
    cols = {name: table[:, i] for i, (name, _) in enumerate(props)}
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=-1)
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=-1) / 255.0
    sigma = cols.get("sigma")
    try:
        return PointCloud(pts, colors=colors, sigma=sigma)
    except ValidationError as exc:
        raise FormatError(f"invalid PLY contents: {exc}") from exc
