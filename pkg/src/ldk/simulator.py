"""Ray-cast ground truth: triangle meshes rendered under the rig's light.

A frame is produced by casting one ray per pixel against a triangle mesh,
recording the hit distance as depth, the (camera-facing) geometric face
normal, and the per-face albedo, then shading those fields with the forward
model.  By construction the frame's image re-renders exactly from its own
fields, which is the self-consistency contract the tests pin down.

Two intersection routes exist on purpose: ``raycast_brute`` tests every
triangle, ``raycast_bvh`` walks an axis-aligned BVH.  They share a single
ray-triangle kernel and the same nearest-hit rule (smallest t, ties broken
by the smaller face index), so they agree exactly, not just approximately;
the BVH exists only to make large meshes affordable.

Procedural scenes: a bumpy tube seen from inside (camera at the origin
looking down +z, far end capped so axial rays terminate) and a UV sphere.
Both carry smoothly varying per-face hue/saturation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, FormatError, ValidationError
from .geometry import PoseSE3
from .imaging import AlbedoMap, DepthMap, Image, NormalMap
from .photometry import render_image
from .rig import PhotometricRig, camera_rays

_T_MIN = 1e-9  # hits closer than this are treated as self-intersections
_DET_EPS = 1e-12  # rays this parallel to a face never hit it


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangles with per-face (hue, saturation) albedo."""

    vertices: np.ndarray  # (n, 3)
    faces: np.ndarray  # (m, 3) int
    face_albedo: np.ndarray  # (m, 2)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        alb = np.asarray(self.face_albedo, dtype=float).reshape(-1, 2)
        if not np.isfinite(verts).all():
            raise ValidationError("mesh vertices must be finite")
        if faces.shape[0] < 1:
            raise ValidationError("mesh needs at least one face")
        if faces.min() < 0 or faces.max() >= verts.shape[0]:
            raise ValidationError("face indices out of range")
        if alb.shape[0] != faces.shape[0]:
            raise ValidationError("face_albedo must have one row per face")
        spans = np.cross(
            verts[faces[:, 1]] - verts[faces[:, 0]],
            verts[faces[:, 2]] - verts[faces[:, 0]],
        )
        if not (np.linalg.norm(spans, axis=-1) > 0).all():
            raise ValidationError("mesh contains zero-area faces")
        h, s = alb[:, 0], alb[:, 1]
        if (h < 0).any() or (h >= 1).any() or (s < 0).any() or (s > 1).any():
            raise ValidationError("face albedo outside hue [0,1) / sat [0,1]")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "face_albedo", alb)

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]


@dataclass(frozen=True)
class SceneFrame:
    """Ground-truth fields plus the image they shade to."""

    image: Image
    depth: DepthMap
    albedo: AlbedoMap
    normals: NormalMap
    pose: PoseSE3


def _tri_hit_times(origin: np.ndarray, dirs: np.ndarray, v0, e1, e2) -> np.ndarray:
    """Hit distances for every (ray, triangle) pair; inf where no hit.

    Watertight-enough Moller-Trumbore with inclusive barycentric bounds, so a
    ray through a shared edge reports both faces at the same t and the tie
    rule picks one deterministically.  Both casting routes call exactly this.
    """
    h = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.sum(e1[None, :, :] * h, axis=-1)
    ok = np.abs(det) > _DET_EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origin - v0
    u = inv * np.sum(s[None, :, :] * h, axis=-1)
    q = np.cross(s, e1)
    v = inv * np.sum(dirs[:, None, :] * q[None, :, :], axis=-1)
    t = inv * np.sum(e2[None, :, :] * q[None, :, :], axis=-1)
    ok &= (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > _T_MIN)
    return np.where(ok, t, np.inf)


def _nearest_in_block(times: np.ndarray, face_ids: np.ndarray):
    """Per-ray (t, face) lexicographic minimum within one block of faces."""
    tmin = times.min(axis=1)
    hit = np.isfinite(tmin)
    big = np.iinfo(np.int64).max
    ids = np.where(times == tmin[:, None], face_ids[None, :], big)
    idx = ids.min(axis=1)
    return tmin, np.where(hit, idx, -1)


def raycast_brute(
    mesh: TriangleMesh, origin: np.ndarray, dirs: np.ndarray, chunk: int = 64
):
    """Nearest hit for each ray by testing every face.  Returns (t, face)."""
    origin = np.asarray(origin, dtype=float).reshape(3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    all_ids = np.arange(mesh.n_faces, dtype=np.int64)
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_f = np.full(n, -1, dtype=np.int64)
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        times = _tri_hit_times(origin, dirs[sl], v0, e1, e2)
        best_t[sl], best_f[sl] = _nearest_in_block(times, all_ids)
    return best_t, best_f


class Bvh:
    """Flattened median-split BVH over mesh faces.

    Nodes are arrays: bounds, child indices (-1 marks a leaf), and a span
    into ``order``, the face permutation.  Build is deterministic: split the
    longest centroid axis at the median with a stable sort.
    """

    LEAF_SIZE = 8

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        v0 = mesh.vertices[mesh.faces[:, 0]]
        v1 = mesh.vertices[mesh.faces[:, 1]]
        v2 = mesh.vertices[mesh.faces[:, 2]]
        self._v0 = v0
        self._e1 = v1 - v0
        self._e2 = v2 - v0
        lo = np.minimum(np.minimum(v0, v1), v2)
        hi = np.maximum(np.maximum(v0, v1), v2)
        cent = (v0 + v1 + v2) / 3.0
        order = np.arange(mesh.n_faces, dtype=np.int64)
        nodes_lo, nodes_hi, links, spans = [], [], [], []

        def build(span_lo: int, span_hi: int) -> int:
            idx = len(nodes_lo)
            sel = order[span_lo:span_hi]
            nodes_lo.append(lo[sel].min(axis=0))
            nodes_hi.append(hi[sel].max(axis=0))
            links.append([-1, -1])
            spans.append([span_lo, span_hi])
            count = span_hi - span_lo
            if count > self.LEAF_SIZE:
                c = cent[sel]
                extent = c.max(axis=0) - c.min(axis=0)
                axis = int(np.argmax(extent))
                if extent[axis] > 0:
                    local = np.argsort(c[:, axis], kind="stable")
                    order[span_lo:span_hi] = sel[local]
                    mid = span_lo + count // 2
                    left = build(span_lo, mid)
                    right = build(mid, span_hi)
                    links[idx] = [left, right]
            return idx

        import sys

        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, 10000))
        try:
            build(0, mesh.n_faces)
        finally:
            sys.setrecursionlimit(limit)
        self.order = order
        self.node_lo = np.array(nodes_lo)
        self.node_hi = np.array(nodes_hi)
        self.links = np.array(links, dtype=np.int64)
        self.spans = np.array(spans, dtype=np.int64)

    def _slab_enter(self, node: int, origin, dirs, rows):
        lo = self.node_lo[node]
        hi = self.node_hi[node]
        d = dirs[rows]
        t_near = np.full(rows.shape[0], 0.0)
        t_far = np.full(rows.shape[0], np.inf)
        for a in range(3):
            da = d[:, a]
            moving = da != 0.0
            inv = np.where(moving, 1.0 / np.where(moving, da, 1.0), 0.0)
            t1 = (lo[a] - origin[a]) * inv
            t2 = (hi[a] - origin[a]) * inv
            lo_a = np.where(moving, np.minimum(t1, t2), -np.inf)
            hi_a = np.where(moving, np.maximum(t1, t2), np.inf)
            inside = (origin[a] >= lo[a]) & (origin[a] <= hi[a])
            lo_a = np.where(moving, lo_a, np.where(inside, -np.inf, np.inf))
            hi_a = np.where(moving, hi_a, np.where(inside, np.inf, -np.inf))
            t_near = np.maximum(t_near, lo_a)
            t_far = np.minimum(t_far, hi_a)
        enter = np.where(t_near <= t_far, t_near, np.inf)
        return enter

    def cast(self, origin: np.ndarray, dirs: np.ndarray):
        """Same contract and same answers as ``raycast_brute``."""
        origin = np.asarray(origin, dtype=float).reshape(3)
        dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
        n = dirs.shape[0]
        best_t = np.full(n, np.inf)
        best_f = np.full(n, -1, dtype=np.int64)

        def visit(node: int, rows: np.ndarray):
            enter = self._slab_enter(node, origin, dirs, rows)
            rows = rows[enter <= best_t[rows]]
            if rows.size == 0:
                return
            left, right = self.links[node]
            if left < 0:
                s_lo, s_hi = self.spans[node]
                ids = self.order[s_lo:s_hi]
                times = _tri_hit_times(
                    origin, dirs[rows], self._v0[ids], self._e1[ids], self._e2[ids]
                )
                t_new, f_new = _nearest_in_block(times, ids)
                better = (t_new < best_t[rows]) | (
                    (t_new == best_t[rows]) & (f_new >= 0) & (f_new < best_f[rows])
                )
                upd = rows[better]
                best_t[upd] = t_new[better]
                best_f[upd] = f_new[better]
                return
            visit(left, rows)
            visit(right, rows)

        visit(0, np.arange(n, dtype=np.int64))
        return best_t, best_f


def raycast_bvh(mesh: TriangleMesh, origin: np.ndarray, dirs: np.ndarray):
    return Bvh(mesh).cast(origin, dirs)


def raycast_frame(
    rig: PhotometricRig,
    mesh: TriangleMesh,
    pose: Optional[PoseSE3] = None,
    bvh: Optional[Bvh] = None,
) -> SceneFrame:
    """Cast one ray per pixel and shade the resulting fields.

    ``pose`` maps camera-frame points into the mesh frame (the light rides
    with the camera).  Misses become invalid pixels.
    """
    if bvh is not None and bvh.mesh is not mesh:
        raise ValidationError("bvh was built for a different mesh")
    if pose is None:
        pose = PoseSE3.identity()
    cam = rig.camera
    rays_cam = camera_rays(cam)
    H, W = rays_cam.shape[:2]
    dirs = (rays_cam.reshape(-1, 3)) @ pose.R.T
    caster = bvh if bvh is not None else Bvh(mesh)
    t, face = caster.cast(pose.t, dirs)
    hit = face >= 0
    depth = DepthMap(np.where(hit, t, 0.0).reshape(H, W), mask=hit.reshape(H, W))

    normals = np.zeros((H * W, 3))
    albedo = np.zeros((H * W, 2))
    if hit.any():
        f = face[hit]
        v0 = mesh.vertices[mesh.faces[f, 0]]
        e1 = mesh.vertices[mesh.faces[f, 1]] - v0
        e2 = mesh.vertices[mesh.faces[f, 2]] - v0
        n_scene = np.cross(e1, e2)
        n_scene /= np.linalg.norm(n_scene, axis=-1, keepdims=True)
        n_cam = n_scene @ pose.R
        facing = np.sum(n_cam * rays_cam.reshape(-1, 3)[hit], axis=-1)
        n_cam = np.where(facing[:, None] > 0, -n_cam, n_cam)
        normals[hit] = n_cam
        albedo[hit] = mesh.face_albedo[f]
    normal_map = NormalMap(normals.reshape(H, W, 3), mask=hit.reshape(H, W))
    albedo_map = AlbedoMap(albedo.reshape(H, W, 2))
    rendered = render_image(rig, depth, albedo_map, normal_map)
    return SceneFrame(
        image=rendered.image,
        depth=depth,
        albedo=albedo_map,
        normals=normal_map,
        pose=pose,
    )


def _smooth_albedo(h_base, param_u, param_v, rng):
    """Smoothly varying reddish (hue, sat) over a parameterized surface."""
    p1, p2, p3 = rng.uniform(0.0, 2 * np.pi, 3)
    h = h_base + 0.03 * np.sin(2 * np.pi * param_u + p1) * np.cos(2 * param_v + p2)
    s = 0.5 + 0.2 * np.sin(2 * np.pi * param_u * 2 + p3) * np.sin(param_v)
    h = np.clip(h, 0.0, 0.999)
    s = np.clip(s, 0.0, 1.0)
    return np.stack([h, s], axis=-1)


def make_tube_scene(
    seed: int,
    segments: int = 48,
    sides: int = 24,
    radius: float = 0.5,
    length: float = 3.0,
    bump_amp: float = 0.08,
    bumps: int = 3,
    z_start: float = 0.3,
) -> TriangleMesh:
    """Bumpy tube along +z, far end capped, meant to be viewed from inside."""
    if segments < 2 or sides < 3:
        raise DomainError("tube needs at least 2 segments and 3 sides")
    if radius <= 0 or length <= 0 or bump_amp < 0:
        raise DomainError("tube dimensions must be positive")
    rng = np.random.default_rng(seed)
    ph_z, ph_a = rng.uniform(0.0, 2 * np.pi, 2)
    zs = np.linspace(0.0, 1.0, segments + 1)
    phis = np.arange(sides) / sides * 2 * np.pi
    Z, PHI = np.meshgrid(zs, phis, indexing="ij")
    r_local = radius * (
        1.0 + bump_amp * np.sin(2 * np.pi * bumps * Z + ph_z) * np.cos(3 * PHI + ph_a)
    )
    x = r_local * np.cos(PHI)
    y = r_local * np.sin(PHI)
    z = z_start + Z * length
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)

    def vid(i, j):
        return i * sides + (j % sides)

    faces = []
    fu, fv = [], []
    for i in range(segments):
        for j in range(sides):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            faces.append([a, b, c])
            faces.append([b, d, c])
            mu = (zs[i] + zs[i + 1]) / 2
            mv = phis[j]
            fu += [mu, mu]
            fv += [mv, mv]
    centre = verts.shape[0]
    verts = np.vstack([verts, [0.0, 0.0, z_start + length]])
    for j in range(sides):
        faces.append([vid(segments, j), vid(segments, j + 1), centre])
        fu.append(1.0)
        fv.append(phis[j])
    albedo = _smooth_albedo(0.04, np.array(fu), np.array(fv), rng)
    return TriangleMesh(verts, np.array(faces), albedo)


def make_sphere_mesh(
    seed: int,
    center=(0.0, 0.0, 2.0),
    radius: float = 1.0,
    rings: int = 32,
    sectors: int = 48,
) -> TriangleMesh:
    """UV sphere with poles on the z axis through the centre."""
    if rings < 2 or sectors < 3:
        raise DomainError("sphere needs at least 2 rings and 3 sectors")
    if radius <= 0:
        raise DomainError("radius must be positive")
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=float).reshape(3)
    thetas = np.linspace(0.0, np.pi, rings + 1)[1:-1]
    phis = np.arange(sectors) / sectors * 2 * np.pi
    TH, PH = np.meshgrid(thetas, phis, indexing="ij")
    x = radius * np.sin(TH) * np.cos(PH)
    y = radius * np.sin(TH) * np.sin(PH)
    z = radius * np.cos(TH)
    band = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    north = np.array([[0.0, 0.0, radius]])
    south = np.array([[0.0, 0.0, -radius]])
    verts = np.vstack([north, band, south]) + center
    n_band_rings = len(thetas)

    def vid(i, j):
        return 1 + i * sectors + (j % sectors)

    faces, fu, fv = [], [], []
    for j in range(sectors):
        faces.append([0, vid(0, j), vid(0, j + 1)])
        fu.append(0.0)
        fv.append(phis[j])
    for i in range(n_band_rings - 1):
        for j in range(sectors):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            faces.append([a, c, b])
            faces.append([b, c, d])
            mu = (i + 1.0) / (n_band_rings + 1)
            fu += [mu, mu]
            fv += [phis[j], phis[j]]
    southern = verts.shape[0] - 1
    for j in range(sectors):
        faces.append([southern, vid(n_band_rings - 1, j + 1), vid(n_band_rings - 1, j)])
        fu.append(1.0)
        fv.append(phis[j])
    albedo = _smooth_albedo(0.05, np.array(fu), np.array(fv), rng)
    return TriangleMesh(verts, np.array(faces), albedo)


def write_obj(path: str | os.PathLike, mesh: TriangleMesh) -> None:
    """ASCII OBJ plus a JSON sidecar (<stem>.albedo.json) for face albedo."""
    lines = ["# ldk mesh"]
    for v in mesh.vertices:
        lines.append("v %.17g %.17g %.17g" % tuple(v))
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    os.replace(tmp, path)
    side = _sidecar_path(path)
    with open(side, "w", encoding="utf-8") as fh:
        json.dump({"face_albedo": mesh.face_albedo.tolist()}, fh)
        fh.write("\n")


def _sidecar_path(path) -> str:
    base, _ = os.path.splitext(str(path))
    return base + ".albedo.json"


def read_obj(path: str | os.PathLike) -> TriangleMesh:
    """Parse v/f lines; faces may use the v/vt/vn syntax (extras ignored).

    Face albedo comes from the sidecar if present, else defaults to white.
    """
    verts, faces = [], []
    with open(path, "r", encoding="ascii", errors="strict") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"line {lineno}: bad vertex")
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise FormatError(f"line {lineno}: only triangles supported")
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError as exc:
                    raise FormatError(f"line {lineno}: bad face index") from exc
                if any(i < 1 for i in idx):
                    raise FormatError(f"line {lineno}: face indices must be >= 1")
                faces.append([i - 1 for i in idx])
            # vn / vt / usemtl and friends are irrelevant here
    if not faces:
        raise FormatError("OBJ contains no faces")
    side = _sidecar_path(path)
    if os.path.exists(side):
        with open(side, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
                albedo = np.asarray(data["face_albedo"], dtype=float)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"bad albedo sidecar: {exc}") from exc
    else:
        albedo = np.zeros((len(faces), 2))
    try:
        return TriangleMesh(np.array(verts), np.array(faces), albedo)
    except ValidationError as exc:
        raise FormatError(f"invalid mesh: {exc}") from exc
