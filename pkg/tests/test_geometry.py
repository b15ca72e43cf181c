import numpy as np
import pytest

from conftest import square_cam
from ldk import (
    DepthMap,
    PointCloud,
    PoseSE3,
    backproject_cloud,
    camera_rays,
    normal_fan,
    normals_from_depth,
    read_ply,
    rotation_matrix,
    warp_grid,
    write_ply,
)
from ldk.errors import DomainError, FormatError, ValidationError


def random_pose(rng):
    axis = rng.normal(size=3)
    R = rotation_matrix(axis, rng.uniform(-np.pi, np.pi))
    return PoseSE3(R, rng.normal(size=3))


def test_pose_validation():
    with pytest.raises(ValidationError):
        PoseSE3(np.eye(3) * 1.1, np.zeros(3))
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValidationError):
        PoseSE3(refl, np.zeros(3))


def test_pose_algebra():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(40, 3))
    for _ in range(10):
        a, b = random_pose(rng), random_pose(rng)
        lhs = a.apply(b.apply(pts))
        rhs = a.compose(b).apply(pts)
        assert np.allclose(lhs, rhs, atol=1e-12)
        assert np.allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-12)


def test_rotation_matrix_quarter_turn():
    R = rotation_matrix(np.array([0.0, 0.0, 2.0]), np.pi / 2)
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    with pytest.raises(DomainError):
        rotation_matrix(np.zeros(3), 1.0)


def test_fronto_plane_normals():
    cam = square_cam(8)
    rays = camera_rays(cam)
    depth = DepthMap(2.0 / rays[..., 2])  # plane z = 2
    normals = normals_from_depth(cam, depth)
    inner = normals.data[1:-1, 1:-1]
    assert np.allclose(inner, [0.0, 0.0, -1.0], atol=1e-12)
    assert not normals.mask[0].any()  # border has no full fan


def test_slanted_plane_normals():
    cam = square_cam(16)
    rays = camera_rays(cam)
    # plane n . x = c with unit n leaning in x
    n = np.array([0.3, -0.1, -1.0])
    n /= np.linalg.norm(n)
    depth = DepthMap(-2.0 / (rays @ n))
    normals = normals_from_depth(cam, depth)
    inner = normals.data[1:-1, 1:-1]
    assert np.allclose(inner, n, atol=1e-9)


def test_normals_face_the_camera():
    cam = square_cam(12)
    rng = np.random.default_rng(1)
    depth = DepthMap(1.0 + 0.3 * rng.random((12, 12)))
    normals = normals_from_depth(cam, depth)
    rays = camera_rays(cam)
    dots = np.sum(normals.data * rays, axis=-1)[normals.mask]
    assert np.all(dots < 0)


def test_fan_vjp_matches_finite_differences():
    cam = square_cam(7)
    rng = np.random.default_rng(2)
    eps = 1e-6
    for _ in range(10):
        depth_data = 1.0 + 0.4 * rng.random((7, 7))
        g = rng.normal(size=(7, 7, 3))
        fan = normal_fan(cam, DepthMap(depth_data))
        # zero the cotangent at invalid normals: they do not contribute
        g = np.where(fan.normal_map.mask[..., None], g, 0.0)
        grad = normal_fan(cam, DepthMap(depth_data)).vjp(g)
        delta = rng.normal(size=(7, 7))
        fwd = normal_fan(cam, DepthMap(depth_data + eps * delta)).normal_map.data
        bwd = normal_fan(cam, DepthMap(depth_data - eps * delta)).normal_map.data
        fd = np.sum((fwd - bwd) / (2 * eps) * g)
        an = np.sum(grad * delta)
        assert abs(fd - an) <= 1e-6 * max(1.0, abs(fd))


def test_backproject_cloud_geometry():
    cam = square_cam(6)
    rng = np.random.default_rng(3)
    data = rng.random((6, 6)) + 0.5
    data[2, 3] = 0.0
    depth = DepthMap(data)
    colors = rng.random((6, 6, 3))
    sigma = rng.random((6, 6))
    cloud = backproject_cloud(cam, depth, colors=colors, sigma=sigma)
    assert len(cloud) == depth.mask.sum() == 35
    rays = camera_rays(cam)
    k = 0
    for r in range(6):
        for c in range(6):
            if depth.mask[r, c]:
                assert np.allclose(cloud.points[k], rays[r, c] * data[r, c], atol=1e-14)
                assert np.allclose(cloud.colors[k], colors[r, c])
                assert cloud.sigma[k] == sigma[r, c]
                k += 1


def test_warp_grid_identity():
    cam = square_cam(9)
    rng = np.random.default_rng(4)
    depth = DepthMap(1.0 + rng.random((9, 9)))
    px, valid = warp_grid(cam, depth, PoseSE3.identity())
    xs, ys = np.meshgrid(np.arange(9.0), np.arange(9.0))
    assert valid.all()
    assert np.allclose(px[..., 0], xs, atol=1e-9)
    assert np.allclose(px[..., 1], ys, atol=1e-9)


def test_warp_grid_masks_out_of_view():
    cam = square_cam(9)
    depth = DepthMap(np.ones((9, 9)))
    pose = PoseSE3(np.eye(3), np.array([0.0, 0.0, -5.0]))  # behind the camera
    _, valid = warp_grid(cam, depth, pose)
    assert not valid.any()


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    cloud = PointCloud(
        rng.normal(size=(17, 3)),
        colors=rng.random((17, 3)),
        sigma=rng.random(17),
    )
    path = tmp_path / "c.ply"
    write_ply(path, cloud)
    back = read_ply(path)
    assert np.array_equal(back.points, cloud.points)  # %.17g survives exactly
    assert np.allclose(back.colors, cloud.colors, atol=1 / 510)  # uchar colours
    assert np.array_equal(back.sigma, cloud.sigma)


def test_ply_without_optionals(tmp_path):
    cloud = PointCloud(np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]))
    path = tmp_path / "p.ply"
    write_ply(path, cloud)
    back = read_ply(path)
    assert back.colors is None and back.sigma is None
    assert np.array_equal(back.points, cloud.points)


def test_ply_rejects_garbage(tmp_path):
    path = tmp_path / "x.ply"
    path.write_text("ply\nformat ascii 1.0\nend_header\n")
    with pytest.raises(FormatError):
        read_ply(path)


def test_cloud_validation():
    with pytest.raises(ValidationError):
        PointCloud(np.array([[np.nan, 0, 0]]))
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((2, 3)), colors=np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((2, 3)), sigma=np.array([-1.0, 0.0]))
