import json
import subprocess

import numpy as np
import pytest

from conftest import plain_rig
from ldk import (
    DepthMap,
    PointCloud,
    PoseSE3,
    SceneFrame,
    TriangleMesh,
    camera_rays,
    make_tube_scene,
    pose_errors,
    raycast_frame,
    read_field,
    render_image,
    rotation_matrix,
    write_field,
    write_obj,
    write_ply,
    write_rig,
)
from ldk.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def rig_file(tmp_path, size=8, sigma0=0.8):
    rig = plain_rig(size=size, sigma0=sigma0)
    path = tmp_path / "rig.json"
    write_rig(path, rig)
    return path, rig


def quad_mesh(z=1.0):
    verts = np.array(
        [[-6.0, -6.0, z], [6.0, -6.0, z], [6.0, 6.0, z], [-6.0, 6.0, z]]
    )
    return TriangleMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]), np.zeros((2, 2)))


def read_bytes(path):
    return path.read_bytes()


def test_version_runs_as_installed_script():
    proc = subprocess.run(["ldk", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip().startswith("ldk ")


def test_bare_invocation_prints_usage(capsys):
    assert run() == 2
    assert "usage" in capsys.readouterr().err


def test_render_writes_self_consistent_frames(tmp_path):
    rig_path, rig = rig_file(tmp_path)
    poses = {
        "poses": [
            {"R": np.eye(3).tolist(), "t": [0.0, 0.0, 0.0]},
            {"axis": [0.0, 1.0, 0.0], "angle": 0.05, "t": [0.01, 0.0, 0.0]},
            {"axis": [1.0, 0.0, 0.0], "angle": -0.04},
        ]
    }
    pose_path = tmp_path / "poses.json"
    pose_path.write_text(json.dumps(poses))
    out = tmp_path / "frames"
    assert run("render", "--rig", rig_path, "--scene", "tube",
               "--poses", pose_path, "--out", out, "--seed", 3) == 0

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "render"
    assert manifest["parameters"]["seed"] == 3
    assert len(manifest["outputs"]) == 12
    for name in manifest["outputs"]:
        assert (out / name).exists()

    for i in range(3):
        img = read_field(out / f"frame_{i:03d}.img")
        dep = read_field(out / f"frame_{i:03d}.dep")
        alb = read_field(out / f"frame_{i:03d}.alb")
        nrm = read_field(out / f"frame_{i:03d}.nrm")
        again = render_image(rig, dep, alb, nrm)
        # fields pass through float32 serialization, so not bit-exact
        assert np.abs(again.image.data - img.data).max() < 1e-6


def test_render_rejects_conflicting_scene_sources(tmp_path, capsys):
    rig_path, _ = rig_file(tmp_path)
    mesh_path = tmp_path / "m.obj"
    write_obj(mesh_path, quad_mesh())
    base = ["render", "--rig", rig_path, "--out", tmp_path / "o"]
    assert run(*base) == 2
    assert run(*base, "--scene", "tube", "--mesh", mesh_path) == 2
    assert capsys.readouterr().err.startswith("ldk: usage:")
    assert run(*base, "--mesh", mesh_path) == 0


def test_render_missing_rig_is_an_io_failure(tmp_path, capsys):
    assert run("render", "--rig", tmp_path / "nope.json", "--scene", "tube",
               "--out", tmp_path / "o") == 4
    assert capsys.readouterr().err.startswith("ldk: io:")


def test_render_bad_pose_file(tmp_path, capsys):
    rig_path, _ = rig_file(tmp_path)
    bad = tmp_path / "poses.json"
    bad.write_text("{not json")
    args = ["render", "--rig", rig_path, "--scene", "tube",
            "--poses", bad, "--out", tmp_path / "o"]
    assert run(*args) == 3
    assert capsys.readouterr().err.startswith("ldk: format:")
    bad.write_text(json.dumps({"poses": []}))
    assert run(*args) == 3
    bad.write_text(json.dumps({"poses": [{"t": [0, 0, 0]}]}))
    assert run(*args) == 3


def render_quad_image(tmp_path, rig):
    frame = raycast_frame(rig, quad_mesh())
    path = tmp_path / "obs.img"
    write_field(path, frame.image)
    return path, frame


def test_refine_outputs_and_loss_trace(tmp_path):
    rig_path, rig = rig_file(tmp_path)
    img_path, frame = render_quad_image(tmp_path, rig)
    out = tmp_path / "fit"
    assert run("refine", "--rig", rig_path, "--image", img_path, "--out", out,
               "--steps", 60, "--flat-depth", 1.2) == 0
    for name in ("depth.dep", "albedo.alb", "normals.nrm", "rendered.img",
                 "loss_trace.csv", "manifest.json"):
        assert (out / name).exists()
    rows = (out / "loss_trace.csv").read_text().strip().split("\n")
    assert rows[0] == "step,loss"
    assert len(rows) == 1 + 61
    losses = [float(r.split(",")[1]) for r in rows[1:]]
    assert losses[-1] <= losses[0]
    depth = read_field(out / "depth.dep")
    gt = frame.depth
    rel = np.abs(depth.data - gt.data)[gt.mask] / gt.data[gt.mask]
    assert np.mean(rel) < 0.2  # short run, coarse recovery is enough


def test_refine_flag_validation(tmp_path, capsys):
    rig_path, rig = rig_file(tmp_path)
    img_path, _ = render_quad_image(tmp_path, rig)
    base = ["refine", "--rig", rig_path, "--image", img_path, "--out", tmp_path / "o"]
    assert run(*base, "--steps", 0) == 2
    assert run(*base, "--step-size", 0) == 2
    assert run(*base, "--init", "provided") == 2
    capsys.readouterr()


def test_refine_divergence_maps_to_numerical_exit(tmp_path, capsys):
    rig_path, rig = rig_file(tmp_path)
    img_path, _ = render_quad_image(tmp_path, rig)
    code = run("refine", "--rig", rig_path, "--image", img_path,
               "--out", tmp_path / "o", "--steps", 400, "--step-size", 500)
    assert code == 5
    assert capsys.readouterr().err.startswith("ldk: numerical:")


def test_refine_reruns_bit_identically(tmp_path):
    rig_path, rig = rig_file(tmp_path)
    img_path, _ = render_quad_image(tmp_path, rig)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("refine", "--rig", rig_path, "--image", img_path,
                   "--out", out, "--steps", 25, "--seed", 7) == 0
        outs.append(out)
    for name in ("depth.dep", "albedo.alb", "normals.nrm", "rendered.img", "loss_trace.csv"):
        assert read_bytes(outs[0] / name) == read_bytes(outs[1] / name)


def test_threads_flag_does_not_change_results(tmp_path):
    rig_path, rig = rig_file(tmp_path)
    img_path, _ = render_quad_image(tmp_path, rig)
    outs = []
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        assert run("refine", "--rig", rig_path, "--image", img_path,
                   "--out", out, "--steps", 25, "--threads", threads) == 0
        outs.append(out)
    for name in ("depth.dep", "albedo.alb", "normals.nrm", "rendered.img", "loss_trace.csv"):
        assert read_bytes(outs[0] / name) == read_bytes(outs[1] / name)


def write_depth(path, data, mask=None):
    write_field(path, DepthMap(np.asarray(data, dtype=float), mask=mask))


def test_eval_perfect_prediction_row(tmp_path):
    rng = np.random.default_rng(0)
    depth = 1.0 + rng.random((6, 6))
    write_depth(tmp_path / "pred.dep", depth)
    write_depth(tmp_path / "gt.dep", depth)
    out = tmp_path / "m"
    assert run("eval", "--pred-depth", tmp_path / "pred.dep",
               "--gt-depth", tmp_path / "gt.dep", "--out", out) == 0
    row = json.loads((out / "metrics.json").read_text())
    assert row["abs_rel"] == 0.0
    assert row["rmse"] == 0.0
    assert row["delta1"] == 1.0
    assert row["n_pixels"] == 36
    assert (out / "metrics.csv").exists()


def test_eval_alignment_flag_changes_scaled_scores(tmp_path):
    rng = np.random.default_rng(1)
    gt = 1.0 + rng.random((6, 6))
    write_depth(tmp_path / "gt.dep", gt)
    write_depth(tmp_path / "pred.dep", 1.3 * gt)
    args = ["eval", "--pred-depth", tmp_path / "pred.dep", "--gt-depth", tmp_path / "gt.dep"]
    assert run(*args, "--out", tmp_path / "aligned") == 0
    assert run(*args, "--no-align", "--out", tmp_path / "raw") == 0
    aligned = json.loads((tmp_path / "aligned" / "metrics.json").read_text())
    raw = json.loads((tmp_path / "raw" / "metrics.json").read_text())
    assert aligned["abs_rel"] < 1e-6  # float32 containers bound the residue
    assert abs(raw["abs_rel"] - 0.3) < 1e-6
    assert raw["delta1"] == 0.0 and raw["delta2"] == 1.0


def test_eval_optional_channels_and_errors(tmp_path, capsys):
    rng = np.random.default_rng(2)
    depth = 1.0 + rng.random((5, 5))
    write_depth(tmp_path / "pred.dep", depth)
    write_depth(tmp_path / "gt.dep", depth)
    write_depth(tmp_path / "small.dep", np.ones((3, 3)))
    base = ["eval", "--pred-depth", tmp_path / "pred.dep", "--gt-depth", tmp_path / "gt.dep"]

    assert run("eval", "--pred-depth", tmp_path / "pred.dep",
               "--gt-depth", tmp_path / "small.dep", "--out", tmp_path / "x") == 3
    assert capsys.readouterr().err.startswith("ldk: validation:")

    rig = plain_rig(size=5, sigma0=0.6)
    frame = raycast_frame(rig, quad_mesh())
    write_field(tmp_path / "img.img", frame.image)
    write_field(tmp_path / "nrm.nrm", frame.normals)
    assert run(*base, "--pred-normals", tmp_path / "nrm.nrm", "--out", tmp_path / "y") == 2
    out = tmp_path / "full"
    assert run(*base,
               "--pred-normals", tmp_path / "nrm.nrm", "--gt-normals", tmp_path / "nrm.nrm",
               "--pred-image", tmp_path / "img.img", "--gt-image", tmp_path / "img.img",
               "--out", out) == 0
    row = json.loads((out / "metrics.json").read_text())
    assert row["normal_mae_deg"] == 0.0
    assert row["image_ssim"] == 1.0
    assert row["image_mae"] == 0.0


def test_uncertainty_command_fuses_and_scores(tmp_path):
    shape = (6, 6)
    write_depth(tmp_path / "m1.dep", np.full(shape, 1.0))
    write_depth(tmp_path / "m2.dep", np.full(shape, 3.0))
    write_depth(tmp_path / "gt.dep", np.full(shape, 2.0))
    out = tmp_path / "unc"
    assert run("uncertainty", "--members", tmp_path / "m1.dep", tmp_path / "m2.dep",
               "--gt", tmp_path / "gt.dep", "--out", out, "--levels", 20) == 0
    fused = read_field(out / "fused_mean.dep")
    sigma = read_field(out / "fused_sigma.dep")
    np.testing.assert_array_equal(fused.data, 2.0)
    np.testing.assert_array_equal(sigma.data, 1.0)  # epistemic variance 1, aleatoric 0
    cal = (out / "calibration.csv").read_text().strip().split("\n")
    assert cal[0] == "level,empirical"
    assert len(cal) == 1 + 20 + 2
    # exact prediction: every interval covers
    assert all(float(r.split(",")[1]) == 1.0 for r in cal[1:-2])
    spar = (out / "sparsification.csv").read_text().strip().split("\n")
    assert spar[-1].startswith("# ause,")


def test_uncertainty_perfect_ordering_reports_zero_ause(tmp_path):
    rng = np.random.default_rng(3)
    gt = 2.0 + rng.random((7, 7))
    e = rng.uniform(0.05, 0.4, (7, 7))
    write_depth(tmp_path / "m1.dep", gt)
    write_depth(tmp_path / "m2.dep", gt + 2 * e)  # fused mean gt+e, sigma e
    write_depth(tmp_path / "gt.dep", gt)
    out = tmp_path / "unc"
    assert run("uncertainty", "--members", tmp_path / "m1.dep", tmp_path / "m2.dep",
               "--gt", tmp_path / "gt.dep", "--out", out) == 0
    tail = (out / "sparsification.csv").read_text().strip().split("\n")[-1]
    assert float(tail.split(",")[1]) == 0.0


def test_uncertainty_member_size_mismatch(tmp_path, capsys):
    write_depth(tmp_path / "m1.dep", np.ones((4, 4)))
    write_depth(tmp_path / "m2.dep", np.ones((5, 5)))
    write_depth(tmp_path / "gt.dep", np.ones((4, 4)))
    assert run("uncertainty", "--members", tmp_path / "m1.dep", tmp_path / "m2.dep",
               "--gt", tmp_path / "gt.dep", "--out", tmp_path / "o") == 3
    capsys.readouterr()


def tube_cloud_points():
    return make_tube_scene(seed=0, segments=40, sides=50, bump_amp=0.08).vertices


def test_icp_command_identity_and_known_transform(tmp_path):
    pts = tube_cloud_points()
    write_ply(tmp_path / "src.ply", PointCloud(pts))
    write_ply(tmp_path / "same.ply", PointCloud(pts))
    out = tmp_path / "ident"
    assert run("icp", "--source", tmp_path / "src.ply", "--target", tmp_path / "same.ply",
               "--out", out) == 0
    res = json.loads((out / "icp_result.json").read_text())
    assert res["converged"]
    assert res["rms"] < 1e-12
    np.testing.assert_allclose(res["R"], np.eye(3), atol=1e-12)

    truth = PoseSE3(rotation_matrix([0.3, 1.0, 0.2], np.radians(5.0)),
                    0.05 * np.array([0.6, -0.8, 0.0]))
    write_ply(tmp_path / "tgt.ply", PointCloud(truth.apply(pts)))
    out2 = tmp_path / "moved"
    assert run("icp", "--source", tmp_path / "src.ply", "--target", tmp_path / "tgt.ply",
               "--out", out2) == 0
    res = json.loads((out2 / "icp_result.json").read_text())
    rot_deg, trans = pose_errors(PoseSE3(np.asarray(res["R"]), np.asarray(res["t"])), truth)
    assert np.radians(rot_deg) < 1e-3
    assert trans < 1e-4


def test_icp_percentile_flag_bounds(tmp_path, capsys):
    pts = tube_cloud_points()[:50]
    write_ply(tmp_path / "c.ply", PointCloud(pts, sigma=np.full(50, 0.1)))
    base = ["icp", "--source", tmp_path / "c.ply", "--target", tmp_path / "c.ply",
            "--out", tmp_path / "o"]
    assert run(*base, "--percentile", 0) == 2
    assert run(*base, "--percentile", 1.2) == 2
    capsys.readouterr()


def test_icp_filter_improves_corrupted_cloud(tmp_path):
    rng = np.random.default_rng(4)
    pts = tube_cloud_points()
    n = pts.shape[0]
    sigma = rng.uniform(0.01, 0.02, n)
    noisy = np.argsort(sigma)[-n // 10:]
    corrupted = pts.copy()
    corrupted[noisy] += rng.normal(0.0, 0.25, (noisy.size, 3))
    # no axial translation: sliding along the tube is the slow ICP direction
    # and would stall both runs at the same residual
    truth = PoseSE3(rotation_matrix([0.3, 1.0, 0.2], np.radians(5.0)),
                    0.05 * np.array([0.6, -0.8, 0.0]))
    write_ply(tmp_path / "src.ply", PointCloud(corrupted, sigma=sigma))
    write_ply(tmp_path / "tgt.ply", PointCloud(truth.apply(pts)))
    errs = {}
    for pct in ("0.9", "1.0"):
        out = tmp_path / f"p{pct}"
        assert run("icp", "--source", tmp_path / "src.ply", "--target", tmp_path / "tgt.ply",
                   "--percentile", pct, "--out", out) == 0
        res = json.loads((out / "icp_result.json").read_text())
        errs[pct] = pose_errors(PoseSE3(np.asarray(res["R"]), np.asarray(res["t"])), truth)[1]
    assert errs["0.9"] < errs["1.0"]


def test_toml_config_merges_below_explicit_flags(tmp_path):
    rig_path, rig = rig_file(tmp_path)
    img_path, _ = render_quad_image(tmp_path, rig)
    cfg = tmp_path / "ldk.toml"
    cfg.write_text("[refine]\nsteps = 7\nflat_depth = 1.3\n")
    out = tmp_path / "cfgrun"
    assert run("refine", "--rig", rig_path, "--image", img_path, "--out", out,
               "--config", cfg, "--steps", 5) == 0
    params = json.loads((out / "manifest.json").read_text())["parameters"]
    assert params["steps"] == 5  # explicit flag wins
    assert params["flat_depth"] == 1.3  # file beats the default
    assert params["step_size"] == 0.05  # untouched default
    rows = (out / "loss_trace.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 6


def test_toml_config_rejects_unknown_and_malformed(tmp_path, capsys):
    rig_path, rig = rig_file(tmp_path)
    img_path, _ = render_quad_image(tmp_path, rig)
    base = ["refine", "--rig", rig_path, "--image", img_path, "--out", tmp_path / "o"]
    cfg = tmp_path / "ldk.toml"
    cfg.write_text("[refine]\nbogus = 1\n")
    assert run(*base, "--config", cfg) == 2
    cfg.write_text("= broken\n")
    assert run(*base, "--config", cfg) == 3
    cfg.write_text("refine = 3\n")
    assert run(*base, "--config", cfg) == 3
    capsys.readouterr()


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    rig_path, _ = rig_file(tmp_path)
    monkeypatch.setenv("LDK_SEED", "5")
    out = tmp_path / "env"
    assert run("render", "--rig", rig_path, "--scene", "tube", "--out", out) == 0
    assert json.loads((out / "manifest.json").read_text())["parameters"]["seed"] == 5
    out2 = tmp_path / "flag"
    assert run("render", "--rig", rig_path, "--scene", "tube", "--out", out2,
               "--seed", 9) == 0
    assert json.loads((out2 / "manifest.json").read_text())["parameters"]["seed"] == 9
    monkeypatch.delenv("LDK_SEED")
    out3 = tmp_path / "none"
    assert run("render", "--rig", rig_path, "--scene", "tube", "--out", out3) == 0
    assert json.loads((out3 / "manifest.json").read_text())["parameters"]["seed"] == 0


def test_scene_seed_changes_rendered_frames(tmp_path):
    rig_path, _ = rig_file(tmp_path)
    outs = {}
    for seed in (3, 4):
        out = tmp_path / f"s{seed}"
        assert run("render", "--rig", rig_path, "--scene", "tube", "--out", out,
                   "--seed", seed) == 0
        outs[seed] = read_bytes(out / "frame_000.img")
    assert outs[3] != outs[4]


def test_replay_reproduces_outputs_bit_for_bit(tmp_path):
    rig_path, _ = rig_file(tmp_path)
    out = tmp_path / "orig"
    assert run("render", "--rig", rig_path, "--scene", "sphere", "--out", out,
               "--seed", 11) == 0
    replayed = tmp_path / "again"
    assert run("replay", out / "manifest.json", "--out", replayed) == 0
    names = json.loads((out / "manifest.json").read_text())["outputs"]
    assert names == json.loads((replayed / "manifest.json").read_text())["outputs"]
    for name in names:
        assert read_bytes(out / name) == read_bytes(replayed / name)


def test_replay_error_paths(tmp_path, capsys):
    missing = tmp_path / "gone.json"
    assert run("replay", missing) == 4
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert run("replay", bad) == 3
    bad.write_text(json.dumps({"command": "launch", "parameters": {}}))
    assert run("replay", bad) == 3
    capsys.readouterr()


def test_out_path_under_a_file_is_an_io_failure(tmp_path, capsys):
    rng = np.random.default_rng(5)
    depth = 1.0 + rng.random((4, 4))
    write_depth(tmp_path / "pred.dep", depth)
    blocker = tmp_path / "blocker"
    blocker.write_text("x")
    assert run("eval", "--pred-depth", tmp_path / "pred.dep",
               "--gt-depth", tmp_path / "pred.dep", "--out", blocker / "sub") == 4
    assert capsys.readouterr().err.startswith("ldk: io:")
