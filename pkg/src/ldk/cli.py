"""Batch command line frontend.

Subcommands: render, refine, eval, uncertainty, icp, replay.  Every run
writes a manifest.json beside its outputs; ``ldk replay manifest.json``
re-executes the recorded command and reproduces the output files bit for
bit.  Flag values may come from a TOML file (``--config``, one section per
subcommand); explicit flags win over the file, the file wins over defaults.

Exit codes: 0 ok, 2 usage, 3 validation/format, 4 I/O, 5 numerical.
stderr carries a single ``ldk: <category>: <message>`` line on failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import (
    FormatError,
    LdkError,
    UsageError,
    ValidationError,
)
from .geometry import (
    PointCloud,
    PoseSE3,
    backproject_cloud,
    read_ply,
    rotation_matrix,
    write_ply,
)
from .imaging import (
    AlbedoMap,
    DepthMap,
    Image,
    NormalMap,
    _atomic_write_bytes,
    read_field,
    write_field,
)
from .losses import ssim
from .metrics import (
    depth_metrics,
    metrics_to_dict,
    normal_mae,
    write_metrics_csv,
    write_metrics_json,
)
from .optimizer import RefineConfig, refine
from .registration import IcpConfig, filter_by_uncertainty, icp_point_to_point
from .rig import read_rig
from .simulator import make_sphere_mesh, make_tube_scene, raycast_frame, read_obj
from .uncertainty import (
    EnsembleOutputs,
    auce,
    ause,
    fuse_ensemble,
    write_calibration_csv,
    write_sparsification_csv,
)

_EXIT_BY_CATEGORY = {
    "usage": 2,
    "validation": 3,
    "format": 3,
    "domain": 3,
    "projection": 3,
    "numerical": 5,
}

_DEFAULTS = {
    "render": {
        "rig": None,
        "scene": None,
        "mesh": None,
        "poses": None,
        "out": None,
        "seed": None,
        "threads": 1,
    },
    "refine": {
        "rig": None,
        "image": None,
        "out": None,
        "steps": 500,
        "step_size": 0.05,
        "init": "flat",
        "flat_depth": 1.0,
        "init_depth": None,
        "init_albedo": None,
        "no_albedo": False,
        "seed": None,
        "threads": 1,
    },
    "eval": {
        "pred_depth": None,
        "gt_depth": None,
        "pred_normals": None,
        "gt_normals": None,
        "pred_image": None,
        "gt_image": None,
        "no_align": False,
        "pred_denominator": False,
        "out": None,
        "seed": None,
        "threads": 1,
    },
    "uncertainty": {
        "members": None,
        "gt": None,
        "out": None,
        "levels": 100,
        "fractions": 100,
        "dist": "normal",
        "seed": None,
        "threads": 1,
    },
    "icp": {
        "source": None,
        "target": None,
        "out": None,
        "percentile": 1.0,
        "max_iterations": 50,
        "tol": 1e-10,
        "max_dist": None,
        "seed": None,
        "threads": 1,
    },
}


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="ldk", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=f"ldk {__version__}")
    sub = top.add_subparsers(dest="command")

    def common(p):
        # SUPPRESS so the TOML merge can tell explicit flags from defaults
        p.add_argument("--config", default=argparse.SUPPRESS)
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("render", help="ray-cast scene frames")
    p.add_argument("--rig", default=argparse.SUPPRESS)
    p.add_argument("--scene", choices=("tube", "sphere"), default=argparse.SUPPRESS)
    p.add_argument("--mesh", default=argparse.SUPPRESS)
    p.add_argument("--poses", default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS)
    common(p)

    p = sub.add_parser("refine", help="fit depth and albedo to one image")
    p.add_argument("--rig", default=argparse.SUPPRESS)
    p.add_argument("--image", default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS)
    p.add_argument("--steps", type=int, default=argparse.SUPPRESS)
    p.add_argument("--step-size", type=float, dest="step_size", default=argparse.SUPPRESS)
    p.add_argument(
        "--init", choices=("flat", "brightness", "provided"), default=argparse.SUPPRESS
    )
    p.add_argument("--flat-depth", type=float, dest="flat_depth", default=argparse.SUPPRESS)
    p.add_argument("--init-depth", dest="init_depth", default=argparse.SUPPRESS)
    p.add_argument("--init-albedo", dest="init_albedo", default=argparse.SUPPRESS)
    p.add_argument("--no-albedo", action="store_true", dest="no_albedo", default=argparse.SUPPRESS)
    common(p)

    p = sub.add_parser("eval", help="depth/normal/image error metrics")
    p.add_argument("--pred-depth", dest="pred_depth", default=argparse.SUPPRESS)
    p.add_argument("--gt-depth", dest="gt_depth", default=argparse.SUPPRESS)
    p.add_argument("--pred-normals", dest="pred_normals", default=argparse.SUPPRESS)
    p.add_argument("--gt-normals", dest="gt_normals", default=argparse.SUPPRESS)
    p.add_argument("--pred-image", dest="pred_image", default=argparse.SUPPRESS)
    p.add_argument("--gt-image", dest="gt_image", default=argparse.SUPPRESS)
    p.add_argument("--no-align", action="store_true", dest="no_align", default=argparse.SUPPRESS)
    p.add_argument(
        "--pred-denominator",
        action="store_true",
        dest="pred_denominator",
        default=argparse.SUPPRESS,
    )
    p.add_argument("--out", default=argparse.SUPPRESS)
    common(p)

    p = sub.add_parser("uncertainty", help="fuse ensemble members; calibration curves")
    p.add_argument("--members", nargs="+", default=argparse.SUPPRESS)
    p.add_argument("--gt", default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS)
    p.add_argument("--levels", type=int, default=argparse.SUPPRESS)
    p.add_argument("--fractions", type=int, default=argparse.SUPPRESS)
    p.add_argument("--dist", choices=("normal", "laplace"), default=argparse.SUPPRESS)
    common(p)

    p = sub.add_parser("icp", help="align two point clouds")
    p.add_argument("--source", default=argparse.SUPPRESS)
    p.add_argument("--target", default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS)
    p.add_argument("--percentile", type=float, default=argparse.SUPPRESS)
    p.add_argument(
        "--max-iterations", type=int, dest="max_iterations", default=argparse.SUPPRESS
    )
    p.add_argument("--tol", type=float, default=argparse.SUPPRESS)
    p.add_argument("--max-dist", type=float, dest="max_dist", default=argparse.SUPPRESS)
    common(p)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=argparse.SUPPRESS)
    return top


def _merge_params(command: str, given: dict) -> dict:
    params = dict(_DEFAULTS[command])
    config_path = given.pop("config", None)
    if config_path is not None:
        try:
            with open(config_path, "rb") as fh:
                table = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise FormatError(f"bad TOML in {config_path}: {exc}") from exc
        section = table.get(command, {})
        if not isinstance(section, dict):
            raise FormatError(f"config section [{command}] must be a table")
        for key, value in section.items():
            if key not in params:
                raise UsageError(f"unknown config key {key!r} for {command}")
            params[key] = value
    for key, value in given.items():
        params[key] = value
    if params.get("seed") is None:
        env = os.environ.get("LDK_SEED")
        params["seed"] = int(env) if env is not None else 0
    return params


def _require(params: dict, *keys: str) -> None:
    for key in keys:
        if params.get(key) is None:
            flag = "--" + key.replace("_", "-")
            raise UsageError(f"{flag} is required")


def _write_json(path, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    _atomic_write_bytes(path, text.encode("ascii"))


def _write_manifest(out_dir: str, command: str, params: dict, outputs: list) -> None:
    manifest = {
        "tool": "ldk",
        "version": __version__,
        "command": command,
        "parameters": {k: v for k, v in sorted(params.items())},
        "outputs": sorted(outputs),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _out_dir(params: dict) -> str:
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _load_poses(path) -> list:
    if path is None:
        return [PoseSE3.identity()]
    try:
        with open(path, "r", encoding="ascii") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad pose JSON in {path}: {exc}") from exc
    if isinstance(data, dict):
        data = data.get("poses")
    if not isinstance(data, list) or not data:
        raise ValidationError("pose file must hold a non-empty list of poses")
    poses = []
    for entry in data:
        if not isinstance(entry, dict):
            raise ValidationError("each pose must be an object")
        if "R" in entry:
            poses.append(PoseSE3(np.asarray(entry["R"]), np.asarray(entry.get("t", np.zeros(3)))))
        elif "axis" in entry:
            R = rotation_matrix(np.asarray(entry["axis"]), float(entry.get("angle", 0.0)))
            poses.append(PoseSE3(R, np.asarray(entry.get("t", np.zeros(3)))))
        else:
            raise ValidationError("pose needs either R or axis/angle")
    return poses


def _cmd_render(params: dict) -> list:
    _require(params, "rig", "out")
    if (params["scene"] is None) == (params["mesh"] is None):
        raise UsageError("give exactly one of --scene or --mesh")
    rig = read_rig(params["rig"])
    if params["mesh"] is not None:
        mesh = read_obj(params["mesh"])
    elif params["scene"] == "tube":
        mesh = make_tube_scene(seed=params["seed"])
    else:
        mesh = make_sphere_mesh(seed=params["seed"])
    poses = _load_poses(params["poses"])
    out = _out_dir(params)
    outputs = []
    for i, pose in enumerate(poses):
        frame = raycast_frame(rig, mesh, pose=pose)
        stem = f"frame_{i:03d}"
        for suffix, fld in (
            (".img", frame.image),
            (".dep", frame.depth),
            (".alb", frame.albedo),
            (".nrm", frame.normals),
        ):
            name = stem + suffix
            write_field(os.path.join(out, name), fld)
            outputs.append(name)
    return outputs


def _cmd_refine(params: dict) -> list:
    _require(params, "rig", "image", "out")
    if params["steps"] < 1:
        raise UsageError("--steps must be >= 1")
    if not (params["step_size"] > 0):
        raise UsageError("--step-size must be > 0")
    if params["init"] == "provided" and params["init_depth"] is None:
        raise UsageError("--init provided needs --init-depth")
    rig = read_rig(params["rig"])
    observed = _expect(read_field(params["image"]), Image, "image")
    init_depth = None
    init_albedo = None
    if params["init_depth"] is not None:
        init_depth = _expect(read_field(params["init_depth"]), DepthMap, "init depth")
    if params["init_albedo"] is not None:
        init_albedo = _expect(read_field(params["init_albedo"]), AlbedoMap, "init albedo")
    config = RefineConfig(
        steps=params["steps"],
        step_size=params["step_size"],
        init=params["init"],
        flat_depth=params["flat_depth"],
        optimize_albedo=not params["no_albedo"],
    )
    result = refine(rig, observed, config, init_depth=init_depth, init_albedo=init_albedo)
    out = _out_dir(params)
    outputs = []
    for name, fld in (
        ("depth.dep", result.depth),
        ("albedo.alb", result.albedo),
        ("normals.nrm", result.normals),
        ("rendered.img", result.rendered),
    ):
        write_field(os.path.join(out, name), fld)
        outputs.append(name)
    rows = ["step,loss"]
    # repr of the Python float is the shortest digits that parse back exactly
    rows += [f"{i},{float(v)!r}" for i, v in enumerate(result.loss_trace)]
    _atomic_write_bytes(os.path.join(out, "loss_trace.csv"), ("\n".join(rows) + "\n").encode("ascii"))
    outputs.append("loss_trace.csv")
    return outputs


def _expect(fld, kind, what: str):
    if not isinstance(fld, kind):
        raise ValidationError(f"{what} file holds a {type(fld).__name__}")
    return fld


def _cmd_eval(params: dict) -> list:
    _require(params, "pred_depth", "gt_depth", "out")
    pred = _expect(read_field(params["pred_depth"]), DepthMap, "pred depth")
    gt = _expect(read_field(params["gt_depth"]), DepthMap, "gt depth")
    metrics = depth_metrics(
        pred,
        gt,
        align=not params["no_align"],
        pred_denominator=params["pred_denominator"],
    )
    row = metrics_to_dict(metrics)
    if (params["pred_normals"] is None) != (params["gt_normals"] is None):
        raise UsageError("--pred-normals and --gt-normals go together")
    if params["pred_normals"] is not None:
        pn = _expect(read_field(params["pred_normals"]), NormalMap, "pred normals")
        gn = _expect(read_field(params["gt_normals"]), NormalMap, "gt normals")
        row["normal_mae_deg"] = normal_mae(pn, gn)
    if (params["pred_image"] is None) != (params["gt_image"] is None):
        raise UsageError("--pred-image and --gt-image go together")
    if params["pred_image"] is not None:
        pi = _expect(read_field(params["pred_image"]), Image, "pred image")
        gi = _expect(read_field(params["gt_image"]), Image, "gt image")
        if pi.shape != gi.shape:
            raise ValidationError("image sizes differ")
        row["image_ssim"] = float(np.mean(ssim(pi, gi)))
        row["image_mae"] = float(np.mean(np.abs(pi.data - gi.data)))
    out = _out_dir(params)
    write_metrics_json(os.path.join(out, "metrics.json"), row)
    write_metrics_csv(os.path.join(out, "metrics.csv"), row)
    return ["metrics.json", "metrics.csv"]


def _cmd_uncertainty(params: dict) -> list:
    _require(params, "members", "gt", "out")
    if params["levels"] < 1:
        raise UsageError("--levels must be >= 1")
    if params["fractions"] < 2:
        raise UsageError("--fractions must be >= 2")
    member_maps = [
        _expect(read_field(p), DepthMap, f"member {i}")
        for i, p in enumerate(params["members"])
    ]
    shape = member_maps[0].shape
    for i, m in enumerate(member_maps):
        if m.shape != shape:
            raise ValidationError(f"member {i} size differs from member 0")
    mask = np.logical_and.reduce([m.mask for m in member_maps])
    means = np.stack([m.data for m in member_maps])
    outputs_ = EnsembleOutputs(means, np.zeros_like(means), mask)
    fused = fuse_ensemble(outputs_)
    gt = _expect(read_field(params["gt"]), DepthMap, "gt depth")
    sigma = np.sqrt(fused.var_total)
    n = params["levels"]
    levels = np.arange(1, n + 1, dtype=float) / n
    cal = auce(fused, gt, levels=levels, dist=params["dist"])
    frac = np.linspace(0.0, 0.99, params["fractions"])
    joint = fused.mask & gt.mask
    spar = ause(
        np.where(joint, sigma, 0.0),
        DepthMap(np.where(joint, fused.mean, 0.0)),
        DepthMap(np.where(joint, gt.data, 0.0)),
        fractions=frac,
    )
    out = _out_dir(params)
    write_field(os.path.join(out, "fused_mean.dep"), DepthMap(np.where(mask, fused.mean, 0.0)))
    # sigma rides in the depth container: one scalar per pixel, 0 = invalid
    write_field(os.path.join(out, "fused_sigma.dep"), DepthMap(np.where(mask, sigma, 0.0), mask=mask))
    write_calibration_csv(os.path.join(out, "calibration.csv"), cal)
    write_sparsification_csv(os.path.join(out, "sparsification.csv"), spar)
    return ["fused_mean.dep", "fused_sigma.dep", "calibration.csv", "sparsification.csv"]


def _cmd_icp(params: dict) -> list:
    _require(params, "source", "target", "out")
    if not (0.0 < params["percentile"] <= 1.0):
        raise UsageError("--percentile must lie in (0, 1]")
    source = read_ply(params["source"])
    target = read_ply(params["target"])
    if params["percentile"] < 1.0:
        source = filter_by_uncertainty(source, params["percentile"])
        if target.sigma is not None:
            target = filter_by_uncertainty(target, params["percentile"])
    config = IcpConfig(
        max_iterations=params["max_iterations"],
        convergence_tol=params["tol"],
        max_pair_dist=np.inf if params["max_dist"] is None else params["max_dist"],
    )
    result = icp_point_to_point(source, target, config)
    out = _out_dir(params)
    payload = {
        "R": [[float(v) for v in row] for row in result.pose.R],
        "t": [float(v) for v in result.pose.t],
        "rms": float(result.rms),
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
    }
    _write_json(os.path.join(out, "icp_result.json"), payload)
    return ["icp_result.json"]


_COMMANDS = {
    "render": _cmd_render,
    "refine": _cmd_refine,
    "eval": _cmd_eval,
    "uncertainty": _cmd_uncertainty,
    "icp": _cmd_icp,
}


def _cmd_replay(args: dict) -> int:
    path = args["manifest"]
    try:
        with open(path, "r", encoding="ascii") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad manifest JSON in {path}: {exc}") from exc
    command = manifest.get("command")
    if command not in _COMMANDS:
        raise ValidationError(f"manifest names unknown command {command!r}")
    params = dict(manifest.get("parameters", {}))
    if args.get("out") is not None:
        params["out"] = args["out"]
    outputs = _COMMANDS[command](params)
    _write_manifest(params["out"], command, params, outputs)
    return 0


def _run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags, 0 on --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.command == "replay":
        return _cmd_replay(vars(args))
    params = _merge_params(args.command, {k: v for k, v in vars(args).items() if k != "command"})
    outputs = _COMMANDS[args.command](params)
    _write_manifest(params["out"], args.command, params, outputs)
    return 0


def main(argv=None) -> int:
    try:
        return _run(argv)
    except LdkError as exc:
        print(f"ldk: {exc.category}: {exc}", file=sys.stderr)
        return _EXIT_BY_CATEGORY.get(exc.category, 1)
    except OSError as exc:
        print(f"ldk: io: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
