"""Depth and normal accuracy metrics.

Monocular shading cues fix depth only up to a global scale, so evaluation
aligns the prediction by the ratio of medians before scoring unless told not
to.  All statistics run over pixels valid in both maps.

AbsRel and SqRel divide by the ground truth.  Dividing by the prediction
instead is available behind ``pred_denominator`` for comparability with
published tables that use that convention.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, ValidationError
from .imaging import DepthMap, NormalMap


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    mae: float
    medae: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    scale: float  # median-alignment factor applied (1.0 when align=False)


def _joint(pred: DepthMap, gt: DepthMap):
    if pred.shape != gt.shape:
        raise ValidationError("prediction and ground truth sizes differ")
    use = pred.mask & gt.mask
    if not use.any():
        raise DomainError("no jointly valid pixels")
    return pred.data[use], gt.data[use], int(use.sum())


def median_scale(pred: DepthMap, gt: DepthMap) -> float:
    """Scale s with median(s * pred) = median(gt) over jointly valid pixels."""
    p, g, _ = _joint(pred, gt)
    mp = float(np.median(p))
    if mp <= 0:
        raise DomainError("prediction median must be positive")
    return float(np.median(g)) / mp


def depth_metrics(
    pred: DepthMap,
    gt: DepthMap,
    align: bool = True,
    pred_denominator: bool = False,
) -> DepthMetrics:
    p, g, n = _joint(pred, gt)
    s = median_scale(pred, gt) if align else 1.0
    p = p * s
    err = p - g
    abs_err = np.abs(err)
    den = p if pred_denominator else g
    ratio = np.maximum(g / p, p / g)
    return DepthMetrics(
        abs_rel=float(np.mean(abs_err / den)),
        sq_rel=float(np.mean(err**2 / den)),
        rmse=float(np.sqrt(np.mean(err**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        mae=float(np.mean(abs_err)),
        medae=float(np.median(abs_err)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        n_pixels=n,
        scale=float(s),
    )


def normal_mae(pred: NormalMap, gt: NormalMap) -> float:
    """Mean angular error in degrees over jointly valid pixels."""
    if pred.shape != gt.shape:
        raise ValidationError("normal map sizes differ")
    use = pred.mask & gt.mask
    if not use.any():
        raise DomainError("no jointly valid pixels")
    dots = np.sum(pred.data[use] * gt.data[use], axis=-1)
    ang = np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))
    return float(np.mean(ang))


def metrics_to_dict(metrics: DepthMetrics) -> dict:
    return asdict(metrics)


def write_metrics_json(path: str | os.PathLike, metrics: dict) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_metrics_csv(path: str | os.PathLike, metrics: dict) -> None:
    keys = sorted(metrics)
    rows = [",".join(keys), ",".join("%.10g" % float(metrics[k]) for k in keys)]
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows))
        fh.write("\n")
    os.replace(tmp, path)
