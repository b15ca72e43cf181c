"""Predictive uncertainty: ensemble fusion and its quality measures.

An ensemble of M depth solutions is fused per pixel into

    mean      = (1/M) sum_m d_m
    epistemic = (1/M) sum_m (mean - d_m)^2        (population variance)
    aleatoric = (1/M) sum_m s2_m                  (mean member noise)
    total     = epistemic + aleatoric

Calibration (AUCE): for confidence levels p the interval mean +- q_p covers
the truth with some empirical frequency; q_p comes from the Gaussian quantile
of sigma_total by default, or a Laplace quantile behind a flag.  The signed
area between nominal and empirical coverage is positive when intervals are
too narrow (overconfident), negative when too wide; the absolute area ignores
the direction.  The trapezoid runs over the level grid plus an implicit
(0, 0) anchor so the integral spans [0, 1].

Sparsification (AUSE): remove pixels most-uncertain-first and watch the RMSE
of what remains; an oracle removes largest-error-first instead.  Both curves
are normalized by the full-set RMSE and the area between them is the score
(0 = uncertainty ranks errors perfectly).  With all errors equal the two
curves coincide and the score is exactly 0.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import DomainError, ValidationError
from .imaging import DepthMap

DIST_NORMAL = "normal"
DIST_LAPLACE = "laplace"


@dataclass(frozen=True)
class EnsembleOutputs:
    """Per-member depth means and aleatoric variances on a shared mask."""

    means: np.ndarray  # (M, H, W)
    var_aleatoric: np.ndarray  # (M, H, W)
    mask: np.ndarray  # (H, W)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        var_a = np.asarray(self.var_aleatoric, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if means.ndim != 3 or means.shape[0] < 1:
            raise ValidationError("means must be (members, h, w) with members >= 1")
        if var_a.shape != means.shape:
            raise ValidationError("var_aleatoric shape must match means")
        if mask.shape != means.shape[1:]:
            raise ValidationError("mask shape must match the per-member fields")
        sel = var_a[:, mask]
        if sel.size and ((sel < 0).any() or not np.isfinite(sel).all()):
            raise ValidationError("aleatoric variance must be finite and >= 0")
        if not np.isfinite(means[:, mask]).all():
            raise ValidationError("member means must be finite at valid pixels")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "var_aleatoric", var_a)
        object.__setattr__(self, "mask", mask)

    @property
    def members(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class PredictiveDepth:
    """Fused prediction with its variance split."""

    mean: np.ndarray  # (H, W)
    var_epistemic: np.ndarray
    var_aleatoric: np.ndarray
    var_total: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        ve = np.asarray(self.var_epistemic, dtype=float)
        va = np.asarray(self.var_aleatoric, dtype=float)
        vt = np.asarray(self.var_total, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        for name, arr in (("var_epistemic", ve), ("var_aleatoric", va), ("var_total", vt)):
            if arr.shape != mean.shape:
                raise ValidationError(f"{name} shape must match mean")
            sel = arr[mask]
            if sel.size and ((sel < 0).any() or not np.isfinite(sel).all()):
                raise ValidationError(f"{name} must be finite and >= 0")
        if mask.shape != mean.shape:
            raise ValidationError("mask shape must match mean")
        if np.abs((ve + va - vt)[mask]).size and np.abs((ve + va - vt)[mask]).max() > 1e-9 * max(
            1.0, float(np.abs(vt[mask]).max()) if mask.any() else 1.0
        ):
            raise ValidationError("var_total must equal epistemic + aleatoric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var_epistemic", ve)
        object.__setattr__(self, "var_aleatoric", va)
        object.__setattr__(self, "var_total", vt)
        object.__setattr__(self, "mask", mask)

    @property
    def sigma_total(self) -> np.ndarray:
        return np.sqrt(self.var_total)


def fuse_ensemble(outputs: EnsembleOutputs) -> PredictiveDepth:
    """Population-form fusion (see module docstring)."""
    mean = outputs.means.mean(axis=0)
    var_epi = np.mean((outputs.means - mean) ** 2, axis=0)
    var_ale = outputs.var_aleatoric.mean(axis=0)
    mask = outputs.mask
    zero = ~mask
    mean = np.where(zero, 0.0, mean)
    var_epi = np.where(zero, 0.0, var_epi)
    var_ale = np.where(zero, 0.0, var_ale)
    return PredictiveDepth(
        mean=mean,
        var_epistemic=var_epi,
        var_aleatoric=var_ale,
        var_total=var_epi + var_ale,
        mask=mask,
    )


def outputs_from_refine(results: Sequence) -> EnsembleOutputs:
    """Ensemble container for refinement runs (point estimates: aleatoric 0)."""
    if not results:
        raise DomainError("need at least one refinement result")
    means = np.stack([r.depth.data for r in results])
    mask = results[0].depth.mask.copy()
    for r in results[1:]:
        mask &= r.depth.mask
    return EnsembleOutputs(means, np.zeros_like(means), mask)


@dataclass(frozen=True)
class CalibrationCurve:
    levels: np.ndarray
    empirical: np.ndarray
    auce_signed: float
    auce_abs: float


@dataclass(frozen=True)
class SparsificationCurve:
    fractions: np.ndarray
    by_uncertainty: np.ndarray  # normalized RMSE after removing most-uncertain
    by_error: np.ndarray  # oracle: removing largest-error
    ause: float


def _quantile_factor(levels: np.ndarray, dist: str) -> np.ndarray:
    if dist == DIST_NORMAL:
        return ndtri((1.0 + levels) / 2.0)
    if dist == DIST_LAPLACE:
        # Laplace with variance sigma^2 has scale sigma/sqrt(2);
        # P(|X - mu| <= q) = 1 - exp(-q / b)  =>  q = -b ln(1 - p).
        return -np.log(1.0 - levels) / np.sqrt(2.0)
    raise DomainError(f"unknown interval distribution {dist!r}")


def auce(
    pred: PredictiveDepth,
    gt: DepthMap,
    levels: Optional[np.ndarray] = None,
    dist: str = DIST_NORMAL,
) -> CalibrationCurve:
    """Area between nominal and empirical interval coverage."""
    if levels is None:
        levels = np.arange(1, 101, dtype=float) / 100.0
    levels = np.asarray(levels, dtype=float)
    if levels.ndim != 1 or levels.size < 1:
        raise DomainError("levels must be a non-empty 1-d grid")
    if (levels <= 0).any() or (levels > 1).any() or (np.diff(levels) <= 0).any():
        raise DomainError("levels must increase strictly within (0, 1]")
    if dist == DIST_LAPLACE and levels[-1] >= 1.0:
        levels = levels.copy()
        levels[-1] = np.nextafter(1.0, 0.0)  # Laplace quantile diverges at 1
    if pred.mean.shape != gt.shape:
        raise ValidationError("prediction and ground truth sizes differ")
    use = pred.mask & gt.mask
    if not use.any():
        raise DomainError("no jointly valid pixels")
    resid = np.abs(gt.data[use] - pred.mean[use])
    sigma = np.sqrt(pred.var_total[use])
    factors = _quantile_factor(levels, dist)
    # (K, n) coverage table; fine at the scales involved.  A zero sigma is a
    # point mass: its interval has width 0 at every level (inf * 0 -> nan
    # would otherwise leak in at the p = 1 node).
    with np.errstate(invalid="ignore"):
        width = factors[:, None] * sigma[None, :]
    width = np.where(np.isnan(width), 0.0, width)
    covered = resid[None, :] <= width
    empirical = covered.mean(axis=1)
    nodes = np.concatenate([[0.0], levels])
    emp_nodes = np.concatenate([[0.0], empirical])
    gap = nodes - emp_nodes
    signed = float(np.trapezoid(gap, nodes))
    absolute = float(np.trapezoid(np.abs(gap), nodes))
    return CalibrationCurve(levels, empirical, signed, absolute)


def ause(
    uncertainty: np.ndarray,
    pred: DepthMap,
    gt: DepthMap,
    fractions: Optional[np.ndarray] = None,
) -> SparsificationCurve:
    """Area between the sparsification curve and its oracle."""
    if fractions is None:
        fractions = np.linspace(0.0, 0.99, 100)
    fractions = np.asarray(fractions, dtype=float)
    if fractions.ndim != 1 or fractions.size < 2:
        raise DomainError("fractions must be a 1-d grid with >= 2 points")
    if (fractions < 0).any() or (fractions >= 1).any() or (np.diff(fractions) <= 0).any():
        raise DomainError("fractions must increase strictly within [0, 1)")
    if pred.shape != gt.shape:
        raise ValidationError("prediction and ground truth sizes differ")
    unc = np.asarray(uncertainty, dtype=float)
    if unc.shape != pred.shape:
        raise ValidationError("uncertainty shape must match depth")
    use = pred.mask & gt.mask
    if not use.any():
        raise DomainError("no jointly valid pixels")
    err = np.abs(pred.data[use] - gt.data[use])
    u = unc[use]
    if not np.isfinite(u).all():
        raise DomainError("uncertainty must be finite at valid pixels")
    n = err.size
    sq = err**2
    rmse0 = float(np.sqrt(sq.mean()))
    if rmse0 == 0.0:
        ones = np.ones_like(fractions)
        return SparsificationCurve(fractions, ones, ones, 0.0)

    def curve(order):
        # order: removal priority, first removed first; prefix sums give the
        # retained RMSE after removing k points in one vectorized sweep.
        s = sq[order]
        suffix = np.concatenate([[0.0], np.cumsum(s[::-1])])[::-1]
        ks = np.ceil(fractions * n).astype(int)
        ks = np.minimum(ks, n - 1)
        retained = n - ks
        return np.sqrt(suffix[ks] / retained) / rmse0

    order_unc = np.argsort(-u, kind="stable")
    order_err = np.argsort(-sq, kind="stable")
    cu = curve(order_unc)
    ce = curve(order_err)
    area = float(np.trapezoid(cu - ce, fractions))
    return SparsificationCurve(fractions, cu, ce, area)


def write_calibration_csv(path: str | os.PathLike, curve: CalibrationCurve) -> None:
    rows = ["level,empirical"]
    for lv, em in zip(curve.levels, curve.empirical):
        rows.append("%.10g,%.10g" % (lv, em))
    rows.append("# auce_signed,%.10g" % curve.auce_signed)
    rows.append("# auce_abs,%.10g" % curve.auce_abs)
    _write_text(path, "\n".join(rows) + "\n")


def write_sparsification_csv(path: str | os.PathLike, curve: SparsificationCurve) -> None:
    rows = ["fraction,by_uncertainty,by_error"]
    for f, a, b in zip(curve.fractions, curve.by_uncertainty, curve.by_error):
        rows.append("%.10g,%.10g,%.10g" % (f, a, b))
    rows.append("# ause,%.10g" % curve.ause)
    _write_text(path, "\n".join(rows) + "\n")


def _write_text(path, text: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
