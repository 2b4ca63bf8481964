"""Segmentation quality metrics.

Binary-mask metrics (Dice, IoU, sensitivity, F-beta) plus three saliency-style
map metrics: the weighted F-measure, the structure measure and the mean
enhanced-alignment measure.  Probability maps are expected in ``[0, 1]`` and
ground truths must be binary.

Conventions (shared with the independent test oracles):

* empty-vs-empty comparisons score 1.0 for dice/iou/sensitivity; an empty
  ground truth scores 1.0 for the weighted F-measure iff the prediction is
  all-zero, else 0.0;
* divisions use exact-zero guards instead of additive epsilons so a perfect
  prediction scores exactly 1.0;
* the enhanced-alignment sweep uses the 256 integer thresholds ``t/256``
  (``t = 0..255``) with a strict ``>`` comparison, so a binary map is
  reproduced at every threshold;
* structure-measure region splits follow the original one-based centroid
  rounding (half away from zero), zero-area quadrants contribute nothing, and
  single-pixel regions have zero variance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .core import ShapeMismatchError

METRIC_COLUMNS = ("dice", "iou", "sen", "f_beta", "f_beta_w", "s_alpha", "e_phi_mn")

E_MEASURE_LEVELS = 256


def _as_prob_map(pred: object, name: str = "pred") -> np.ndarray:
    arr = np.asarray(pred, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name}: expected a 2-D map, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
    return arr


def _as_binary(mask: object, name: str = "gt") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name}: expected a 2-D mask, got shape {arr.shape}")
    if arr.dtype != bool:
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"{name} must be binary, found values {vals[:8]}")
        arr = arr.astype(bool)
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# binary-mask metrics
# ---------------------------------------------------------------------------


def dice_score(pred: object, gt: object) -> float:
    """Dice overlap 2|P∩G| / (|P| + |G|); two empty masks score 1.0."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt)
    _check_same_shape(p, g)
    inter = float(np.logical_and(p, g).sum())
    total = float(p.sum() + g.sum())
    if total == 0.0:
        return 1.0
    return 2.0 * inter / total


def iou_score(pred: object, gt: object) -> float:
    """Jaccard overlap |P∩G| / |P∪G|; two empty masks score 1.0."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt)
    _check_same_shape(p, g)
    union = float(np.logical_or(p, g).sum())
    if union == 0.0:
        return 1.0
    return float(np.logical_and(p, g).sum()) / union


def sensitivity(pred: object, gt: object) -> float:
    """Recall TP / (TP + FN); vacuously 1.0 when the ground truth is empty."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt)
    _check_same_shape(p, g)
    gt_area = float(g.sum())
    if gt_area == 0.0:
        return 1.0
    return float(np.logical_and(p, g).sum()) / gt_area


def f_beta(pred: object, gt: object, beta_sq: float = 0.3) -> float:
    """F-measure ``(1 + b2) * P * R / (b2 * P + R)`` with zero-guard.

    Precision of an empty prediction is 0; recall of an empty ground truth is
    vacuously 1; two empty masks score 1.0; a zero denominator scores 0.
    """
    p = _as_binary(pred, "pred")
    g = _as_binary(gt)
    _check_same_shape(p, g)
    tp = float(np.logical_and(p, g).sum())
    p_area = float(p.sum())
    g_area = float(g.sum())
    if p_area == 0.0 and g_area == 0.0:
        return 1.0
    precision = tp / p_area if p_area > 0 else 0.0
    recall = tp / g_area if g_area > 0 else 1.0
    denom = beta_sq * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + beta_sq) * precision * recall / denom


# ---------------------------------------------------------------------------
# weighted F-measure
# ---------------------------------------------------------------------------


def _fspecial_gaussian(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = (size - 1) / 2.0
    y, x = np.mgrid[-half : half + 1, -half : half + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return k / k.sum()


def weighted_f_beta(pred: object, gt: object, beta_sq: float = 1.0) -> float:
    """Boundary-aware weighted F-measure of a probability map.

    Errors at false negatives are replaced by the error at the nearest
    foreground pixel, locally averaged with a 7x7 Gaussian (sigma 5), and
    errors outside the object are discounted with an exponential of the
    distance to the object.  An empty ground truth scores 1.0 only for an
    all-zero prediction.
    """
    fm = _as_prob_map(pred)
    g = _as_binary(gt)
    _check_same_shape(fm, g)
    if not g.any():
        return 1.0 if fm.sum() == 0.0 else 0.0

    dst, idx = ndimage.distance_transform_edt(~g, return_indices=True)
    err = np.abs(fm - g.astype(np.float64))
    err_t = err.copy()
    err_t[~g] = err[idx[0][~g], idx[1][~g]]
    ea = ndimage.correlate(err_t, _fspecial_gaussian(), mode="constant", cval=0.0)
    min_e_ea = err.copy()
    swap = g & (ea < err)
    min_e_ea[swap] = ea[swap]

    b = np.ones_like(fm)
    b[~g] = 2.0 - np.exp(math.log(0.5) / 5.0 * dst[~g])
    ew = min_e_ea * b

    gt_area = float(g.sum())
    tp_w = gt_area - float(ew[g].sum())
    fp_w = float(ew[~g].sum())
    recall = 1.0 - float(ew[g].mean())
    precision = tp_w / (tp_w + fp_w) if (tp_w + fp_w) > 0 else 0.0
    denom = recall + beta_sq * precision
    if denom == 0.0:
        return 0.0
    return (1.0 + beta_sq) * recall * precision / denom


# ---------------------------------------------------------------------------
# structure measure
# ---------------------------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    """2x / (x^2 + 1 + sigma_x) on the masked values (sample std)."""
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma)


def _region_centroid(g: np.ndarray) -> tuple[int, int]:
    """One-based (X, Y) centroid with half-away-from-zero rounding."""
    rows, cols = np.nonzero(g)
    x = int(math.floor(float(cols.mean()) + 1.0 + 0.5))
    y = int(math.floor(float(rows.mean()) + 1.0 + 0.5))
    return x, y


def _region_ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x = float(p.mean())
    y = float(g.mean())
    if n > 1:
        sig_x = float(((p - x) ** 2).sum()) / (n - 1)
        sig_y = float(((g - y) ** 2).sum()) / (n - 1)
        sig_xy = float(((p - x) * (g - y)).sum()) / (n - 1)
    else:
        sig_x = sig_y = sig_xy = 0.0
    alpha = 4.0 * x * y * sig_xy
    beta = (x * x + y * y) * (sig_x + sig_y)
    if alpha != 0.0:
        return alpha / beta
    if beta == 0.0:
        return 1.0
    return 0.0


def s_measure(pred: object, gt: object, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object similarity + (1-alpha) * region SSIM.

    Degenerate ground truths fall back to intensity agreement: ``1 -
    mean(pred)`` for an empty ground truth and ``mean(pred)`` for a full one.
    The result is clamped below at 0.
    """
    fm = _as_prob_map(pred)
    g = _as_binary(gt)
    _check_same_shape(fm, g)
    mu = float(g.mean())
    if mu == 0.0:
        return 1.0 - float(fm.mean())
    if mu == 1.0:
        return float(fm.mean())

    s_obj = mu * _object_score(fm[g]) + (1.0 - mu) * _object_score(1.0 - fm[~g])

    gx, gy = _region_centroid(g)
    h, w = g.shape
    area = float(h * w)
    quads = (
        (np.s_[0:gy, 0:gx], gx * gy),
        (np.s_[0:gy, gx:w], (w - gx) * gy),
        (np.s_[gy:h, 0:gx], gx * (h - gy)),
        (np.s_[gy:h, gx:w], (w - gx) * (h - gy)),
    )
    s_reg = 0.0
    for sl, npx in quads:
        if npx <= 0:
            continue
        s_reg += (npx / area) * _region_ssim(fm[sl], g[sl].astype(np.float64))

    return max(alpha * s_obj + (1.0 - alpha) * s_reg, 0.0)


# ---------------------------------------------------------------------------
# enhanced-alignment measure
# ---------------------------------------------------------------------------


def _e_measure_binary(pred_bin: np.ndarray, g: np.ndarray) -> float:
    if not g.any():
        enhanced = 1.0 - pred_bin
    elif g.all():
        enhanced = pred_bin
    else:
        g_align = g.astype(np.float64) - g.mean()
        f_align = pred_bin - pred_bin.mean()
        denom = g_align * g_align + f_align * f_align
        align = np.zeros_like(denom)
        nz = denom > 0
        align[nz] = 2.0 * g_align[nz] * f_align[nz] / denom[nz]
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def e_measure(pred: object, gt: object) -> float:
    """Mean enhanced-alignment measure over 256 integer threshold levels.

    The map is binarized at ``t / 256`` for ``t = 0..255`` with a strict
    ``>``; each binary map is scored by the enhanced alignment between the
    mean-centered maps and the scores are averaged.
    """
    fm = _as_prob_map(pred)
    g = _as_binary(gt)
    _check_same_shape(fm, g)
    scores = [
        _e_measure_binary((fm > t / E_MEASURE_LEVELS).astype(np.float64), g)
        for t in range(E_MEASURE_LEVELS)
    ]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# dataset-level evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricConfig:
    threshold: float = 0.5
    f_beta_sq: float = 0.3
    weighted_beta_sq: float = 1.0
    s_alpha: float = 0.5


@dataclass(frozen=True)
class SampleMetrics:
    sample_id: str
    values: dict[str, float]

    def row(self) -> list:
        return [self.sample_id] + [self.values[c] for c in METRIC_COLUMNS]


@dataclass(frozen=True)
class MetricReport:
    """Per-sample metric table plus the per-metric means."""

    samples: tuple[SampleMetrics, ...]
    mean: dict[str, float]
    config: MetricConfig = field(default_factory=MetricConfig)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", *METRIC_COLUMNS])
            for s in self.samples:
                writer.writerow([s.sample_id] + [f"{s.values[c]:.8f}" for c in METRIC_COLUMNS])
            writer.writerow(["mean"] + [f"{self.mean[c]:.8f}" for c in METRIC_COLUMNS])

    def to_json(self, path: str | Path | None = None) -> str:
        payload = {
            "config": vars(self.config).copy(),
            "samples": [{"sample_id": s.sample_id, **s.values} for s in self.samples],
            "mean": self.mean,
        }
        text = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def score_pair(pred: object, gt: object, config: MetricConfig = MetricConfig()) -> dict[str, float]:
    """All metric columns for one probability map / ground-truth pair."""
    fm = _as_prob_map(pred)
    g = _as_binary(gt)
    _check_same_shape(fm, g)
    hard = fm >= config.threshold
    return {
        "dice": dice_score(hard, g),
        "iou": iou_score(hard, g),
        "sen": sensitivity(hard, g),
        "f_beta": f_beta(hard, g, beta_sq=config.f_beta_sq),
        "f_beta_w": weighted_f_beta(fm, g, beta_sq=config.weighted_beta_sq),
        "s_alpha": s_measure(fm, g, alpha=config.s_alpha),
        "e_phi_mn": e_measure(fm, g),
    }


def evaluate_dataset(
    predictions: Mapping[str, object],
    ground_truths: Mapping[str, object],
    config: MetricConfig = MetricConfig(),
) -> MetricReport:
    """Score every prediction against its ground truth, sorted by sample id.

    The two mappings must have identical key sets; a mismatch is an error
    rather than a silent intersection.
    """
    missing = sorted(set(ground_truths) ^ set(predictions))
    if missing:
        raise KeyError(f"prediction/ground-truth ids do not match; offending ids: {missing[:8]}")
    samples = []
    for sid in sorted(predictions):
        values = score_pair(predictions[sid], ground_truths[sid], config)
        samples.append(SampleMetrics(sample_id=str(sid), values=values))
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    mean = {
        c: float(np.mean([s.values[c] for s in samples])) for c in METRIC_COLUMNS
    }
    return MetricReport(samples=tuple(samples), mean=mean, config=config)
