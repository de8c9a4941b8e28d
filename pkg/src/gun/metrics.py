"""Segmentation quality measurement.

Confusion accumulation and mean IoU, an exact Euclidean distance transform
to the nearest differing-class pixel, and boundary-band (trimap) mIoU
curves built from per-radius masks over that distance map. Pixels labeled
IGNORE_LABEL never enter bands or confusion counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import MetricUndefinedError, ShapeError

IGNORE_LABEL = 255


class ConfusionMatrix:
    """C x C integer counts; entry (g, p) = pixels of truth g predicted p."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ShapeError("confusion matrix needs at least 2 classes")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray,
            mask: Optional[np.ndarray] = None) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        valid = gt != IGNORE_LABEL
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != gt.shape:
                raise ShapeError(f"mask shape {mask.shape} != gt shape {gt.shape}")
            valid = valid & mask
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        c = self.num_classes
        if g.size:
            if g.min() < 0 or g.max() >= c:
                raise ShapeError(f"gt class outside [0, {c}) and not IGNORE_LABEL")
            if p.min() < 0 or p.max() >= c:
                raise ShapeError(f"pred class outside [0, {c})")
            self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    @property
    def evaluated_pixels(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                         mask: Optional[np.ndarray] = None,
                         conf: Optional[ConfusionMatrix] = None) -> ConfusionMatrix:
    """Add one prediction/truth pair into conf (a new matrix when omitted)."""
    if conf is None:
        conf = ConfusionMatrix(num_classes)
    elif conf.num_classes != num_classes:
        raise ShapeError("existing matrix has a different class count")
    return conf.add(pred, gt, mask)


def mean_iou(conf: ConfusionMatrix) -> Tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the class never occurs) and their mean.

    IoU_c = TP / (TP + FP + FN); classes with an empty denominator are
    excluded from the mean. Raises MetricUndefinedError if every class is
    excluded.
    """
    counts = conf.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    included = denom > 0
    per_class = np.full(conf.num_classes, np.nan)
    per_class[included] = tp[included] / denom[included]
    if not included.any():
        raise MetricUndefinedError("no class has any evaluated pixel")
    return per_class, float(per_class[included].mean())


# ---------------------------------------------------------------------------
# exact Euclidean distance transform


def _rowwise_site_dist(sites: np.ndarray) -> np.ndarray:
    """Per row: distance (in columns) to the nearest True entry, inf if none."""
    w = sites.shape[1]
    cols = np.arange(w, dtype=np.float64)
    pos = np.where(sites, cols, -np.inf)
    left = np.maximum.accumulate(pos, axis=1)
    d_left = cols - left  # inf where no site yet
    pos = np.where(sites, cols, np.inf)
    right = np.minimum.accumulate(pos[:, ::-1], axis=1)[:, ::-1]
    d_right = right - cols
    return np.minimum(d_left, d_right)


def _envelope_pass(fsq: np.ndarray) -> np.ndarray:
    """1-D squared-distance transform d[i] = min_j (i-j)^2 + fsq[j].

    Lower envelope of parabolas over finite offsets fsq.
    """
    n = fsq.shape[0]
    d = np.empty(n)
    v = np.empty(n, dtype=np.intp)   # parabola apexes
    z = np.empty(n + 1)              # envelope breakpoints
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((fsq[q] + q * q) - (fsq[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        while s <= z[k]:
            k -= 1
            s = ((fsq[q] + q * q) - (fsq[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) * (q - v[k]) + fsq[v[k]]
    return d


def _edt_squared(sites: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest True pixel.

    Separable pass: per-row nearest-site distance, then a per-column
    lower-envelope pass over the squared row distances. Rows without any
    site carry a sentinel larger than any achievable squared distance; a
    result at or above it means no site is reachable (mapped back to inf).
    """
    h, w = sites.shape
    big = float(h * h + w * w + 1)
    row_d = _rowwise_site_dist(sites)
    row_sq = np.where(np.isfinite(row_d), row_d * row_d, big)
    out = np.empty_like(row_sq)
    for x in range(w):
        out[:, x] = _envelope_pass(row_sq[:, x])
    return np.where(out >= big, np.inf, out)


@dataclass
class DistanceMap:
    """Per-pixel Euclidean distance to the nearest differing-class pixel."""

    values: np.ndarray  # float64 [H, W], +inf where no differing pixel exists
    has_boundaries: bool


def boundary_distance_map(gt: np.ndarray) -> DistanceMap:
    """Distance from each pixel to the nearest pixel of a different class.

    Computed per class (sites = non-ignore pixels of any other class) and
    assembled through the class masks. Ignore pixels are transparent: they
    are neither sources nor targets and end up at +inf. A uniform map has
    no boundary and comes back all-inf, flagged via has_boundaries.
    """
    gt = np.asarray(gt)
    if gt.ndim != 2:
        raise ShapeError(f"ground truth must be 2-D, got shape {gt.shape}")
    values = np.full(gt.shape, np.inf)
    evaluated = gt != IGNORE_LABEL
    for c in np.unique(gt[evaluated]):
        own = gt == c
        sites = evaluated & ~own
        if not sites.any():
            continue
        dist_sq = _edt_squared(sites)
        values[own] = np.sqrt(dist_sq[own])
    return DistanceMap(values=values, has_boundaries=bool(np.isfinite(values).any()))


# ---------------------------------------------------------------------------
# trimap curves


@dataclass
class TrimapPoint:
    radius: float
    miou: float
    evaluated_pixels: int
    per_class: np.ndarray


@dataclass
class TrimapCurve:
    points: List[TrimapPoint] = field(default_factory=list)
    skipped_radii: List[float] = field(default_factory=list)


def _check_radii(radii: Sequence[float]) -> List[float]:
    radii = [float(r) for r in radii]
    if not radii or any(r <= 0 for r in radii):
        raise ShapeError("radii must be positive")
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ShapeError("radii must be strictly increasing")
    return radii


def trimap_miou_curve(pred: np.ndarray, gt: np.ndarray,
                      radii: Sequence[float], num_classes: int) -> TrimapCurve:
    """mIoU restricted to pixels within each radius of a class boundary.

    One distance map serves every radius; bands are nested since the mask
    is distance <= r. Radii whose band holds no evaluated pixel are
    flagged and skipped.
    """
    radii = _check_radii(radii)
    dmap = boundary_distance_map(gt)
    curve = TrimapCurve()
    for r in radii:
        conf = accumulate_confusion(pred, gt, num_classes, mask=dmap.values <= r)
        if conf.evaluated_pixels == 0:
            curve.skipped_radii.append(r)
            continue
        per_class, miou = mean_iou(conf)
        curve.points.append(TrimapPoint(radius=r, miou=miou,
                                        evaluated_pixels=conf.evaluated_pixels,
                                        per_class=per_class))
    return curve


def trimap_curve_dataset(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                         radii: Sequence[float], num_classes: int) -> TrimapCurve:
    """Trimap curve accumulated over many prediction/truth pairs."""
    radii = _check_radii(radii)
    confs = [ConfusionMatrix(num_classes) for _ in radii]
    for pred, gt in zip(preds, gts):
        dmap = boundary_distance_map(gt)
        for conf, r in zip(confs, radii):
            conf.add(pred, gt, mask=dmap.values <= r)
    curve = TrimapCurve()
    for conf, r in zip(confs, radii):
        if conf.evaluated_pixels == 0:
            curve.skipped_radii.append(r)
            continue
        per_class, miou = mean_iou(conf)
        curve.points.append(TrimapPoint(radius=r, miou=miou,
                                        evaluated_pixels=conf.evaluated_pixels,
                                        per_class=per_class))
    return curve
