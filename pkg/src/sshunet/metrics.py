"""Per-class Dice and normalized surface Dice on integer label volumes."""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArgumentError

DEFAULT_TAU_MM = 1.0


def _check_pair(y, yhat):
    y, yhat = np.asarray(y), np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ArgumentError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    return y, yhat


def dice(y, yhat, k):
    """``2 |Y & Yhat| / (|Y| + |Yhat|)`` for class ``k``; 1.0 if both are empty."""
    y, yhat = _check_pair(y, yhat)
    a, b = y == k, yhat == k
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def boundary(mask):
    """Foreground voxels with at least one 6-neighbour outside the mask (volume border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    p = np.pad(mask, 1)
    interior = mask.copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(p, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def nsd(y, yhat, k, tau_mm=DEFAULT_TAU_MM, spacing=(1.0, 1.0, 1.0)):
    """Fraction of both boundaries lying within ``tau_mm`` of the other boundary.

    Distances are exact brute-force Euclidean distances between boundary
    voxel centres in millimetres. Both empty -> 1.0, one empty -> 0.0.
    """
    y, yhat = _check_pair(y, yhat)
    if tau_mm < 0:
        raise ArgumentError("tau_mm must be >= 0")
    sp = np.asarray(spacing, dtype=np.float64)
    by = np.argwhere(boundary(y == k)) * sp
    bh = np.argwhere(boundary(yhat == k)) * sp
    if len(by) == 0 and len(bh) == 0:
        return 1.0
    if len(by) == 0 or len(bh) == 0:
        return 0.0
    hits = (kernels.min_distances(bh, by) <= tau_mm).sum() + (kernels.min_distances(by, bh) <= tau_mm).sum()
    return float(hits) / (len(bh) + len(by))


@dataclass
class MetricReport:
    """Per-class scores; ``None`` marks a class absent from both volumes."""

    dsc: dict = field(default_factory=dict)
    nsd: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    @staticmethod
    def _macro(d):
        vals = [v for v in d.values() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_dsc(self):
        return self._macro(self.dsc)

    @property
    def mean_nsd(self):
        return self._macro(self.nsd)


def evaluate_case(y, yhat, num_classes, tau_mm=DEFAULT_TAU_MM, spacing=(1.0, 1.0, 1.0), with_nsd=True):
    """Scores for foreground classes ``1..K-1``; classes empty in both volumes are left out."""
    y, yhat = _check_pair(y, yhat)
    rep = MetricReport()
    for k in range(1, num_classes):
        present = bool((y == k).any() or (yhat == k).any())
        rep.counts[k] = int((y == k).sum())
        rep.dsc[k] = dice(y, yhat, k) if present else None
        rep.nsd[k] = (nsd(y, yhat, k, tau_mm, spacing) if present else None) if with_nsd else None
    return rep


def aggregate(reports):
    """Per-class mean over cases (skipping cases where the class is absent), then macro mean."""
    out = MetricReport()
    classes = sorted({k for r in reports for k in r.dsc})
    for k in classes:
        for src, dst in ((lambda r: r.dsc, out.dsc), (lambda r: r.nsd, out.nsd)):
            vals = [src(r).get(k) for r in reports]
            vals = [v for v in vals if v is not None]
            dst[k] = float(np.mean(vals)) if vals else None
        out.counts[k] = sum(r.counts.get(k, 0) for r in reports)
    return out
