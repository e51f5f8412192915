"""Median scaling and the seven standard depth-assessment metrics.

Self-supervision recovers depth only up to scale, so predictions are rescaled
by median(gt/pred) per frame before comparison. AbsRel uses |p - g|/g.
Dataset-level aggregation is a pixel-weighted mean: it equals computing the
metrics over the concatenation of every frame's scaled pixels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_CLAMP = (0.1, 80.0)

METRIC_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    scale_factor: float  # median applied (mean of per-frame factors at dataset level)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def row(self) -> tuple:
        return (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.delta1, self.delta2, self.delta3)


def median_scale(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray | None = None):
    """Scale pred by median(gt/pred) over valid pixels; returns (scaled, factor)."""
    if valid_mask is None:
        valid_mask = np.ones(pred.shape, dtype=bool)
    if not valid_mask.any():
        raise ValueError("median_scale: empty valid set")
    p = pred[valid_mask]
    g = gt[valid_mask]
    if np.any(g <= 0) or np.any(p <= 0):
        raise ValueError("median_scale requires positive depths on the valid set")
    factor = float(np.median(g / p))
    return pred * factor, factor


class _Accumulator:
    """Pixel-weighted running sums; order-independent by construction."""

    def __init__(self):
        self.sums = np.zeros(7, dtype=np.float64)
        self.n = 0
        self.scale_sum = 0.0
        self.frames = 0

    def add(self, pred: np.ndarray, gt: np.ndarray, scale: float = 1.0) -> None:
        d = pred - gt
        ratio = np.maximum(pred / gt, gt / pred)
        self.sums += np.array([
            np.sum(np.abs(d) / gt),
            np.sum(d * d / gt),
            np.sum(d * d),
            np.sum((np.log(pred) - np.log(gt)) ** 2),
            np.sum(ratio < 1.25),
            np.sum(ratio < 1.25 ** 2),
            np.sum(ratio < 1.25 ** 3),
        ])
        self.n += pred.size
        self.scale_sum += scale
        self.frames += 1

    def report(self) -> MetricsReport:
        if self.n == 0:
            raise ValueError("no pixels accumulated")
        s = self.sums / self.n
        return MetricsReport(s[0], s[1], float(np.sqrt(s[2])), float(np.sqrt(s[3])),
                             s[4], s[5], s[6], self.n,
                             self.scale_sum / max(self.frames, 1))


def compute_metrics(pred: np.ndarray, gt: np.ndarray,
                    clamp_range: tuple = DEFAULT_CLAMP,
                    valid_mask: np.ndarray | None = None,
                    scale_factor: float = 1.0) -> MetricsReport:
    """Metrics of (already scaled) pred against gt on the valid set.

    Predictions are clamped to clamp_range before comparison; gt must be
    positive on the valid set.
    """
    if valid_mask is None:
        valid_mask = np.ones(pred.shape, dtype=bool)
    p = np.clip(pred[valid_mask].astype(np.float64), clamp_range[0], clamp_range[1])
    g = gt[valid_mask].astype(np.float64)
    if p.size == 0:
        raise ValueError("compute_metrics: empty valid set")
    if np.any(g <= 0) or np.any(p <= 0):
        raise ValueError("compute_metrics requires positive depths")
    acc = _Accumulator()
    acc.add(p, g, scale_factor)
    return acc.report()


def evaluate_frames(frame_iter, clamp_range: tuple = DEFAULT_CLAMP,
                    per_frame_mean: bool = False):
    """Aggregate (pred, gt, valid) frames with per-frame median scaling.

    Returns (dataset MetricsReport, list of per-frame MetricsReport).
    Pixel-weighted aggregation by default; per_frame_mean switches to an
    unweighted mean of per-frame metric values.
    """
    acc = _Accumulator()
    per_frame = []
    for pred, gt, valid in frame_iter:
        scaled, factor = median_scale(pred, gt, valid)
        rep = compute_metrics(scaled, gt, clamp_range, valid, factor)
        per_frame.append(rep)
        p = np.clip(scaled[valid].astype(np.float64), clamp_range[0], clamp_range[1])
        acc.add(p, gt[valid].astype(np.float64), factor)
    if per_frame_mean:
        if not per_frame:
            raise ValueError("no frames evaluated")
        rows = np.array([r.row() for r in per_frame])
        mean = rows.mean(axis=0)
        total = MetricsReport(*mean, n_pixels=sum(r.n_pixels for r in per_frame),
                              scale_factor=float(np.mean([r.scale_factor for r in per_frame])))
    else:
        total = acc.report()
    return total, per_frame


def format_table(rows: dict) -> str:
    """Aligned text table; rows maps a label to a MetricsReport."""
    header = ("name", "AbsRel", "SqRel", "RMSE", "RMSE_log",
              "d<1.25", "d<1.25^2", "d<1.25^3")
    lines = ["  ".join(f"{h:>10}" for h in header)]
    for name, rep in rows.items():
        vals = "  ".join(f"{v:>10.4f}" for v in rep.row())
        lines.append(f"{name:>10}  {vals}")
    return "\n".join(lines)
