"""Saliency evaluation: MAE, max F-measure, S-measure and E-measure.

Predictions are float maps in [0, 1]; ground truth is binary. A prediction
pixel counts as foreground at threshold ``t`` when ``P >= t`` and ``P > 0``,
so an all-zero map never predicts any foreground, not even at ``t = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EM_MODES = ("adaptive", "max", "mean")


@dataclass(frozen=True)
class MetricConfig:
    beta2: float = 0.3
    alpha: float = 0.5
    n_thresholds: int = 256
    eps: float = 1e-12
    em_threshold_mode: str = "adaptive"

    def __post_init__(self):
        if self.beta2 <= 0:
            raise ValueError(f"beta2 must be positive, got {self.beta2}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.em_threshold_mode not in EM_MODES:
            raise ValueError(f"em_threshold_mode must be one of {EM_MODES}, got {self.em_threshold_mode!r}")

    @property
    def thresholds(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_thresholds)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    pred, gt = np.squeeze(pred), np.squeeze(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt.astype(bool) if gt.dtype == bool else gt > 0.5


def binarize(pred: np.ndarray, threshold: float) -> np.ndarray:
    return (pred >= threshold) & (pred > 0)


def mae(pred, gt) -> float:
    p = np.squeeze(np.asarray(pred, dtype=np.float64))
    g = np.squeeze(np.asarray(gt, dtype=np.float64))
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    return float(np.abs(p - g).mean())


def f_beta_curve(pred, gt, cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    """F-beta at every threshold of the sweep."""
    pred, gt = _pair(pred, gt)
    thresholds = cfg.thresholds
    # k-th threshold selects pixels whose bin index is >= k
    bins = np.searchsorted(thresholds, pred.ravel(), side="right") - 1
    bins[pred.ravel() <= 0] = -1
    keep = bins >= 0
    fg = gt.ravel()
    counts_fg = np.bincount(bins[keep & fg], minlength=len(thresholds))
    counts_all = np.bincount(bins[keep], minlength=len(thresholds))
    tp = np.cumsum(counts_fg[::-1])[::-1].astype(np.float64)
    predicted = np.cumsum(counts_all[::-1])[::-1].astype(np.float64)
    positives = float(fg.sum())
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / positives if positives else np.zeros_like(tp)
    denom = cfg.beta2 * precision + recall
    return np.where(denom > 0, (1 + cfg.beta2) * precision * recall / np.where(denom > 0, denom, 1), 0.0)


def max_f_beta(pred, gt, cfg: MetricConfig = MetricConfig()) -> float:
    """Maximum F-beta over the threshold sweep; 0 when the ground truth is empty."""
    _, g = _pair(pred, gt)
    if not g.any():
        return 0.0
    return float(f_beta_curve(pred, gt, cfg).max())


def _object_score(values: np.ndarray, eps: float) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2 * x / (x * x + 1 + sigma + eps))


def _ssim(pred: np.ndarray, gt: np.ndarray, eps: float) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    denom = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / denom
    sy = ((gt - y) ** 2).sum() / denom
    sxy = ((pred - x) * (gt - y)).sum() / denom
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + eps))
    return 1.0 if b == 0 else 0.0


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    rows, cols = np.nonzero(gt)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def s_measure(pred, gt, cfg: MetricConfig = MetricConfig()) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term."""
    pred, gt = _pair(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    eps = cfg.eps
    s_object = y * _object_score(pred[gt], eps) + (1 - y) * _object_score(1 - pred[~gt], eps)

    h, w = gt.shape
    cx, cy = _centroid(gt)
    gtf = gt.astype(np.float64)
    s_region = 0.0
    for rs, cs in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
                   (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))):
        block = pred[rs, cs]
        if block.size == 0:
            continue
        s_region += block.size / (h * w) * _ssim(block, gtf[rs, cs], eps)
    score = cfg.alpha * s_object + (1 - cfg.alpha) * s_region
    return float(max(0.0, score))


def _enhanced_score(binary: np.ndarray, gt: np.ndarray, eps: float) -> float:
    if not gt.any():
        enhanced = 1.0 - binary
    elif gt.all():
        enhanced = binary.astype(np.float64)
    else:
        dg = gt - gt.mean()
        db = binary - binary.mean()
        xi = 2 * dg * db / (dg * dg + db * db + eps)
        enhanced = (xi + 1) ** 2 / 4
    return float(np.mean(enhanced))


def e_measure(pred, gt, cfg: MetricConfig = MetricConfig()) -> float:
    """Enhanced alignment measure at the adaptive threshold min(1, 2 * mean(P)).

    ``cfg.em_threshold_mode`` switches to the max or mean over the sweep.
    """
    pred, gt = _pair(pred, gt)
    g = gt.astype(np.float64)
    if cfg.em_threshold_mode == "adaptive":
        t = min(1.0, 2 * pred.mean())
        return _enhanced_score(binarize(pred, t).astype(np.float64), g, cfg.eps)
    scores = [_enhanced_score(binarize(pred, t).astype(np.float64), g, cfg.eps) for t in cfg.thresholds]
    return float(max(scores) if cfg.em_threshold_mode == "max" else np.mean(scores))


FIELDS = ("mae", "max_f_beta", "s_measure", "e_measure")


@dataclass
class ImageRecord:
    name: str
    mae: float
    max_f_beta: float
    s_measure: float
    e_measure: float
    empty_gt: bool = False


@dataclass
class MetricReport:
    records: list[ImageRecord] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def means(self) -> dict[str, float]:
        if not self.records:
            return {f: math.nan for f in FIELDS}
        return {f: math.fsum(getattr(r, f) for r in self.records) / len(self.records) for f in FIELDS}

    def to_text(self) -> str:
        def row(name, values):
            return "\t".join([name, *(f"{v:.6f}" for v in values)])

        lines = [row(r.name, [getattr(r, f) for f in FIELDS]) for r in self.records]
        lines += [f"# empty ground truth, maxF set to 0: {r.name}" for r in self.records if r.empty_gt]
        lines += [f"# skipped {name}: {reason}" for name, reason in self.skipped]
        means = self.means()
        lines.append(row("MEAN", [means[f] for f in FIELDS]))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def evaluate_image(name: str, pred, gt, cfg: MetricConfig = MetricConfig()) -> ImageRecord:
    p, g = _pair(pred, gt)
    return ImageRecord(name, mae(p, g), max_f_beta(p, g, cfg), s_measure(p, g, cfg), e_measure(p, g, cfg),
                       empty_gt=not g.any())


def evaluate_dataset(pairs, cfg: MetricConfig = MetricConfig()) -> MetricReport:
    """Score (name, pred, gt) triples in order.

    ``pred`` and ``gt`` may be arrays or zero-argument loaders; a loader that
    raises marks the pair as skipped instead of aborting the run.
    """
    report = MetricReport()
    for name, pred, gt in pairs:
        try:
            p = pred() if callable(pred) else pred
            g = gt() if callable(gt) else gt
            record = evaluate_image(name, p, g, cfg)
        except (OSError, ValueError) as exc:
            report.skipped.append((name, str(exc)))
            continue
        report.records.append(record)
    return report
