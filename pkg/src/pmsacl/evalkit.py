"""Detection and segmentation metrics: rank-based AUROC, the validation
threshold rule, confusion rates, IoU/Dice, the per-region-overlap score,
plus deterministic report emission (JSON, SVG plots, PNG overlays)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import save_png
from .errors import ConfigError, NumericError
from .numerics import RngStream


@dataclass
class ScoredItem:
    item_id: str
    score: float
    label: str  # "normal" | "abnormal"
    mask: np.ndarray | None = None
    score_map: np.ndarray | None = None


def _labels_to_binary(items: list[ScoredItem]) -> np.ndarray:
    return np.array([1 if it.label == "abnormal" else 0 for it in items])


def auroc(items: list[ScoredItem]) -> float:
    """Area under the ROC curve via midranks (ties handled exactly)."""
    y = _labels_to_binary(items)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise NumericError("AUROC needs both labels present")
    scores = np.array([it.score for it in items], dtype=np.float64)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    u_stat = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u_stat / (n_pos * n_neg)


def select_threshold(items: list[ScoredItem]) -> float:
    """Threshold maximising accuracy on a labelled validation set.

    Classification rule is score >= threshold => abnormal. Candidates are
    the scores themselves, midpoints of adjacent distinct scores, and one
    sentinel above the maximum; ties in accuracy resolve to the highest
    threshold, so a perfectly separated set returns the gap midpoint.
    """
    if not items:
        raise NumericError("empty validation split")
    scores = np.array([it.score for it in items], dtype=np.float64)
    y = _labels_to_binary(items)
    uniq = np.unique(scores)
    candidates = np.concatenate([[uniq[0]], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]])
    best_thr, best_acc = None, -1.0
    for thr in np.sort(candidates):
        pred = scores >= thr
        acc = float(np.mean(pred == (y == 1)))
        if acc >= best_acc:  # ties go to the higher threshold
            best_acc, best_thr = acc, float(thr)
    return best_thr


def confusion_metrics(items: list[ScoredItem], threshold: float) -> tuple[float, float, float]:
    """(specificity, sensitivity, accuracy) at the given threshold."""
    y = _labels_to_binary(items)
    if y.sum() == 0 or (1 - y).sum() == 0:
        raise NumericError("confusion metrics need both labels present")
    scores = np.array([it.score for it in items], dtype=np.float64)
    pred = scores >= threshold
    tp = int(np.sum(pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    specificity = tn / (tn + fp)
    sensitivity = tp / (tp + fn)
    accuracy = (tp + tn) / len(items)
    return specificity, sensitivity, accuracy


def iou_dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> tuple[float, float]:
    """Intersection-over-union and Dice; both 1 when both masks are empty."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ConfigError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = int(np.sum(pred & gt))
    union = int(np.sum(pred | gt))
    total = int(pred.sum()) + int(gt.sum())
    if union == 0:
        return 1.0, 1.0
    return inter / union, 2.0 * inter / total


def pro_curve(score_maps: list[np.ndarray], gt_masks: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, mean per-region overlap) over the full threshold sweep."""
    if len(score_maps) != len(gt_masks) or not score_maps:
        raise ConfigError("score maps and masks must pair up")
    regions = []  # (image index, region mask, area)
    for i, gt in enumerate(gt_masks):
        labelled, n = ndimage.label(np.asarray(gt, dtype=bool))
        for r in range(1, n + 1):
            region = labelled == r
            regions.append((i, region, int(region.sum())))
    if not regions:
        raise NumericError("PRO needs at least one ground-truth region")
    neg_total = sum(int(np.sum(~np.asarray(gt, dtype=bool))) for gt in gt_masks)
    all_scores = np.unique(np.concatenate([m.reshape(-1) for m in score_maps]))
    # Sweep descending so FPR grows along the curve; cap the sweep size.
    if all_scores.size > 512:
        idx = np.linspace(0, all_scores.size - 1, 512).astype(int)
        all_scores = all_scores[idx]
    thresholds = all_scores[::-1]
    fprs = [0.0]
    pros = [0.0]
    for thr in thresholds:
        preds = [m >= thr for m in score_maps]
        fp = sum(int(np.sum(p & ~np.asarray(gt, dtype=bool))) for p, gt in zip(preds, gt_masks))
        overlaps = [np.sum(preds[i] & region) / area for i, region, area in regions]
        fprs.append(fp / neg_total if neg_total else 0.0)
        pros.append(float(np.mean(overlaps)))
    return np.array(fprs), np.array(pros)


def pro_score(score_maps: list[np.ndarray], gt_masks: list[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Per-region overlap integrated over FPR in [0, fpr_limit], normalised."""
    if not (0.0 < fpr_limit <= 1.0):
        raise ConfigError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fprs, pros = pro_curve(score_maps, gt_masks)
    order = np.argsort(fprs, kind="mergesort")
    fprs, pros = fprs[order], pros[order]
    # collapse duplicate FPRs to the best achievable overlap there
    uf, inverse = np.unique(fprs, return_inverse=True)
    up = np.zeros_like(uf)
    np.maximum.at(up, inverse, pros)
    if uf[-1] < fpr_limit:
        uf = np.append(uf, fpr_limit)
        up = np.append(up, up[-1])
    keep = uf <= fpr_limit
    xs, ys = uf[keep], up[keep]
    if xs[-1] < fpr_limit:
        y_at = np.interp(fpr_limit, uf, up)
        xs = np.append(xs, fpr_limit)
        ys = np.append(ys, y_at)
    return float(np.trapezoid(ys, xs) / fpr_limit)


def segmentation_groups(n_items: int, rng: RngStream, group_count: int, group_size: int) -> list[np.ndarray]:
    """Seeded resampled index groups for the mean-over-groups protocol."""
    group_size = min(group_size, n_items)
    groups = []
    for g in range(group_count):
        picks = rng.child("group", g).integers(0, n_items, group_size)
        groups.append(np.asarray(picks, dtype=np.int64))
    return groups


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    detector: str
    seed: int
    auroc: float
    specificity: float
    sensitivity: float
    accuracy: float
    threshold: float
    iou: float | None = None
    dice: float | None = None
    pro: float | None = None
    seg_threshold: float | None = None
    groups: list[dict] = field(default_factory=list)
    spreads: dict = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict:
        out = {
            "detector": self.detector,
            "seed": self.seed,
            "auroc": self.auroc,
            "specificity": self.specificity,
            "sensitivity": self.sensitivity,
            "accuracy": self.accuracy,
            "threshold": self.threshold,
            "config_hash": self.config_hash,
        }
        if self.iou is not None:
            out.update({"iou": self.iou, "dice": self.dice, "pro": self.pro,
                        "seg_threshold": self.seg_threshold})
            if self.groups:
                out["groups"] = self.groups
            if self.spreads:
                out["spreads"] = self.spreads
        return out


def _canonical_json(data: dict) -> str:
    def walk(v):
        if isinstance(v, float):
            return float(f"{v:.10g}")
        if isinstance(v, dict):
            return {k: walk(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [walk(x) for x in v]
        return v

    return json.dumps(walk(data), sort_keys=True, indent=2) + "\n"


def _svg_header() -> str:
    return '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 600" width="800" height="600">\n'


def _svg_polyline(points: list[tuple[float, float]], colour: str) -> str:
    coords = " ".join(f"{px:.3f},{py:.3f}" for px, py in points)
    return f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>\n'


def _plot_frame(title: str) -> str:
    return (
        '<rect x="80" y="60" width="640" height="460" fill="none" stroke="#444"/>\n'
        f'<text x="400" y="40" text-anchor="middle" font-size="20" font-family="sans-serif">{title}</text>\n'
    )


def roc_svg(items: list[ScoredItem]) -> str:
    y = _labels_to_binary(items)
    scores = np.array([it.score for it in items])
    thresholds = np.concatenate([[np.inf], np.sort(np.unique(scores))[::-1]])
    pts = []
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    for thr in thresholds:
        pred = scores >= thr
        tpr = float(np.sum(pred & (y == 1))) / max(n_pos, 1)
        fpr = float(np.sum(pred & (y == 0))) / max(n_neg, 1)
        pts.append((80 + 640 * fpr, 520 - 460 * tpr))
    svg = _svg_header() + _plot_frame("ROC")
    svg += _svg_polyline([(80, 520), (720, 60)], "#bbb")
    svg += _svg_polyline(pts, "#c0392b")
    return svg + "</svg>\n"


def histogram_svg(items: list[ScoredItem], bins: int = 30) -> str:
    scores = np.array([it.score for it in items])
    y = _labels_to_binary(items)
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    svg = _svg_header() + _plot_frame("Score histogram")
    for label, colour in ((0, "#2980b9"), (1, "#c0392b")):
        hist, _ = np.histogram(scores[y == label], bins=edges)
        peak = max(int(hist.max()), 1)
        pts = []
        for i, h in enumerate(hist):
            x0 = 80 + 640 * (edges[i] - lo) / (hi - lo)
            x1 = 80 + 640 * (edges[i + 1] - lo) / (hi - lo)
            yy = 520 - 460 * h / peak
            pts += [(x0, yy), (x1, yy)]
        svg += _svg_polyline(pts, colour)
    return svg + "</svg>\n"


def overlay_image(image: np.ndarray, gt_mask: np.ndarray, pred_mask: np.ndarray) -> np.ndarray:
    """Prediction in red, ground truth boundary in green, over the image."""
    out = image.copy()
    out[pred_mask] = out[pred_mask] * 0.5 + np.array([0.5, 0.0, 0.0])
    boundary = np.asarray(gt_mask, dtype=bool) & ~ndimage.binary_erosion(np.asarray(gt_mask, dtype=bool))
    out[boundary] = [0.0, 1.0, 0.0]
    return np.clip(out, 0.0, 1.0)


def emit_report(
    report: EvalReport,
    out_dir: str | Path,
    scored: list[ScoredItem] | None = None,
    overlays: list[tuple[str, np.ndarray, np.ndarray, np.ndarray]] | None = None,
) -> Path:
    """Write metrics.json plus optional SVG plots and PNG overlays.

    Re-emitting an identical report yields byte-identical JSON. Overlays
    are (id, image, gt mask, predicted mask) tuples and are skipped when
    the report has no segmentation section.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(_canonical_json(report.to_dict()))
    if scored:
        (out_dir / "roc.svg").write_text(roc_svg(scored))
        (out_dir / "histogram.svg").write_text(histogram_svg(scored))
    if overlays and report.iou is not None:
        for item_id, image, gt_mask, pred_mask in overlays:
            save_png(out_dir / f"overlay_{item_id}.png", overlay_image(image, gt_mask, pred_mask))
    return metrics_path
