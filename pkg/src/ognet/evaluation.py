"""Saliency metrics (MAE, F-measure, PR curve, S-measure) and report emission.

Dataset evaluation quantizes predictions to the 8-bit grid first, so a report
computed from saved maps matches one computed from live inference exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BETA_SQ = 0.3
S_ALPHA = 0.5
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
CURVE_POINTS = 256


def _as_maps(s, g):
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise ValueError(f"saliency map {s.shape} vs ground truth {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary")
    return s, g


def mae(s, g) -> float:
    """Mean absolute difference over the full map."""
    s, g = _as_maps(s, g)
    return float(np.abs(s - g).mean())


def _f_from_counts(tp: float, pred: float, pos: float, beta_sq: float) -> float:
    if pred == 0 or pos == 0:
        return 0.0
    precision = tp / pred
    recall = tp / pos
    denom = beta_sq * precision + recall
    if denom == 0:
        return 0.0
    return (1.0 + beta_sq) * precision * recall / denom


def f_measure(s, g, threshold="adaptive", beta_sq: float = BETA_SQ) -> float:
    """F at a fixed threshold, or at the adaptive one (twice the mean saliency)."""
    s, g = _as_maps(s, g)
    if threshold == "adaptive":
        threshold = min(2.0 * float(s.mean()), 1.0 - 1e-6)
    pred = s >= threshold
    tp = float((pred & (g == 1)).sum())
    return _f_from_counts(tp, float(pred.sum()), float(g.sum()), beta_sq)


def pr_curve(s, g) -> np.ndarray:
    """256 (precision, recall) pairs; threshold t/255 applied as >= for t in 0..255.

    Precision of an empty prediction is 1.0 by convention; empty ground truth
    is an error because recall is undefined.
    """
    s, g = _as_maps(s, g)
    pos = float(g.sum())
    if pos == 0:
        raise ValueError("empty ground truth: recall is undefined")
    s255 = s * 255.0
    curve = np.zeros((CURVE_POINTS, 2), dtype=np.float64)
    for t in range(CURVE_POINTS):
        pred = s255 >= t
        npred = float(pred.sum())
        tp = float((pred & (g == 1)).sum())
        curve[t, 0] = tp / npred if npred > 0 else 1.0
        curve[t, 1] = tp / pos
    return curve


def f_curve(curve: np.ndarray, beta_sq: float = BETA_SQ) -> np.ndarray:
    """F value at each threshold of a PR curve."""
    p, r = curve[:, 0], curve[:, 1]
    denom = beta_sq * p + r
    with np.errstate(invalid="ignore", divide="ignore"):
        f = (1.0 + beta_sq) * p * r / denom
    f[denom == 0] = 0.0
    return f


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    m = float(values.mean())
    sd = float(values.std())
    return 2.0 * m / (m * m + 1.0 + sd)


def _region_ssim(x: np.ndarray, y: np.ndarray) -> float:
    mx, my = float(x.mean()), float(y.mean())
    vx = float((x * x).mean()) - mx * mx
    vy = float((y * y).mean()) - my * my
    cov = float((x * y).mean()) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return num / den


def s_measure(s, g, alpha: float = S_ALPHA) -> float:
    """Structural similarity: object-aware and region-aware halves.

    Object half compares the prediction's mean and dispersion inside and
    outside the ground truth, weighted by foreground fraction.  Region half
    splits both maps at the foreground centroid into four rectangles and
    averages per-region SSIM weighted by area.  Degenerate ground truth falls
    back to 1 - mean(S) (empty) or mean(S) (full).
    """
    s, g = _as_maps(s, g)
    fg = float(g.mean())
    if fg == 0.0:
        return 1.0 - float(s.mean())
    if fg == 1.0:
        return float(s.mean())

    fg_mask = g == 1
    s_object = fg * _object_score(s[fg_mask]) + (1.0 - fg) * _object_score(1.0 - s[~fg_mask])

    ys, xs = np.nonzero(fg_mask)
    cy = int(ys.mean()) + 1
    cx = int(xs.mean()) + 1
    h, w = g.shape
    total = float(h * w)
    s_region = 0.0
    for rows, cols in (((0, cy), (0, cx)), ((0, cy), (cx, w)),
                       ((cy, h), (0, cx)), ((cy, h), (cx, w))):
        sr = s[rows[0]:rows[1], cols[0]:cols[1]]
        gr = g[rows[0]:rows[1], cols[0]:cols[1]]
        if sr.size == 0:
            continue
        s_region += (sr.size / total) * _region_ssim(sr, gr)

    return float(np.clip(alpha * s_object + (1.0 - alpha) * s_region, 0.0, 1.0))


# ---------------------------------------------------------------------------
# dataset-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    names: list
    per_image: list          # dicts: mae, f_adaptive, s_measure
    mean_mae: float
    mean_f: float
    mean_s: float
    pr: np.ndarray           # (256, 2) threshold-wise mean precision/recall
    f: np.ndarray            # (256,) F from the aggregated curve


def quantize_u8(s: np.ndarray) -> np.ndarray:
    """Snap a [0,1] map to the 8-bit grid (the saved-map representation)."""
    return np.round(np.clip(s, 0.0, 1.0) * 255.0) / 255.0


def evaluate_pairs(named_pairs) -> EvalReport:
    """Metrics over (name, prediction, ground truth) triples, manifest order."""
    names, rows = [], []
    pr_sum = np.zeros((CURVE_POINTS, 2))
    count = 0
    for name, pred, gt in named_pairs:
        pred = quantize_u8(np.asarray(pred, dtype=np.float64))
        names.append(name)
        rows.append({
            "mae": mae(pred, gt),
            "f_adaptive": f_measure(pred, gt, threshold="adaptive"),
            "s_measure": s_measure(pred, gt),
        })
        pr_sum += pr_curve(pred, gt)
        count += 1
    if count == 0:
        raise ValueError("nothing to evaluate")
    pr = pr_sum / count
    return EvalReport(
        names=names,
        per_image=rows,
        mean_mae=float(np.mean([r["mae"] for r in rows])),
        mean_f=float(np.mean([r["f_adaptive"] for r in rows])),
        mean_s=float(np.mean([r["s_measure"] for r in rows])),
        pr=pr,
        f=f_curve(pr),
    )


def evaluate_dataset(source, manifest, *, size: int = 96) -> EvalReport:
    """Evaluate a model (live inference) or a directory of saved maps.

    Saved maps are 8-bit grayscale named `<image stem>.png` at ground-truth
    resolution; live predictions are quantized identically, so the two paths
    agree bit-for-bit.
    """
    from .data import load_gt_binary, load_image_rgb01, read_image_u8
    from .network import Model
    from .pipeline import infer_probs

    def pairs():
        for entry in manifest.entries:
            gt = load_gt_binary(entry.gt_path)
            if isinstance(source, Model):
                image = load_image_rgb01(entry.image_path)
                pred = infer_probs(source, image, size, layers=(1,))[1]
            else:
                map_path = Path(source) / f"{entry.name}.png"
                if not map_path.is_file():
                    raise FileNotFoundError(f"missing prediction for {entry.name}: {map_path}")
                pred = read_image_u8(map_path).astype(np.float64) / 255.0
            if pred.shape != gt.shape:
                raise ValueError(f"{entry.name}: prediction {pred.shape} vs gt {gt.shape}")
            yield entry.name, pred, gt

    return evaluate_pairs(pairs())


def write_eval_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "mae", "f_adaptive", "s_measure"])
        for name, row in zip(report.names, report.per_image):
            writer.writerow([name, f"{row['mae']:.17g}",
                             f"{row['f_adaptive']:.17g}", f"{row['s_measure']:.17g}"])
        writer.writerow(["aggregate", f"{report.mean_mae:.17g}",
                         f"{report.mean_f:.17g}", f"{report.mean_s:.17g}"])


def write_curves_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "f"])
        for t in range(CURVE_POINTS):
            writer.writerow([t, f"{report.pr[t, 0]:.17g}",
                             f"{report.pr[t, 1]:.17g}", f"{report.f[t]:.17g}"])
