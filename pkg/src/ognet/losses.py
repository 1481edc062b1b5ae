"""Per-layer cross-entropy supervision and the intractable-area F-measure loss.

The F-measure term is relaxed: precision and recall over the difference-map
coordinate set use the raw probabilities instead of binarized scores, so the
term stays differentiable.  Hard binarization at 0.5 is available separately
for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import SaliencyOutputs
from .tensor import Tensor, bilinear_resize, slice_batch, softplus

EPS = 1e-8


@dataclass
class LossWeights:
    """Side-output weights, the F-measure term weight, and its beta squared."""

    alpha: tuple
    beta_w: float
    beta_sq: float = 0.3

    def __post_init__(self):
        if any(a < 0 for a in self.alpha) or self.beta_w < 0 or self.beta_sq < 0:
            raise ValueError("loss weights must be non-negative")

    @staticmethod
    def default(beta_w: float | None = None) -> "LossWeights":
        return LossWeights(alpha=(50.0, 4.0, 4.0, 4.0, 4.0),
                           beta_w=25.0 if beta_w is None else beta_w)

    @staticmethod
    def for_outputs(m: int, beta_w: float) -> "LossWeights":
        """Layer-1 dominates; every deeper side output gets the small weight."""
        return LossWeights(alpha=(50.0,) + (4.0,) * (m - 1), beta_w=beta_w)


def _check_binary(gt: np.ndarray, what: str) -> None:
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError(f"{what} must be binary (0/1)")


def side_cross_entropy(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Mean binary cross-entropy in stable logit form, at ground-truth resolution."""
    gt = np.asarray(gt)
    _check_binary(gt, "ground truth")
    if logits.ndim != 4 or gt.ndim != 4 or logits.shape[:2] != gt.shape[:2]:
        raise ValueError(f"logits {logits.shape} vs ground truth {gt.shape}")
    h, w = gt.shape[2], gt.shape[3]
    x = logits if logits.shape[2:] == (h, w) else bilinear_resize(logits, h, w)
    g = Tensor(gt.astype(x.dtype))
    # -[g log p + (1-g) log(1-p)] == softplus(x) - g*x
    return (softplus(x) - x * g).mean()


def iaf_loss(probs: Tensor, gt: np.ndarray, mask: np.ndarray,
             beta_sq: float = 0.3) -> Tensor | None:
    """1 - relaxed F-measure over the mask; None when the mask is empty."""
    gt = np.asarray(gt)
    mask = np.asarray(mask)
    _check_binary(gt, "ground truth")
    if probs.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError(
            f"probs {probs.shape}, ground truth {gt.shape} and mask {mask.shape} must agree")
    m = mask.astype(probs.dtype)
    if not m.any():
        return None
    g_masked = Tensor((gt * m).astype(probs.dtype))
    tp = (probs * g_masked).sum()
    pred_mass = (probs * Tensor(m)).sum()
    gt_mass = float((gt * m).sum())
    precision = tp / (pred_mass + EPS)
    recall = tp / (gt_mass + EPS)
    f = (precision * recall * (1.0 + beta_sq)) / (precision * beta_sq + recall + EPS)
    return 1.0 - f


def iaf_loss_hard(probs: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                  beta_sq: float = 0.3) -> float | None:
    """Reporting variant: probabilities binarized at 0.5 before counting."""
    hard = (np.asarray(probs) >= 0.5).astype(np.float64)
    loss = iaf_loss(Tensor(hard), gt, mask, beta_sq=beta_sq)
    return None if loss is None else loss.item()


def total_loss(outputs: SaliencyOutputs, gt: np.ndarray,
               masks: np.ndarray | None, weights: LossWeights):
    """Weighted sum of side losses plus the masked F-measure term.

    Returns (scalar tensor, per-term float dict).  The F-measure term averages
    over the batch images whose masks are nonempty; with beta_w == 0 (stage-1
    training) masks may be absent entirely.
    """
    m_count = len(outputs.logits)
    if len(weights.alpha) != m_count:
        raise ValueError(f"{len(weights.alpha)} side weights for {m_count} outputs")
    gt = np.asarray(gt)

    terms: dict[str, float] = {}
    total = None
    for i, logits in enumerate(outputs.logits):
        side = side_cross_entropy(logits, gt)
        terms[f"side{i + 1}"] = side.item()
        weighted = side * float(weights.alpha[i])
        total = weighted if total is None else total + weighted

    if weights.beta_w > 0:
        if masks is None:
            raise ValueError("difference masks are required when the F-measure weight is positive")
        masks = np.asarray(masks)
        h, w = gt.shape[2], gt.shape[3]
        probs = outputs.probs[0]
        if probs.shape[2:] != (h, w):
            probs = bilinear_resize(probs, h, w)
        collected = []
        for i in range(gt.shape[0]):
            term = iaf_loss(slice_batch(probs, i), gt[i:i + 1], masks[i:i + 1],
                            beta_sq=weights.beta_sq)
            if term is not None:
                collected.append(term)
        if collected:
            avg = collected[0]
            for term in collected[1:]:
                avg = avg + term
            avg = avg / float(len(collected))
            terms["iaf"] = avg.item()
            total = total + avg * float(weights.beta_w)
        else:
            terms["iaf"] = float("nan")
    terms["total"] = total.item()
    return total, terms
