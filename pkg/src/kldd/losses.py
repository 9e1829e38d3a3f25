"""Training objectives and evaluation metrics.

The noise term is a plain mean squared error. The topology term compares
soft skeletons of the implied mask estimate and the ground truth; the
skeletons come from iterated 3x3 min/max pooling, so the whole loss stays
differentiable. Evaluation metrics are exact confusion-count formulas
plus a rank-based AUC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import DiffusionSchedule, predict_x0

SMOOTH_EPS = 1e-6
SKELETON_ITERS_LOSS = 10
SKELETON_ITERS_METRIC = 25


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def noise_loss(eps, eps_pred) -> Tensor:
    """Mean squared error between true and predicted noise."""
    eps, eps_pred = _as_tensor(eps), _as_tensor(eps_pred)
    if eps.shape != eps_pred.shape:
        raise ValueError(f"noise shapes differ: {eps.shape} vs {eps_pred.shape}")
    return ad.mse(eps_pred, eps)


def _to_4d(mask: Tensor) -> tuple[Tensor, tuple]:
    orig = mask.shape
    if mask.ndim == 2:
        mask = ad.reshape(mask, (1, 1) + orig)
    elif mask.ndim == 3:
        mask = ad.reshape(mask, (1,) + orig)
    elif mask.ndim != 4:
        raise ValueError(f"mask must be 2-4 dimensional, got {orig}")
    return mask, orig


def soft_skeleton(mask, k: int) -> Tensor:
    """Differentiable centerline map via iterated min/max pooling.

    Pass i contributes the part of the i-times-eroded mask that an
    opening (erode then dilate) would remove; the contributions combine
    by fuzzy union, which keeps the result in [0, 1] for soft inputs and
    reduces to a plain sum on binary ones.
    """
    if k < 1:
        raise ValueError("skeleton needs at least one iteration")
    mask = _as_tensor(mask)
    if np.min(mask.data) < 0.0 or np.max(mask.data) > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    mask, orig = _to_4d(mask)
    eroded = mask
    skel = None
    for _ in range(k + 1):
        opened = ad.pool3_max(ad.pool3_min(eroded))
        delta = ad.relu(ad.sub(eroded, opened))
        if skel is None:
            skel = delta
        else:
            skel = ad.add(skel, ad.relu(ad.sub(delta, ad.mul(skel, delta))))
        eroded = ad.pool3_min(eroded)
    return ad.reshape(skel, orig)


def cl_dice(pred, gt, k: int) -> Tensor:
    """Harmonic mean of topology precision and sensitivity.

    Tprec = (|S_pred * gt| + eps) / (|S_pred| + eps) and symmetrically
    for Tsens, with |.| the elementwise-product mass.
    """
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    skel_pred = soft_skeleton(pred, k)
    skel_gt = soft_skeleton(gt, k)
    tprec = ad.div(
        ad.add_scalar(ad.sum_all(ad.mul(skel_pred, gt)), SMOOTH_EPS),
        ad.add_scalar(ad.sum_all(skel_pred), SMOOTH_EPS),
    )
    tsens = ad.div(
        ad.add_scalar(ad.sum_all(ad.mul(skel_gt, pred)), SMOOTH_EPS),
        ad.add_scalar(ad.sum_all(skel_gt), SMOOTH_EPS),
    )
    return ad.div(ad.scale(ad.mul(tprec, tsens), 2.0), ad.add(tprec, tsens))


def loss_components(eps, eps_pred, x_t, t: int, gt_mask, sched: DiffusionSchedule,
                    cldice_weight: float = 1.0,
                    skeleton_iters: int = SKELETON_ITERS_LOSS) -> dict[str, Tensor]:
    """Noise term, topology term, and their weighted sum.

    The topology term scores the mask implied by the current noise
    prediction: x0_hat mapped from [-1, 1] to [0, 1] against the ground
    truth in [0, 1].
    """
    gt_mask = _as_tensor(gt_mask)
    if np.min(gt_mask.data) < 0.0 or np.max(gt_mask.data) > 1.0:
        raise ValueError("gt_mask values must lie in [0, 1]")
    l_noise = noise_loss(eps, eps_pred)
    x0_hat = predict_x0(x_t, t, eps_pred, sched)
    prob = ad.add_scalar(ad.scale(x0_hat, 0.5), 0.5)
    l_cl = ad.add_scalar(ad.scale(cl_dice(prob, gt_mask, skeleton_iters), -1.0), 1.0)
    total = ad.add(l_noise, ad.scale(l_cl, cldice_weight))
    return {"noise": l_noise, "cldice": l_cl, "total": total}


def total_loss(eps, eps_pred, x_t, t: int, gt_mask, sched: DiffusionSchedule,
               cldice_weight: float = 1.0,
               skeleton_iters: int = SKELETON_ITERS_LOSS) -> Tensor:
    return loss_components(eps, eps_pred, x_t, t, gt_mask, sched,
                           cldice_weight, skeleton_iters)["total"]


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    sen: float
    spe: float
    auc: float
    dice: float
    iou: float
    cl_dice: float

    def to_dict(self) -> dict[str, float]:
        return {"acc": self.acc, "sen": self.sen, "spe": self.spe, "auc": self.auc,
                "dice": self.dice, "iou": self.iou, "cl_dice": self.cl_dice}


def _binary_data(x, name: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be strictly binary")
    return arr.astype(bool)


def confusion(pred_bin, gt) -> ConfusionCounts:
    """Exact pixel tallies between two binary masks."""
    p = _binary_data(pred_bin, "prediction")
    g = _binary_data(gt, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        tn=int(np.sum(~p & ~g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def scalar_metrics(counts: ConfusionCounts) -> dict[str, float]:
    """Accuracy, sensitivity, specificity, Dice, IoU; 0/0 ratios are 0."""
    if counts.total == 0:
        raise ValueError("empty confusion counts")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    return {
        "acc": _ratio(tp + tn, counts.total),
        "sen": _ratio(tp, tp + fn),
        "spe": _ratio(tn, tn + fp),
        "dice": _ratio(2 * tp, 2 * tp + fp + fn),
        "iou": _ratio(tp, tp + fp + fn),
    }


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks on ties."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    high = np.cumsum(counts).astype(np.float64)
    avg_rank = high - (counts - 1) / 2.0
    ranks = avg_rank[inverse]
    rank_sum = float(np.sum(ranks[y == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def cl_dice_metric(pred_bin, gt, k: int = SKELETON_ITERS_METRIC) -> float:
    """Hard-mask centerline score: the loss formula on binarized inputs."""
    p = _binary_data(pred_bin, "prediction").astype(np.float64)
    g = _binary_data(gt, "ground truth").astype(np.float64)
    with ad.no_grad():
        return cl_dice(Tensor(p), Tensor(g), k).item()


def full_report(pred_bin, gt, scores=None) -> MetricsReport:
    """Every scalar metric in one record.

    scores are the real-valued probabilities behind pred_bin; when absent
    the binary prediction itself ranks the pixels (degenerate but legal).
    """
    counts = confusion(pred_bin, gt)
    base = scalar_metrics(counts)
    g = _binary_data(gt, "ground truth").astype(int)
    if scores is None:
        s = _binary_data(pred_bin, "prediction").astype(np.float64)
    else:
        s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    return MetricsReport(
        acc=base["acc"], sen=base["sen"], spe=base["spe"],
        auc=auc(s.ravel(), g.ravel()),
        dice=base["dice"], iou=base["iou"],
        cl_dice=cl_dice_metric(pred_bin, gt),
    )
