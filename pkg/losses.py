"""
Training objectives: alignment (cross-entropy over candidate objects plus an
optional box term), the margin hinge on the shortcut pass, and their sum.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from errors import LossError
from geometry import Box3, iou3d_grad
from model import SCENE_CENTER, ModelOutput

BoxesLike = Union[Box3, Sequence[Box3], np.ndarray]


@dataclass
class LossBundle:
    align: ad.Tensor
    deterrence: ad.Tensor
    total: ad.Tensor
    similarity: np.ndarray  # per-sample shortcut soft-box IoU (NaN when no shortcut pass ran)
    active: np.ndarray      # per-sample hinge activation

    @property
    def deterrence_active(self) -> bool:
        return bool(self.active.any())

    @property
    def activation_rate(self) -> float:
        return float(self.active.mean()) if self.active.size else 0.0


def _gt_array(gt: Optional[BoxesLike], out: ModelOutput) -> np.ndarray:
    if gt is None:
        return out.batch.gt_boxes
    if isinstance(gt, Box3):
        gt = [gt]
    if isinstance(gt, np.ndarray):
        arr = gt.reshape(-1, 6).astype(np.float64)
    else:
        arr = np.stack([b.as_array() for b in gt])
    if arr.shape[0] != out.batch.batch_size:
        raise LossError(f"{arr.shape[0]} ground-truth boxes for a batch of {out.batch.batch_size}")
    return arr


def _targets(out: ModelOutput, target_index: Optional[Union[int, Sequence[int]]]) -> np.ndarray:
    batch = out.batch
    targets = batch.targets if target_index is None else np.atleast_1d(np.asarray(target_index, dtype=np.int64))
    if targets.shape != (batch.batch_size,):
        raise LossError(f"{targets.size} targets for a batch of {batch.batch_size}")
    for b, t in enumerate(targets):
        if not 0 <= t < batch.sizes[b]:
            raise LossError(f"target index {t} out of range for {batch.sizes[b]} objects")
    return targets


def cross_entropy(logits: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    B, width = logits.shape
    onehot = np.zeros((B, width))
    onehot[np.arange(B), targets] = 1.0
    picked = ad.reduce_sum(ad.mul(ad.Tensor(onehot), ad.log_softmax_lastaxis(logits)))
    return ad.scale(picked, -1.0 / B)


def box_regression(out: ModelOutput, targets: np.ndarray, gt: np.ndarray) -> ad.Tensor:
    """Squared error of the target object's (center offset, log size) against ground truth."""
    batch = out.batch
    rows = np.zeros((batch.batch_size, batch.rows))
    rows[np.arange(batch.batch_size), np.arange(batch.batch_size) * batch.n_pad + targets] = 1.0
    predicted = ad.matmul(ad.Tensor(rows), out.raw_boxes)
    goal = np.concatenate([gt[:, :3] - SCENE_CENTER, np.log(gt[:, 3:])], axis=1)
    diff = ad.sub(predicted, ad.Tensor(goal))
    return ad.scale(ad.reduce_sum(ad.mul(diff, diff)), 1.0 / batch.batch_size)


def alignment_loss(fused: ModelOutput, target_index: Optional[Union[int, Sequence[int]]] = None,
                   gt_box: Optional[BoxesLike] = None, box_weight: float = 1.0) -> ad.Tensor:
    """
    Cross-entropy of the fused logits against the target object. When
    ground-truth boxes are given and box_weight > 0 the box term is added.
    """
    targets = _targets(fused, target_index)
    ce = cross_entropy(fused.logits, targets)
    if gt_box is None or box_weight == 0:
        return ce
    if box_weight < 0:
        raise LossError("box_weight must be >= 0")
    box = box_regression(fused, targets, _gt_array(gt_box, fused))
    return ad.add(ce, ad.scale(box, box_weight))


def deterrence_terms(shortcut: ModelOutput, gt_box: Optional[BoxesLike] = None,
                     mu: float = 0.7) -> Tuple[ad.Tensor, np.ndarray, np.ndarray]:
    """Batch-mean hinge max(0, s - mu) with s = IoU(soft box, gt); also returns s and activations."""
    if not 0.0 < mu < 1.0:
        raise LossError(f"mu must be in (0, 1), got {mu}")
    gt = _gt_array(gt_box, shortcut)
    s = iou3d_grad(shortcut.soft_box, gt)
    hinge = ad.relu(ad.sub(s, ad.Tensor(np.full(s.shape, float(mu)))))
    similarity = s.value.reshape(-1).copy()
    return ad.reduce_mean(hinge), similarity, similarity > mu


def deterrence_loss(shortcut: ModelOutput, gt_box: Optional[BoxesLike] = None, mu: float = 0.7) -> ad.Tensor:
    return deterrence_terms(shortcut, gt_box, mu)[0]


def total_loss(align: ad.Tensor, deterrence: ad.Tensor, lam: float) -> ad.Tensor:
    if lam < 0:
        raise LossError(f"lambda must be >= 0, got {lam}")
    return ad.add(align, ad.scale(deterrence, lam))


def w2r2_losses(fused: ModelOutput, shortcut: Optional[ModelOutput], lam: float, mu: float,
                box_weight: float = 1.0) -> LossBundle:
    """Pull-push bundle. Without a shortcut pass this is the alignment-only objective."""
    align = alignment_loss(fused, gt_box=fused.batch.gt_boxes, box_weight=box_weight)
    if shortcut is None:
        zero = ad.Tensor(np.asarray(0.0))
        B = fused.batch.batch_size
        return LossBundle(align, zero, align, np.full(B, np.nan), np.zeros(B, dtype=bool))
    det, similarity, active = deterrence_terms(shortcut, shortcut.batch.gt_boxes, mu)
    return LossBundle(align, det, total_loss(align, det, lam), similarity, active)
