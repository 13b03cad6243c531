"""
Task losses: cross-entropy, Dice, masked segmentation loss, MSE and the
weighted multi-task total.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from mtlswin.config import TASK_ORDER, TaskWeights
from mtlswin.errors import ConfigError, ShapeError

PROB_CLAMP = 1e-12
DICE_SMOOTH = 1e-5


@dataclass
class LossBatchInputs:
    cls_logits: Optional[torch.Tensor] = None    # (B, 2)
    cls_labels: Optional[torch.Tensor] = None    # (B,)
    seg_logits: Optional[torch.Tensor] = None    # (B, H, W, 2)
    seg_masks: Optional[torch.Tensor] = None     # (B, H, W) in {0, 1}
    mask_present: Optional[torch.Tensor] = None  # (B,) bool
    rec_output: Optional[torch.Tensor] = None    # (B, H, W, 1)
    rec_target: Optional[torch.Tensor] = None    # (B, H, W, 1)


@dataclass
class TaskLosses:
    cls: Optional[torch.Tensor] = None
    seg: Optional[torch.Tensor] = None
    rec: Optional[torch.Tensor] = None
    total: Optional[torch.Tensor] = None

    def as_floats(self) -> Dict[str, float]:
        return {
            name: float(value.detach().item()) if value is not None else float("nan")
            for name, value in (("L_cls", self.cls), ("L_seg", self.seg), ("L_rec", self.rec), ("L_total", self.total))
        }


def cross_entropy(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """
    Mean of -sum_k p_k log q_k over all leading positions.

    ``p`` is either index labels with q's leading shape, or one-hot with q's shape.
    ``q`` holds probabilities along its last dimension.
    """
    log_q = torch.log(q.clamp(min=PROB_CLAMP))
    if p.shape == q.shape:
        return -(p.to(q.dtype) * log_q).sum(dim=-1).mean()
    if p.shape != q.shape[:-1]:
        raise ShapeError(f"labels {tuple(p.shape)} do not match probabilities {tuple(q.shape)}")
    return -log_q.gather(-1, p.long().unsqueeze(-1)).squeeze(-1).mean()


def dice_loss(p: torch.Tensor, q: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - (2 sum p q + smooth) / (sum(p + q) + smooth), over all elements of one image"""
    if p.shape != q.shape:
        raise ShapeError(f"mask {tuple(p.shape)} and prediction {tuple(q.shape)} differ")
    p = p.to(q.dtype)
    overlap = (p * q).sum()
    mass = p.sum() + q.sum()
    return 1.0 - (2.0 * overlap + smooth) / (mass + smooth)


def per_sample_seg_loss(seg_logits: torch.Tensor, seg_masks: torch.Tensor, w: TaskWeights) -> torch.Tensor:
    """(B,) vector of lambda_ce * CE + lambda_dice * Dice on each image's foreground channel"""
    probs = torch.softmax(seg_logits, dim=-1)
    losses = []
    for i in range(seg_logits.shape[0]):
        ce = cross_entropy(seg_masks[i].long(), probs[i])
        dice = dice_loss(seg_masks[i], probs[i, ..., 1])
        losses.append(w.lambda_ce * ce + w.lambda_dice * dice)
    return torch.stack(losses)


def seg_loss(seg_logits: torch.Tensor, seg_masks: torch.Tensor, mask_present: torch.Tensor, w: TaskWeights) -> torch.Tensor:
    """Mean segmentation loss over samples that carry a mask; 0 with zero gradient when none do"""
    present = mask_present.bool()
    if not present.any():
        return seg_logits.sum() * 0.0
    return per_sample_seg_loss(seg_logits[present], seg_masks[present], w).mean()


def mse_loss(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    if p.shape != q.shape:
        raise ShapeError(f"target {tuple(p.shape)} and reconstruction {tuple(q.shape)} differ")
    return F.mse_loss(q, p.to(q.dtype))


def cls_loss(cls_logits: torch.Tensor, cls_labels: torch.Tensor) -> torch.Tensor:
    return cross_entropy(cls_labels, torch.softmax(cls_logits, dim=-1))


def total_loss(parts: TaskLosses, w: TaskWeights) -> torch.Tensor:
    """lambda_cls L_cls + lambda_seg L_seg + lambda_rec L_rec, weights taken as given (no renormalisation)"""
    total = None
    for task in TASK_ORDER:
        value = getattr(parts, task)
        weight = w.for_task(task)
        if value is None and weight is not None:
            raise ConfigError(f"Weight supplied for inactive task '{task}'")
        if value is None:
            continue
        if weight is None:
            raise ConfigError(f"Task '{task}' has a loss but no weight")
        term = weight * value
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("No task losses to combine")
    return total


def compute_losses(inputs: LossBatchInputs, w: TaskWeights) -> TaskLosses:
    """Evaluate every task loss present in ``inputs`` and their weighted total"""
    parts = TaskLosses()
    if inputs.cls_logits is not None:
        parts.cls = cls_loss(inputs.cls_logits, inputs.cls_labels)
    if inputs.seg_logits is not None:
        parts.seg = seg_loss(inputs.seg_logits, inputs.seg_masks, inputs.mask_present, w)
    if inputs.rec_output is not None:
        parts.rec = mse_loss(inputs.rec_target, inputs.rec_output)
    parts.total = total_loss(parts, w)
    return parts
