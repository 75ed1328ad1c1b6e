from typing import Dict, Tuple, Union, Mapping

import torch
import torch.nn.functional as F

from .config import LossConfig
from .errors import ContractViolation
from .network import PredictionSet

PROB_EPS = 1e-6


def check_binary_mask(gt: torch.Tensor, where: str = "gt") -> None:
    if gt.dim() != 4 or gt.shape[1] != 1:
        raise ContractViolation(f"{where} must be (N, 1, S, S), got {tuple(gt.shape)}")
    if not torch.all((gt == 0) | (gt == 1)):
        raise ContractViolation(f"{where} must be binary (0/1)")


def pixel_weights(gt: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """w = 1 + gain * |box_mean(gt) - gt|; boundary bands get up to 1 + gain."""
    check_binary_mask(gt)
    k = cfg.weight_kernel
    local = F.avg_pool2d(gt, k, stride=1, padding=k // 2, count_include_pad=False)
    return 1.0 + cfg.weight_gain * (local - gt).abs()


def weighted_bce(logits: torch.Tensor, gt: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    per_sample = (w * bce).sum(dim=(2, 3)) / w.sum(dim=(2, 3))
    return per_sample.mean()


def weighted_iou(pred: torch.Tensor, gt: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    inter = (pred * gt * w).sum(dim=(2, 3))
    union = ((pred + gt) * w).sum(dim=(2, 3))
    return (1.0 - (inter + 1.0) / (union - inter + 1.0)).mean()


def head_loss(logits: torch.Tensor, gt: torch.Tensor, w: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """BCE runs on logits; the soft IoU needs probabilities."""
    loss = logits.new_zeros(())
    if "weighted_bce" in cfg.terms:
        loss = loss + weighted_bce(logits, gt, w)
    if "weighted_iou" in cfg.terms:
        loss = loss + weighted_iou(torch.sigmoid(logits), gt, w)
    return loss


def _head_logits(preds: Union[PredictionSet, Mapping[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    if isinstance(preds, PredictionSet) and preds.logits:
        return dict(preds.logits)
    probs = preds.probs if isinstance(preds, PredictionSet) else dict(preds)
    # bare probability maps: clamp keeps saturated pixels finite
    return {name: torch.logit(p, eps=PROB_EPS) for name, p in probs.items()}


def deep_supervised_loss(
    preds: Union[PredictionSet, Mapping[str, torch.Tensor]],
    gt: torch.Tensor,
    cfg: LossConfig,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Sum over heads of supervision_weight * (weighted BCE + weighted soft IoU).

    A PredictionSet is scored from its logits; a plain mapping holds probability maps.
    Returns the differentiable total and a detached per-head breakdown for logging.
    """
    logits = _head_logits(preds)
    if not logits:
        raise ContractViolation("empty prediction set")
    w = pixel_weights(gt, cfg)
    total = None
    breakdown: Dict[str, float] = {}
    for name, z in logits.items():
        if z.shape != gt.shape:
            raise ContractViolation(f"{name} has shape {tuple(z.shape)}, gt has {tuple(gt.shape)}")
        loss = head_loss(z, gt, w, cfg)
        breakdown[name] = float(loss.detach())
        weighted = cfg.supervision_weights.get(name, 1.0) * loss
        total = weighted if total is None else total + weighted
    return total, breakdown
