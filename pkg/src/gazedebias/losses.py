"""Identity, uniform-target adversarial, L1 gaze and combined encoder losses.

All functions accept tensors or array-likes and return 0-d tensors so they can
sit inside an autograd graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 5.0
    lambda_idc: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_adv < 0 or self.lambda_idc < 0:
            raise ValueError("loss weights must be >= 0")


def _t(x, dtype=torch.float64) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def identity_loss(true_subjects, pred) -> torch.Tensor:
    """Mean cross-entropy -log p[true] with probabilities clamped at 1e-12."""
    pred = _t(pred)
    if pred.dim() == 1:
        pred = pred.unsqueeze(0)
    labels = torch.as_tensor(np.asarray(true_subjects) if not torch.is_tensor(true_subjects) else true_subjects)
    labels = labels.long().reshape(-1)
    if len(labels) != pred.shape[0]:
        raise ValueError("label and prediction batch sizes differ")
    if labels.numel() and (labels.min() < 0 or labels.max() >= pred.shape[1]):
        raise ValueError(f"labels must lie in [0, {pred.shape[1]})")
    picked = pred.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(LOG_CLAMP)).mean()


def uniform_similarity(pred) -> torch.Tensor:
    """Cosine similarity between each distribution and the uniform vector e = [1/K, ...]."""
    pred = _t(pred)
    k = pred.shape[-1]
    if k < 2:
        raise ValueError("need at least two classes")
    e = torch.full((k,), 1.0 / k, dtype=pred.dtype)
    norm = torch.linalg.vector_norm(pred, dim=-1)
    if torch.any(norm == 0):
        raise ValueError("zero vector has no direction")
    return (pred @ e) / (torch.linalg.vector_norm(e) * norm)


def adversarial_loss(preds) -> torch.Tensor:
    preds = _t(preds)
    if preds.dim() == 1:
        preds = preds.unsqueeze(0)
    if preds.shape[0] == 0:
        raise ValueError("empty batch")
    return (1.0 - uniform_similarity(preds)).mean()


def gaze_loss(true_gazes, pred_gazes) -> torch.Tensor:
    """Per-sample |d yaw| + |d pitch|, averaged over the batch."""
    true_gazes, pred_gazes = _t(true_gazes), _t(pred_gazes)
    if true_gazes.shape != pred_gazes.shape:
        raise ValueError(f"shape mismatch {tuple(true_gazes.shape)} vs {tuple(pred_gazes.shape)}")
    diff = (true_gazes.to(pred_gazes.dtype) - pred_gazes).abs()
    return diff.reshape(-1, 2).sum(dim=1).mean()


def total_encoder_loss(l_adv, l_g, w: LossWeights) -> torch.Tensor:
    return w.lambda_adv * _t(l_adv) + _t(l_g)
