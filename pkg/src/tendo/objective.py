"""Hybrid Dice + cross-entropy segmentation loss and its per-pixel gradient.

For one prediction map ``p`` and binary truth ``g`` with ``N`` pixels::

    L = 1 - (2*sum(p*g) + eps) / (sum(p**2) + sum(g**2) + eps) - mean(g * log(p))

The logarithm and the ``1/p`` factor of the gradient see ``p`` clamped from
below at ``delta``; the gradient of that term is zero where the clamp is
active. Batches are scored per image and averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine.tensor import Function, Tensor


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1.0
    delta: float = 1e-7

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 0.5:
            raise ValueError(f"delta must be in (0, 0.5), got {self.delta}")


def _validate(p: np.ndarray, g: np.ndarray):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary (0/1)")
    return p, g.astype(np.float64)


def hybrid_loss(p, g, cfg: LossConfig = LossConfig()) -> float:
    """Loss of a single prediction map against its binary ground truth."""
    p, g = _validate(p, g)
    n = p.size
    num = 2.0 * np.sum(p * g) + cfg.epsilon
    den = np.sum(p * p) + np.sum(g * g) + cfg.epsilon
    ce = np.sum(g * np.log(np.maximum(p, cfg.delta))) / n
    return float(1.0 - num / den - ce)


def hybrid_loss_grad(p, g, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-pixel derivative of :func:`hybrid_loss` with respect to ``p``."""
    p, g = _validate(p, g)
    n = p.size
    num = 2.0 * np.sum(p * g) + cfg.epsilon
    den = np.sum(p * p) + np.sum(g * g) + cfg.epsilon
    dice = -(2.0 * g * den - 2.0 * p * num) / (den * den)
    active = p >= cfg.delta
    ce = np.where(active, -g / (n * np.where(active, p, 1.0)), 0.0)
    return dice + ce


def batch_hybrid_loss(p, g, cfg: LossConfig = LossConfig()) -> float:
    """Mean of the per-image losses over the leading (batch) axis."""
    return float(np.mean([hybrid_loss(pi, gi, cfg) for pi, gi in zip(p, g)]))


class HybridLoss(Function):
    def forward(self, p, g, cfg=LossConfig()):
        self.p, self.g, self.cfg = p, g, cfg
        return np.asarray(batch_hybrid_loss(p, g, cfg), dtype=p.dtype)

    def backward(self, grad):
        n = self.p.shape[0]
        gp = np.stack([hybrid_loss_grad(pi, gi, self.cfg) for pi, gi in zip(self.p, self.g)])
        return ((gp * (float(grad) / n)).astype(self.p.dtype),)


def hybrid_loss_tensor(pred: Tensor, truth: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Differentiable batch loss for an ``(n, 1, h, w)`` prediction tensor."""
    return HybridLoss.apply(pred, g=np.asarray(truth), cfg=cfg)
