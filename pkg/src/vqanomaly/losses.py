"""Training objective: prediction, embedding, commitment and separatedness terms.

Every term sums over pixels (or bottleneck sites) and averages over the
batch. Stop-gradient is ``.detach()``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch


@dataclass
class LossWeights:
    lambda_e: float = 1.0
    lambda_c: float = 1.0
    lambda_s: float = 1.0
    beta: float = 0.25
    gamma: float = 0.01
    alpha: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    pred: torch.Tensor
    embed: torch.Tensor
    commit: torch.Tensor
    sep: torch.Tensor
    total: torch.Tensor

    def items(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("pred", "embed", "commit", "sep", "total")}


def _per_sample_sum(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).sum(1)


def prediction_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    return _per_sample_sum((predicted - target).pow(2)).mean()


def embedding_loss(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Moves codebook entries toward the (frozen) encoder features."""
    return _per_sample_sum((z_e.detach() - z_q).pow(2)).mean()


def commitment_loss(z_e: torch.Tensor, z_q: torch.Tensor, beta: float = 0.25) -> torch.Tensor:
    """Moves encoder features toward their (frozen) codebook entries."""
    return beta * _per_sample_sum((z_e - z_q.detach()).pow(2)).mean()


def separatedness_loss(z_e: torch.Tensor, z_q: torch.Tensor, z_n: torch.Tensor,
                       gamma: float = 0.01, alpha: float = 1.0) -> torch.Tensor:
    """Per-site triplet hinge with the encoder feature as a frozen anchor,
    the nearest entry as positive and the second nearest as negative."""
    anchor = z_e.detach()
    pos = (anchor - z_q).pow(2).sum(1)
    neg = (anchor - z_n).pow(2).sum(1)
    hinge = torch.clamp(pos - neg + alpha, min=0.0)
    return gamma * _per_sample_sum(hinge).mean()


def total_loss(predicted, target, quantization=None, weights: LossWeights | None = None) -> LossBreakdown:
    """Weighted sum of all terms. Without a quantization result (plain U-Net)
    only the prediction term is non-zero."""
    w = weights or LossWeights()
    pred = prediction_loss(predicted, target)
    if quantization is None:
        zero = pred.new_zeros(())
        embed = commit = sep = zero
    else:
        q = quantization
        embed = embedding_loss(q.z_e, q.z_q)
        commit = commitment_loss(q.z_e, q.z_q, w.beta)
        sep = separatedness_loss(q.z_e, q.z_q, q.z_n, w.gamma, w.alpha)
    total = pred + w.lambda_e * embed + w.lambda_c * commit + w.lambda_s * sep
    return LossBreakdown(pred, embed, commit, sep, total)
