"""Learnable codebook with nearest / second-nearest retrieval."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

INIT_SCHEMES = ("uniform_small", "data_driven")


class QuantizationError(RuntimeError):
    pass


@dataclass
class QuantizationResult:
    """Quantizer outputs for a batch of B x D x H x W feature maps.

    ``z_q`` and ``z_n`` are gathered from the codebook and carry gradient to
    its entries; ``z_e`` is the encoder output as given.
    """
    z_e: torch.Tensor
    z_q: torch.Tensor
    z_n: torch.Tensor
    nearest_idx: torch.Tensor  # B x H x W
    second_idx: torch.Tensor  # B x H x W
    nearest_dist: torch.Tensor  # B x H x W squared distances
    second_dist: torch.Tensor


def nearest_two(flat: torch.Tensor, entries: torch.Tensor):
    """Indices of the nearest and second-nearest entries for each row of ``flat``.

    Squared Euclidean distance; ties go to the lowest index.
    """
    d = (flat.pow(2).sum(1, keepdim=True)
         - 2.0 * flat @ entries.t()
         + entries.pow(2).sum(1)[None, :])
    k1 = torch.argmin(d, dim=1)
    d = d.scatter(1, k1[:, None], float("inf"))
    k2 = torch.argmin(d, dim=1)
    return k1, k2


class _CopyGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z_e, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(result: QuantizationResult) -> torch.Tensor:
    """Forward value is exactly ``z_q``; the backward pass hands the incoming
    gradient to ``z_e`` unchanged and nothing to the codebook."""
    return _CopyGradient.apply(result.z_e, result.z_q.detach())


class Codebook(nn.Module):
    def __init__(self, num_entries: int = 256, dim: int = 512):
        super().__init__()
        if num_entries < 2 or dim < 1:
            raise ValueError(f"need K >= 2 and D >= 1, got K={num_entries}, D={dim}")
        self.entries = nn.Parameter(torch.empty(num_entries, dim))
        self.register_buffer("usage_counts", torch.zeros(num_entries, dtype=torch.long))
        nn.init.uniform_(self.entries, -1.0 / num_entries, 1.0 / num_entries)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def D(self) -> int:
        return self.entries.shape[1]

    def quantize(self, z_e: torch.Tensor, count: bool = True) -> QuantizationResult:
        if z_e.dim() != 4 or z_e.shape[1] != self.D:
            raise QuantizationError(f"expected B x {self.D} x H x W features, got {tuple(z_e.shape)}")
        if not torch.isfinite(z_e).all():
            raise QuantizationError("non-finite encoder features")
        b, d, h, w = z_e.shape
        flat = z_e.detach().permute(0, 2, 3, 1).reshape(-1, d).to(self.entries.dtype)
        k1, k2 = nearest_two(flat, self.entries.detach())
        if count:
            self.usage_counts += torch.bincount(k1, minlength=self.K)

        def gather(idx):
            return self.entries[idx].view(b, h, w, d).permute(0, 3, 1, 2)

        z_q, z_n = gather(k1), gather(k2)
        with torch.no_grad():
            dist1 = (z_e - z_q).pow(2).sum(1)
            dist2 = (z_e - z_n).pow(2).sum(1)
        return QuantizationResult(z_e, z_q, z_n, k1.view(b, h, w), k2.view(b, h, w), dist1, dist2)

    def forward(self, z_e):
        return self.quantize(z_e)

    def reset_usage(self):
        self.usage_counts.zero_()


def quantize(features: torch.Tensor, codebook: Codebook) -> QuantizationResult:
    return codebook.quantize(features)


def codebook_init(K: int, D: int, seed: int = 0, scheme: str = "uniform_small",
                  features: torch.Tensor | None = None) -> Codebook:
    """Build a codebook.

    ``uniform_small`` draws entries i.i.d. from U[-1/K, 1/K]. ``data_driven``
    copies rows of ``features`` (N x D, e.g. one encoder pass over a training
    batch), sampled without replacement when N >= K.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    cb = Codebook(K, D)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        if scheme == "uniform_small":
            cb.entries.copy_(torch.rand(K, D, generator=g, dtype=torch.float64).mul(2).sub(1).div(K))
        else:
            if features is None:
                raise ValueError("data_driven init needs encoder features")
            features = features.detach().reshape(-1, D)
            n = features.shape[0]
            if n >= K:
                idx = torch.randperm(n, generator=g)[:K]
            else:
                idx = torch.randint(n, (K,), generator=g)
            cb.entries.copy_(features[idx])
    return cb
