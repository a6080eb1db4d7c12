"""Generator objective: sync, L1 pixel, perceptual and adversarial terms and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, TrainingDivergedError

TERMS = ("sync", "pixel", "perceptual", "adversarial")
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    sync: float = 0.5
    pixel: float = 10.0
    perceptual: float = 1.0
    adversarial: float = 0.1

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if not v >= 0.0:
                raise InputError(f"loss weight {k} must be non-negative, got {v}")

    def without(self, term: str) -> "LossWeights":
        if term not in TERMS:
            raise InputError(f"unknown loss term {term!r}")
        return replace(self, **{term: 0.0})

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sync, self.pixel, self.perceptual, self.adversarial)


@dataclass(frozen=True)
class SyncEpsilon:
    norm: float = 1e-8
    ratio: float = 1e-6

    def __post_init__(self) -> None:
        if not (0.0 < self.norm < 1.0 and 0.0 < self.ratio < 1.0):
            raise InputError("sync epsilons must lie in (0, 1)")


@dataclass
class LossBreakdown:
    sync: float
    pixel: float
    perceptual: float
    adversarial: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def sync_cosine(v: torch.Tensor, s: torch.Tensor, eps: SyncEpsilon = SyncEpsilon()) -> torch.Tensor:
    """Clamped cosine ``v.s / max(|v||s|, eps_norm)`` in [eps_ratio, 1], per row."""
    _check_same(v, s, "sync loss")
    dot = (v * s).sum(-1)
    denom = torch.clamp(v.norm(dim=-1) * s.norm(dim=-1), min=eps.norm)
    return torch.clamp(dot / denom, eps.ratio, 1.0)


def sync_loss(v: torch.Tensor, s: torch.Tensor, eps: SyncEpsilon = SyncEpsilon()) -> torch.Tensor:
    """Mean over rows of ``-log(clamped cosine)``; a 1-D input is a single pair."""
    return -torch.log(sync_cosine(v, s, eps)).mean()


def pixel_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(output, target, "pixel loss")
    return (output - target).abs().mean()


class PerceptualExtractor(nn.Module):
    """Frozen, seeded three-stage convolutional feature pyramid.

    Weights live in buffers, so optimisers never see them. Inputs are
    (B, C, H, W) with C in {1, 3}; colour is averaged to one channel first.
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64),
                 stage_weights: Sequence[float] = (1.0, 1.0, 1.0)):
        super().__init__()
        if len(widths) != 3 or len(stage_weights) != 3:
            raise InputError("perceptual extractor has exactly three stages")
        gen = torch.Generator().manual_seed(seed)
        chans = (1, *widths)
        for k in range(3):
            fan_in = chans[k] * 9
            w = torch.randn(chans[k + 1], chans[k], 3, 3, generator=gen) * math.sqrt(2.0 / fan_in)
            b = torch.randn(chans[k + 1], generator=gen) * 0.1
            self.register_buffer(f"w{k}", w)
            self.register_buffer(f"b{k}", b)
        self.stage_weights = tuple(float(x) for x in stage_weights)
        self.seed = seed

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4:
            raise InputError(f"perceptual extractor expects (B, C, H, W), got {tuple(x.shape)}")
        if x.shape[1] == 3:
            x = x.mean(1, keepdim=True)
        feats = []
        h = x
        for k in range(3):
            if k:
                h = F.avg_pool2d(h, 2)
            w, b = getattr(self, f"w{k}").to(h.dtype), getattr(self, f"b{k}").to(h.dtype)
            h = F.elu(F.conv2d(h, w, b, padding=1))
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.features(x)


def _as_images(x: torch.Tensor) -> torch.Tensor:
    # (..., C, H, W) -> (B, C, H, W); bare (H, W) frames get a channel axis
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x.reshape(-1, *x.shape[-3:])


def perceptual_loss(output: torch.Tensor, target: torch.Tensor, extractor: PerceptualExtractor) -> torch.Tensor:
    _check_same(output, target, "perceptual loss")
    fo = extractor(_as_images(output))
    ft = extractor(_as_images(target))
    return sum(w * (a - b).abs().mean() for w, a, b in zip(extractor.stage_weights, fo, ft))


def adversarial_from_probs(p_real: torch.Tensor, p_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(discriminator loss, non-saturating generator loss) from D's probabilities."""
    pr = torch.clamp(p_real, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pf = torch.clamp(p_fake, PROB_CLAMP, 1.0 - PROB_CLAMP)
    d_loss = -torch.log(pr).mean() - torch.log1p(-pf).mean()
    g_loss = -torch.log(pf).mean()
    return d_loss, g_loss


def adversarial_losses(D: nn.Module, real: torch.Tensor, fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return adversarial_from_probs(D(real), D(fake))


def total_loss(sync, pixel, perceptual, adversarial, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of the four terms; refuses non-finite inputs."""
    terms = {"sync": sync, "pixel": pixel, "perceptual": perceptual, "adversarial": adversarial}
    vals = {k: float(v) for k, v in terms.items()}
    if not all(math.isfinite(v) for v in vals.values()):
        raise TrainingDivergedError(None, vals)
    total = (weights.sync * vals["sync"] + weights.pixel * vals["pixel"]
             + weights.perceptual * vals["perceptual"] + weights.adversarial * vals["adversarial"])
    return LossBreakdown(total=total, **vals)


def weighted_objective(terms: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Differentiable counterpart of :func:`total_loss`; zero-weight terms drop out of the graph."""
    out = None
    for name in TERMS:
        w = getattr(weights, name)
        if w == 0.0:
            continue
        part = w * terms[name]
        out = part if out is None else out + part
    if out is None:
        out = torch.zeros((), requires_grad=True)
    return out
