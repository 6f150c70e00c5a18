"""Contrastive, reconstruction and classification losses and their learnable softmax weighting."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import (
    EmptyMask,
    LabelOutOfRange,
    NonFiniteComponent,
    NotNormalized,
    ShapeMismatch,
)

LOSS_NAMES = ("img_txt", "img_str", "txt_str", "rec_img", "rec_txt", "cls")
CONTRASTIVE_PAIRS = {"img_txt": ("image", "text"), "img_str": ("image", "structured"), "txt_str": ("text", "structured")}
DEFAULT_TEMPERATURE = 0.07
NORM_TOLERANCE = 1e-4


def contrastive_loss(a: torch.Tensor, b: torch.Tensor, tau: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Symmetric InfoNCE between L2-normalised rows of ``a`` and ``b`` (row i matches row i)."""
    if a.shape != b.shape or a.dim() != 2:
        raise ShapeMismatch(f"contrastive inputs must both be (N, d), got {tuple(a.shape)} and {tuple(b.shape)}")
    for name, x in (("A", a), ("B", b)):
        dev = (x.norm(dim=1) - 1).abs().max()
        if dev > NORM_TOLERANCE:
            raise NotNormalized(f"rows of {name} are not unit norm (max deviation {float(dev):.2e})")
    if a.shape[0] == 1:
        warnings.warn("contrastive loss with a single pair is identically 0", RuntimeWarning, stacklevel=2)
    logits = a @ b.T / tau
    target = torch.arange(a.shape[0], device=a.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def reconstruction_image_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return F.mse_loss(pred, target)


def reconstruction_text_loss(logits: torch.Tensor, target_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Token cross-entropy averaged over positions where ``mask`` is true."""
    if logits.shape[:-1] != target_ids.shape or mask.shape != target_ids.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)}, ids {tuple(target_ids.shape)}, mask {tuple(mask.shape)}")
    count = mask.sum()
    if count == 0:
        raise EmptyMask("no non-pad positions to score")
    per_token = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target_ids.reshape(-1), reduction="none")
    return (per_token * mask.reshape(-1).to(per_token.dtype)).sum() / count


def classification_loss(sdrg_logits, icdr_logits, sdrg_label, icdr_label) -> torch.Tensor:
    for name, labels, logits in (("sdrg", sdrg_label, sdrg_logits), ("icdr", icdr_label, icdr_logits)):
        if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
            raise LabelOutOfRange(f"{name} labels must lie in [0, {logits.shape[-1] - 1}]")
    per_sample = 0.5 * (F.cross_entropy(sdrg_logits, sdrg_label, reduction="none")
                        + F.cross_entropy(icdr_logits, icdr_label, reduction="none"))
    return per_sample.mean()


@dataclass
class LossBreakdown:
    components: torch.Tensor  # (6,) in LOSS_NAMES order; disabled entries are 0
    alphas: torch.Tensor      # (6,)
    weights: torch.Tensor     # (6,) softmax over enabled alphas, 0 elsewhere
    total: torch.Tensor       # scalar
    enabled: tuple[bool, ...]
    grad_norm: float | None = None

    def __getattr__(self, name):
        if name.startswith("l_") and name[2:] in LOSS_NAMES:
            return self.components[LOSS_NAMES.index(name[2:])]
        raise AttributeError(name)

    def as_dict(self) -> dict[str, float]:
        out = {f"l_{n}": float(v) for n, v in zip(LOSS_NAMES, self.components.detach())}
        out.update({f"w_{n}": float(v) for n, v in zip(LOSS_NAMES, self.weights.detach())})
        out["total"] = float(self.total.detach())
        return out


def loss_weights(alphas: torch.Tensor, enabled: Sequence[bool] | None = None) -> torch.Tensor:
    if enabled is None:
        return torch.softmax(alphas, dim=0)
    keep = torch.tensor(list(enabled), dtype=torch.bool, device=alphas.device)
    if not keep.any():
        raise ValueError("at least one loss term must be enabled")
    masked = alphas.masked_fill(~keep, float("-inf"))
    return torch.softmax(masked, dim=0)


def total_loss(alphas: torch.Tensor, components: Sequence, enabled: Sequence[bool] | None = None) -> LossBreakdown:
    """Weighted sum of the six components with weights ``softmax(alphas)``.

    Disabled terms are dropped from the softmax, so the remaining weights
    still sum to one.
    """
    if enabled is None:
        enabled = (True,) * len(LOSS_NAMES)
    enabled = tuple(bool(e) for e in enabled)
    values = []
    for name, on, comp in zip(LOSS_NAMES, enabled, components):
        comp = torch.as_tensor(comp, dtype=alphas.dtype, device=alphas.device)
        if on and not torch.isfinite(comp):
            raise NonFiniteComponent(f"loss component {name} is not finite: {comp.detach().item() if comp.numel() == 1 else comp}")
        values.append(comp if on else torch.zeros((), dtype=alphas.dtype, device=alphas.device))
    comps = torch.stack(values)
    weights = loss_weights(alphas, enabled)
    return LossBreakdown(comps, alphas, weights, (weights * comps).sum(), enabled)
