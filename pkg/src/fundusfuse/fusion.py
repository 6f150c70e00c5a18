"""Modality-aware fusion transformer, joint embedding and grading heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import FusionConfig
from .encoders import MODALITIES, TokenSequence
from .errors import AllModalitiesAbsent, DimensionMismatch

N_GRADES = 5


@dataclass
class FusionOutput:
    fused_sequence: torch.Tensor        # (B, L_total, d)
    offsets: dict[str, int]             # segment start per present modality
    cls: dict[str, torch.Tensor]        # post-fusion CLS rows per present modality
    joint: torch.Tensor                 # (B, d)
    sdrg_logits: torch.Tensor           # (B, 5)
    icdr_logits: torch.Tensor           # (B, 5)

    @property
    def img_cls(self):
        return self.cls.get("image")

    @property
    def txt_cls(self):
        return self.cls.get("text")

    @property
    def str_cls(self):
        return self.cls.get("structured")


class FusionTransformer(nn.Module):
    def __init__(self, cfg: FusionConfig, max_len: int = 512):
        super().__init__()
        d = cfg.model_dim
        self.model_dim = d
        self.type_embed = nn.Parameter(torch.randn(len(MODALITIES), d) * 0.02)
        self.pos_embed = nn.Parameter(torch.zeros(1, max_len, d)) if cfg.positions else None
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d, cfg.heads, cfg.ff_mult * d, cfg.dropout,
                activation="relu", batch_first=True, norm_first=cfg.norm_first,
            )
            for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(d) if cfg.norm_first else nn.Identity()
        self.null_cls = nn.Parameter(torch.randn(len(MODALITIES), d) * 0.02)
        self.joint_proj = nn.Linear(len(MODALITIES) * d, d)
        self.sdrg_head = nn.Linear(d, N_GRADES)
        self.icdr_head = nn.Linear(d, N_GRADES)

    def assemble(self, image=None, text=None, structured=None):
        """Concatenate present segments (image, text, structured) with type embeddings added."""
        sequences = {"image": image, "text": text, "structured": structured}
        present = [m for m in MODALITIES if sequences[m] is not None]
        if not present:
            raise AllModalitiesAbsent("fusion needs at least one modality")
        batch = {sequences[m].embeddings.shape[0] for m in present}
        if len(batch) != 1:
            raise DimensionMismatch(f"batch sizes differ across modalities: {sorted(batch)}")
        parts, valid, offsets, pos = [], [], {}, 0
        for i, m in enumerate(MODALITIES):
            seq: TokenSequence | None = sequences[m]
            if seq is None:
                continue
            if seq.embeddings.shape[-1] != self.model_dim:
                raise DimensionMismatch(
                    f"{m} tokens have width {seq.embeddings.shape[-1]}, expected {self.model_dim}")
            offsets[m] = pos
            parts.append(seq.embeddings + self.type_embed[i])
            valid.append(seq.valid)
            pos += seq.length
        x = torch.cat(parts, dim=1)
        if self.pos_embed is not None:
            x = x + self.pos_embed[:, :pos]
        return x, torch.cat(valid, dim=1), offsets

    def forward(self, image=None, text=None, structured=None) -> FusionOutput:
        x, valid, offsets = self.assemble(image, text, structured)
        pad = None if bool(valid.all()) else ~valid
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=pad)
        x = self.norm(x)
        cls = {m: x[:, off] for m, off in offsets.items()}
        b = x.shape[0]
        slots = [cls[m] if m in cls else self.null_cls[i].expand(b, -1) for i, m in enumerate(MODALITIES)]
        joint = self.joint_proj(torch.cat(slots, dim=-1))
        sdrg, icdr = self.classify(joint)
        return FusionOutput(x, offsets, cls, joint, sdrg, icdr)

    def classify(self, joint: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.sdrg_head(joint), self.icdr_head(joint)

    @torch.no_grad()
    def first_layer_attention(self, image=None, text=None, structured=None) -> torch.Tensor:
        """Head-averaged attention probabilities of layer 0, shape (B, L, L)."""
        x, valid, _ = self.assemble(image, text, structured)
        layer = self.layers[0]
        h = layer.norm1(x) if layer.norm_first else x
        _, weights = layer.self_attn(h, h, h, key_padding_mask=~valid, need_weights=True)
        return weights
