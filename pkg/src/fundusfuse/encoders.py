"""Image, text and structured encoders producing CLS-prefixed token sequences.

Each encoder wraps a backbone that returns per-token hidden states of a
declared ``width`` and freezes its own early layers. The toy backbones are
small trainable transformers; the pretrained adapters load torchvision and
Hugging Face weights and are only used when ``encoder.backbone=pretrained``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import EncoderConfig
from .errors import NonFiniteInput, ShapeError

MODALITIES = ("image", "text", "structured")


@dataclass
class TokenSequence:
    embeddings: torch.Tensor          # (B, L, d)
    modality: str
    mask: torch.Tensor | None = None  # (B, L) bool, True = real token
    cls_index: int = 0

    def __post_init__(self):
        if self.embeddings.dim() != 3 or self.embeddings.shape[1] < 1:
            raise ShapeError(f"token sequence must be (B, L>=1, d), got {tuple(self.embeddings.shape)}")

    @property
    def length(self) -> int:
        return self.embeddings.shape[1]

    @property
    def valid(self) -> torch.Tensor:
        if self.mask is None:
            b, n, _ = self.embeddings.shape
            return torch.ones(b, n, dtype=torch.bool, device=self.embeddings.device)
        return self.mask


def _block(width: int, heads: int, dropout: float) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        width, heads, 4 * width, dropout, activation="gelu", batch_first=True, norm_first=True
    )


def _freeze(*modules) -> None:
    for m in modules:
        params = [m] if isinstance(m, nn.Parameter) else m.parameters()
        for p in params:
            p.requires_grad_(False)


class ToyVisionBackbone(nn.Module):
    """Patch-linear ViT. Returns ``num_prefix_tokens`` class token(s) followed by patch states."""

    num_prefix_tokens = 1

    def __init__(self, image_side, patch_size, width, depth, heads, freeze_depth=0, dropout=0.0):
        super().__init__()
        self.width = width
        self.image_side = image_side
        self.patch_size = patch_size
        n_patches = (image_side // patch_size) ** 2
        self.patch_embed = nn.Conv2d(3, width, patch_size, stride=patch_size)
        self.class_token = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, n_patches + 1, width) * 0.02)
        self.blocks = nn.ModuleList(_block(width, heads, dropout) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        if freeze_depth:
            _freeze(self.patch_embed, self.class_token, self.pos_embed, *self.blocks[:freeze_depth])

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(images).flatten(2).transpose(1, 2)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patchify(images)
        x = torch.cat([self.class_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class ToyTextBackbone(nn.Module):
    def __init__(self, vocab_size, max_tokens, width, depth, heads, freeze_depth=0, dropout=0.0):
        super().__init__()
        self.width = width
        self.token_embed = nn.Embedding(vocab_size, width)
        self.pos_embed = nn.Parameter(torch.randn(1, max_tokens, width) * 0.02)
        self.embed_norm = nn.LayerNorm(width)
        self.blocks = nn.ModuleList(_block(width, heads, dropout) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        if freeze_depth:
            _freeze(self.token_embed, self.pos_embed, self.embed_norm, *self.blocks[:freeze_depth])

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = self.embed_norm(self.token_embed(ids) + self.pos_embed[:, : ids.shape[1]])
        pad = None if mask is None else ~mask
        for block in self.blocks:
            x = block(x, src_key_padding_mask=pad)
        return self.norm(x)


class TorchvisionViTBackbone(nn.Module):
    """Adapter around torchvision's ViT-B/16; first ``freeze_depth`` blocks frozen."""

    num_prefix_tokens = 1

    def __init__(self, freeze_depth=10, weights="DEFAULT"):
        super().__init__()
        from torchvision.models import vit_b_16

        self.vit = vit_b_16(weights=weights)
        self.width = self.vit.hidden_dim
        layers = list(self.vit.encoder.layers)
        _freeze(self.vit.conv_proj, self.vit.class_token, self.vit.encoder.pos_embedding, *layers[:freeze_depth])

    def forward(self, images):
        x = self.vit._process_input(images)
        x = torch.cat([self.vit.class_token.expand(x.shape[0], -1, -1), x], dim=1)
        return self.vit.encoder(x)


class HFTextBackbone(nn.Module):
    """Adapter for a BERT-family Hugging Face encoder; embeddings and first blocks frozen."""

    def __init__(self, name: str, freeze_depth=10):
        super().__init__()
        from transformers import AutoModel

        self.model = AutoModel.from_pretrained(name)
        self.width = self.model.config.hidden_size
        _freeze(self.model.embeddings, *self.model.encoder.layer[:freeze_depth])

    def forward(self, ids, mask=None):
        return self.model(input_ids=ids, attention_mask=mask).last_hidden_state


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, backbone: nn.Module | None = None):
        super().__init__()
        if backbone is None:
            backbone = ToyVisionBackbone(
                cfg.image_side, cfg.patch_size, cfg.vision_width, cfg.vision_depth,
                cfg.vision_heads, cfg.vision_freeze_depth, cfg.backbone_dropout,
            )
        self.backbone = backbone
        self.image_side = cfg.image_side
        self.patch_size = cfg.patch_size
        self.proj = nn.Linear(backbone.width, cfg.model_dim)
        self.cls = nn.Parameter(torch.randn(cfg.model_dim) * 0.02)

    def forward(self, images: torch.Tensor) -> TokenSequence:
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] != images.shape[3]:
            raise ShapeError(f"expected (B, 3, S, S) images, got {tuple(images.shape)}")
        if images.shape[-1] != self.image_side or images.shape[-1] % self.patch_size:
            raise ShapeError(f"image side {images.shape[-1]} does not match configured {self.image_side}")
        hidden = self.backbone(images)[:, self.backbone.num_prefix_tokens:]
        tokens = self.proj(hidden)
        cls = self.cls.expand(tokens.shape[0], 1, -1)
        return TokenSequence(torch.cat([cls, tokens], dim=1), "image")


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, backbone: nn.Module | None = None):
        super().__init__()
        if backbone is None:
            backbone = ToyTextBackbone(
                cfg.vocab_size, cfg.max_tokens, cfg.text_width, cfg.text_depth,
                cfg.text_heads, cfg.text_freeze_depth, cfg.backbone_dropout,
            )
        self.backbone = backbone
        self.max_tokens = cfg.max_tokens
        self.kept_tokens = cfg.kept_tokens
        self.proj = nn.Linear(backbone.width, cfg.model_dim)
        self.cls = nn.Parameter(torch.randn(cfg.model_dim) * 0.02)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None) -> TokenSequence:
        if ids.dim() != 2 or ids.shape[1] > self.max_tokens:
            raise ShapeError(f"expected (B, T<={self.max_tokens}) token ids, got {tuple(ids.shape)}")
        if mask is None:
            mask = torch.ones_like(ids, dtype=torch.bool)
        # truncation happens after the backbone: the kept states are contextual
        hidden = self.backbone(ids, mask)[:, : self.kept_tokens]
        tokens = self.proj(hidden)
        b = tokens.shape[0]
        cls = self.cls.expand(b, 1, -1)
        keep = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=ids.device), mask[:, : self.kept_tokens]], 1)
        return TokenSequence(torch.cat([cls, tokens], dim=1), "text", mask=keep)


class StructuredEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.input_dim = cfg.structured_input_dim
        self.mlp = nn.Sequential(
            nn.Linear(cfg.structured_input_dim, cfg.structured_hidden1),
            nn.ReLU(),
            nn.Dropout(cfg.structured_dropout),
            nn.Linear(cfg.structured_hidden1, cfg.structured_hidden2),
            nn.ReLU(),
            nn.Dropout(cfg.structured_dropout),
            nn.Linear(cfg.structured_hidden2, cfg.model_dim),
        )
        self.cls = nn.Parameter(torch.randn(cfg.model_dim) * 0.02)

    def forward(self, features: torch.Tensor) -> TokenSequence:
        if features.dim() != 2 or features.shape[1] != self.input_dim:
            raise ShapeError(f"expected (B, {self.input_dim}) features, got {tuple(features.shape)}")
        if not torch.isfinite(features).all():
            raise NonFiniteInput("structured features contain NaN or inf")
        latent = self.mlp(features).unsqueeze(1)
        cls = self.cls.expand(latent.shape[0], 1, -1)
        return TokenSequence(torch.cat([cls, latent], dim=1), "structured")


def build_encoders(cfg: EncoderConfig) -> tuple[ImageEncoder, TextEncoder, StructuredEncoder]:
    if cfg.backbone == "pretrained":
        vision = TorchvisionViTBackbone(cfg.vision_freeze_depth)
        text = HFTextBackbone(cfg.text_pretrained, cfg.text_freeze_depth)
        return ImageEncoder(cfg, vision), TextEncoder(cfg, text), StructuredEncoder(cfg)
    return ImageEncoder(cfg), TextEncoder(cfg), StructuredEncoder(cfg)


def sequence_lengths(cfg: EncoderConfig) -> dict[str, int]:
    return {
        "image": (cfg.image_side // cfg.patch_size) ** 2 + 1,
        "text": cfg.kept_tokens + 1,
        "structured": 2,
    }
