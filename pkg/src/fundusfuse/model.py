"""The full joint-embedding model: encoders, fusion, decoders, heads and loss weights."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .decoders import ImageDecoder, TextDecoder
from .encoders import MODALITIES, build_encoders, sequence_lengths
from .errors import MissingModality
from .fusion import FusionOutput, FusionTransformer
from .objectives import LOSS_NAMES


class MultimodalModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        enc = cfg.encoder
        self.config = cfg.copy()
        self.image_encoder, self.text_encoder, self.structured_encoder = build_encoders(enc)
        self.fusion = FusionTransformer(cfg.fusion, max_len=sum(sequence_lengths(enc).values()))
        self.image_decoder = ImageDecoder(cfg.decoder, enc.model_dim, enc.image_side)
        self.text_decoder = TextDecoder(cfg.decoder, enc.model_dim, enc.vocab_size, enc.max_tokens)
        self.loss_alphas = nn.Parameter(torch.zeros(len(LOSS_NAMES)))

    def encode(self, batch: dict, modalities=MODALITIES) -> dict:
        seqs = {}
        if "image" in modalities:
            seqs["image"] = self.image_encoder(batch["image"])
        if "text" in modalities:
            seqs["text"] = self.text_encoder(batch["token_ids"], batch["token_mask"])
        if "structured" in modalities:
            seqs["structured"] = self.structured_encoder(batch["structured"])
        return seqs

    def forward(self, batch: dict, modalities=MODALITIES) -> FusionOutput:
        """Encode the requested modalities and fuse them; absent modalities are never encoded."""
        return self.fusion(**self.encode(batch, modalities))

    def embed_for_retrieval(self, batch: dict, mode: str = "paired",
                            modalities=MODALITIES) -> tuple[torch.Tensor, torch.Tensor]:
        """L2-normalised (image, text) CLS embeddings.

        ``paired`` fuses all modalities in one pass, so the two CLS rows can
        attend to each other; ``modalities`` selects what that pass sees and
        must include image and text. ``isolated`` runs an image-only and a text-only
        pass, keeping the embeddings independent of the other modality.
        """
        for key in ("image", "token_ids"):
            if key not in batch:
                raise MissingModality(f"retrieval needs {key!r} in the batch")
        if mode == "paired":
            if not {"image", "text"} <= set(modalities):
                raise MissingModality("paired retrieval needs both image and text")
            out = self(batch, modalities)
            img, txt = out.img_cls, out.txt_cls
        elif mode == "isolated":
            img = self(batch, ("image",)).img_cls
            txt = self(batch, ("text",)).txt_cls
        else:
            raise ValueError(f"unknown retrieval mode {mode!r}")
        return F.normalize(img, dim=-1), F.normalize(txt, dim=-1)


def build_model(cfg: RunConfig, seed: int | None = None) -> MultimodalModel:
    if seed is not None:
        torch.manual_seed(seed)
    return MultimodalModel(cfg)


def parameter_report(model: nn.Module) -> dict[str, dict[str, int]]:
    """Trainable/frozen parameter counts per top-level submodule (for inspection only)."""
    report = {}
    for name, child in model.named_children():
        params = list(child.parameters())
        report[name] = {
            "trainable": sum(p.numel() for p in params if p.requires_grad),
            "frozen": sum(p.numel() for p in params if not p.requires_grad),
        }
    report["loss_alphas"] = {"trainable": model.loss_alphas.numel(), "frozen": 0}
    return report
