"""Reconstruction branches conditioned on the post-fusion image and text CLS embeddings."""

from __future__ import annotations

import torch
from torch import nn

from .config import DecoderConfig
from .errors import LengthOverflow, ShapeError


def upsampling_plan(side: int) -> tuple[int, int]:
    """Return (seed_side, n_doublings) such that seed_side * 2**n == side with seed_side odd or 1."""
    seed, n = side, 0
    while seed > 1 and seed % 2 == 0:
        seed //= 2
        n += 1
    return seed, n


class ImageDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, model_dim: int, image_side: int):
        super().__init__()
        self.image_side = image_side
        self.seed_side, n = upsampling_plan(image_side)
        channels = [max(cfg.image_channels >> i, cfg.image_min_channels) for i in range(n + 1)]
        self.seed_channels = channels[0]
        self.fc = nn.Linear(model_dim, channels[0] * self.seed_side ** 2)
        stages = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            stages += [nn.ConvTranspose2d(c_in, c_out, kernel_size=4, stride=2, padding=1), nn.ReLU()]
        self.stages = nn.Sequential(*stages)
        self.to_rgb = nn.Conv2d(channels[-1], 3, kernel_size=3, padding=1)
        self._init_weights()

    def _init_weights(self):
        # He init over the effective fan-in; a stride-2 k=4 transposed conv sees c_in * 4 inputs per pixel.
        # The framework default shrinks the signal at every stage and starves the early layers of gradient.
        nn.init.kaiming_normal_(self.fc.weight, nonlinearity="relu")
        nn.init.zeros_(self.fc.bias)
        for m in self.stages:
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.in_channels * (m.kernel_size[0] // m.stride[0]) ** 2
                nn.init.normal_(m.weight, std=(2.0 / fan_in) ** 0.5)
                nn.init.zeros_(m.bias)

    def forward(self, img_cls: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.fc(img_cls)).view(-1, self.seed_channels, self.seed_side, self.seed_side)
        return torch.sigmoid(self.to_rgb(self.stages(x)))


class TextDecoder(nn.Module):
    """Causal transformer over ``[txt_cls, emb(y_0), ..., emb(y_{T-2})]`` predicting ``y_0 .. y_{T-1}``."""

    def __init__(self, cfg: DecoderConfig, model_dim: int, vocab_size: int, max_len: int):
        super().__init__()
        self.max_len = max_len
        self.token_embed = nn.Embedding(vocab_size, model_dim)
        self.pos_embed = nn.Parameter(torch.randn(1, max_len, model_dim) * 0.02)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                model_dim, cfg.text_heads, 4 * model_dim, cfg.text_dropout,
                activation="relu", batch_first=True, norm_first=True,
            )
            for _ in range(cfg.text_layers)
        )
        self.norm = nn.LayerNorm(model_dim)
        self.out = nn.Linear(model_dim, vocab_size)

    def _run(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[1]
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        x = x + self.pos_embed[:, :t]
        for layer in self.layers:
            x = layer(x, src_mask=causal)
        return self.out(self.norm(x))

    def forward(self, txt_cls: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
        if target_ids.dim() != 2 or target_ids.shape[1] < 1:
            raise ShapeError(f"expected (B, T>=1) target ids, got {tuple(target_ids.shape)}")
        if target_ids.shape[1] > self.max_len:
            raise LengthOverflow(f"target length {target_ids.shape[1]} exceeds {self.max_len}")
        shifted = self.token_embed(target_ids[:, :-1])
        return self._run(torch.cat([txt_cls.unsqueeze(1), shifted], dim=1))

    @torch.no_grad()
    def greedy_decode(self, txt_cls: torch.Tensor, eos_id: int, max_len: int | None = None) -> torch.Tensor:
        """Greedy token ids for inspection; stops when every row has emitted ``eos_id``."""
        max_len = min(max_len or self.max_len, self.max_len)
        x = txt_cls.unsqueeze(1)
        out = []
        for _ in range(max_len):
            nxt = self._run(x)[:, -1].argmax(-1)
            out.append(nxt)
            if bool((torch.stack(out, 1) == eos_id).any(1).all()):
                break
            x = torch.cat([x, self.token_embed(nxt).unsqueeze(1)], dim=1)
        return torch.stack(out, dim=1)
