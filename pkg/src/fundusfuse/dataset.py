"""Tensor-level view of a list of exam records."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np
import torch

from .data import (
    SampleRecord,
    StructuredStats,
    augment_image,
    generate_clinical_note,
    label_order,
    preprocess_structured,
    read_image,
    resize_unit,
    sample_rng,
    standardize,
)
from .tokenizer import Tokenizer


class ExamDataset(torch.utils.data.Dataset):
    """Yields dicts with standardised image, [0,1] reconstruction target, structured vector,
    token ids/mask and both grades. Decoded images are cached after first use.

    ``augment`` is the pipeline flag: only training views set it, and
    :meth:`without_augmentation` returns the view used by evaluation.
    """

    def __init__(self, records: Sequence[SampleRecord], stats: StructuredStats, tokenizer: Tokenizer,
                 templates: dict[str, str], image_side: int, labels: Sequence[str] | None = None,
                 augment: bool = False, seed: int = 0):
        self.records = list(records)
        self.stats = stats
        self.tokenizer = tokenizer
        self.templates = templates
        self.image_side = image_side
        self.labels = list(labels) if labels is not None else label_order(self.records)
        self.augment = augment
        self.seed = seed
        self.epoch = 0
        self.notes = [generate_clinical_note(r.disease_labels, templates, self.labels) for r in self.records]
        toks = [tokenizer(n) for n in self.notes]
        self.token_ids = torch.from_numpy(np.stack([t.ids for t in toks])) if toks else torch.zeros(0, tokenizer.max_tokens, dtype=torch.long)
        self.token_mask = torch.from_numpy(np.stack([t.mask for t in toks])) if toks else torch.zeros(0, tokenizer.max_tokens, dtype=torch.bool)
        self.structured = torch.from_numpy(np.stack([preprocess_structured(r, stats) for r in self.records])) if self.records else torch.zeros(0, 6)
        self.sdrg = torch.tensor([r.sdrg_grade for r in self.records], dtype=torch.long)
        self.icdr = torch.tensor([r.icdr_grade for r in self.records], dtype=torch.long)
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def without_augmentation(self) -> "ExamDataset":
        view = copy.copy(self)
        view.augment = False
        return view

    def image01(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = resize_unit(read_image(self.records[i].image_path), self.image_side)
        return self._cache[i]

    def __getitem__(self, i: int) -> dict:
        img = self.image01(i)
        if self.augment:
            img = augment_image(img, sample_rng(self.seed, self.epoch, i))
        return {
            "image": torch.from_numpy(standardize(img)),
            "image_target": torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))),
            "structured": self.structured[i],
            "token_ids": self.token_ids[i],
            "token_mask": self.token_mask[i],
            "sdrg": self.sdrg[i],
            "icdr": self.icdr[i],
            "index": torch.tensor(i),
        }

    def batch(self, indices) -> dict:
        items = [self[int(i)] for i in indices]
        return {k: torch.stack([it[k] for it in items]) for k in items[0]}


def to_device(batch: dict, device, dtype=None) -> dict:
    out = {}
    for k, v in batch.items():
        v = v.to(device)
        if dtype is not None and v.is_floating_point():
            v = v.to(dtype)
        out[k] = v
    return out
