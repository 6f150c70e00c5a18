"""Retrieval and grading metrics, ablation runner and zero-shot transfer harness."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import SampleRecord, StructuredStats
from .dataset import ExamDataset, to_device
from .errors import EmptySplit, FundusFuseError, KOutOfRange
from .model import MultimodalModel
from .tokenizer import Tokenizer
from .training import batch_indices, enabled_modalities, fit

LOGGER = logging.getLogger(__name__)

KS = (1, 5, 10)


def match_ranks(query: np.ndarray, gallery: np.ndarray, matches: Sequence[int]) -> np.ndarray:
    """0-based rank of each query's matched gallery item by descending cosine similarity.

    Ties are broken by ascending gallery index, so an equal-scoring item ranks
    ahead of the match only if its index is smaller.
    """
    query = np.asarray(query, np.float64)
    gallery = np.asarray(gallery, np.float64)
    matches = np.asarray(matches, np.int64)
    sims = query @ gallery.T
    target = sims[np.arange(len(matches)), matches][:, None]
    idx = np.arange(gallery.shape[0])[None, :]
    ahead = (sims > target) | ((sims == target) & (idx < matches[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(query_embs, gallery_embs, matches, k: int) -> float:
    """Percentage of queries whose matched gallery item ranks within the top ``k``."""
    m = np.asarray(gallery_embs).shape[0]
    if not 1 <= k <= m:
        raise KOutOfRange(f"k={k} outside [1, {m}]")
    ranks = match_ranks(query_embs, gallery_embs, matches)
    return 100.0 * int((ranks < k).sum()) / len(ranks)


@dataclass
class RetrievalReport:
    protocol: str
    recall_at: dict[int, float]
    gallery_size: int
    direction: str = "text_to_image"
    zero_shot: bool = False

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "direction": self.direction,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "gallery_size": self.gallery_size,
            "zero_shot": self.zero_shot,
        }


@dataclass
class ClassificationReport:
    sdrg_accuracy: float
    icdr_accuracy: float
    confusion_sdrg: list[list[int]]
    confusion_icdr: list[list[int]]

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(labels, preds, n_classes: int = 5) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def accuracy_from_logits(logits, labels) -> float:
    preds = np.argmax(np.asarray(logits), axis=1)  # first maximum wins ties
    return float((preds == np.asarray(labels)).mean() * 100.0)


@torch.no_grad()
def embed_dataset(model: MultimodalModel, dataset: ExamDataset, protocol: str = "paired",
                  modalities=("image", "text", "structured"), batch_size: int = 32, device="cpu"):
    """(image_embs, text_embs) as float64 numpy arrays on an unaugmented view."""
    was_training = model.training
    model.eval()
    view = dataset.without_augmentation()
    imgs, txts = [], []
    for idx in batch_indices(len(view), batch_size):
        batch = to_device(view.batch(idx), device, dtype=next(model.parameters()).dtype)
        img, txt = model.embed_for_retrieval(batch, protocol, modalities)
        imgs.append(img.double().cpu().numpy())
        txts.append(txt.double().cpu().numpy())
    model.train(was_training)
    return np.concatenate(imgs), np.concatenate(txts)


def evaluate_retrieval(model: MultimodalModel, dataset: ExamDataset, protocol: str = "paired",
                       modalities=("image", "text", "structured"), image_to_text: bool = False,
                       batch_size: int = 32, device="cpu") -> RetrievalReport:
    """Text queries against the whole-split image gallery, identity matching."""
    if len(dataset) == 0:
        raise EmptySplit("cannot evaluate retrieval on an empty split")
    img, txt = embed_dataset(model, dataset, protocol, modalities, batch_size, device)
    query, gallery = (img, txt) if image_to_text else (txt, img)
    matches = np.arange(len(dataset))
    recalls = {k: recall_at_k(query, gallery, matches, k) for k in KS if k <= len(dataset)}
    direction = "image_to_text" if image_to_text else "text_to_image"
    return RetrievalReport(protocol, recalls, len(dataset), direction)


@torch.no_grad()
def predict_grades(model: MultimodalModel, dataset: ExamDataset, modalities=("image", "text", "structured"),
                   batch_size: int = 32, device="cpu"):
    was_training = model.training
    model.eval()
    view = dataset.without_augmentation()
    sdrg, icdr = [], []
    for idx in batch_indices(len(view), batch_size):
        batch = to_device(view.batch(idx), device, dtype=next(model.parameters()).dtype)
        out = model(batch, modalities)
        sdrg.append(out.sdrg_logits.double().cpu().numpy())
        icdr.append(out.icdr_logits.double().cpu().numpy())
    model.train(was_training)
    return np.concatenate(sdrg), np.concatenate(icdr)


def evaluate_classification(model: MultimodalModel, dataset: ExamDataset,
                            modalities=("image", "text", "structured"), batch_size: int = 32,
                            device="cpu") -> ClassificationReport:
    if len(dataset) == 0:
        raise EmptySplit("cannot evaluate classification on an empty split")
    sdrg_logits, icdr_logits = predict_grades(model, dataset, modalities, batch_size, device)
    sdrg_pred, icdr_pred = sdrg_logits.argmax(1), icdr_logits.argmax(1)
    cm_s = confusion_matrix(dataset.sdrg.numpy(), sdrg_pred)
    cm_i = confusion_matrix(dataset.icdr.numpy(), icdr_pred)
    n = len(dataset)
    return ClassificationReport(
        sdrg_accuracy=float(np.trace(cm_s) / n * 100.0),
        icdr_accuracy=float(np.trace(cm_i) / n * 100.0),
        confusion_sdrg=cm_s.tolist(),
        confusion_icdr=cm_i.tolist(),
    )


def zero_shot_transfer(model: MultimodalModel, records: Sequence[SampleRecord], stats: StructuredStats,
                       tokenizer: Tokenizer, templates: dict[str, str], labels: Sequence[str],
                       protocol: str = "paired", modalities=("image", "text", "structured"),
                       batch_size: int = 32, device="cpu") -> RetrievalReport:
    """Retrieval on an unseen dataset using the training-time statistics, templates and vocabulary."""
    dataset = ExamDataset(records, stats, tokenizer, templates, model.config.encoder.image_side, labels)
    report = evaluate_retrieval(model, dataset, protocol, modalities, batch_size=batch_size, device=device)
    report.zero_shot = True
    return report


# -- ablations ----------------------------------------------------------------

MODALITY_CELLS = {
    "Image + Text": dict(use_image=True, use_text=True, use_structured=False),
    "Image + Structured": dict(use_image=True, use_text=False, use_structured=True),
    "Text + Structured": dict(use_image=False, use_text=True, use_structured=True),
    "All Three": dict(use_image=True, use_text=True, use_structured=True),
}
LOSS_CELLS = {
    "Classification Only": dict(use_contrastive=False, use_reconstruction=False, learn_loss_weights=False),
    "+ Contrastive": dict(use_contrastive=True, use_reconstruction=False, learn_loss_weights=False),
    "+ Reconstruction": dict(use_contrastive=True, use_reconstruction=True, learn_loss_weights=False),
    "Full": dict(use_contrastive=True, use_reconstruction=True, learn_loss_weights=True),
}
ABLATION_COLUMNS = ("configuration", "r_at_1", "sdrg", "icdr", "r_at_1_std", "sdrg_std", "icdr_std", "error")


@dataclass
class AblationRow:
    configuration: str
    retrieval: RetrievalReport | None
    classification: ClassificationReport | None
    r_at_1: float | None = None
    sdrg: float | None = None
    icdr: float | None = None
    spread: dict[str, float] = field(default_factory=dict)
    error: str = ""


def run_ablation(base: RunConfig, axis: str, train_data: ExamDataset, val_data: ExamDataset,
                 eval_data: ExamDataset, repeats: int = 1, protocol: str = "paired") -> list[AblationRow]:
    """Train and evaluate every cell of the modality or loss axis with one shared seed.

    A failing cell is recorded with its error message and the remaining cells still run.
    """
    cells = {"modality": MODALITY_CELLS, "loss": LOSS_CELLS}.get(axis)
    if cells is None:
        raise ValueError(f"unknown ablation axis {axis!r}")
    rows = []
    for name, overrides in cells.items():
        cfg = base.copy()
        for key, value in overrides.items():
            setattr(cfg.train, key, value)
        mods = enabled_modalities(cfg.train)
        r1s, sdrgs, icdrs = [], [], []
        retrieval = classification = None
        try:
            for rep in range(repeats):
                cfg.train.seed = base.train.seed + rep
                result = fit(cfg, train_data, val_data)
                model = result.model
                if {"image", "text"} <= set(mods):
                    retrieval = evaluate_retrieval(model, eval_data, protocol, mods)
                    r1s.append(retrieval.recall_at[1])
                classification = evaluate_classification(model, eval_data, mods)
                sdrgs.append(classification.sdrg_accuracy)
                icdrs.append(classification.icdr_accuracy)
        except FundusFuseError as exc:
            LOGGER.error("ablation cell %s failed: %s", name, exc)
            rows.append(AblationRow(name, None, None, error=str(exc)))
            continue
        row = AblationRow(
            name, retrieval, classification,
            r_at_1=float(np.mean(r1s)) if r1s else None,
            sdrg=float(np.mean(sdrgs)), icdr=float(np.mean(icdrs)),
        )
        if repeats > 1:
            row.spread = {"r_at_1_std": float(np.std(r1s)) if r1s else None,
                          "sdrg_std": float(np.std(sdrgs)), "icdr_std": float(np.std(icdrs))}
        rows.append(row)
    return rows


def write_ablation(rows: Sequence[AblationRow], csv_path, json_path=None) -> None:
    def fmt(v):
        return "-" if v is None else (f"{v:.2f}" if isinstance(v, float) else v)

    with Path(csv_path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for r in rows:
            writer.writerow([r.configuration, fmt(r.r_at_1), fmt(r.sdrg), fmt(r.icdr),
                             fmt(r.spread.get("r_at_1_std")), fmt(r.spread.get("sdrg_std")),
                             fmt(r.spread.get("icdr_std")), r.error])
    if json_path is not None:
        payload = [{
            "configuration": r.configuration,
            "retrieval": r.retrieval.to_dict() if r.retrieval else None,
            "classification": r.classification.to_dict() if r.classification else None,
            "r_at_1": r.r_at_1, "sdrg": r.sdrg, "icdr": r.icdr, "spread": r.spread, "error": r.error,
        } for r in rows]
        Path(json_path).write_text(json.dumps(payload, indent=2))


def write_report(path, report) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
