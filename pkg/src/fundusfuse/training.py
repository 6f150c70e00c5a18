"""Optimisation loop: loss assembly, clipped AdamW steps, plateau scheduling, early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .config import RunConfig, TrainConfig
from .dataset import ExamDataset, to_device
from .encoders import MODALITIES
from .errors import ConfigError, EmptyDataset, NonFiniteComponent, NonFiniteLoss
from .model import MultimodalModel, build_model
from .objectives import (
    CONTRASTIVE_PAIRS,
    LOSS_NAMES,
    LossBreakdown,
    classification_loss,
    contrastive_loss,
    reconstruction_image_loss,
    reconstruction_text_loss,
    total_loss,
)

LOGGER = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    ["epoch", "lr"] + [f"l_{n}" for n in LOSS_NAMES] + [f"w_{n}" for n in LOSS_NAMES]
    + ["train_total", "val_total"]
)


def enabled_modalities(cfg: TrainConfig) -> tuple[str, ...]:
    flags = {"image": cfg.use_image, "text": cfg.use_text, "structured": cfg.use_structured}
    mods = tuple(m for m in MODALITIES if flags[m])
    if not mods:
        raise ConfigError("at least one modality must be enabled")
    return mods


def enabled_losses(cfg: TrainConfig) -> tuple[bool, ...]:
    mods = set(enabled_modalities(cfg))
    flags = []
    for name in LOSS_NAMES:
        if name in CONTRASTIVE_PAIRS:
            flags.append(cfg.use_contrastive and set(CONTRASTIVE_PAIRS[name]) <= mods)
        elif name == "rec_img":
            flags.append(cfg.use_reconstruction and "image" in mods)
        elif name == "rec_txt":
            flags.append(cfg.use_reconstruction and "text" in mods)
        else:
            flags.append(cfg.use_classification)
    if not any(flags):
        raise ConfigError("no loss term is enabled for the selected modalities")
    return tuple(flags)


def compute_losses(model: MultimodalModel, batch: dict, cfg: TrainConfig) -> LossBreakdown:
    enabled = enabled_losses(cfg)
    out = model(batch, enabled_modalities(cfg))
    zero = out.joint.new_zeros(())
    comps = []
    for name, on in zip(LOSS_NAMES, enabled):
        if not on:
            comps.append(zero)
        elif name in CONTRASTIVE_PAIRS:
            a, b = CONTRASTIVE_PAIRS[name]
            comps.append(contrastive_loss(F.normalize(out.cls[a], dim=-1), F.normalize(out.cls[b], dim=-1),
                                          cfg.temperature))
        elif name == "rec_img":
            comps.append(reconstruction_image_loss(model.image_decoder(out.img_cls), batch["image_target"]))
        elif name == "rec_txt":
            logits = model.text_decoder(out.txt_cls, batch["token_ids"])
            comps.append(reconstruction_text_loss(logits, batch["token_ids"], batch["token_mask"]))
        else:
            comps.append(classification_loss(out.sdrg_logits, out.icdr_logits, batch["sdrg"], batch["icdr"]))
    return total_loss(model.loss_alphas, comps, enabled)


def trainable_parameters(model: MultimodalModel, cfg: TrainConfig) -> list[tuple[str, torch.nn.Parameter]]:
    """Parameters registered with the optimizer. Frozen backbone parts never appear here."""
    params = []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if name == "loss_alphas" and not cfg.learn_loss_weights:
            continue
        params.append((name, p))
    return params


def build_optimizer(model: MultimodalModel, cfg: TrainConfig) -> torch.optim.AdamW:
    params = [p for _, p in trainable_parameters(model, cfg)]
    return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def clip_gradients(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


def train_step(model: MultimodalModel, optimizer: torch.optim.Optimizer, batch: dict,
               cfg: TrainConfig) -> LossBreakdown:
    model.train()
    if any(enabled_losses(cfg)[:3]) and batch["sdrg"].shape[0] < 2:
        raise ValueError("contrastive terms need a batch of at least 2")
    model.zero_grad(set_to_none=True)
    try:
        breakdown = compute_losses(model, batch, cfg)
    except NonFiniteComponent as exc:
        raise NonFiniteLoss(str(exc)) from exc
    if not torch.isfinite(breakdown.total):
        raise NonFiniteLoss(f"non-finite total loss; components {breakdown.as_dict()}")
    breakdown.total.backward()
    params = [p for group in optimizer.param_groups for p in group["params"]]
    breakdown.grad_norm = clip_gradients(params, cfg.clip_norm)
    optimizer.step()
    return LossBreakdown(breakdown.components.detach(), breakdown.alphas.detach().clone(),
                         breakdown.weights.detach(), breakdown.total.detach(), breakdown.enabled,
                         breakdown.grad_norm)


def batch_indices(n: int, batch_size: int, order=None, min_size: int = 1) -> list[np.ndarray]:
    """Chunk ``order`` into batches; a trailing batch smaller than ``min_size`` is merged into the previous one."""
    order = np.arange(n) if order is None else np.asarray(order)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < min_size:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


@torch.no_grad()
def evaluate_loss(model: MultimodalModel, dataset: ExamDataset, cfg: TrainConfig) -> float:
    """Batch-size-weighted mean of the weighted total on an unaugmented view, alphas as they are now."""
    model.eval()
    view = dataset.without_augmentation()
    min_size = 2 if any(enabled_losses(cfg)[:3]) else 1
    total, count = 0.0, 0
    for idx in batch_indices(len(view), cfg.batch_size, min_size=min_size):
        batch = to_device(view.batch(idx), cfg.device)
        total += float(compute_losses(model, batch, cfg).total) * len(idx)
        count += len(idx)
    return total / count


class PlateauMonitor:
    """Tracks the best validation loss with a relative improvement threshold.

    ``lr_due`` fires once every ``lr_patience`` consecutive non-improving
    epochs; ``should_stop`` once ``stop_patience`` have accumulated.
    """

    def __init__(self, lr_patience: int, stop_patience: int, threshold: float = 1e-4):
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0
        self._since_reduce = 0

    def update(self, value: float) -> bool:
        improved = value < self.best - abs(self.best) * self.threshold if math.isfinite(self.best) else True
        if improved:
            self.best = value
            self.bad_epochs = 0
            self._since_reduce = 0
        else:
            self.bad_epochs += 1
            self._since_reduce += 1
        return improved

    def lr_due(self) -> bool:
        if self._since_reduce >= self.lr_patience:
            self._since_reduce = 0
            return True
        return False

    def should_stop(self) -> bool:
        return self.bad_epochs >= self.stop_patience


def snapshot(model: MultimodalModel, optimizer: torch.optim.Optimizer, cfg: RunConfig,
             meta: dict | None = None, **extra) -> Checkpoint:
    names = {id(p): n for n, p in model.named_parameters()}
    opt_state = {}
    for p, state in optimizer.state.items():
        for key, value in state.items():
            if torch.is_tensor(value):
                opt_state[f"{names[id(p)]}/{key}"] = value.detach().clone()
    groups = [{k: v for k, v in g.items() if k != "params"} for g in optimizer.param_groups]
    payload = dict(meta or {})
    payload.update(extra)
    payload["optimizer_groups"] = groups
    return Checkpoint(
        config=cfg.copy(),
        params={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer=opt_state,
        rng={"torch": torch.get_rng_state().numpy().tobytes()},
        meta=payload,
    )


def restore_model(ckpt: Checkpoint, model: MultimodalModel | None = None) -> MultimodalModel:
    if model is None:
        model = build_model(ckpt.config)
    model.load_state_dict({k: v.clone() for k, v in ckpt.params.items()})
    return model


def restore_optimizer(optimizer: torch.optim.Optimizer, model: MultimodalModel, ckpt: Checkpoint) -> None:
    by_name = dict(model.named_parameters())
    for key, value in ckpt.optimizer.items():
        name, state_key = key.rsplit("/", 1)
        optimizer.state[by_name[name]][state_key] = value.clone()
    for group, saved in zip(optimizer.param_groups, ckpt.meta.get("optimizer_groups", [])):
        for k, v in saved.items():
            group[k] = tuple(v) if isinstance(v, list) else v


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    model: MultimodalModel | None = None
    stopped_early: bool = False


def fit(cfg: RunConfig, train_data: ExamDataset, val_data: ExamDataset,
        model: MultimodalModel | None = None, meta: dict | None = None,
        restore_best: bool = True) -> FitResult:
    """Train until early stopping, ``max_epochs`` or ``max_steps``; keep the best-validation state.

    Batch order depends only on (seed, epoch); augmentation draws only on
    (seed, epoch, sample index), so repeated runs give identical histories.
    """
    tc = cfg.train
    if len(train_data) == 0 or len(val_data) == 0:
        raise EmptyDataset("training and validation data must be nonempty")
    enabled = enabled_losses(tc)
    contrastive = any(enabled[:3])
    if contrastive and len(train_data) < 2:
        raise EmptyDataset("contrastive training needs at least 2 samples")
    torch.manual_seed(tc.seed)
    if model is None:
        model = build_model(cfg, tc.seed)
    model.to(tc.device)
    train_data.seed = tc.seed
    train_data.augment = cfg.data.augment
    optimizer = build_optimizer(model, tc)
    monitor = PlateauMonitor(tc.scheduler_patience, tc.early_stop_patience, tc.plateau_threshold)
    history, best, steps, stopped = [], None, 0, False

    for epoch in range(tc.max_epochs):
        train_data.set_epoch(epoch)
        lr = optimizer.param_groups[0]["lr"]
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(train_data))
        sums = torch.zeros(len(LOSS_NAMES), dtype=torch.float64)
        train_total, seen = 0.0, 0
        for idx in batch_indices(len(train_data), tc.batch_size, order, min_size=2 if contrastive else 1):
            batch = to_device(train_data.batch(idx), tc.device)
            br = train_step(model, optimizer, batch, tc)
            sums += br.components.double().cpu() * len(idx)
            train_total += float(br.total) * len(idx)
            seen += len(idx)
            steps += 1
            if tc.max_steps and steps >= tc.max_steps:
                break
        val_total = evaluate_loss(model, val_data, tc)
        if not math.isfinite(val_total):
            raise NonFiniteLoss(f"validation loss is {val_total} at epoch {epoch}")
        with torch.no_grad():
            weights = total_loss(model.loss_alphas, [0.0] * len(LOSS_NAMES), enabled).weights
        row = {"epoch": epoch, "lr": lr}
        row.update({f"l_{n}": float(v) for n, v in zip(LOSS_NAMES, sums / seen)})
        row.update({f"w_{n}": float(v) for n, v in zip(LOSS_NAMES, weights)})
        row.update(train_total=train_total / seen, val_total=val_total)
        history.append(row)
        LOGGER.info("epoch %d lr %.2e train %.4f val %.4f", epoch, lr, row["train_total"], val_total)

        if monitor.update(val_total):
            best = snapshot(model, optimizer, cfg, meta, epoch=epoch, best_val_loss=val_total, steps=steps)
        if monitor.lr_due():
            for group in optimizer.param_groups:
                group["lr"] *= tc.scheduler_factor
        if monitor.should_stop():
            stopped = True
            break
        if tc.max_steps and steps >= tc.max_steps:
            break

    if restore_best:
        restore_model(best, model)
    model.eval()
    return FitResult(best, history, model, stopped)


def write_history(path, history: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_history(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
