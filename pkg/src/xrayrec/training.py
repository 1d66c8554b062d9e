"""Losses, Nesterov optimizer, and the training loop with checkpointing.

Recipe defaults: SGD with Nesterov momentum 0.9, constant learning rate 0.01
(no scheduler), batch size 128, 60 epochs, binary cross entropy over sigmoid
outputs. The Nesterov update follows the lookahead-gradient recurrence

    v <- mu * v - lr * grad f(theta + mu * v)
    theta <- theta + v

which differs from some library parameterizations; it is implemented here
directly so the recurrence is exactly the one stated.

Training is deterministic for a fixed seed and single-threaded data order, up
to the compute backend's floating-point reassociation.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .augment import AugmentPipelineConfig, augment_batch
from .datasets import DatasetManifest, ImageStore
from .errors import ConfigError, TrainingDiverged
from .model import (
    AttentionConfig,
    BackboneConfig,
    Classifier,
    HeadConfig,
    build_classifier,
    class_scores,
    rescore,
    save_checkpoint,
)

PROB_EPS = 1e-7
TRAINLOG_SCHEMA = "xrayrec-trainlog-v1"


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 60
    input_scale: int = 256
    crop_scale: int = 224
    augment: AugmentPipelineConfig = field(default_factory=AugmentPipelineConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    rng_seed: int = 0
    weight_decay: float = 0.0
    # Epochs between evaluation passes when an eval manifest is given; 0 never.
    eval_every: int = 1

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.crop_scale > self.input_scale:
            raise ConfigError(f"crop_scale {self.crop_scale} exceeds input_scale {self.input_scale}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.eval_every < 0:
            raise ConfigError(f"eval_every must be non-negative, got {self.eval_every}")
        self.backbone.validate()
        self.attention.validate(self.backbone.feature_channels)
        self.head.validate()
        self.effective_augment().validate()

    def effective_augment(self) -> AugmentPipelineConfig:
        """Pipeline geometry always comes from input_scale/crop_scale."""
        return replace(self.augment, resize_to=self.input_scale, crop_to=self.crop_scale)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_time: float
    eval_map: float | None = None


@dataclass
class TrainLog:
    rng_seed: int
    config_hash: str | None = None
    epochs: list[EpochRecord] = field(default_factory=list)

    def validate(self) -> None:
        for i, record in enumerate(self.epochs):
            if record.epoch != i:
                raise ConfigError(f"epoch records must be contiguous from 0, found {record.epoch} at position {i}")


def write_train_log(path: str | Path, log: TrainLog) -> None:
    """Line-delimited records: one meta line, then one object per epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        meta = {"schema": TRAINLOG_SCHEMA, "rng_seed": log.rng_seed, "config_hash": log.config_hash}
        f.write(json.dumps(meta) + "\n")
        for record in log.epochs:
            f.write(json.dumps(asdict(record)) + "\n")


def read_train_log(path: str | Path) -> TrainLog:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"training log not found: {path}")
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("schema") != TRAINLOG_SCHEMA:
        raise ConfigError(f"not a recognized training log (expected schema {TRAINLOG_SCHEMA}): {path}")
    meta = lines[0]
    log = TrainLog(
        rng_seed=meta["rng_seed"],
        config_hash=meta.get("config_hash"),
        epochs=[EpochRecord(**record) for record in lines[1:]],
    )
    log.validate()
    return log


# ---------------------------------------------------------------------------
# losses


def bce_multilabel_loss(probabilities: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over all terms of -[t*log p + (1-t)*log(1-p)], p clamped to [1e-7, 1-1e-7]."""
    if probabilities.shape != targets.shape:
        raise ConfigError(f"shape mismatch: probabilities {tuple(probabilities.shape)} vs targets {tuple(targets.shape)}")
    p = probabilities.clamp(PROB_EPS, 1.0 - PROB_EPS)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def mixup_loss(loss_original: torch.Tensor, loss_shuffled: torch.Tensor, lam: float) -> torch.Tensor:
    """Exact convex combination lam * L_original + (1 - lam) * L_shuffled."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    return lam * loss_original + (1.0 - lam) * loss_shuffled


def rescoring_loss(
    logits6: torch.Tensor,
    targets5: torch.Tensor,
    conditional_mode: str = "masked",
) -> torch.Tensor:
    """Two equal-weight terms: objectness BCE on all samples plus a conditional term.

    The objectness target is the OR over the 5 class flags. In "masked" mode
    the conditional-class BCE runs only on samples whose objectness target is
    1 (negatives never push the conditional logits); in "product" mode the
    rescored product probability is trained against targets on every sample.
    """
    if logits6.shape[-1] != 6:
        raise ConfigError(f"rescoring loss expects 6 logits per row, got {logits6.shape[-1]}")
    if logits6.shape[0] != targets5.shape[0] or targets5.shape[-1] != 5:
        raise ConfigError(f"targets must be (N, 5) aligned with logits, got {tuple(targets5.shape)}")
    t = targets5.to(logits6.dtype)
    obj_target = t.amax(dim=1, keepdim=True)
    p_obj = torch.sigmoid(logits6[:, 5:6])
    objectness_term = bce_multilabel_loss(p_obj, obj_target)
    if conditional_mode == "masked":
        positive = obj_target.squeeze(1) > 0.5
        if positive.any():
            p_cond = torch.sigmoid(logits6[positive, :5])
            conditional_term = bce_multilabel_loss(p_cond, t[positive])
        else:
            conditional_term = logits6.new_zeros(())
    elif conditional_mode == "product":
        conditional_term = bce_multilabel_loss(rescore(logits6), t)
    else:
        raise ConfigError(f"unknown conditional_mode {conditional_mode!r}")
    return objectness_term + conditional_term


def head_loss(logits: torch.Tensor, targets5: torch.Tensor, head: HeadConfig) -> torch.Tensor:
    """BCE over sigmoid outputs for plain5; the two-term loss for rescoring6."""
    if head.mode == "plain5":
        return bce_multilabel_loss(torch.sigmoid(logits), targets5.to(logits.dtype))
    return rescoring_loss(logits, targets5, head.conditional_mode)


# ---------------------------------------------------------------------------
# optimizer


class NesterovSGD:
    """SGD with Nesterov momentum in the lookahead-gradient parameterization.

    step(closure) evaluates the gradient at theta + mu*v (closure must compute
    the loss and call backward; grads are cleared here first), then applies
    v <- mu*v - lr*grad and theta <- theta + v. With lr=0 a step leaves every
    parameter bit-identical. Weight decay adds wd*theta (at the base point)
    to the gradient.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {weight_decay}")
        self.params = [p for p in params if p.requires_grad]
        if not self.params:
            raise ConfigError("optimizer received no trainable parameters")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def _set_lookahead(self, saved):
        for p, v in zip(self.params, self.velocity):
            if self.momentum != 0.0:
                p.add_(v, alpha=self.momentum)

    def step(self, closure):
        saved = [p.detach().clone() for p in self.params]
        self._set_lookahead(saved)
        for p in self.params:
            p.grad = None
        with torch.enable_grad():
            loss = closure()
        with torch.no_grad():
            for p, v, s in zip(self.params, self.velocity, saved):
                grad = p.grad if p.grad is not None else torch.zeros_like(p)
                if self.weight_decay != 0.0:
                    grad = grad + self.weight_decay * s
                v.mul_(self.momentum).add_(grad, alpha=-self.lr)
                p.copy_(s)
                if self.lr != 0.0:
                    p.add_(v)
        return loss

    def state_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
                "velocity": [v.clone() for v in self.velocity]}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Classifier
    log: TrainLog
    final_checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    best_map: float | None = None


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _to_torch(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def train(
    config: TrainConfig,
    train_manifest: DatasetManifest,
    eval_manifest: DatasetManifest | None = None,
    out_dir: str | Path | None = None,
    config_hash: str | None = None,
    raw_config: dict | None = None,
) -> TrainResult:
    """Run the full training loop; returns the trained model and its log.

    When out_dir is given, writes checkpoint_final.pt, checkpoint_best.pt
    (best eval mAP seen), and train_log.jsonl there. A non-finite loss aborts
    with a diagnostic carrying the offending batch ids, the mixup lambda, and
    the learning rate.
    """
    config.validate()
    if len(train_manifest) == 0:
        raise ConfigError("training requires a non-empty train manifest")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.rng_seed)
    rng = np.random.default_rng(config.rng_seed)
    model = build_classifier(config.backbone, config.attention, config.head)
    optimizer = NesterovSGD(
        model.parameters(), config.learning_rate, config.momentum, config.weight_decay
    )
    pipeline = config.effective_augment()
    store = ImageStore()
    entries = train_manifest.entries
    labels_all = np.stack([entry.labels for entry in entries])

    log = TrainLog(rng_seed=config.rng_seed, config_hash=config_hash)
    best_map: float | None = None
    best_path: Path | None = None

    for epoch in range(config.epochs):
        epoch_start = time.perf_counter()
        model.train()
        order = rng.permutation(len(entries))
        loss_sum = 0.0
        n_batches = 0
        for batch_idx in _batches(order, config.batch_size):
            images = [store.get(entries[i]) for i in batch_idx]
            batch = augment_batch(images, labels_all[batch_idx], pipeline, rng)
            x = _to_torch(batch.images)
            targets = torch.from_numpy(batch.labels)

            def closure():
                logits = model(x)
                loss = head_loss(logits, targets, config.head)
                if batch.lam is not None:
                    shuffled = torch.from_numpy(batch.labels_shuffled)
                    loss = mixup_loss(loss, head_loss(logits, shuffled, config.head), batch.lam)
                loss.backward()
                return loss

            loss = optimizer.step(closure)
            loss_value = float(loss.detach())
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss {loss_value} at epoch {epoch}",
                    batch_ids=[entries[i].id for i in batch_idx],
                    lam=batch.lam,
                    learning_rate=config.learning_rate,
                )
            loss_sum += loss_value
            n_batches += 1

        eval_map = None
        if eval_manifest is not None and config.eval_every > 0 and (epoch + 1) % config.eval_every == 0:
            report = evaluation.evaluate_model(
                model, eval_manifest, config.input_scale, config.crop_scale, config_hash=config_hash
            )
            eval_map = report.mean_ap
            if eval_map is not None and (best_map is None or eval_map > best_map):
                best_map = eval_map
                if out_dir is not None:
                    best_path = out_dir / "checkpoint_best.pt"
                    save_checkpoint(best_path, model, config=raw_config, config_hash=config_hash)

        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                mean_loss=loss_sum / max(n_batches, 1),
                wall_time=time.perf_counter() - epoch_start,
                eval_map=eval_map,
            )
        )

    final_path = None
    if out_dir is not None:
        final_path = out_dir / "checkpoint_final.pt"
        save_checkpoint(final_path, model, config=raw_config, config_hash=config_hash)
        write_train_log(out_dir / "train_log.jsonl", log)

    model.eval()
    return TrainResult(
        model=model, log=log, final_checkpoint=final_path, best_checkpoint=best_path, best_map=best_map
    )
