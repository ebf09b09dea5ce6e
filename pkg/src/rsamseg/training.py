"""AdamW + cosine schedule + BCE training loop over a manifest."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, PatchRecord, load_patch
from .decoder import logits_to_mask
from .errors import DataError, ParameterError, ShapeError, TrainingError
from .metrics import METRIC_NAMES, ConfusionCounts, MetricsReport, aggregate, confusion
from .model import RSAMSeg, freeze_policy, save_checkpoint

log = logging.getLogger(__name__)


def set_deterministic(seed: int, enabled: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(enabled)


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits (log-sum-exp stable form)."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total < 1:
        raise ParameterError(f"total steps must be >= 1, got {total}")
    if not 0 <= step <= total:
        raise ParameterError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 2
    lr_max: float = 2e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 1
    warmup_steps: int = 0
    flips: bool = False
    normalization: str = "minmax"
    train_backbone: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_min > self.lr_max:
            raise ParameterError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.eval_every < 1:
            raise ParameterError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass
class ScheduleState:
    step: int
    total: int
    lr_max: float
    lr_min: float = 0.0
    warmup_steps: int = 0

    @property
    def rate(self) -> float:
        if self.warmup_steps and self.step < self.warmup_steps:
            return self.lr_max * (self.step + 1) / self.warmup_steps
        return cosine_lr(min(self.step, self.total), self.total, self.lr_max, self.lr_min)


def make_optimizer(model: RSAMSeg, config: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("model has no trainable parameters")
    return torch.optim.AdamW(params, lr=config.lr_max, weight_decay=config.weight_decay)


def train_step(
    model: RSAMSeg,
    images: torch.Tensor,
    targets: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    schedule: ScheduleState,
) -> float:
    """One forward/backward/update at the scheduled rate; advances ``schedule``."""
    lr = schedule.rate
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = bce_loss(model(images), targets)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at step {schedule.step} (lr={lr}): {value}")
    loss.backward()
    optimizer.step()
    schedule.step += 1
    return value


class PatchCache:
    """In-memory images/labels for a manifest, loaded on first use."""

    def __init__(self, manifest: DatasetManifest, normalization: str = "minmax") -> None:
        self.manifest = manifest
        self.normalization = normalization
        self._items: Dict[str, Tuple[np.ndarray, Optional[np.ndarray]]] = {}

    def get(self, record: PatchRecord) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        key = record.record_id
        if key not in self._items:
            self._items[key] = load_patch(self.manifest.kind, record, self.normalization)
        return self._items[key]

    def batch(
        self, records: Sequence[PatchRecord], require_labels: bool = True
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        images, labels = [], []
        for r in records:
            image, label = self.get(r)
            if label is None and require_labels:
                raise DataError(f"record {r.record_id} has no label")
            images.append(image)
            labels.append(label)
        x = torch.from_numpy(np.stack(images))
        if any(l is None for l in labels):
            return x, None
        return x, torch.from_numpy(np.stack(labels)[:, None].astype(np.float32))


@torch.no_grad()
def predict_masks(
    model: RSAMSeg, cache: PatchCache, batch_size: int = 4, threshold: float = 0.5
) -> List[Tuple[PatchRecord, np.ndarray]]:
    model.eval()
    records = cache.manifest.records
    out = []
    dtype = next(model.parameters()).dtype
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images, _ = cache.batch(chunk, require_labels=False)
        masks = logits_to_mask(model(images.to(dtype)), threshold)
        out.extend(zip(chunk, masks[:, 0].numpy()))
    return out


def evaluate(
    model: RSAMSeg, cache: PatchCache, batch_size: int = 4
) -> List[Tuple[str, ConfusionCounts]]:
    rows = []
    for record, mask in predict_masks(model, cache, batch_size):
        _, label = cache.get(record)
        if label is None:
            raise DataError(f"cannot evaluate unlabeled record {record.record_id}")
        rows.append((record.record_id, confusion(mask, label)))
    return rows


@dataclass
class TrainReport:
    epoch_losses: List[float] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    step_rates: List[float] = field(default_factory=list)
    evals: List[Tuple[int, MetricsReport]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None
    order_digest: str = ""  # sha256 over the record ids in visiting order

    @property
    def steps(self) -> int:
        return len(self.step_losses)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]

    def write(self, out_dir: Path) -> None:
        """Loss curve and eval CSVs; contents depend only on the run, not timing."""
        out_dir = Path(out_dir)
        with open(out_dir / "loss_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss"])
            for i, loss in enumerate(self.epoch_losses, start=1):
                w.writerow([i, repr(loss)])
        with open(out_dir / "steps.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "loss"])
            for i, (lr, loss) in enumerate(zip(self.step_rates, self.step_losses)):
                w.writerow([i, repr(lr), repr(loss)])
        with open(out_dir / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", *METRIC_NAMES])
            for epoch, report in self.evals:
                w.writerow([epoch, *(repr(v) for v in report.as_row())])


def fit(
    model: RSAMSeg,
    manifest: DatasetManifest,
    eval_manifest: Optional[DatasetManifest],
    config: TrainConfig,
    out_dir: Optional[Path] = None,
) -> TrainReport:
    """Train for ``config.epochs`` epochs with seeded shuffling.

    The best evaluation state (by micro Jaccard) is kept; without an eval
    manifest the final state counts as best. When ``out_dir`` is given the
    best state is written to ``best.ckpt`` together with the report CSVs.
    """
    if not manifest.records:
        raise DataError("training manifest is empty")
    set_deterministic(config.seed, config.deterministic)
    freeze_policy(model, train_backbone=config.train_backbone)
    optimizer = make_optimizer(model, config)
    dtype = next(model.parameters()).dtype

    cache = PatchCache(manifest, config.normalization)
    eval_cache = PatchCache(eval_manifest, config.normalization) if eval_manifest else None
    n = len(manifest.records)
    per_epoch = math.ceil(n / config.batch_size)
    schedule = ScheduleState(0, config.epochs * per_epoch, config.lr_max, config.lr_min, config.warmup_steps)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    best_score, best_state, best_report = -1.0, None, None
    order_hash = hashlib.sha256()
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            chunk = [manifest.records[i] for i in order[start : start + config.batch_size]]
            order_hash.update(("|".join(r.record_id for r in chunk) + "\n").encode())
            images, targets = cache.batch(chunk)
            if config.flips:
                if rng.random() < 0.5:
                    images, targets = images.flip(-1), targets.flip(-1)
                if rng.random() < 0.5:
                    images, targets = images.flip(-2), targets.flip(-2)
            report.step_rates.append(schedule.rate)
            loss = train_step(model, images.to(dtype), targets.to(dtype), optimizer, schedule)
            losses.append(loss)
            report.step_losses.append(loss)
        report.epoch_losses.append(float(np.mean(losses)))

        if eval_cache is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            micro = aggregate([c for _, c in evaluate(model, eval_cache)], "micro")
            report.evals.append((epoch, micro))
            log.info("epoch %d loss %.5f jaccard %.4f", epoch, report.epoch_losses[-1], micro.jaccard)
            if micro.jaccard > best_score:
                best_score, report.best_epoch, best_report = micro.jaccard, epoch, micro
                best_state = copy.deepcopy(model.state_dict())
        else:
            log.info("epoch %d loss %.5f", epoch, report.epoch_losses[-1])

    if best_state is None:
        report.best_epoch = config.epochs
        best_state = model.state_dict()
    report.wall_clock = time.perf_counter() - started
    report.order_digest = order_hash.hexdigest()

    if out_dir is not None:
        out_dir = Path(out_dir)
        final_state = copy.deepcopy(model.state_dict())
        model.load_state_dict(best_state)
        path = out_dir / "best.ckpt"
        save_checkpoint(
            model,
            path,
            {
                "step": schedule.step,
                "epoch": report.best_epoch,
                "seed": config.seed,
                "metrics": dict(zip(METRIC_NAMES, best_report.as_row())) if best_report else {},
            },
        )
        model.load_state_dict(final_state)
        report.checkpoint = str(path)
        report.write(out_dir)
    return report
