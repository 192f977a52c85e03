"""AdamW training with best-validation-F1 checkpoint selection."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import models
from .augment import AugmentConfig, augment_batch
from .autodiff import ops
from .data import Dataset, SplitData
from .errors import ConfigurationError, NumericFault, TrainingDiverged, UsageError
from .metrics import f1_macro
from .sampling import EVAL_SEED, SamplingPlan, epoch_groups, eval_groups, make_batches, materialize

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
CLIP_NORM = 5.0


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    betas: Tuple[float, float] = (BETA1, BETA2),
    eps: float = ADAM_EPS,
) -> None:
    """In-place AdamW update with decoupled weight decay.

    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``.
    All gradients are checked before anything is modified; a non-finite
    gradient rejects the whole step.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericFault(f"non-finite gradient for {name!r}; step rejected")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, theta in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * theta
        theta -= (lr * update).astype(theta.dtype)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 32
    epochs: int = 10
    sampling: SamplingPlan = field(default_factory=SamplingPlan)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    eval_grouped: bool = False
    clip_grad: bool = False
    eval_batch_size: int = 128
    # ungrouped training F1 is scored on at most this many windows
    train_eval_max: int = 2000

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        self.sampling.validate()
        self.augment.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampling"] = self.sampling.to_dict()
        d["augment"] = self.augment.to_dict()
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_f1: float
    val_f1: float
    train_f1_ungrouped: float


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> Optional[int]:
        # strict improvement only, so ties keep the earliest epoch
        best, best_epoch = -math.inf, None
        for r in self.records:
            if r.val_f1 > best:
                best, best_epoch = r.val_f1, r.epoch
        return best_epoch

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path: Union[str, Path]) -> None:
        best = self.best_epoch
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_f1", "val_f1", "is_best", "train_f1_ungrouped"])
            for r in self.records:
                w.writerow(
                    [r.epoch, repr(r.train_loss), repr(r.train_f1), repr(r.val_f1), int(r.epoch == best), repr(r.train_f1_ungrouped)]
                )

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [
                EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_f1"]), float(r["val_f1"]), float(r["train_f1_ungrouped"]))
                for r in rows
            ]
        )


# -- evaluation -----------------------------------------------------------------------------


def predict_arrays(model, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    preds = [models.predict(models.forward(model, x[i : i + batch_size], "eval")) for i in range(0, len(x), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_split(
    model,
    split: SplitData,
    grouped: bool = False,
    group_size: int = 100,
    seed: int = EVAL_SEED,
    batch_size: int = 128,
    indices: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(true, pred)`` for a split, optionally scored on group averages.

    Grouped scoring uses a fixed partition (``seed``) without balancing.
    """
    if indices is not None:
        split = split.subset(indices)
    if grouped:
        groups = eval_groups(split.labels, group_size, seed)
    else:
        groups = [np.array([i]) for i in range(len(split))]
    true = np.array([split.labels[g[0]] for g in groups], dtype=np.int64)
    preds = []
    for chunk in make_batches(len(groups), batch_size):
        preds.append(predict_arrays(model, materialize(split, [groups[i] for i in chunk]), batch_size))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return true, pred


def _score(model, split, config: TrainConfig, grouped: bool, indices=None) -> float:
    true, pred = evaluate_split(
        model, split, grouped, config.sampling.group_size, EVAL_SEED, config.eval_batch_size, indices
    )
    return f1_macro(true, pred, model.spec.n_classes)


# -- training loop --------------------------------------------------------------------------


def _ensure_standardized(dataset: Dataset) -> Dataset:
    if any(s.stats is None for s in dataset.splits.values()):
        return dataset.standardized()
    return dataset


def train(model, dataset: Dataset, config: TrainConfig) -> Tuple[object, TrainLog]:
    """Optimize ``model`` in place and return it with the best-validation weights.

    Per epoch: rebuild the (balanced, grouped, repeated) training stream,
    augment, take AdamW steps, then score validation F1-macro. On a
    non-finite loss, :class:`TrainingDiverged` is raised carrying the model
    restored to its best checkpoint and the partial log.
    """
    config.validate()
    if "train" not in dataset or "validation" not in dataset:
        raise UsageError("training needs 'train' and 'validation' splits")
    dataset = _ensure_standardized(dataset)
    train_split, val_split = dataset["train"], dataset["validation"]
    n_classes = model.spec.n_classes
    if train_split.labels.size and train_split.labels.max() >= n_classes:
        raise ConfigurationError(f"training labels exceed the model's {n_classes} classes")

    params = dict(model.named_parameters())
    state = AdamState()
    log_ = TrainLog()
    best_f1, best_state = -math.inf, copy.deepcopy(model.state_dict())
    sub_rng = np.random.default_rng([config.seed, 0xF1])
    n_sub = min(config.train_eval_max, len(train_split))
    train_eval_idx = np.sort(sub_rng.choice(len(train_split), size=n_sub, replace=False))

    def diverged(message, epoch):
        model.load_state_dict(best_state)
        model.eval()
        raise TrainingDiverged(f"{message} (epoch {epoch})", model=model, log=log_)

    for epoch in range(1, config.epochs + 1):
        groups = epoch_groups(train_split.labels, config.sampling, epoch)
        if not groups:
            raise UsageError(
                f"training stream is empty: no class has {config.sampling.group_size} samples to form a group"
            )
        aug_rng = np.random.default_rng([config.seed, epoch, 0xA6])
        total_loss, seen = 0.0, 0
        ys, ps = [], []
        for batch_idx in make_batches(len(groups), config.batch_size, [config.seed, epoch]):
            members = [groups[i] for i in batch_idx]
            x = materialize(train_split, members)
            y = train_split.labels[[m[0] for m in members]]
            x = augment_batch(x, config.augment, aug_rng)
            model.zero_grad()
            try:
                logits = models.forward(model, x, "train")
                loss = ops.softmax_cross_entropy(logits, y)
            except NumericFault as exc:
                diverged(str(exc), epoch)
            if not np.isfinite(loss.item()):
                diverged("training loss became non-finite", epoch)
            loss.backward()
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
            if config.clip_grad:
                clip_grad_norm(grads, CLIP_NORM)
            try:
                adamw_step({n: p.data for n, p in params.items()}, grads, state, config.lr, config.weight_decay)
            except NumericFault as exc:
                diverged(str(exc), epoch)
            total_loss += loss.item() * len(y)
            seen += len(y)
            ys.append(y)
            ps.append(models.predict(logits))

        train_f1 = f1_macro(np.concatenate(ys), np.concatenate(ps), n_classes)
        try:
            train_f1_ungrouped = _score(model, train_split, config, False, train_eval_idx)
            val_f1 = _score(model, val_split, config, config.eval_grouped)
        except NumericFault as exc:
            # weights blew up on the last step of the epoch
            diverged(str(exc), epoch)
        log_.records.append(EpochRecord(epoch, total_loss / seen, train_f1, val_f1, train_f1_ungrouped))
        log.info("epoch %d loss %.4f train_f1 %.4f val_f1 %.4f", epoch, total_loss / seen, train_f1, val_f1)
        if val_f1 > best_f1:
            best_f1, best_state = val_f1, copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return model, log_
