"""Label balancing, same-class group averaging and batch assembly.

Everything here works on integer indices into a split so that the heavy
window arrays are only touched when a batch is materialized.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np

from .data import SplitData
from .errors import ConfigurationError

# fixed partition seed for grouped validation/test scoring
EVAL_SEED = 20240917


@dataclass
class SamplingPlan:
    group_size: int = 100
    repeats: int = 1
    balance: bool = True
    seed: int = 0

    def validate(self) -> "SamplingPlan":
        if self.group_size < 1:
            raise ConfigurationError("group_size must be >= 1")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        return self

    @property
    def grouped(self) -> bool:
        return self.group_size > 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroupedSample:
    data: np.ndarray  # [channels, time]
    label: int
    group_size: int
    member_indices: np.ndarray


def balance_labels(labels: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Indices that oversample every present class up to the largest class count.

    The original indices come first (in order); the extra draws for each
    class are uniform with replacement from that class only.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    extra = []
    for k, n in zip(classes, counts):
        if n < target:
            members = np.flatnonzero(labels == k)
            extra.append(rng.choice(members, size=target - n, replace=True))
    return np.concatenate([np.arange(len(labels))] + extra).astype(np.int64)


def plan_groups(labels: Sequence[int], group_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffle each class and cut it into consecutive groups of ``group_size``.

    Leftovers smaller than a full group are dropped. ``labels`` may contain
    repeated positions (after balancing); the returned arrays hold positions
    into ``labels``.
    """
    if group_size < 1:
        raise ConfigurationError("group_size must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    groups = []
    for k in np.unique(labels):
        members = np.flatnonzero(labels == k)
        members = members[rng.permutation(len(members))]
        for g in range(len(members) // group_size):
            groups.append(members[g * group_size : (g + 1) * group_size])
    return groups


def epoch_groups(labels: Sequence[int], plan: SamplingPlan, epoch: int = 0) -> List[np.ndarray]:
    """Index groups for one training epoch: ``repeats`` independent partitions.

    With ``plan.balance`` the pool is oversampled first, then grouped. Each
    group holds indices into the split.
    """
    plan.validate()
    labels = np.asarray(labels, dtype=np.int64)
    pool = np.arange(len(labels))
    if plan.balance:
        pool = balance_labels(labels, np.random.default_rng([plan.seed, 0x5EED]))
    groups = []
    for r in range(plan.repeats):
        rng = np.random.default_rng([plan.seed, epoch, r])
        groups.extend(pool[g] for g in plan_groups(labels[pool], plan.group_size, rng))
    return groups


def eval_groups(labels: Sequence[int], group_size: int, seed: int = EVAL_SEED) -> List[np.ndarray]:
    """Fixed, unbalanced partition used for grouped evaluation."""
    return plan_groups(labels, group_size, np.random.default_rng(seed))


def materialize(split: SplitData, groups: Sequence[np.ndarray]) -> np.ndarray:
    """Stack the mean of every group into ``[G, C, T]`` float32."""
    out = np.empty((len(groups), split.n_channels, split.n_times), dtype=np.float32)
    for i, members in enumerate(groups):
        if len(members) == 1:
            out[i] = split.batch(members)[0]
        else:
            out[i] = split.batch(members).mean(axis=0, dtype=np.float64)
    return out


def group_average(split: SplitData, plan: SamplingPlan, epoch: int = 0) -> Iterator[GroupedSample]:
    labels = split.labels
    for members in epoch_groups(labels, plan, epoch):
        data = materialize(split, [members])[0]
        yield GroupedSample(data, int(labels[members[0]]), len(members), members)


def make_batches(n_items: int, batch_size: int, seed: Optional[int] = None) -> List[np.ndarray]:
    """Split ``range(n_items)`` into batches, shuffled when ``seed`` is given.

    Every item appears exactly once; the final batch may be short.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    order = np.arange(n_items) if seed is None else np.random.default_rng(seed).permutation(n_items)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]
