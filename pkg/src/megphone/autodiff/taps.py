"""Activation capture for gradient attribution."""

from __future__ import annotations

import contextlib
from typing import Iterator, List, Optional, Tuple

import numpy as np

from ..errors import UsageError
from .tensor import Tensor

_ACTIVE: List["TapRegistry"] = []


def current_registry() -> Optional["TapRegistry"]:
    return _ACTIVE[-1] if _ACTIVE else None


class TapRegistry:
    """Ordered record of named activations from one forward pass.

    Recorded tensors are marked so that a later ``backward`` fills their
    ``grad`` even when they are intermediate nodes.
    """

    def __init__(self):
        self.entries: List[Tuple[str, Tensor]] = []
        self._names = set()

    def record(self, name: str, tensor: Tensor) -> None:
        if name in self._names:
            raise UsageError(f"layer name {name!r} tapped twice in one forward pass")
        self._names.add(name)
        if tensor.requires_grad:
            tensor.retain_grad()
        else:
            # Input-like tensor: promote to a leaf of the graph built downstream.
            tensor.requires_grad = True
        self.entries.append((name, tensor))

    def clear(self) -> None:
        self.entries.clear()
        self._names.clear()

    @contextlib.contextmanager
    def active(self) -> Iterator["TapRegistry"]:
        self.clear()
        _ACTIVE.append(self)
        try:
            yield self
        finally:
            _ACTIVE.pop()

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def read_taps(registry: TapRegistry) -> List[Tuple[str, np.ndarray, np.ndarray]]:
    """Return ``(name, activation, gradient)`` for every tap after ``backward``.

    Taps that the loss does not depend on get an all-zero gradient.
    """
    out = []
    for name, tensor in registry.entries:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        out.append((name, tensor.data, grad))
    return out
