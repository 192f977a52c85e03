"""Macro F1 and confusion-matrix diagnostics.

Macro F1 always averages over the full class count, so classes that never
occur in either sequence contribute an F1 of zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import N_CLASSES
from .errors import InputError


def _check(true, pred, n_classes):
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise InputError(f"label sequences differ in length: {true.size} vs {pred.size}")
    for name, arr in (("true", true), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise InputError(f"{name} labels must lie in [0, {n_classes})")
    return true, pred


def confusion(true: Sequence[int], pred: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    true, pred = _check(true, pred, n_classes)
    return np.bincount(true * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean()) if self.f1.size else 0.0


def _safe_div(num, den):
    out = np.zeros(len(num), dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_report(cm: np.ndarray) -> ClassReport:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    # 2PR/(P+R) written as 2tp/(support+predicted); zero when both are empty
    f1 = _safe_div(2 * tp, support + predicted)
    return ClassReport(precision, recall, f1, support.astype(np.int64))


def f1_macro(true: Sequence[int], pred: Sequence[int], n_classes: int = N_CLASSES) -> float:
    return per_class_report(confusion(true, pred, n_classes)).macro_f1


def accuracy(true: Sequence[int], pred: Sequence[int]) -> float:
    true, pred = np.asarray(true), np.asarray(pred)
    return float((true == pred).mean()) if true.size else 0.0


def write_report(path: Union[str, Path], report: ClassReport, symbols: Optional[Sequence[str]] = None) -> None:
    """CSV with one row per class and a trailing ``macro`` summary row."""
    n = len(report.f1)
    symbols = list(symbols) if symbols is not None else [str(i) for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for i in range(n):
            w.writerow([symbols[i], f"{report.precision[i]:.6f}", f"{report.recall[i]:.6f}", f"{report.f1[i]:.6f}", int(report.support[i])])
        w.writerow(
            ["macro", f"{report.precision.mean():.6f}", f"{report.recall.mean():.6f}", f"{report.macro_f1:.6f}", int(report.support.sum())]
        )
