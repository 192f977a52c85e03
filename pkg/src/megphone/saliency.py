"""Layer-wise gradient saliency, clustermaps and cross-split similarity.

A per-sample score for layer ``l`` is the mean absolute gradient of the
true-class logit with respect to that layer's activation. Class saliency
averages those scores over the samples of each class. Two splits holding
the same raw windows under different standardizations can be compared
cell by cell with Pearson or Spearman correlation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
from xml.sax.saxutils import escape

import numpy as np
from scipy.stats import rankdata

from .autodiff import TapRegistry, Tensor, read_taps
from .data import SplitData
from .errors import InputError, PairingError, UsageError

METRICS = ("pearson", "spearman")


@dataclass
class SaliencyMatrix:
    values: np.ndarray  # [L, K]; NaN marks a class with no samples
    layer_names: List[str]
    symbols: List[str]
    normalized: bool = False
    counts: Optional[np.ndarray] = None

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # [L, K] in [-1, 1]; NaN marks a degenerate cell
    layer_names: List[str]
    symbols: List[str]
    metric: str

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


@dataclass
class SimilaritySummary:
    metric: str
    mean: float
    std: float
    n_cells: int
    n_missing: int

    def line(self) -> str:
        return f"{self.metric}: {self.mean:.4f} ± {self.std:.4f} (cells={self.n_cells}, missing={self.n_missing})"


@dataclass
class ClusterTree:
    """Agglomeration record in the usual linkage layout.

    ``merges[i] = (a, b, height, size)`` joins clusters ``a < b`` into new
    cluster ``n + i``; leaves are ``0..n-1``.
    """

    n: int
    merges: List[Tuple[int, int, float, int]] = field(default_factory=list)

    @property
    def heights(self) -> np.ndarray:
        return np.array([m[2] for m in self.merges])

    def members(self, cluster: int) -> List[int]:
        if cluster < self.n:
            return [cluster]
        a, b, _, _ = self.merges[cluster - self.n]
        return self.members(a) + self.members(b)

    def leaf_order(self) -> List[int]:
        if self.n == 0:
            return []
        return self.members(self.n + len(self.merges) - 1) if self.merges else list(range(self.n))

    def top_split(self) -> Tuple[List[int], List[int]]:
        a, b, _, _ = self.merges[-1]
        return sorted(self.members(a)), sorted(self.members(b))


# -- per-sample scores ----------------------------------------------------------------------


def _param_dtype(model):
    params = model.parameters()
    return params[0].dtype if params else np.float32


def saliency_scores(
    model, x: np.ndarray, labels: Sequence[int], batch_size: int = 64, include_input: bool = False
) -> Tuple[List[str], np.ndarray]:
    """Per-sample, per-layer scores ``[N, L]`` for windows ``x`` and true labels.

    The model runs in eval mode, so samples in a batch do not interact and
    one backward pass of the summed true-class logits yields every sample's
    own gradient. ``include_input`` adds the model input as a layer named
    ``input``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) != len(labels):
        raise InputError("windows and labels differ in length")
    model.eval()
    dtype = _param_dtype(model)
    names: Optional[List[str]] = None
    rows = []
    for start in range(0, len(x), batch_size):
        xb = Tensor(np.asarray(x[start : start + batch_size], dtype=dtype))
        yb = labels[start : start + batch_size]
        reg = TapRegistry()
        with reg.active():
            if include_input:
                reg.record("input", xb)
            logits = model(xb)
        if not len(reg):
            raise UsageError("model exposes no tapped sublayers; nothing to attribute")
        logits[np.arange(len(yb)), yb].sum().backward()
        taps = read_taps(reg)
        if names is None:
            names = [name for name, _, _ in taps]
        rows.append(np.stack([np.abs(g).reshape(len(yb), -1).mean(axis=1, dtype=np.float64) for _, _, g in taps], axis=1))
    if names is None:
        raise InputError("no samples to score")
    return names, np.concatenate(rows)


def sample_saliency(model, window: np.ndarray, label: int, include_input: bool = False) -> Dict[str, float]:
    names, scores = saliency_scores(model, np.asarray(window)[None], [label], 1, include_input)
    return dict(zip(names, scores[0]))


def class_means(scores: np.ndarray, labels: Sequence[int], n_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mean score per (layer, class); classes without samples are NaN."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    sums = np.zeros((scores.shape[1], n_classes))
    np.add.at(sums.T, labels, scores)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[None, :]
    means[:, counts == 0] = np.nan
    return means, counts


def per_class_subsample(labels: Sequence[int], max_per_class: Optional[int], seed: int = 0) -> np.ndarray:
    """Sorted indices keeping at most ``max_per_class`` samples of each class."""
    labels = np.asarray(labels, dtype=np.int64)
    if max_per_class is None:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    keep = []
    for k in np.unique(labels):
        members = np.flatnonzero(labels == k)
        if len(members) > max_per_class:
            members = rng.choice(members, size=max_per_class, replace=False)
        keep.append(members)
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)


def class_saliency(
    model,
    split: SplitData,
    symbols: Sequence[str],
    max_per_class: Optional[int] = 200,
    seed: int = 0,
    batch_size: int = 64,
    include_input: bool = False,
) -> SaliencyMatrix:
    idx = per_class_subsample(split.labels, max_per_class, seed)
    names, scores = _split_scores(model, split, idx, batch_size, include_input)
    means, counts = class_means(scores, split.labels[idx], len(symbols))
    return SaliencyMatrix(means, names, list(symbols), False, counts)


def _split_scores(model, split, idx, batch_size, include_input):
    names, parts = None, []
    # materialize in chunks to bound memory on large splits
    for start in range(0, len(idx), 512):
        chunk = idx[start : start + 512]
        names, s = saliency_scores(model, split.batch(chunk), split.labels[chunk], batch_size, include_input)
        parts.append(s)
    if names is None:
        raise InputError(f"split {split.name!r} has no samples")
    return names, np.concatenate(parts)


def row_minmax(S: SaliencyMatrix) -> SaliencyMatrix:
    """Scale each row to [0, 1]; constant rows become zeros, NaN cells stay NaN."""
    v = S.values.astype(np.float64)
    out = np.full_like(v, np.nan)
    for i, row in enumerate(v):
        ok = ~np.isnan(row)
        if not ok.any():
            continue
        lo, hi = row[ok].min(), row[ok].max()
        out[i, ok] = 0.0 if hi == lo else (row[ok] - lo) / (hi - lo)
    return SaliencyMatrix(out, list(S.layer_names), list(S.symbols), True, S.counts)


# -- clustering ------------------------------------------------------------------------------


def pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def hcluster(matrix: np.ndarray, axis: int = 0) -> ClusterTree:
    """Average-linkage (UPGMA) clustering of rows (``axis=0``) or columns.

    Cluster distances are updated with the size-weighted average rule. Among
    equal minimal distances the pair with the lowest ``(a, b)`` ids merges.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if axis == 1:
        x = x.T
    n = len(x)
    tree = ClusterTree(n)
    if n < 2:
        return tree
    D = pairwise_euclidean(x)
    active = {i: 1 for i in range(n)}
    dist = {(i, j): D[i, j] for i in range(n) for j in range(i + 1, n)}
    next_id = n
    while len(active) > 1:
        (a, b), h = min(dist.items(), key=lambda kv: (kv[1], kv[0]))
        na, nb = active.pop(a), active.pop(b)
        for k in active:
            dka = dist.pop((min(k, a), max(k, a)))
            dkb = dist.pop((min(k, b), max(k, b)))
            dist[(k, next_id)] = (na * dka + nb * dkb) / (na + nb)
        del dist[(a, b)]
        tree.merges.append((a, b, float(h), na + nb))
        active[next_id] = na + nb
        next_id += 1
    return tree


# -- cross-split similarity ---------------------------------------------------------------


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    da, db = a - a.mean(), b - b.mean()
    r = float((da * db).sum() / math.sqrt((da**2).sum() * (db**2).sum()))
    return max(-1.0, min(1.0, r))


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    return pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def similarity_from_scores(
    scores_a: np.ndarray, scores_b: np.ndarray, labels: Sequence[int], n_classes: int, metric: str
) -> np.ndarray:
    if metric not in METRICS:
        raise InputError(f"metric must be one of {METRICS}")
    fn = pearson if metric == "pearson" else spearman
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full((scores_a.shape[1], n_classes), np.nan)
    for c in range(n_classes):
        rows = labels == c
        for l in range(scores_a.shape[1]):
            out[l, c] = fn(scores_a[rows, l], scores_b[rows, l])
    return out


def check_paired(split_a: SplitData, split_b: SplitData, indices: Optional[np.ndarray] = None) -> None:
    if len(split_a) != len(split_b):
        raise PairingError(f"splits {split_a.name!r} ({len(split_a)}) and {split_b.name!r} ({len(split_b)}) differ in size")
    if not np.array_equal(split_a.labels, split_b.labels):
        raise PairingError(f"splits {split_a.name!r} and {split_b.name!r} carry different labels")
    idx = np.arange(len(split_a)) if indices is None else indices
    if split_a.raw is not split_b.raw and not np.array_equal(split_a.raw[idx], split_b.raw[idx]):
        raise PairingError(f"splits {split_a.name!r} and {split_b.name!r} do not hold the same raw windows")


def cross_split_similarity(
    model,
    split_a: SplitData,
    split_b: SplitData,
    symbols: Sequence[str],
    metrics: Sequence[str] = METRICS,
    max_per_class: Optional[int] = 200,
    seed: int = 0,
    batch_size: int = 64,
) -> Dict[str, SimilarityMatrix]:
    """Correlate paired per-sample saliency sequences per (layer, class)."""
    idx = per_class_subsample(split_a.labels, max_per_class, seed)
    check_paired(split_a, split_b, idx)
    names, sa = _split_scores(model, split_a, idx, batch_size, False)
    _, sb = _split_scores(model, split_b, idx, batch_size, False)
    labels = split_a.labels[idx]
    return {
        m: SimilarityMatrix(similarity_from_scores(sa, sb, labels, len(symbols), m), names, list(symbols), m)
        for m in metrics
    }


def summarize_similarity(sim: Union[SimilarityMatrix, np.ndarray], metric: str = "") -> SimilaritySummary:
    """Mean and population std over the non-missing cells."""
    values = sim.values if isinstance(sim, SimilarityMatrix) else np.asarray(sim, dtype=np.float64)
    metric = sim.metric if isinstance(sim, SimilarityMatrix) else metric
    ok = values[~np.isnan(values)]
    if ok.size == 0:
        return SimilaritySummary(metric, math.nan, math.nan, int(values.size), int(values.size))
    return SimilaritySummary(metric, float(ok.mean()), float(ok.std()), int(values.size), int(values.size - ok.size))


# -- serialization ----------------------------------------------------------------------------


def write_matrix_csv(path: Union[str, Path], values: np.ndarray, layer_names: Sequence[str], symbols: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer"] + list(symbols))
        for name, row in zip(layer_names, values):
            w.writerow([name] + ["NA" if np.isnan(v) else repr(float(v)) for v in row])


def read_matrix_csv(path: Union[str, Path]) -> Tuple[np.ndarray, List[str], List[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    symbols = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    values = np.array([[np.nan if v == "NA" else float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return values.reshape(len(names), len(symbols)), names, symbols


def write_tree_csv(path: Union[str, Path], tree: ClusterTree, labels: Sequence[str]) -> None:
    """Merge list; leaves are referenced by index and named in the leaf rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "left", "right", "height", "size"])
        for i, (a, b, h, size) in enumerate(tree.merges):
            w.writerow([i, a, b, repr(h), size])
        w.writerow([])
        w.writerow(["leaf", "label", "order"])
        order = {leaf: pos for pos, leaf in enumerate(tree.leaf_order())}
        for i, name in enumerate(labels):
            w.writerow([i, name, order.get(i, i)])


def _colour(v: float) -> str:
    if np.isnan(v):
        return "#dddddd"
    # light yellow -> dark blue ramp
    lo, hi = np.array([255, 247, 188]), np.array([8, 48, 107])
    r, g, b = (lo + (hi - lo) * float(np.clip(v, 0, 1))).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def _dendrogram_paths(tree: ClusterTree, positions: Dict[int, float], scale: float, horizontal: bool) -> List[str]:
    """SVG path strings for a dendrogram; ``positions`` maps leaf -> pixel coordinate."""
    pos = dict(positions)
    level = {i: 0.0 for i in range(tree.n)}
    paths = []
    for i, (a, b, h, _) in enumerate(tree.merges):
        node = tree.n + i
        pos[node] = (pos[a] + pos[b]) / 2
        level[node] = h * scale
        if horizontal:  # row tree: depth grows leftwards from x=0 baseline
            pts = [(-level[a], pos[a]), (-level[node], pos[a]), (-level[node], pos[b]), (-level[b], pos[b])]
        else:  # column tree: depth grows upwards
            pts = [(pos[a], -level[a]), (pos[a], -level[node]), (pos[b], -level[node]), (pos[b], -level[b])]
        paths.append("M" + " L".join(f"{x:.2f},{y:.2f}" for x, y in pts))
    return paths


def render_clustermap(
    path: Union[str, Path],
    S: SaliencyMatrix,
    row_tree: Optional[ClusterTree] = None,
    col_tree: Optional[ClusterTree] = None,
    title: str = "",
    cell: int = 14,
) -> Tuple[int, int]:
    """Write a heatmap with row/column dendrograms as SVG; returns (width, height)."""
    values = S.values
    filled = np.nan_to_num(values, nan=0.0)
    row_tree = row_tree or hcluster(filled, 0)
    col_tree = col_tree or hcluster(filled, 1)
    rows, cols = row_tree.leaf_order(), col_tree.leaf_order()
    L, K = values.shape
    dendro, label_w, label_h, margin = 90, 8 * max(len(n) for n in S.layer_names) + 10, 30, 10
    x0, y0 = margin + dendro, margin + 20 + dendro
    width = x0 + K * cell + label_w + margin
    height = y0 + L * cell + label_h + margin
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{margin}" y="{margin + 12}" font-family="sans-serif" font-size="12">{escape(title)}</text>',
    ]
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            out.append(
                f'<rect x="{x0 + j * cell}" y="{y0 + i * cell}" width="{cell}" height="{cell}" fill="{_colour(values[r, c])}"/>'
            )
        out.append(
            f'<text x="{x0 + K * cell + 4}" y="{y0 + i * cell + cell - 3}" font-family="monospace" font-size="10">{escape(S.layer_names[r])}</text>'
        )
    for j, c in enumerate(cols):
        tx, ty = x0 + j * cell + cell - 3, y0 + L * cell + 4
        out.append(
            f'<text x="{tx}" y="{ty}" font-family="monospace" font-size="10" transform="rotate(90 {tx} {ty})">{escape(S.symbols[c])}</text>'
        )
    for tree, order, horizontal in ((row_tree, rows, True), (col_tree, cols, False)):
        if not tree.merges:
            continue
        top = max(tree.heights.max(), 1e-12)
        centres = {leaf: (i + 0.5) * cell for i, leaf in enumerate(order)}
        shift = f"translate({x0 - 2},{y0})" if horizontal else f"translate({x0},{y0 - 2})"
        out.append(f'<g transform="{shift}" fill="none" stroke="#333" stroke-width="1">')
        out.extend(f'<path d="{d}"/>' for d in _dendrogram_paths(tree, centres, (dendro - 4) / top, horizontal))
        out.append("</g>")
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
    return width, height
