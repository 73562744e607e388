"""Diagnostics for learned contextual embeddings.

Two views: the distribution of pre-softmax dot products ``c_m . c_g`` and
the relation between pairwise relatedness and membership overlap (Jaccard
ratio of two groups' member sets), summarized over ten equal-size buckets of
pairs sorted by relatedness.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import TripartiteGraph
from .model import relatedness_matrix

N_BUCKETS = 10


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def dot_product_distribution(C: np.ndarray, bins: int = 100) -> Histogram:
    """Histogram of ``c_m . c_g`` over all ordered pairs ``m != g`` (rows of ``C``)."""
    C = np.asarray(C, dtype=np.float64)
    n = len(C)
    if n < 2:
        raise ValueError("need at least two embeddings")
    gram = C @ C.T
    values = gram[~np.eye(n, dtype=bool)]
    counts, edges = np.histogram(values, bins=bins)
    return Histogram(edges, counts)


def common_user_ratio(graph: TripartiteGraph, g_a: int, g_b: int) -> float:
    """Jaccard overlap of two groups' member sets; 0 when both are empty."""
    a = set(graph.users_of_group(g_a).tolist())
    b = set(graph.users_of_group(g_b).tolist())
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def pairwise_common_user_ratio(graph: TripartiteGraph, kind: str = "group") -> np.ndarray:
    """Dense Jaccard matrix of member sets for all group (or item) pairs."""
    adj = graph.X if kind == "group" else graph.Y
    inter = (adj.T @ adj).toarray()
    size = np.diag(inter)
    union = size[:, None] + size[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson's r, or NaN when either input has zero spread."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    x, y = x - x.mean(), y - y.mean()
    den = np.sqrt((x * x).sum() * (y * y).sum())
    return float(np.clip((x * y).sum() / den, -1.0, 1.0))


@dataclass
class CorrelationReport:
    bucket_relatedness: np.ndarray
    bucket_ratio: np.ndarray
    bucket_counts: np.ndarray
    pearson: float
    pearson_raw: float
    slope: float
    intercept: float
    degenerate: bool
    pairs: np.ndarray = field(repr=False)  # (n_pairs, 2) group ids, a < b
    pair_relatedness: np.ndarray = field(repr=False)
    pair_ratio: np.ndarray = field(repr=False)

    def write_pairs_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group_a", "group_b", "relatedness", "common_user_ratio"])
            for (a, b), r, c in zip(self.pairs, self.pair_relatedness, self.pair_ratio):
                w.writerow([int(a), int(b), repr(float(r)), repr(float(c))])

    def write_summary_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bucket", "mean_relatedness", "mean_common_user_ratio", "n_pairs"])
            for k, (r, c, n) in enumerate(zip(self.bucket_relatedness, self.bucket_ratio, self.bucket_counts)):
                w.writerow([k, repr(float(r)), repr(float(c)), int(n)])
            w.writerow([])
            w.writerow(["pearson_buckets", repr(self.pearson)])
            w.writerow(["pearson_pairs", repr(self.pearson_raw)])
            w.writerow(["slope", repr(self.slope)])
            w.writerow(["intercept", repr(self.intercept)])
            w.writerow(["degenerate", int(self.degenerate)])


def relatedness_vs_ratio(
    graph: TripartiteGraph, C: np.ndarray, transpose: bool = False, kind: str = "group"
) -> CorrelationReport:
    """Correlate relatedness with common-user ratio over unordered group pairs.

    The relatedness of an unordered pair is the mean of ``R[a, b]`` and
    ``R[b, a]``. Pairs are sorted by relatedness (ties by pair index) and cut
    into ten buckets whose sizes differ by at most one; Pearson's
    coefficient and a least-squares line are fit to the bucket means.
    ``kind="item"`` runs the same analysis on item embeddings, with overlap
    measured on the users who interacted with each item.
    """
    n = len(C)
    if n != (graph.n_groups if kind == "group" else graph.n_items):
        raise ValueError("contextual table does not match the graph")
    if n * (n - 1) // 2 < N_BUCKETS:
        raise ValueError(f"need at least {N_BUCKETS} group pairs")
    R = relatedness_matrix(C, transpose)
    sym = 0.5 * (R + R.T)
    a, b = np.triu_indices(n, k=1)
    rel = sym[a, b]
    ratio = pairwise_common_user_ratio(graph, kind)[a, b]
    order = np.argsort(rel, kind="stable")
    buckets = np.array_split(order, N_BUCKETS)
    b_rel = np.array([rel[ix].mean() for ix in buckets])
    b_ratio = np.array([ratio[ix].mean() for ix in buckets])
    counts = np.array([len(ix) for ix in buckets])
    p = pearson(b_rel, b_ratio)
    degenerate = not np.isfinite(p)
    if degenerate:
        slope, intercept = float("nan"), float("nan")
    else:
        slope, intercept = (float(v) for v in np.polyfit(b_rel, b_ratio, 1))
    return CorrelationReport(
        b_rel, b_ratio, counts, p, pearson(rel, ratio), slope, intercept, degenerate,
        np.stack([a, b], axis=1), rel, ratio,
    )
