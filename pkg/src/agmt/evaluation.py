"""Retrieval and clustering metrics over an embedding matrix.

Neighbours are ranked by Euclidean distance with ties broken by lower sample
index. Clustering uses k-means with greedy farthest-first seeding.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UsageError

logger = logging.getLogger(__name__)

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


def concat_groups(embeddings: np.ndarray) -> np.ndarray:
    """``[N, P, D_V]`` group embeddings -> ``[N, P*D_V]`` rows of unit length."""
    flat = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    return flat / np.linalg.norm(flat, axis=1, keepdims=True)


def pairwise_sq_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def ranked_neighbors(x: np.ndarray) -> np.ndarray:
    """Row i lists every other sample, nearest first (ties: lower index first)."""
    d = pairwise_sq_distances(x)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :-1]


def recall_at_k(x: np.ndarray, labels: Sequence[int], k: int) -> float:
    labels = np.asarray(labels)
    n = len(labels)
    if not 1 <= k < n:
        raise UsageError(f"k must satisfy 1 <= k < N={n}, got {k}")
    nn = ranked_neighbors(x)[:, :k]
    return float((labels[nn] == labels[:, None]).any(axis=1).mean())


def chance_recall_at_1(labels: Sequence[int]) -> float:
    """Expected Recall@1 of a random ranking: mean same-class fraction among the other samples."""
    labels = np.asarray(labels)
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return float(((counts[inverse] - 1) / (len(labels) - 1)).mean())


def kmeans(x: np.ndarray, n_clusters: int, seed: int = 0) -> np.ndarray:
    """Lloyd iterations from farthest-first centres; returns cluster ids."""
    n = len(x)
    if not 1 <= n_clusters <= n:
        raise UsageError(f"n_clusters must lie in [1, N={n}], got {n_clusters}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    min_d = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, n_clusters):
        nxt = int(np.argmax(min_d))
        chosen.append(nxt)
        min_d = np.minimum(min_d, ((x - x[nxt]) ** 2).sum(axis=1))
    centers = x[chosen].copy()
    assign = np.zeros(n, dtype=np.intp)
    for _ in range(KMEANS_MAX_ITER):
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d, axis=1)
        new = centers.copy()
        for c in range(n_clusters):
            members = assign == c
            if members.any():
                new[c] = x[members].mean(axis=0)
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift <= KMEANS_TOL:
            break
    d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi_from_assignment(assignment: Sequence[int], labels: Sequence[int]) -> float:
    """``2 I(C;Y) / (H(C) + H(Y))`` with natural logs."""
    table = _contingency(np.asarray(assignment), np.asarray(labels))
    n = table.sum()
    pc, py = table.sum(axis=1), table.sum(axis=0)
    nz = table > 0
    mi = float((table[nz] / n * np.log(table[nz] * n / np.outer(pc, py)[nz])).sum())
    denom = _entropy(pc) + _entropy(py)
    if denom == 0.0:
        return 1.0  # both partitions trivial and therefore identical
    return max(0.0, 2.0 * mi / denom)


def nmi(x: np.ndarray, labels: Sequence[int], n_clusters: int, seed: int = 0) -> float:
    if n_clusters > len(x):
        raise UsageError(f"n_clusters={n_clusters} exceeds N={len(x)}")
    return nmi_from_assignment(kmeans(x, n_clusters, seed), labels)


def pairwise_f1(labels: Sequence[int], assignment: Sequence[int]) -> float:
    """F1 over unordered sample pairs; a pair is predicted positive when co-clustered."""
    table = _contingency(np.asarray(assignment), np.asarray(labels))

    def pairs(c):
        return float((c * (c - 1) / 2).sum())

    tp = pairs(table)
    predicted = pairs(table.sum(axis=1))
    actual = pairs(table.sum(axis=0))
    precision = tp / predicted if predicted else 0.0
    recall = tp / actual if actual else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def map_at_r(x: np.ndarray, labels: Sequence[int]) -> float:
    """Class-wise mean of per-query average precision over the first R ranks,
    R = class size - 1. Singleton classes are skipped with a warning."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    skipped = int((counts < 2).sum())
    if skipped:
        logger.warning("map_at_r: skipping %d class(es) with a single sample", skipped)
    if skipped == len(classes):
        raise UsageError("map_at_r needs at least one class with two or more samples")
    nn = ranked_neighbors(x)
    hits = labels[nn] == labels[:, None]
    size = dict(zip(classes.tolist(), counts.tolist()))
    ranks = np.arange(1, hits.shape[1] + 1)
    precision = np.cumsum(hits, axis=1) / ranks
    per_class: dict = {}
    for q in range(len(labels)):
        r = size[int(labels[q])] - 1
        if r < 1:
            continue
        ap = float((precision[q, :r] * hits[q, :r]).sum() / r)
        per_class.setdefault(int(labels[q]), []).append(ap)
    return float(np.mean([np.mean(v) for v in per_class.values()]))


@dataclass
class EvalReport:
    recall: dict  # k -> value
    nmi: float
    f1: float
    map_at_r: float
    n_samples: int
    n_classes: int
    skipped_classes: int

    def to_dict(self) -> dict:
        out = {f"recall@{k}": v for k, v in sorted(self.recall.items())}
        out.update(nmi=self.nmi, f1=self.f1, map_at_r=self.map_at_r, n_samples=self.n_samples,
                   n_classes=self.n_classes, skipped_classes=self.skipped_classes)
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.to_dict().items())

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False) + "\n"


def evaluate(embeddings: np.ndarray, labels: Sequence[int], ks: Sequence[int] = (1, 2, 4, 8), seed: int = 0) -> EvalReport:
    """All four metrics on ``[N, P, D_V]`` (or ``[N, D]``) embeddings."""
    x = concat_groups(embeddings)
    labels = np.asarray(labels)
    n_classes = len(np.unique(labels))
    assignment = kmeans(x, n_classes, seed)
    _, counts = np.unique(labels, return_counts=True)
    return EvalReport(
        recall={int(k): recall_at_k(x, labels, int(k)) for k in ks},
        nmi=nmi_from_assignment(assignment, labels),
        f1=pairwise_f1(labels, assignment),
        map_at_r=map_at_r(x, labels),
        n_samples=len(labels),
        n_classes=n_classes,
        skipped_classes=int((counts < 2).sum()),
    )
