"""Slow, loop-based reference implementations.

Each function recomputes a quantity from its definition with plain Python
loops and ``math``, sharing no code with the vectorised versions it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv3x3_circular_loop(x, w, b):
    """``x [H, W, C]``, ``w [3, 3, C, D]`` -> ``[H, W, D]``."""
    h, wd, c = x.shape
    d = w.shape[3]
    out = np.zeros((h, wd, d))
    for y in range(h):
        for xx in range(wd):
            for o in range(d):
                acc = b[o]
                for i in range(3):
                    for j in range(3):
                        for k in range(c):
                            acc += x[(y + i - 1) % h, (xx + j - 1) % wd, k] * w[i, j, k, o]
                out[y, xx, o] = acc
    return out


def a_grouping_loop(feat, key_w, key_b, val_w, val_b, queries, normalize=True):
    """One feature map ``[H, W, C]`` -> (F ``[P, D_V]``, A ``[P, HW]``) by explicit sums."""
    h, w, c = feat.shape
    n = h * w
    cols = [feat[j // w, j % w] for j in range(n)]
    keys = [[sum(col[k] * key_w[k, q] for k in range(c)) + key_b[q] for q in range(key_w.shape[1])] for col in cols]
    vals = [[sum(col[k] * val_w[k, q] for k in range(c)) + val_b[q] for q in range(val_w.shape[1])] for col in cols]
    p_count = queries.shape[1]
    att = np.zeros((p_count, n))
    emb = np.zeros((p_count, val_w.shape[1]))
    for p in range(p_count):
        logits = [sum(queries[q, p] * keys[j][q] for q in range(key_w.shape[1])) for j in range(n)]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        z = math.fsum(ex)
        for j in range(n):
            att[p, j] = ex[j] / z
        for dv in range(val_w.shape[1]):
            emb[p, dv] = math.fsum(att[p, j] * vals[j][dv] for j in range(n))
        if normalize:
            norm = math.sqrt(math.fsum(v * v for v in emb[p]))
            emb[p] /= norm
    return emb, att


def _dist(a, b) -> float:
    return math.sqrt(math.fsum((float(u) - float(v)) ** 2 for u, v in zip(a, b)))


def ranked_list(x, q: int) -> list:
    """Other samples ordered by (distance, index)."""
    return [j for _, j in sorted((_dist(x[q], x[j]), j) for j in range(len(x)) if j != q)]


def recall_at_k(x, labels, k: int) -> float:
    hits = 0
    for q in range(len(x)):
        if any(labels[j] == labels[q] for j in ranked_list(x, q)[:k]):
            hits += 1
    return hits / len(x)


def kmeans(x, n_clusters: int, seed: int, max_iter: int = 100, tol: float = 1e-6) -> list:
    """Farthest-first seeding then Lloyd iterations, written out with loops."""
    n, dim = len(x), len(x[0])
    first = int(np.random.default_rng(seed).integers(n))

    def sq(a, b):
        s = 0.0
        for u, v in zip(a, b):
            s += (float(u) - float(v)) ** 2
        return s

    centers = [list(map(float, x[first]))]
    while len(centers) < n_clusters:
        far = max(range(n), key=lambda i: (min(sq(x[i], c) for c in centers), -i))
        centers.append(list(map(float, x[far])))

    def assign_all():
        out = []
        for i in range(n):
            d = [sq(x[i], c) for c in centers]
            out.append(d.index(min(d)))
        return out

    for _ in range(max_iter):
        assign = assign_all()
        new = []
        for c in range(n_clusters):
            members = [x[i] for i in range(n) if assign[i] == c]
            if members:
                mean = []
                for t in range(dim):
                    acc = 0.0
                    for m in members:
                        acc += float(m[t])
                    mean.append(acc / len(members))
                new.append(mean)
            else:
                new.append(centers[c])
        shift = max(math.sqrt(sq(a, b)) for a, b in zip(new, centers))
        centers = new
        if shift <= tol:
            break
    return assign_all()


def nmi(assignment, labels) -> float:
    n = len(labels)
    joint: dict = {}
    for c, y in zip(assignment, labels):
        joint[(c, y)] = joint.get((c, y), 0) + 1
    pc: dict = {}
    py: dict = {}
    for (c, y), v in joint.items():
        pc[c] = pc.get(c, 0) + v
        py[y] = py.get(y, 0) + v
    mi = math.fsum(v / n * math.log(v * n / (pc[c] * py[y])) for (c, y), v in joint.items())
    hc = -math.fsum(v / n * math.log(v / n) for v in pc.values())
    hy = -math.fsum(v / n * math.log(v / n) for v in py.values())
    if hc + hy == 0:
        return 1.0
    return 2 * mi / (hc + hy)


def pairwise_f1(labels, assignment) -> float:
    tp = fp = fn = 0
    for i, j in itertools.combinations(range(len(labels)), 2):
        same_c = assignment[i] == assignment[j]
        same_y = labels[i] == labels[j]
        tp += same_c and same_y
        fp += same_c and not same_y
        fn += same_y and not same_c
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def map_at_r(x, labels) -> float:
    per_class: dict = {}
    for q in range(len(x)):
        r = sum(1 for j in range(len(x)) if j != q and labels[j] == labels[q])
        if r == 0:
            continue
        ranked = ranked_list(x, q)
        hits = 0
        ap = 0.0
        for i in range(r):
            if labels[ranked[i]] == labels[q]:
                hits += 1
                ap += hits / (i + 1)
        per_class.setdefault(labels[q], []).append(ap / r)
    return sum(sum(v) / len(v) for v in per_class.values()) / len(per_class)


def contrastive(d, l, m=1.0):
    return l * d + (1 - l) * max(m - d, 0.0)


def binomial(s, l, m=0.5, alpha=2.0, beta0=1.0, beta1=25.0):
    if l:
        return math.log1p(math.exp(-alpha * (s - m) * beta1))
    return math.log1p(math.exp(alpha * (s - m) * beta0))


def margin(d, l, m=0.2, eta=1.2):
    return l * max(d - (eta - m), 0.0) + (1 - l) * max((eta + m) - d, 0.0)


def diversity(s, mu=0.5, alpha=2.0, beta0=1.0):
    return math.log1p(math.exp(alpha * (s - mu) * beta0))
