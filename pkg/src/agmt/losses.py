"""Pairwise metric losses, the group-diversity loss and the combined objective.

Loss functions are elementwise over tensors of pair distances or similarities.
``l`` is the pair indicator (1 for same-class pairs, 0 otherwise), passed as a
plain array/float because it never needs a gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, UsageError
from .tensor import Tensor

METRIC_KINDS = ("contrastive", "binomial", "margin")


@dataclass(frozen=True)
class MetricLossParams:
    kind: str = "margin"
    margin: float = 0.2
    alpha: float = 2.0
    beta0: float = 1.0
    beta1: float = 25.0
    eta: float = 1.2  # initial value of the learnable boundary (margin loss only)
    lr_eta: float = 5e-4

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ConfigError(f"unknown metric loss {self.kind!r}; expected one of {METRIC_KINDS}")
        if self.kind == "margin" and not self.eta > self.margin:
            raise ConfigError(f"margin loss needs eta > m at init, got eta={self.eta}, m={self.margin}")

    @classmethod
    def defaults(cls, kind: str) -> "MetricLossParams":
        """Per-loss defaults: contrastive m=1; binomial m=0.5; margin m=0.2, eta=1.2."""
        margins = {"contrastive": 1.0, "binomial": 0.5, "margin": 0.2}
        if kind not in margins:
            raise ConfigError(f"unknown metric loss {kind!r}; expected one of {METRIC_KINDS}")
        return cls(kind=kind, margin=margins[kind])


@dataclass(frozen=True)
class DiversityLossParams:
    margin: float = 0.5
    alpha: float = 2.0
    beta0: float = 1.0


class PairIndex(NamedTuple):
    i: np.ndarray
    j: np.ndarray
    positive: np.ndarray  # float 0/1


class LossTerms(NamedTuple):
    total: Tensor
    metric: Tensor
    diversity: Tensor
    l2: Tensor


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _indicator(l, shape) -> Tensor:
    return Tensor(np.broadcast_to(np.asarray(l, dtype=np.float64), shape))


def _check_norms(*norms: Tensor) -> None:
    for n in norms:
        if np.any(n.data < 1e-12):
            raise NumericError("zero-norm embedding passed to a pairwise measure")


def pair_distance(fi: Tensor, fj: Tensor) -> Tensor:
    """Euclidean distance along the last axis."""
    fi, fj = _t(fi), _t(fj)
    _check_norms(T.l2_norm_rows(fi), T.l2_norm_rows(fj))
    return T.l2_norm_rows(T.sub(fi, fj))


def pair_cosine(fi: Tensor, fj: Tensor) -> Tensor:
    """Cosine similarity along the last axis, with unsquared norms."""
    fi, fj = _t(fi), _t(fj)
    ni, nj = T.l2_norm_rows(fi), T.l2_norm_rows(fj)
    _check_norms(ni, nj)
    return T.div(T.sum(T.mul(fi, fj), axis=-1), T.mul(ni, nj))


def contrastive_loss(d, l, m: float = 1.0) -> Tensor:
    """``l*d + (1-l)*[m-d]_+``"""
    d = _t(d)
    pos = T.mul(d, _indicator(l, d.shape))
    neg = T.mul(T.hinge(T.sub(m, d)), _indicator(1.0 - np.asarray(l, dtype=np.float64), d.shape))
    return T.add(pos, neg)


def binomial_deviance_loss(s, l, params: MetricLossParams = MetricLossParams.defaults("binomial")) -> Tensor:
    """``l*log(1+exp(-a(s-m)b1)) + (1-l)*log(1+exp(a(s-m)b0))`` via softplus."""
    s = _t(s)
    shifted = T.sub(s, params.margin)
    pos = T.softplus(T.scale(shifted, -params.alpha * params.beta1))
    neg = T.softplus(T.scale(shifted, params.alpha * params.beta0))
    l_arr = np.asarray(l, dtype=np.float64)
    return T.add(T.mul(pos, _indicator(l_arr, s.shape)), T.mul(neg, _indicator(1.0 - l_arr, s.shape)))


def margin_loss(d, l, m: float = 0.2, eta=1.2) -> Tensor:
    """``l*[d-(eta-m)]_+ + (1-l)*[(eta+m)-d]_+``; ``eta`` may be a trainable scalar tensor."""
    d = _t(d)
    eta = T.expand(_t(eta), d.shape)
    pos = T.hinge(T.sub(d, T.sub(eta, m)))
    neg = T.hinge(T.sub(T.add(eta, m), d))
    l_arr = np.asarray(l, dtype=np.float64)
    return T.add(T.mul(pos, _indicator(l_arr, d.shape)), T.mul(neg, _indicator(1.0 - l_arr, d.shape)))


def diversity_loss(s, params: DiversityLossParams = DiversityLossParams()) -> Tensor:
    """``log(1+exp(a(s-mu)b0))`` on the cosine between two groups of one image."""
    return T.softplus(T.scale(T.sub(_t(s), params.margin), params.alpha * params.beta0))


def enumerate_pairs(labels: Sequence[int]) -> PairIndex:
    """All unordered pairs ``i < j`` in row-major order."""
    labels = np.asarray(labels)
    if labels.size < 2:
        raise UsageError(f"need at least 2 samples to form pairs, got {labels.size}")
    i, j = np.triu_indices(labels.size, k=1)
    return PairIndex(i, j, (labels[i] == labels[j]).astype(np.float64))


def metric_loss(fi: Tensor, fj: Tensor, positive: np.ndarray, params: MetricLossParams, eta=None) -> Tensor:
    """Elementwise metric loss between matching rows of ``fi`` and ``fj``."""
    if params.kind == "contrastive":
        return contrastive_loss(pair_distance(fi, fj), positive, params.margin)
    if params.kind == "binomial":
        return binomial_deviance_loss(pair_cosine(fi, fj), positive, params)
    return margin_loss(pair_distance(fi, fj), positive, params.margin, params.eta if eta is None else eta)


def total_loss(
    embeddings: Tensor,
    labels: Sequence[int],
    metric: MetricLossParams,
    *,
    eta: Optional[Tensor] = None,
    diversity: DiversityLossParams = DiversityLossParams(),
    lambda1: float = 0.0,
    lambda2: float = 0.0,
    weights: Sequence[Tensor] = (),
    pairs: Optional[PairIndex] = None,
) -> LossTerms:
    """Combined objective over a batch of grouped embeddings ``[B, P, D_V]``.

    The metric loss is averaged over groups and over the ``N_b`` sample pairs;
    the diversity loss is averaged over the ``N_g = B*P(P-1)/2`` group pairs
    within each image; ``weights`` enter the squared-L2 term.
    """
    if embeddings.ndim != 3:
        raise UsageError(f"expected embeddings of shape [B, P, D], got {embeddings.shape}")
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"lambda1 and lambda2 must be non-negative, got {lambda1}, {lambda2}")
    b, p, _ = embeddings.shape
    if len(labels) != b:
        raise UsageError(f"{len(labels)} labels for a batch of {b}")
    if pairs is None:
        pairs = enumerate_pairs(labels)

    fi = T.take(embeddings, pairs.i, axis=0)
    fj = T.take(embeddings, pairs.j, axis=0)
    positive = np.repeat(pairs.positive[:, None], p, axis=1)
    metric_term = T.mean(metric_loss(fi, fj, positive, metric, eta))

    if p > 1:
        gi, gj = np.triu_indices(p, k=1)
        s = pair_cosine(T.take(embeddings, gi, axis=1), T.take(embeddings, gj, axis=1))
        div_term = T.mean(diversity_loss(s, diversity))
    else:
        div_term = Tensor(0.0)

    l2_term = Tensor(0.0)
    for w in weights:
        l2_term = T.add(l2_term, T.sum(T.mul(w, w)))

    total = T.add(T.add(metric_term, T.scale(div_term, lambda1)), T.scale(l2_term, lambda2))
    return LossTerms(total, metric_term, div_term, l2_term)
