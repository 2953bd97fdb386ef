"""Grouping heads: attentive (A), multi-linear (M) and none (N).

All heads take backbone feature maps laid out ``[..., H, W, C]`` and return
group embeddings ``[..., P, D_V]``. Spatial positions are flattened row-major
(W fastest): flat index ``j`` is position ``(j // W, j % W)``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import glorot_bound
from .errors import DimensionError, NumericError, UsageError
from .tensor import Tensor

NORM_EPS = 1e-12

# Debug hook for the self-check's fault-injection demo. -1 is the correct axis.
_softmax_axis = -1


@contextlib.contextmanager
def inject_fault(name: str):
    """Temporarily break the head in a known way. Only ``"softmax-axis"`` exists."""
    global _softmax_axis
    if name != "softmax-axis":
        raise UsageError(f"unknown fault {name!r}")
    _softmax_axis = -2
    try:
        yield
    finally:
        _softmax_axis = -1


@dataclass
class AGroupingParams:
    key_weight: Tensor  # C x D_K
    key_bias: Tensor
    value_weight: Tensor  # C x D_V
    value_bias: Tensor
    queries: Tensor  # D_K x P, one column per group

    @property
    def channels(self) -> int:
        return self.key_weight.shape[0]

    @property
    def key_dim(self) -> int:
        return self.key_weight.shape[1]

    @property
    def value_dim(self) -> int:
        return self.value_weight.shape[1]

    @property
    def groups(self) -> int:
        return self.queries.shape[1]

    def named_parameters(self) -> dict:
        return {
            "head.key.weight": self.key_weight,
            "head.key.bias": self.key_bias,
            "head.value.weight": self.value_weight,
            "head.value.bias": self.value_bias,
            "head.queries": self.queries,
        }


@dataclass
class LinearGroupingParams:
    """P independent affine maps C -> D_V, stored side by side in one C x (P*D_V) matrix."""

    weight: Tensor
    bias: Tensor
    groups: int

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def value_dim(self) -> int:
        return self.weight.shape[1] // self.groups

    def named_parameters(self) -> dict:
        return {"head.proj.weight": self.weight, "head.proj.bias": self.bias}


def _uniform(rng, shape) -> Tensor:
    bound = glorot_bound(shape)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_a_grouping(seed: int, channels: int, key_dim: int, value_dim: int, groups: int) -> AGroupingParams:
    rng = np.random.default_rng(seed)
    key_w = _uniform(rng, (channels, key_dim))
    value_w = _uniform(rng, (channels, value_dim))
    # std 1/sqrt(D_K) keeps the initial logits Q^T K at O(1)
    queries = Tensor(rng.normal(0.0, 1.0 / np.sqrt(key_dim), size=(key_dim, groups)), requires_grad=True)
    return AGroupingParams(
        key_w,
        Tensor(np.zeros(key_dim), requires_grad=True),
        value_w,
        Tensor(np.zeros(value_dim), requires_grad=True),
        queries,
    )


def init_m_grouping(seed: int, channels: int, value_dim: int, groups: int) -> LinearGroupingParams:
    rng = np.random.default_rng(seed)
    blocks = [_uniform(rng, (channels, value_dim)).data for _ in range(groups)]
    weight = Tensor(np.concatenate(blocks, axis=1), requires_grad=True)
    return LinearGroupingParams(weight, Tensor(np.zeros(groups * value_dim), requires_grad=True), groups)


def init_n_grouping(seed: int, channels: int, dim: int) -> LinearGroupingParams:
    return init_m_grouping(seed, channels, dim, 1)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale every vector along the last axis to unit length."""
    norms = T.l2_norm_rows(x)
    if np.any(norms.data < NORM_EPS):
        raise NumericError(
            f"cannot normalize embedding: row norm {norms.data.min():.3g} below {NORM_EPS} (dead parameters?)"
        )
    return T.div(x, T.expand(T.reshape(norms, norms.shape + (1,)), x.shape))


def flatten_positions(x: Tensor) -> Tensor:
    """``[..., H, W, D]`` -> ``[..., D, HW]`` (mode-3 unfolding)."""
    *lead, h, w, d = x.shape
    return T.transpose(T.reshape(x, (*lead, h * w, d)))


def project_key_value(feat: Tensor, params: AGroupingParams) -> tuple:
    """1x1 key/value projections followed by mode-3 unfolding: ``[..., D, HW]``."""
    if feat.ndim < 3 or feat.shape[-1] != params.channels:
        raise DimensionError(f"feature map {feat.shape} does not have {params.channels} channels")
    keys = flatten_positions(T.conv1x1(feat, params.key_weight, params.key_bias))
    values = flatten_positions(T.conv1x1(feat, params.value_weight, params.value_bias))
    return keys, values


def attend(queries: Tensor, keys: Tensor) -> Tensor:
    """Row-wise softmax of query/key inner products: ``[..., P, HW]``."""
    if queries.ndim != 2 or queries.shape[0] != keys.shape[-2]:
        raise DimensionError(f"attend: queries {queries.shape} do not match keys {keys.shape}")
    return T.softmax_rows(T.matmul(T.transpose(queries), keys), axis=_softmax_axis)


def pool(attention: Tensor, values: Tensor) -> Tensor:
    """Attention-weighted sum of value columns: ``F = A V^T``, ``[..., P, D_V]``."""
    if attention.shape[-1] != values.shape[-1]:
        raise DimensionError(f"pool: attention {attention.shape} and values {values.shape} disagree on HW")
    return T.matmul(attention, T.transpose(values))


def a_grouping_forward(feat: Tensor, params: AGroupingParams, normalize: bool = True) -> tuple:
    """Returns ``(F, A)`` with ``F`` of shape ``[..., P, D_V]`` and ``A`` of shape ``[..., P, HW]``."""
    keys, values = project_key_value(feat, params)
    attention = attend(params.queries, keys)
    embedding = pool(attention, values)
    if normalize:
        embedding = normalize_rows(embedding)
    return embedding, attention


def m_grouping_forward(feat: Tensor, params: LinearGroupingParams, normalize: bool = True) -> Tensor:
    """Global average pool, then P affine maps: ``[..., P, D_V]``."""
    if feat.ndim < 3 or feat.shape[-1] != params.channels:
        raise DimensionError(f"feature map {feat.shape} does not have {params.channels} channels")
    pooled = T.mean(feat, axis=(-3, -2))
    out = T.conv1x1(pooled, params.weight, params.bias)
    out = T.reshape(out, out.shape[:-1] + (params.groups, params.value_dim))
    return normalize_rows(out) if normalize else out


def n_grouping_forward(feat: Tensor, params: LinearGroupingParams, normalize: bool = True) -> Tensor:
    """Single embedding, returned as one group: ``[..., 1, D]``."""
    if params.groups != 1:
        raise DimensionError(f"N-grouping takes a single projection, got {params.groups} groups")
    return m_grouping_forward(feat, params, normalize)
