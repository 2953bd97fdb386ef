"""Backbone + grouping head + loss parameters bundled as one trainable model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .errors import ConfigError
from .grouping import (
    a_grouping_forward,
    init_a_grouping,
    init_m_grouping,
    init_n_grouping,
    m_grouping_forward,
    n_grouping_forward,
)
from .losses import MetricLossParams
from .tensor import Tensor

GROUPING_KINDS = ("A", "M", "N")


@dataclass(frozen=True)
class ModelConfig:
    grouping: str = "A"
    groups: int = 4
    key_dim: int = 16
    value_dim: int = 32
    widths: tuple = (8, 16, 32, 64)
    image_size: int = 32
    in_channels: int = 1
    normalize: bool = True

    def __post_init__(self):
        if self.grouping not in GROUPING_KINDS:
            raise ConfigError(f"grouping must be one of {GROUPING_KINDS}, got {self.grouping!r}")
        for name in ("groups", "key_dim", "value_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.in_channels, tuple(self.widths), self.image_size)

    @property
    def embedding_shape(self) -> tuple:
        """(groups, per-group dim). N-grouping keeps the total size P*D_V in one group."""
        if self.grouping == "N":
            return (1, self.groups * self.value_dim)
        return (self.groups, self.value_dim)


class Model:
    def __init__(self, config: ModelConfig, metric: MetricLossParams = MetricLossParams(), seed: int = 0):
        self.config = config
        self.backbone = init_backbone([seed, 0], config.backbone)
        channels = config.backbone.out_channels
        if config.grouping == "A":
            self.head = init_a_grouping([seed, 1], channels, config.key_dim, config.value_dim, config.groups)
        elif config.grouping == "M":
            self.head = init_m_grouping([seed, 1], channels, config.value_dim, config.groups)
        else:
            self.head = init_n_grouping([seed, 1], channels, config.groups * config.value_dim)
        self.eta = Tensor(metric.eta, requires_grad=True) if metric.kind == "margin" else None

    def named_parameters(self) -> dict:
        named = {**self.backbone.named_parameters(), **self.head.named_parameters()}
        if self.eta is not None:
            named["loss.eta"] = self.eta
        return named

    def decay_weights(self) -> list:
        """Tensors entering the L2 term: every parameter except biases and eta."""
        return [t for name, t in self.named_parameters().items() if not name.endswith("bias") and name != "loss.eta"]

    def forward(self, images) -> tuple:
        """``images [B, H, W, C]`` -> (embeddings ``[B, P, D]``, attention ``[B, P, HW]`` or None)."""
        feat = backbone_forward(T.as_tensor(images), self.backbone)
        if self.config.grouping == "A":
            return a_grouping_forward(feat, self.head, self.config.normalize)
        if self.config.grouping == "M":
            return m_grouping_forward(feat, self.head, self.config.normalize), None
        return n_grouping_forward(feat, self.head, self.config.normalize), None

    def embed(self, images: np.ndarray, batch_size: int = 128) -> tuple:
        """Forward pass without graph recording, in chunks. Returns numpy arrays."""
        embs, attns = [], []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                f, a = self.forward(images[start:start + batch_size])
                embs.append(f.data)
                if a is not None:
                    attns.append(a.data)
        return np.concatenate(embs), (np.concatenate(attns) if attns else None)
