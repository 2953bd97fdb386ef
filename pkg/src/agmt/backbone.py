"""Tiny stride-1 convolutional feature extractor.

Each layer is a circular 3x3 convolution followed by ReLU. Nothing ever
downsamples, so the whole stack commutes with cyclic image shifts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    widths: tuple = (8, 16, 32, 64)
    image_size: int = 32

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ConfigError(f"backbone: in_channels must be 1 or 3, got {self.in_channels}")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"backbone: widths must be positive, got {self.widths}")
        if self.image_size < 1:
            raise ConfigError(f"backbone: image_size must be positive, got {self.image_size}")

    @property
    def out_channels(self) -> int:
        return int(self.widths[-1])

    def layer_shapes(self) -> list:
        chans = [self.in_channels, *map(int, self.widths)]
        return [(3, 3, c_in, c_out) for c_in, c_out in zip(chans[:-1], chans[1:])]

    def param_count(self) -> int:
        return int(np.sum([np.prod(s) + s[3] for s in self.layer_shapes()]))


@dataclass
class BackboneParams:
    config: BackboneConfig
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def named_parameters(self) -> dict:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"backbone.conv{i}.weight"] = w
            named[f"backbone.conv{i}.bias"] = b
        return named


def glorot_bound(shape: tuple) -> float:
    """Uniform Glorot bound; conv kernels count the 3x3 receptive field in both fans."""
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_backbone(seed: int, config: BackboneConfig = BackboneConfig()) -> BackboneParams:
    rng = np.random.default_rng(seed)
    params = BackboneParams(config)
    for shape in config.layer_shapes():
        bound = glorot_bound(shape)
        params.weights.append(Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True))
        params.biases.append(Tensor(np.zeros(shape[3]), requires_grad=True))
    return params


def backbone_forward(image: Tensor, params: BackboneParams) -> Tensor:
    """Map ``[..., H', W', C_img]`` images to ``[..., H', W', C]`` feature maps."""
    cfg = params.config
    image = T.as_tensor(image)
    if image.ndim < 3 or image.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ConfigError(
            f"backbone expects images of shape (..., {cfg.image_size}, {cfg.image_size}, "
            f"{cfg.in_channels}), got {image.shape}"
        )
    x = image
    for w, b in zip(params.weights, params.biases):
        x = T.relu(T.conv3x3_circular(x, w, b))
    return x
