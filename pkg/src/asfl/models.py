"""Named model specs."""

from __future__ import annotations

import math

from .nn import Classifier, Conv2d, Dense, Flatten, MaxPool2d, ModelSpec, ReLU, ResidualBlock


def resmini(num_classes: int = 10, in_channels: int = 1, size: int = 16) -> ModelSpec:
    """Residual CNN with ten top-level stages and nine interior split points.

    Stage layout for a 1x16x16 input (per-sample activation size after each stage)::

        0 stem conv 1->8          8x16x16   2048
        1 maxpool 2x2             8x8x8      512
        2 residual(8)             8x8x8      512
        3 conv 8->16, stride 2    16x4x4     256
        4 residual(16)            16x4x4     256
        5 conv 16->32, stride 2   32x2x2     128
        6 residual(32)            32x2x2     128
        7 conv 32->64, stride 2   64x1x1      64
        8 residual(64)            64x1x1      64
        9 pool + dense head       num_classes

    Residual stages and strided convs have roughly equal forward FLOPs, so
    moving the cut shifts compute between vehicle and RSU in even steps while
    the smashed activation shrinks at cuts 2, 4, 6 and 8.
    """
    layers = (
        Conv2d(in_channels, 8, 3, 1, 1),
        MaxPool2d(2, 2),
        ResidualBlock(8),
        Conv2d(8, 16, 3, 2, 1),
        ResidualBlock(16),
        Conv2d(16, 32, 3, 2, 1),
        ResidualBlock(32),
        Conv2d(32, 64, 3, 2, 1),
        ResidualBlock(64),
        Classifier(64, num_classes),
    )
    return ModelSpec(layers, (in_channels, size, size), num_classes)


def linear(input_shape=(1, 16, 16), num_classes: int = 10) -> ModelSpec:
    n = math.prod(input_shape)
    return ModelSpec((Flatten(), Dense(n, num_classes)), tuple(input_shape), num_classes)


def mlp(input_shape=(1, 16, 16), hidden: int = 64, num_classes: int = 10) -> ModelSpec:
    n = math.prod(input_shape)
    layers = (Flatten(), Dense(n, hidden), ReLU(), Dense(hidden, num_classes))
    return ModelSpec(layers, tuple(input_shape), num_classes)


MODELS = {"resmini": resmini, "linear": linear, "mlp": mlp}


def get_model(name_or_dict, input_shape=None, num_classes: int = 10) -> ModelSpec:
    """Resolve a model name (``resmini``, ``linear``, ``mlp``) or an inline spec dict."""
    if isinstance(name_or_dict, dict):
        return ModelSpec.from_dict(name_or_dict)
    if name_or_dict not in MODELS:
        raise ValueError(f"unknown model {name_or_dict!r}; choose from {sorted(MODELS)}")
    if name_or_dict == "resmini":
        if input_shape is None:
            return resmini(num_classes)
        c, h, w = input_shape
        if h != w:
            raise ValueError("resmini needs a square input")
        return resmini(num_classes, c, h)
    return MODELS[name_or_dict](tuple(input_shape or (1, 16, 16)), num_classes=num_classes)
