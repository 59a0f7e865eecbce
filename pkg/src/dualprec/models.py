"""Desk-scale architecture registry.

Two reference nets:
  mlp256     — flatten / 256 / 128 / classes dense stack for 28x28-style inputs.
  miniconvbn — three conv3x3-BN-ReLU blocks (16/32/64 channels) with 2x2 max
               pooling and a dense head; input dims must be divisible by 8.
"""
from __future__ import annotations

import numpy as np

from .engine import BatchNorm2d, Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU


def build_mlp256(in_shape, classes, rng, dtype=np.float32, bn_momentum=0.1):
    in_features = int(np.prod(in_shape))
    return Network([
        Flatten("flatten"),
        Dense("fc1", in_features, 256, rng, dtype),
        ReLU("relu1"),
        Dense("fc2", 256, 128, rng, dtype),
        ReLU("relu2"),
        Dense("fc3", 128, classes, rng, dtype),
    ])


def build_miniconvbn(in_shape, classes, rng, dtype=np.float32, bn_momentum=0.1):
    c, h, w = in_shape
    if h % 8 or w % 8:
        raise ValueError(f"miniconvbn needs spatial dims divisible by 8, got {in_shape}")
    layers = []
    channels = [c, 16, 32, 64]
    for i in range(3):
        layers += [
            Conv2d(f"conv{i + 1}", channels[i], channels[i + 1], 3, 1, rng, dtype),
            BatchNorm2d(f"bn{i + 1}", channels[i + 1], momentum=bn_momentum, dtype=dtype),
            ReLU(f"relu{i + 1}"),
            MaxPool2d(f"pool{i + 1}"),
        ]
    head_in = 64 * (h // 8) * (w // 8)
    layers += [Flatten("flatten"), Dense("head", head_in, classes, rng, dtype)]
    return Network(layers)


ARCHITECTURES = {
    "mlp256": build_mlp256,
    "miniconvbn": build_miniconvbn,
}


def build_network(arch, in_shape, classes, rng, dtype=np.float32, bn_momentum=0.1):
    try:
        builder = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; have {sorted(ARCHITECTURES)}")
    return builder(tuple(in_shape), classes, rng, dtype, bn_momentum)


def arch_id(arch, in_shape, classes):
    """Self-describing id string stored in model streams."""
    dims = "x".join(str(d) for d in in_shape)
    return f"{arch}:{dims}:{classes}"


def parse_arch_id(text):
    """Inverse of :func:`arch_id`; returns (arch, in_shape, classes)."""
    try:
        arch, dims, classes = text.split(":")
        in_shape = tuple(int(d) for d in dims.split("x"))
        return arch, in_shape, int(classes)
    except ValueError:
        raise ValueError(f"malformed architecture id {text!r}")
