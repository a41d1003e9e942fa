"""Named architecture templates for the desk-scale experiments."""

from __future__ import annotations

from . import nn


def convnet_small(input_hw: int = 32, channels: int = 1, class_count: int = 8) -> nn.Architecture:
    """4 conv + 1 FC, each conv followed by ReLU and 2x2 max pooling."""
    layers = []
    for filters in (8, 16, 16, 16):
        layers += [nn.conv2d(filters, 3), nn.relu(), nn.maxpool2d(2)]
    layers += [nn.flatten(), nn.dense(class_count), nn.softmax()]
    return nn.Architecture((input_hw, input_hw, channels), tuple(layers), class_count)


def convnet_celeba_shape(input_hw: int = 32, channels: int = 1, class_count: int = 8) -> nn.Architecture:
    """6 conv + 1 FC: the layer count of the face-attribute ConvNet, shrunk."""
    layers = []
    for filters, pool in ((8, False), (8, True), (16, False), (16, True), (16, False), (16, True)):
        layers += [nn.conv2d(filters, 3), nn.relu()]
        if pool:
            layers.append(nn.maxpool2d(2))
    layers += [nn.flatten(), nn.dense(class_count), nn.softmax()]
    return nn.Architecture((input_hw, input_hw, channels), tuple(layers), class_count)


TEMPLATES = {
    "convnet-small": convnet_small,
    "convnet-celeba-shape": convnet_celeba_shape,
}


def build(name: str, input_hw: int = 32, channels: int = 1, class_count: int = 8) -> nn.Architecture:
    try:
        factory = TEMPLATES[name]
    except KeyError:
        raise ValueError(f"unknown model template {name!r}; choose from {sorted(TEMPLATES)}") from None
    return factory(input_hw, channels, class_count)
