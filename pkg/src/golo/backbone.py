"""Small convolutional backbone producing a P2-P5 feature pyramid."""

from __future__ import annotations

import numpy as np

from golo import tensor as T
from golo.errors import ShapeError
from golo.nn import Conv2d, Module
from golo.sampling import FeaturePyramid
from golo.tensor import Tensor


def check_image_shape(shape: tuple) -> None:
    h, w = shape[-2:]
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ShapeError(f"image height and width must be positive multiples of 32, got {h}x{w}")


class Backbone(Module):
    """Stride-2 conv stem plus one stride-2 conv per level, fused top-down.

    Lateral 1x1 projections bring every level to ``channels``; coarser levels
    are upsampled by 2 and added to finer ones.  Nine conv layers in total.
    """

    def __init__(self, channels: int, rng: np.random.Generator, width: int = 16):
        widths = [width, 2 * width, 3 * width, 4 * width, 4 * width]
        self.stem = Conv2d(3, widths[0], 3, rng, stride=2)
        self.stages = [Conv2d(widths[i], widths[i + 1], 3, rng, stride=2) for i in range(4)]
        self.laterals = [Conv2d(widths[i + 1], channels, 1, rng) for i in range(4)]
        self.channels = channels

    def forward(self, images: Tensor) -> FeaturePyramid:
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        check_image_shape(images.shape)
        x = T.relu(self.stem((images - 0.5) * 4.0))
        feats = []
        for conv in self.stages:
            x = T.relu(conv(x))
            feats.append(x)
        laterals = [lat(f) for lat, f in zip(self.laterals, feats)]
        levels = [laterals[3]]
        for lat in reversed(laterals[:3]):
            levels.insert(0, lat + T.repeat2x(levels[0]))
        return FeaturePyramid(levels)


def forward_pyramid(image: Tensor, backbone: Backbone) -> FeaturePyramid:
    return backbone(image)
