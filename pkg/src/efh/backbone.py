"""Tiny convolutional image backbone emitting a three-scale pyramid.

Stem (stride 4) plus three stages, each conv3x3 -> channel layer norm ->
GELU -> stride-2 downsample, yielding strides 8/16/32 at a shared width.
Channel-wise layer norm keeps batch-size-1 inference statistically
identical to training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .nn import Conv2d, LayerNorm


@dataclass
class FeaturePyramid:
    p3: Tensor  # [H/8,  W/8,  d]
    p4: Tensor  # [H/16, W/16, d]
    p5: Tensor  # [H/32, W/32, d]


class ImageBackbone:
    def __init__(self, rng, d=64, stem_width=32, dtype=np.float32):
        self.d = d
        self.stem = Conv2d(rng, 3, stem_width, 4, stride=4, dtype=dtype)
        self.stem_norm = LayerNorm(stem_width, dtype)
        widths = [stem_width, d, d, d]
        self.stages = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            self.stages.append({
                "conv": Conv2d(rng, cin, cout, 3, stride=1, padding=1, dtype=dtype),
                "norm": LayerNorm(cout, dtype),
                "down": Conv2d(rng, cout, cout, 3, stride=2, padding=1, dtype=dtype),
            })

    def __call__(self, image) -> FeaturePyramid:
        x = image if isinstance(image, Tensor) else Tensor(image)
        h, w = x.shape[0], x.shape[1]
        if h % 32 or w % 32:
            raise ValueError(f"image dims must be divisible by 32, got {h}x{w}")
        x = self.stem_norm(self.stem(x)).gelu()
        feats = []
        for stage in self.stages:
            x = stage["norm"](stage["conv"](x)).gelu()
            x = stage["down"](x)
            feats.append(x)
        return FeaturePyramid(*feats)

    def parameters(self, prefix="backbone"):
        out = {}
        out.update(self.stem.parameters(f"{prefix}.stem"))
        out.update(self.stem_norm.parameters(f"{prefix}.stem_norm"))
        for i, stage in enumerate(self.stages):
            out.update(stage["conv"].parameters(f"{prefix}.s{i}.conv"))
            out.update(stage["norm"].parameters(f"{prefix}.s{i}.norm"))
            out.update(stage["down"].parameters(f"{prefix}.s{i}.down"))
        return out
