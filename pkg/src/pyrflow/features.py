"""Feature and context encoders with coarse-to-fine consolidation.

Both encoders share one topology: a strided stem plus residual stages give
intermediate maps at 1/2, 1/4, 1/8 and 1/16 resolution, the coarsest map is
projected without a final activation, and finer working maps are built by
consolidation, which fuses the x2-upsampled coarser output with the
encoder's intermediate at the target scale. Consolidation ends in an
activation-free convolution, so consolidated features keep full sign
freedom at every scale.

The context encoder is an independent copy with a leaner consolidation unit
whose 256-channel output is split into a tanh-bounded recurrent hidden
state and a relu context map per scale.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import Tensor
from .config import ModelConfig
from .nn import Conv2d, Module, ResidualBlock


class PaddingError(ValueError):
    """Input spatial size not divisible by the pyramid factor."""


def check_divisible(h: int, w: int, factor: int = 16):
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        raise PaddingError(
            f"input size {h}x{w} is not divisible by {factor}; "
            f"pad height by {ph} and width by {pw} (or use the padded entry point)"
        )


def pad_to_multiple(img: np.ndarray, factor: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    """Replicate-pad (C, H, W) on the bottom/right to a size multiple."""
    _, h, w = img.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return img, (0, 0)
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge"), (ph, pw)


class EncoderTrunk(Module):
    """Stem + residual stages; returns intermediates keyed by divisor."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.stem = Conv2d(3, cfg.stem_dim, 7, rng, stride=2, padding=3)
        dims = cfg.stage_dims
        self.stages = []
        prev = cfg.stem_dim
        for i, dim in enumerate(dims):
            blocks = [ResidualBlock(prev, dim, rng, stride=(2 if i > 0 else 1))]
            for _ in range(cfg.stage_blocks - 1):
                blocks.append(ResidualBlock(dim, dim, rng))
            self.stages.append(blocks)
            prev = dim

    def __call__(self, img: Tensor) -> dict[int, Tensor]:
        _, h, w = img.shape
        check_divisible(h, w)
        x = ops.relu(self.stem(img))
        taps = {}
        divisor = 2
        for blocks in self.stages:
            for blk in blocks:
                x = blk(x)
            taps[divisor] = x
            divisor *= 2
        return taps


class ConsolidationUnit(Module):
    """Fuse an upsampled coarse map with the same-scale encoder intermediate.

    Channel-stacks the bilinear x2-upsampled coarse map with the skip, runs
    two residual layers, and projects with a final activation-free conv.
    """

    def __init__(self, coarse_dim: int, skip_dim: int, width: int, out_dim: int, rng):
        self.block1 = ResidualBlock(coarse_dim + skip_dim, width, rng)
        self.block2 = ResidualBlock(width, width, rng)
        self.project = Conv2d(width, out_dim, 3, rng, padding=1, init="xavier")

    def __call__(self, coarse: Tensor, skip: Tensor) -> Tensor:
        x = ops.concat([ops.upsample2x(coarse), skip], axis=0)
        return self.project(self.block2(self.block1(x)))


class FeaturePyramid(Module):
    """Image-feature encoder producing matching features per working scale."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.trunk = EncoderTrunk(cfg, rng)
        self.coarse_proj = Conv2d(cfg.stage_dims[3], cfg.feat_dim, 3, rng, padding=1, init="xavier")
        self.consolidators = []
        divisors = cfg.scale_divisors
        for div in divisors[1:]:
            skip_dim = cfg.stage_dims[{2: 0, 4: 1, 8: 2}[div]]
            self.consolidators.append(
                ConsolidationUnit(cfg.feat_dim, skip_dim, cfg.consolidate_width, cfg.feat_dim, rng)
            )
        self.divisors = divisors

    def __call__(self, img: Tensor) -> dict[int, Tensor]:
        taps = self.trunk(img)
        out = {16: self.coarse_proj(taps[16])}
        current = out[16]
        for div, unit in zip(self.divisors[1:], self.consolidators):
            current = unit(current, taps[div])
            out[div] = current
        return out


class ContextPyramid(Module):
    """Context encoder; per scale returns (hidden, context) map pair."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        total = cfg.ctx_total
        self.hidden_dim = cfg.hidden_dim
        self.trunk = EncoderTrunk(cfg, rng)
        self.coarse_proj = Conv2d(cfg.stage_dims[3], total, 3, rng, padding=1, init="xavier")
        self.consolidators = []
        divisors = cfg.scale_divisors
        for div in divisors[1:]:
            skip_dim = cfg.stage_dims[{2: 0, 4: 1, 8: 2}[div]]
            self.consolidators.append(
                ConsolidationUnit(total, skip_dim, cfg.context_consolidate_width, total, rng)
            )
        self.divisors = divisors

    def __call__(self, img: Tensor) -> dict[int, tuple[Tensor, Tensor]]:
        taps = self.trunk(img)
        raw = {16: self.coarse_proj(taps[16])}
        current = raw[16]
        for div, unit in zip(self.divisors[1:], self.consolidators):
            current = unit(current, taps[div])
            raw[div] = current
        out = {}
        for div, x in raw.items():
            hidden = ops.tanh(ops.slice_(x, (slice(0, self.hidden_dim),)))
            context = ops.relu(ops.slice_(x, (slice(self.hidden_dim, None),)))
            out[div] = (hidden, context)
        return out
