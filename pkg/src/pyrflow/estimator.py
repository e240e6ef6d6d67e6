"""Recurrent coarse-to-fine flow estimation.

One shared update machinery (motion encoder, separable GRU, flow and mask
heads, convex x2 upsampler) runs at every scale; the attention blocks are
per-scale. Each scale refines for a configurable number of GRU iterations,
hands its convex-upsampled estimate to the next finer scale as
initialization, and every iteration contributes a full-resolution
prediction for supervision.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .attention import CrossMotionBlock, GlobalContextBlock
from .autodiff import Tensor, no_grad
from .config import ConfigError, ModelConfig
from .features import ContextPyramid, FeaturePyramid, check_divisible, pad_to_multiple
from .nn import Conv2d, ConvRect, Module

_PRESET_ITERATIONS = {
    (4, "train"): (4, 5, 5, 6),
    (4, "sintel"): (8, 10, 10, 10),
    (4, "kitti"): (35, 35, 5, 15),
    (3, "sintel"): (10, 15, 20),
    (3, "kitti"): (6, 18, 30),
}


def preset_iterations(name: str, num_scales: int) -> tuple:
    """Per-scale GRU iteration counts (coarse to fine) for a named preset."""
    try:
        return _PRESET_ITERATIONS[(num_scales, name)]
    except KeyError:
        avail = sorted(f"{n} ({s}-scale)" for s, n in _PRESET_ITERATIONS)
        raise ConfigError(
            f"no iteration preset {name!r} for {num_scales} scales; available: {', '.join(avail)}"
        ) from None


def check_schedule(iters, num_scales: int) -> tuple:
    iters = tuple(int(t) for t in iters)
    if len(iters) != num_scales:
        raise ConfigError(f"schedule {iters} has {len(iters)} entries for {num_scales} scales")
    if any(t < 1 for t in iters):
        raise ConfigError(f"schedule {iters} must give every scale at least one iteration")
    return iters


class MotionEncoder(Module):
    """Fold correlation costs and the current flow into motion features."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        corr_ch = (2 * cfg.lookup_radius + 1) ** 2
        m = cfg.motion_dim
        self.corr1 = Conv2d(corr_ch, 2 * m, 1, rng)
        self.corr2 = Conv2d(2 * m, (3 * m) // 2, 3, rng, padding=1)
        self.flow1 = Conv2d(2, m, 7, rng, padding=3)
        self.flow2 = Conv2d(m, m // 2, 3, rng, padding=1)
        self.out = Conv2d((3 * m) // 2 + m // 2, m - 2, 3, rng, padding=1)

    def __call__(self, corr: Tensor, flow: Tensor) -> Tensor:
        c = ops.relu(self.corr2(ops.relu(self.corr1(corr))))
        f = ops.relu(self.flow2(ops.relu(self.flow1(flow))))
        o = ops.relu(self.out(ops.concat([c, f], axis=0)))
        return ops.concat([o, flow], axis=0)


class SepConvGRU(Module):
    """GRU with separable 1x5 / 5x1 gates; keeps the hidden state in (-1, 1)."""

    def __init__(self, hidden_dim: int, input_dim: int, rng: np.random.Generator):
        cin = hidden_dim + input_dim
        self.horiz_z = ConvRect(cin, hidden_dim, 1, 5, rng, padding=(0, 2))
        self.horiz_r = ConvRect(cin, hidden_dim, 1, 5, rng, padding=(0, 2))
        self.horiz_q = ConvRect(cin, hidden_dim, 1, 5, rng, padding=(0, 2))
        self.vert_z = ConvRect(cin, hidden_dim, 5, 1, rng, padding=(2, 0))
        self.vert_r = ConvRect(cin, hidden_dim, 5, 1, rng, padding=(2, 0))
        self.vert_q = ConvRect(cin, hidden_dim, 5, 1, rng, padding=(2, 0))

    @staticmethod
    def _half(h, x, conv_z, conv_r, conv_q):
        hx = ops.concat([h, x], axis=0)
        z = ops.sigmoid(conv_z(hx))
        r = ops.sigmoid(conv_r(hx))
        q = ops.tanh(conv_q(ops.concat([ops.mul(r, h), x], axis=0)))
        return ops.add(ops.mul(ops.sub(1.0, z), h), ops.mul(z, q))

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        h = self._half(h, x, self.horiz_z, self.horiz_r, self.horiz_q)
        h = self._half(h, x, self.vert_z, self.vert_r, self.vert_q)
        return h


class FlowHead(Module):
    def __init__(self, hidden_dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(hidden_dim, 2 * hidden_dim, 3, rng, padding=1)
        self.conv2 = Conv2d(2 * hidden_dim, 2, 3, rng, padding=1)
        # start near the zero function: a full-scale head pumps O(1) noise
        # into the flow at every update, and training first has to undo it
        self.conv2.weight.data *= 0.01

    def __call__(self, h: Tensor) -> Tensor:
        return self.conv2(ops.relu(self.conv1(h)))


class MaskHead(Module):
    """Predicts 9 * 4 convex-combination logits per coarse pixel."""

    def __init__(self, hidden_dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(hidden_dim, 2 * hidden_dim, 3, rng, padding=1)
        self.conv2 = Conv2d(2 * hidden_dim, 36, 1, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return ops.mul(self.conv2(ops.relu(self.conv1(h))), 0.25)


class FlowModel(Module):
    """Full coarse-to-fine recurrent flow network."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.features = FeaturePyramid(cfg, rng)
        self.context = ContextPyramid(cfg, rng)
        self.global_blocks = [
            GlobalContextBlock(cfg.context_dim, cfg.heads, cfg.ffn_expansion, rng, cfg.gamma_init)
            for _ in range(cfg.num_scales)
        ]
        self.cross_blocks = [
            CrossMotionBlock(
                cfg.context_dim,
                cfg.motion_dim,
                cfg.heads,
                cfg.ffn_expansion,
                rng,
                cfg.gamma_init,
                cfg.add_pe_to_motion,
            )
            for _ in range(cfg.num_scales)
        ]
        self.motion_encoder = MotionEncoder(cfg, rng)
        self.gru = SepConvGRU(cfg.hidden_dim, 2 * cfg.motion_dim + cfg.context_dim, rng)
        self.flow_head = FlowHead(cfg.hidden_dim, rng)
        self.mask_head = MaskHead(cfg.hidden_dim, rng)
        self.gru_calls = 0
        self.astype(cfg.np_dtype)

    # -- prediction assembly ------------------------------------------------

    def _bilinear_to_full(self, up: Tensor, res_div: int) -> Tensor:
        while res_div > 1:
            up = ops.mul(ops.upsample2x(up), 2.0)
            res_div //= 2
        return up

    def _convex_chain_to_full(self, up: Tensor, hidden: Tensor, res_div: int) -> Tensor:
        while res_div > 1:
            hidden = ops.upsample2x(hidden)
            up = ops.convex_upsample2x(up, self.mask_head(hidden))
            res_div //= 2
        return up

    def __call__(self, img1, img2, iters=None) -> dict:
        """Estimate flow from img1 to img2, both (3, H, W) with H, W
        divisible by 16. Returns the final full-resolution flow plus one
        full-resolution prediction per GRU iteration (supervision order,
        coarse to fine)."""
        cfg = self.cfg
        if iters is None:
            iters = (4, 5, 5, 6) if cfg.num_scales == 4 else (4, 5, 6)
        iters = check_schedule(iters, cfg.num_scales)
        dtype = cfg.np_dtype
        a1 = np.asarray(img1.data if isinstance(img1, Tensor) else img1, dtype=dtype)
        a2 = np.asarray(img2.data if isinstance(img2, Tensor) else img2, dtype=dtype)
        if a1.shape != a2.shape or a1.ndim != 3 or a1.shape[0] != 3:
            raise ValueError(f"expected two (3, H, W) images, got {a1.shape} and {a2.shape}")
        _, h, w = a1.shape
        check_divisible(h, w)

        t1, t2 = Tensor(a1), Tensor(a2)
        fp1 = self.features(t1)
        fp2 = self.features(t2)
        ctx = self.context(t1)

        divisors = cfg.scale_divisors
        flow = Tensor(np.zeros((2, h // 16, w // 16), dtype=dtype))
        predictions: list[Tensor] = []
        self.gru_calls = 0
        up = None
        for si, div in enumerate(divisors):
            f1, f2 = fp1[div], fp2[div]
            hidden, c_s = ctx[div]
            gc = self.global_blocks[si](c_s)
            finest = si == len(divisors) - 1
            for _ in range(iters[si]):
                corr = ops.corr_lookup(f1, f2, flow, radius=cfg.lookup_radius)
                mf = self.motion_encoder(corr, flow)
                cmf = self.cross_blocks[si](gc, mf)
                inp = ops.concat([cmf, c_s, mf], axis=0)
                hidden = self.gru(hidden, inp)
                self.gru_calls += 1
                flow = ops.add(flow, self.flow_head(hidden))
                up = ops.convex_upsample2x(flow, self.mask_head(hidden))
                if finest:
                    predictions.append(self._convex_chain_to_full(up, hidden, div // 2))
                else:
                    predictions.append(self._bilinear_to_full(up, div // 2))
            if not finest:
                flow = up  # exact handoff: next scale starts from this estimate
        return {
            "flow": predictions[-1],
            "predictions": predictions,
            "gru_calls": self.gru_calls,
        }


def estimate_flow(model: FlowModel, img1, img2, iters=None) -> np.ndarray:
    """Inference helper: no tape, returns the final flow as a plain array."""
    with no_grad():
        return model(img1, img2, iters=iters)["flow"].data


def estimate_flow_padded(model: FlowModel, img1, img2, iters=None) -> np.ndarray:
    """Like :func:`estimate_flow` for arbitrary sizes: replicate-pads to a
    /16 size, estimates, and crops back."""
    img1 = np.asarray(img1)
    img2 = np.asarray(img2)
    _, h, w = img1.shape
    p1, _ = pad_to_multiple(img1)
    p2, _ = pad_to_multiple(img2)
    flow = estimate_flow(model, p1, p2, iters=iters)
    return flow[:, :h, :w].copy()
