"""Global-context attention over feature-channel covariances.

The attention operates on the d x d channel-covariance scale rather than on
token pairs: per head, logits are K^T Q of column-normalized projections,
shape (d/h) x (d/h) regardless of how many pixels the map has. That keeps
the attention memory constant in image area while still mixing information
globally, because every channel column is a weighted sum over all tokens.

Blocks follow pre-norm transformer structure with three residual branches
(attention, local 3x3 interaction, feedforward), each scaled by a learned
per-channel factor.
"""

from __future__ import annotations

import functools

import numpy as np

from . import ops
from .autodiff import Parameter, Tensor
from .nn import DWConv2d, LayerNorm, Linear, Module

# ---------------------------------------------------------------------------
# sinusoidal positional embedding


@functools.lru_cache(maxsize=64)
def _pe_cached(d: int, h: int, w: int) -> np.ndarray:
    if d < 2:
        raise ValueError("positional embedding needs at least 2 channels")
    dr = d // 2
    dc = d - dr

    def axis_embed(m: int, n: int) -> np.ndarray:
        pos = np.arange(n, dtype=np.float64)
        k = np.arange(m, dtype=np.float64)
        den = np.power(10000.0, (2.0 * np.floor(k / 2.0)) / m)
        phase = pos[None, :] / den[:, None]
        emb = np.where((np.arange(m) % 2 == 0)[:, None], np.sin(phase), np.cos(phase))
        return emb

    rows = np.broadcast_to(axis_embed(dr, h)[:, :, None], (dr, h, w))
    cols = np.broadcast_to(axis_embed(dc, w)[:, None, :], (dc, h, w))
    out = np.concatenate([rows, cols], axis=0)
    out.flags.writeable = False
    return out


def positional_embedding(d: int, h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal grid embedding (d, h, w); rows in the first d//2
    channels, columns in the rest. Distinct per position on any grid this
    package works at."""
    return _pe_cached(d, h, w).astype(dtype)


def add_positional(x: Tensor) -> Tensor:
    """x + PE for a (d, H, W) map; zero input returns the embedding itself."""
    d, h, w = x.shape
    return ops.add(x, positional_embedding(d, h, w, x.dtype))


# ---------------------------------------------------------------------------
# token/map plumbing and the attention kernel


def to_tokens(x: Tensor) -> Tensor:
    """(C, H, W) -> (N, C), tokens flattened row-major."""
    c = x.shape[0]
    return ops.transpose(ops.reshape(x, (c, x.shape[1] * x.shape[2])), (1, 0))


def to_map(t: Tensor, h: int, w: int) -> Tensor:
    """(N, C) -> (C, H, W), inverse of :func:`to_tokens`."""
    return ops.reshape(ops.transpose(t, (1, 0)), (t.shape[1], h, w))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(N, d) -> (heads, N, d/heads); head g owns channels [g*dh, (g+1)*dh)."""
    n, d = x.shape
    if d % heads != 0:
        raise ValueError(f"head count {heads} must divide channel width {d}")
    dh = d // heads
    return ops.transpose(ops.reshape(x, (n, heads, dh)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    heads, n, dh = x.shape
    return ops.reshape(ops.transpose(x, (1, 0, 2)), (n, heads * dh))


def xca_attend(
    k: Tensor,
    q: Tensor,
    v: Tensor,
    rho: Tensor,
    heads: int,
    return_attn: bool = False,
):
    """Cross-covariance attention.

    k, q, v are (N, d) token matrices with d divisible by ``heads``. Per
    head, K and Q columns are L2-normalized over tokens (norm floored at
    1e-6), logits K^T Q are divided by a per-head temperature exp(rho) and
    softmaxed over the key-channel axis, so every column of the attention
    matrix sums to 1. Output is V @ A merged back to (N, d); with
    heads == d the attention matrices are 1x1 and the output equals V.
    """
    kh = split_heads(k, heads)
    qh = split_heads(q, heads)
    vh = split_heads(v, heads)
    khat = ops.l2_normalize(kh, axis=1, eps=1e-6)
    qhat = ops.l2_normalize(qh, axis=1, eps=1e-6)
    logits = ops.matmul(ops.transpose(khat, (0, 2, 1)), qhat)
    inv_tau = ops.reshape(ops.exp(ops.mul(rho, -1.0)), (heads, 1, 1))
    attn = ops.softmax(ops.mul(logits, inv_tau), axis=1)
    out = merge_heads(ops.matmul(vh, attn))
    if return_attn:
        return out, attn
    return out


class LocalInteraction(Module):
    """Two depth-wise 3x3 convs with a per-channel norm and GELU between.

    In eval mode the normalization uses frozen running statistics, so the
    output at a pixel depends only on its 5x5 neighborhood.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        from .nn import RunningChannelNorm

        self.conv1 = DWConv2d(d, 3, rng, padding=1)
        self.norm = RunningChannelNorm(d)
        self.conv2 = DWConv2d(d, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(ops.gelu(self.norm(self.conv1(x))))


class _BlockTail(Module):
    """Shared LPI + FFN residual tail working at width d."""

    def __init__(self, d: int, ffn_expansion: int, rng, gamma_init: float):
        self.ln_lpi = LayerNorm(d)
        self.lpi = LocalInteraction(d, rng)
        self.gamma_lpi = Parameter(np.full(d, gamma_init))
        self.ln_ffn = LayerNorm(d)
        self.ffn_in = Linear(d, ffn_expansion * d, rng)
        self.ffn_out = Linear(ffn_expansion * d, d, rng)
        self.gamma_ffn = Parameter(np.full(d, gamma_init))

    def __call__(self, tokens: Tensor, h: int, w: int) -> Tensor:
        lpi_map = self.lpi(to_map(self.ln_lpi(tokens), h, w))
        tokens = ops.add(tokens, ops.mul(self.gamma_lpi, to_tokens(lpi_map)))
        f = self.ffn_out(ops.gelu(self.ffn_in(self.ln_ffn(tokens))))
        tokens = ops.add(tokens, ops.mul(self.gamma_ffn, f))
        return tokens


class GlobalContextBlock(Module):
    """Self-attention block turning a context map into global context.

    Positional embedding is added first and rides the residual stream, so
    with all gammas zero the block is exactly input + PE.
    """

    def __init__(self, d: int, heads: int, ffn_expansion: int, rng, gamma_init: float = 1.0):
        if d % heads != 0:
            raise ValueError(f"head count {heads} must divide context width {d}")
        self.heads = heads
        self.ln_attn = LayerNorm(d)
        self.w_k = Linear(d, d, rng)
        self.w_q = Linear(d, d, rng)
        self.w_v = Linear(d, d, rng)
        self.rho = Parameter(np.zeros(heads))
        self.gamma_attn = Parameter(np.full(d, gamma_init))
        self.tail = _BlockTail(d, ffn_expansion, rng, gamma_init)

    def __call__(self, c_map: Tensor) -> Tensor:
        d, h, w = c_map.shape
        tokens = to_tokens(add_positional(c_map))
        n1 = self.ln_attn(tokens)
        att = xca_attend(self.w_k(n1), self.w_q(n1), self.w_v(n1), self.rho, self.heads)
        tokens = ops.add(tokens, ops.mul(self.gamma_attn, att))
        tokens = self.tail(tokens, h, w)
        return to_map(tokens, h, w)


class CrossMotionBlock(Module):
    """Groups motion features by context similarity via cross-attention.

    Keys and queries come from the (position-embedded, normalized) global
    context; values are projected straight from the motion features. The
    residual stream runs on the motion path, so zero gammas give back the
    motion features untouched. The attention width is the motion width,
    which keeps the residual valid when context and motion widths differ.
    """

    def __init__(
        self,
        d_ctx: int,
        d_mf: int,
        heads: int,
        ffn_expansion: int,
        rng,
        gamma_init: float = 1.0,
        add_pe_to_motion: bool = False,
    ):
        if d_mf % heads != 0:
            raise ValueError(f"head count {heads} must divide motion width {d_mf}")
        self.heads = heads
        self.add_pe_to_motion = add_pe_to_motion
        self.ln_ctx = LayerNorm(d_ctx)
        self.w_k = Linear(d_ctx, d_mf, rng)
        self.w_q = Linear(d_ctx, d_mf, rng)
        self.w_v = Linear(d_mf, d_mf, rng)
        self.rho = Parameter(np.zeros(heads))
        self.gamma_attn = Parameter(np.full(d_mf, gamma_init))
        self.tail = _BlockTail(d_mf, ffn_expansion, rng, gamma_init)

    def __call__(self, gc_map: Tensor, mf_map: Tensor) -> Tensor:
        _, h, w = gc_map.shape
        ctx_tokens = to_tokens(add_positional(gc_map))
        n_ctx = self.ln_ctx(ctx_tokens)
        mf_in = add_positional(mf_map) if self.add_pe_to_motion else mf_map
        mf_tokens = to_tokens(mf_in)
        att = xca_attend(
            self.w_k(n_ctx), self.w_q(n_ctx), self.w_v(mf_tokens), self.rho, self.heads
        )
        tokens = ops.add(mf_tokens, ops.mul(self.gamma_attn, att))
        tokens = self.tail(tokens, h, w)
        return to_map(tokens, h, w)
