"""Differentiable numpy ops used by the flow model.

Conventions, used consistently across the package:

* feature maps are channel-first ``(C, H, W)``, no batch axis
* flow fields are ``(2, H, W)`` with channel 0 = u (columns, x) and
  channel 1 = v (rows, y), displacements in pixels at the field's own
  resolution
* token matrices are ``(N, d)`` with tokens flattened row-major from the
  spatial grid

Every op returns a Tensor wired into the tape; gradients are checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import special

from .autodiff import Tensor, astensor, make_node

# ---------------------------------------------------------------------------
# broadcasting arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return make_node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product, 2-D or batched with matching leading dims."""
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_node(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(x) -> Tensor:
    x = astensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def sqrt(x) -> Tensor:
    x = astensor(x)
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g / (2.0 * out),))


def power(x, p: float) -> Tensor:
    """x ** p for strictly positive x."""
    x = astensor(x)
    xd = x.data
    out = xd**p
    return make_node(out, (x,), lambda g: (g * p * xd ** (p - 1.0),))


def relu(x) -> Tensor:
    x = astensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return make_node(out, (x,), lambda g: (np.where(mask, g, 0.0),))


def tanh(x) -> Tensor:
    x = astensor(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = astensor(x)
    out = special.expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    x = astensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))
    out = xd * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return make_node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = astensor(x)
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=True),)

    return make_node(out, (x,), vjp)


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = astensor(x)
    xd = x.data
    out = xd.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = xd.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for a in ax:
            n *= xd.shape[a]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, xd.shape).astype(xd.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, xd.shape).astype(xd.dtype, copy=True),)

    return make_node(out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    old = x.data.shape
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = astensor(x)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)
    return make_node(out, (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tuple(ts), vjp)


def slice_(x, key) -> Tensor:
    """Basic slicing (tuple of ``slice`` objects only)."""
    x = astensor(x)
    out = x.data[key]
    shape = x.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[key] = g
        return (z,)

    return make_node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalizations


def softmax(x, axis: int = -1) -> Tensor:
    x = astensor(x)
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_node(out, (x,), vjp)


def _affine_norm(x, gamma, beta, axes, eps):
    """Shared normalize-over-axes core with learned affine."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), vjp)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (per-token over channels for (N, d))."""
    return _affine_norm(x, gamma, beta, (-1,), eps)


def channel_norm2d(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each channel's spatial map of a (C, H, W) tensor."""
    return _affine_norm(x, gamma, beta, (1, 2), eps)


def l2_normalize(x, axis: int = 0, eps: float = 1e-6) -> Tensor:
    """Divide by the L2 norm along ``axis``, norm floored at ``eps``."""
    x = astensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    nf = np.maximum(n, eps)
    out = xd / nf
    floored = n <= eps

    def vjp(g):
        dot = (xd * g).sum(axis=axis, keepdims=True)
        dx_free = g / nf - xd * (dot / nf**3)
        dx_floor = g / eps
        return (np.where(floored, dx_floor, dx_free),)

    return make_node(out, (x,), vjp)


def safe_norm(x, axis: int = 0, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis`` with a zero (sub)gradient at the kink."""
    x = astensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * xd / np.maximum(n, 1e-30),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return make_node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# convolutions


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Read-only (C, kh, kw, Ho, Wo) sliding-window view of a padded map."""
    c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2 = xp.strides
    return as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )


def _scatter_windows(dcols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of ``_windows``: accumulate (C, kh, kw, Ho, Wo) into (C, Hp, Wp)."""
    c, kh, kw, ho, wo = dcols.shape
    dxp = np.zeros((c, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    return dxp


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), x (Cin,H,W), w (Cout,Cin,kh,kw)."""
    x, w = astensor(x), astensor(w)
    b = astensor(b) if b is not None else None
    cout, cin, kh, kw = w.data.shape
    if x.data.shape[0] != cin:
        raise ValueError(f"conv2d: input has {x.data.shape[0]} channels, weight expects {cin}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw, stride)
    _, _, _, ho, wo = win.shape
    cols = np.ascontiguousarray(win).reshape(cin * kh * kw, ho * wo)
    w2 = w.data.reshape(cout, cin * kh * kw)
    y = w2 @ cols
    if b is not None:
        y = y + b.data[:, None]
    out = y.reshape(cout, ho, wo)
    hp, wp = xp.shape[1:]
    h = x.data.shape[1]
    wdt = x.data.shape[2]

    def vjp(g):
        g2 = g.reshape(cout, ho * wo)
        dx = dw = db = None
        if w.requires_grad:
            dw = (g2 @ cols.T).reshape(w.data.shape)
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(cin, kh, kw, ho, wo)
            dxp = _scatter_windows(dcols, hp, wp, stride)
            dx = dxp[:, padding : padding + h, padding : padding + wdt]
            if padding == 0:
                dx = np.ascontiguousarray(dx)
        if b is not None and b.requires_grad:
            db = g2.sum(axis=1)
        if b is None:
            return dx, dw
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, vjp)


def dwconv2d(x, w, b=None, padding: int = 1) -> Tensor:
    """Depth-wise convolution, x (C,H,W), w (C,kh,kw), stride 1."""
    x, w = astensor(x), astensor(w)
    b = astensor(b) if b is not None else None
    c, kh, kw = w.data.shape
    if x.data.shape[0] != c:
        raise ValueError(f"dwconv2d: input has {x.data.shape[0]} channels, weight expects {c}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = np.ascontiguousarray(_windows(xp, kh, kw, 1))
    _, _, _, ho, wo = win.shape
    cols = win.reshape(c, kh * kw, ho * wo)
    wf = w.data.reshape(c, kh * kw)
    y = np.einsum("ck,ckl->cl", wf, cols)
    if b is not None:
        y = y + b.data[:, None]
    out = y.reshape(c, ho, wo)
    hp, wp = xp.shape[1:]
    h, wdt = x.data.shape[1:]

    def vjp(g):
        g2 = g.reshape(c, ho * wo)
        dx = dw = db = None
        if w.requires_grad:
            dw = np.einsum("cl,ckl->ck", g2, cols).reshape(w.data.shape)
        if x.requires_grad:
            dcols = (wf[:, :, None] * g2[:, None, :]).reshape(c, kh, kw, ho, wo)
            dxp = _scatter_windows(dcols, hp, wp, 1)
            dx = np.ascontiguousarray(dxp[:, padding : padding + h, padding : padding + wdt])
        if b is not None and b.requires_grad:
            db = g2.sum(axis=1)
        if b is None:
            return dx, dw
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, vjp)


# ---------------------------------------------------------------------------
# bilinear x2 upsampling (half-pixel-offset convention, edge clamped)


def _up1d(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = 0.25 * prev + 0.75 * x
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    din = 0.75 * (ge + go)
    din[..., :-1] += 0.25 * ge[..., 1:]
    din[..., 1:] += 0.25 * go[..., :-1]
    din[..., 0] += 0.25 * ge[..., 0]
    din[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(din, -1, axis)


def upsample2x(x) -> Tensor:
    """Bilinear x2 upsampling of (C, H, W) along both spatial axes."""
    x = astensor(x)
    out = _up1d(_up1d(x.data, -2), -1)

    def vjp(g):
        return (_up1d_adjoint(_up1d_adjoint(g, -1), -2),)

    return make_node(out, (x,), vjp)


def upsample2x_np(x: np.ndarray) -> np.ndarray:
    """Non-tape version of :func:`upsample2x` for plain arrays."""
    return _up1d(_up1d(x, -2), -1)


# ---------------------------------------------------------------------------
# on-demand correlation lookup


def _corr_window_indices(flow: np.ndarray, radius: int, h: int, w: int):
    """Per-pixel window anchors and bilinear fractions for the lookup.

    The sample points x + flow + delta share one fractional part per pixel
    because delta is integer, so a (2r+2)^2 window around the floored base
    position serves every offset. Anchors are clipped so a window always
    stays inside the zero-padded map; the clip only moves windows that read
    zeros everywhere, which leaves values and gradients unchanged.
    """
    pad = 2 * radius + 2
    jj, ii = np.meshgrid(np.arange(w, dtype=flow.dtype), np.arange(h, dtype=flow.dtype))
    qx = (jj + flow[0]).ravel()
    qy = (ii + flow[1]).ravel()
    x0 = np.floor(qx)
    y0 = np.floor(qy)
    tx = qx - x0
    ty = qy - y0
    ax = np.clip(x0.astype(np.int64) - radius, -pad, w) + pad
    ay = np.clip(y0.astype(np.int64) - radius, -pad, h) + pad
    return ay, ax, ty, tx, pad


def _gather_window(f2p: np.ndarray, ay: np.ndarray, ax: np.ndarray, u: int) -> np.ndarray:
    rows = ay[:, None] + np.arange(u)[None, :]
    cols = ax[:, None] + np.arange(u)[None, :]
    return f2p[:, rows[:, :, None], cols[:, None, :]]


def corr_lookup(f1, f2, flow, radius: int = 4) -> Tensor:
    """Sample the correlation cost of f1 pixels against f2 around the flow.

    Returns ``((2r+1)^2, H, W)`` with channel ``(dy+r)*(2r+1) + (dx+r)``
    holding ``<f1(x), f2(x + flow(x) + (dx, dy))> / sqrt(C)``; reads outside
    f2 count as zero, sub-pixel positions are sampled bilinearly.
    """
    f1, f2, flow = astensor(f1), astensor(f2), astensor(flow)
    if f1.data.shape != f2.data.shape:
        raise ValueError("corr_lookup: feature maps must share a shape")
    c, h, w = f1.data.shape
    if flow.data.shape != (2, h, w):
        raise ValueError(f"corr_lookup: flow shape {flow.data.shape} != (2, {h}, {w})")
    r = radius
    d = 2 * r + 1
    u = 2 * r + 2
    scale = 1.0 / np.sqrt(c)
    ay, ax, ty, tx, pad = _corr_window_indices(flow.data, r, h, w)
    f2p = np.pad(f2.data, ((0, 0), (pad, pad), (pad, pad)))
    f1f = f1.data.reshape(c, h * w)

    win = _gather_window(f2p, ay, ax, u)  # (C, L, U, U)
    phi = np.einsum("cl,cluv->luv", f1f, win) * scale
    w00 = ((1 - ty) * (1 - tx))[:, None, None]
    w01 = ((1 - ty) * tx)[:, None, None]
    w10 = (ty * (1 - tx))[:, None, None]
    w11 = (ty * tx)[:, None, None]
    a_ul = phi[:, :d, :d]
    a_ur = phi[:, :d, 1:]
    a_ll = phi[:, 1:, :d]
    a_lr = phi[:, 1:, 1:]
    cost = w00 * a_ul + w01 * a_ur + w10 * a_ll + w11 * a_lr
    out = cost.transpose(1, 2, 0).reshape(d * d, h, w).copy()

    hp, wp = f2p.shape[1:]

    def vjp(g):
        gw = g.reshape(d * d, h * w).T.reshape(h * w, d, d)
        dphi = np.zeros_like(phi)
        dphi[:, :d, :d] += w00 * gw
        dphi[:, :d, 1:] += w01 * gw
        dphi[:, 1:, :d] += w10 * gw
        dphi[:, 1:, 1:] += w11 * gw
        df1 = df2 = dflow = None
        if f1.requires_grad:
            df1 = (np.einsum("luv,cluv->cl", dphi, win) * scale).reshape(c, h, w)
        if f2.requires_grad:
            dwin = f1f[:, :, None, None] * dphi[None, :, :, :] * scale
            rows = ay[:, None] + np.arange(u)[None, :]
            cols = ax[:, None] + np.arange(u)[None, :]
            flat = (rows[:, :, None] * wp + cols[:, None, :]).ravel()
            df2p = np.empty((c, hp * wp), dtype=g.dtype)
            for ch in range(c):
                df2p[ch] = np.bincount(flat, weights=dwin[ch].ravel(), minlength=hp * wp)
            df2 = df2p.reshape(c, hp, wp)[:, pad : pad + h, pad : pad + w].copy()
        if flow.requires_grad:
            txc = tx[:, None, None]
            tyc = ty[:, None, None]
            dcost_dty = (1 - txc) * (a_ll - a_ul) + txc * (a_lr - a_ur)
            dcost_dtx = (1 - tyc) * (a_ur - a_ul) + tyc * (a_lr - a_ll)
            du = (gw * dcost_dtx).sum(axis=(1, 2)).reshape(h, w)
            dv = (gw * dcost_dty).sum(axis=(1, 2)).reshape(h, w)
            dflow = np.stack([du, dv])
        return df1, df2, dflow

    return make_node(out, (f1, f2, flow), vjp)


# ---------------------------------------------------------------------------
# convex x2 upsampling


def _edge_pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")


def _edge_pad1_adjoint(dp: np.ndarray) -> np.ndarray:
    core = dp[:, 1:-1, 1:-1].copy()
    core[:, 0, :] += dp[:, 0, 1:-1]
    core[:, -1, :] += dp[:, -1, 1:-1]
    core[:, :, 0] += dp[:, 1:-1, 0]
    core[:, :, -1] += dp[:, 1:-1, -1]
    core[:, 0, 0] += dp[:, 0, 0]
    core[:, 0, -1] += dp[:, 0, -1]
    core[:, -1, 0] += dp[:, -1, 0]
    core[:, -1, -1] += dp[:, -1, -1]
    return core


def convex_upsample2x(flow, logits) -> Tensor:
    """Upsample flow (2,H,W) to (2,2H,2W) by learned convex combinations.

    ``logits`` is (36,H,W): for each coarse pixel, 4 output sub-pixels times
    9 neighbor weights (channel = subpixel*9 + neighbor, both row-major).
    Weights are softmaxed over the 9 neighbors; values are doubled to keep
    displacements in output-resolution pixels. The 3x3 neighborhood is
    gathered with edge replication so constant fields stay exactly constant.
    """
    flow, logits = astensor(flow), astensor(logits)
    two, h, w = flow.data.shape
    if two != 2:
        raise ValueError("convex_upsample2x: flow must have 2 channels")
    if logits.data.shape != (36, h, w):
        raise ValueError(f"convex_upsample2x: logits shape {logits.data.shape} != (36, {h}, {w})")

    lg = logits.data.reshape(4, 9, h, w)
    m = lg.max(axis=1, keepdims=True)
    e = np.exp(lg - m)
    wts = e / e.sum(axis=1, keepdims=True)  # (4, 9, H, W)

    fp = _edge_pad1(2.0 * flow.data)
    neigh = np.empty((2, 9, h, w), dtype=flow.data.dtype)
    for di in range(3):
        for dj in range(3):
            neigh[:, di * 3 + dj] = fp[:, di : di + h, dj : dj + w]

    # anchor the combination at the center neighbor: algebraically the same
    # convex sum, but constant fields come out bit-exact even though the
    # softmax weights only sum to 1 up to rounding
    center = neigh[:, 4]
    diff = neigh - center[:, None]
    sub = center[:, None] + np.einsum("knij,cnij->ckij", wts, diff)  # (2, 4, H, W)
    out = np.empty((2, 2 * h, 2 * w), dtype=flow.data.dtype)
    for a in range(2):
        for b in range(2):
            out[:, a::2, b::2] = sub[:, 2 * a + b]

    def vjp(g):
        dsub = np.empty_like(sub)
        for a in range(2):
            for b in range(2):
                dsub[:, 2 * a + b] = g[:, a::2, b::2]
        dlogits = dflow = None
        if logits.requires_grad:
            dw = np.einsum("ckij,cnij->knij", dsub, diff)
            dot = (dw * wts).sum(axis=1, keepdims=True)
            dlg = wts * (dw - dot)
            dlogits = dlg.reshape(36, h, w)
        if flow.requires_grad:
            dneigh = np.einsum("knij,ckij->cnij", wts, dsub)
            dneigh[:, 4] += dsub.sum(axis=1) - dneigh.sum(axis=1)
            dp = np.zeros((2, h + 2, w + 2), dtype=g.dtype)
            for di in range(3):
                for dj in range(3):
                    dp[:, di : di + h, dj : dj + w] += dneigh[:, di * 3 + dj]
            dflow = 2.0 * _edge_pad1_adjoint(dp)
        return dflow, dlogits

    return make_node(out, (flow, logits), vjp)


# ---------------------------------------------------------------------------
# plain-array helpers (no tape)


def bilinear_sample_np(img: np.ndarray, qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at float positions, zero outside; returns (C, *qx.shape)."""
    c, h, w = img.shape
    x0 = np.floor(qx).astype(np.int64)
    y0 = np.floor(qy).astype(np.int64)
    tx = qx - x0
    ty = qy - y0
    out = np.zeros((c,) + qx.shape, dtype=img.dtype)
    for dy, dx, wt in (
        (0, 0, (1 - ty) * (1 - tx)),
        (0, 1, (1 - ty) * tx),
        (1, 0, ty * (1 - tx)),
        (1, 1, ty * tx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        vals = img[:, yc, xc]
        out += np.where(valid, wt, 0.0) * vals
    return out


def warp_backward_np(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Warp (C, H, W) by sampling at x + flow(x); the usual backward warp."""
    _, h, w = img.shape
    jj, ii = np.meshgrid(np.arange(w, dtype=flow.dtype), np.arange(h, dtype=flow.dtype))
    return bilinear_sample_np(img, jj + flow[0], ii + flow[1])
