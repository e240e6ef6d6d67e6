"""Shared test oracles, foremost the central-difference gradient checker.

The checker is deliberately independent of the tape: it re-evaluates the
forward function on perturbed plain arrays under no_grad, so a bug in any
VJP cannot hide inside its own bookkeeping.
"""

from __future__ import annotations

import numpy as np

from pyrflow import ops
from pyrflow.autodiff import Tensor, no_grad

# Central differences in float64 at h=1e-6 carry truncation error O(h^2)=1e-12
# and roundoff O(eps/h)=1e-10, so a 1e-4 relative tolerance leaves four orders
# of margin for conditioning of composed ops.
FD_STEP = 1e-6
FD_RTOL = 1e-4
# Pairs where analytic and numeric are both below this are treated as matching
# zeros; the relative-error denominator would be meaningless there.
# central differences of a double-precision scalar bottom out around
# eps * |loss| / h; differences below this floor carry no signal
FD_ATOL = 1e-9


def _eval(fn, arrays) -> float:
    with no_grad():
        out = fn(*[Tensor(a) for a in arrays])
    return float(out.data)


def check_grads(
    fn,
    arrays,
    rtol: float = FD_RTOL,
    h: float = FD_STEP,
    max_elems: int | None = None,
    rng: np.random.Generator | None = None,
    wrt: tuple[int, ...] | None = None,
) -> float:
    """Compare tape gradients of scalar ``fn(*tensors)`` against central FD.

    Returns the worst relative error seen. ``max_elems`` caps how many
    elements per input are probed (random subset); ``wrt`` restricts which
    inputs are differentiated.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy()) for a in arrays]
    targets = range(len(arrays)) if wrt is None else wrt
    for i in targets:
        tensors[i].requires_grad = True
    out = fn(*tensors)
    if out.size != 1:
        raise ValueError("check_grads needs a scalar-valued function")
    out.backward()

    worst = 0.0
    for k in targets:
        grad = tensors[k].grad
        if grad is None:
            grad = np.zeros_like(arrays[k])
        flat = arrays[k].ravel()
        gflat = grad.ravel()
        idxs = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_elems, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _eval(fn, arrays)
            flat[i] = orig - h
            f_minus = _eval(fn, arrays)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            ana = gflat[i]
            if abs(ana - num) < FD_ATOL:
                continue
            rel = abs(ana - num) / max(abs(ana), abs(num))
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch input {k} elem {i}: analytic={ana:.6e} "
                f"numeric={num:.6e} rel={rel:.3e}"
            )
    return worst


def check_param_grads(
    module,
    loss_fn,
    names: list[str] | None = None,
    rtol: float = FD_RTOL,
    h: float = FD_STEP,
    max_elems: int = 6,
    seed: int = 1,
) -> float:
    """FD-check tape gradients of ``loss_fn()`` w.r.t. module parameters.

    ``loss_fn`` is a nullary closure over the module and fixed inputs; it is
    re-evaluated under no_grad while single parameter entries are perturbed
    in place. Returns the worst relative error.
    """
    params = dict(module.named_parameters())
    if names is None:
        names = list(params)
    rng = np.random.default_rng(seed)

    module.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for key in names:
        p = params[key]
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        probe = rng.choice(flat.size, size=min(max_elems, flat.size), replace=False)
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = float(loss_fn().data)
            flat[i] = orig - h
            with no_grad():
                f_minus = float(loss_fn().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            a = ana.ravel()[i]
            if abs(a - num) < FD_ATOL:
                continue
            rel = abs(a - num) / max(abs(a), abs(num))
            worst = max(worst, rel)
            assert rel < rtol, f"param {key}[{i}]: analytic={a:.6e} fd={num:.6e} rel={rel:.3e}"
    return worst


def weighted_sum(fn, weights):
    """Turn an array-valued op into a scalar one via a fixed random projection."""

    def scalar_fn(*ts):
        return ops.sum_(ops.mul(fn(*ts), weights))

    return scalar_fn


def away_from_zero(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Push values out of the FD-kink zone around 0 (for relu and friends)."""
    x = np.asarray(x, dtype=np.float64).copy()
    small = np.abs(x) < margin
    x[small] = margin * np.where(x[small] >= 0, 1.0, -1.0) * 2.0
    return x


def fractional_margin(flow: np.ndarray, lo: float = 0.15, hi: float = 0.85) -> np.ndarray:
    """Nudge flow components so sub-pixel fractions stay away from integers.

    Bilinear sampling is only piecewise smooth; finite differences across a
    cell boundary would disagree with the one-sided analytic gradient.
    """
    flow = np.asarray(flow, dtype=np.float64).copy()
    frac = flow - np.floor(flow)
    frac = lo + (hi - lo) * frac
    return np.floor(flow) + frac
