"""Attention memory scaling benchmark.

Token-pair attention materializes an N x N map per head, so its transient
memory grows quadratically with pixel count. Channel-covariance attention
materializes heads x (d/h) x (d/h), a constant independent of N. This
module measures both empirically (tracemalloc peaks over pure numpy
implementations) and analytically, and fits log-log slopes.

The numpy implementations here are measurement subjects, kept free of the
autodiff tape so the peaks reflect the attention math alone.
"""

from __future__ import annotations

import csv
import math
import tracemalloc

import numpy as np

DEFAULT_SIDES = (32, 45, 64, 91, 128, 181, 256)
MEMORY_BUDGET_BYTES = 3 * 1024**3


def token_attention_np(k: np.ndarray, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head softmax(Q K^T / sqrt(d)) V over N tokens; builds the
    full N x N attention map."""
    d = k.shape[1]
    logits = q @ k.T
    logits /= math.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits @ v


def xca_attention_np(k: np.ndarray, q: np.ndarray, v: np.ndarray, heads: int, eps: float = 1e-6) -> np.ndarray:
    """Channel-covariance attention at unit temperature; the per-head map
    is (d/h) x (d/h) regardless of token count."""
    n, d = k.shape
    dh = d // heads
    out = np.empty_like(v)
    for g in range(heads):
        sl = slice(g * dh, (g + 1) * dh)
        kh, qh, vh = k[:, sl], q[:, sl], v[:, sl]
        khat = kh / np.maximum(np.linalg.norm(kh, axis=0, keepdims=True), eps)
        qhat = qh / np.maximum(np.linalg.norm(qh, axis=0, keepdims=True), eps)
        logits = khat.T @ qhat
        logits -= logits.max(axis=0, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=0, keepdims=True)
        out[:, sl] = vh @ logits
    return out


def attention_elements(n_tokens: int, dim: int, heads: int, kind: str) -> int:
    """Analytic size (in elements) of the attention maps one pass builds."""
    if kind == "token":
        return n_tokens * n_tokens
    if kind == "xca":
        return heads * (dim // heads) ** 2
    raise ValueError(f"unknown attention kind {kind!r}")


def predicted_peak_bytes(n_tokens: int, dim: int, heads: int, kind: str, itemsize: int = 8) -> int:
    """Upper estimate of transient bytes for budget checks. The token
    softmax runs in place, so one full map plus O(N d) work suffices."""
    att = attention_elements(n_tokens, dim, heads, kind) * itemsize
    work = 4 * n_tokens * dim * itemsize
    return att + work


def measure_peak_bytes(fn, *arrays) -> int:
    """Peak transient allocation of fn(*arrays), inputs excluded.

    Inputs are allocated by the caller before the peak counter resets, so
    only memory the attention computation itself creates is counted.
    """
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    fn(*arrays)
    _, peak = tracemalloc.get_traced_memory()
    if not was_tracing:
        tracemalloc.stop()
    return max(0, peak - base)


def run_ladder(
    sides=DEFAULT_SIDES,
    dim: int = 256,
    heads: int = 8,
    seed: int = 0,
    budget_bytes: int = MEMORY_BUDGET_BYTES,
    mechanisms=("token", "xca"),
    log=None,
) -> list[dict]:
    """Measure the requested attention mechanisms over a ladder of square
    map sides.

    Token attention rungs whose predicted footprint exceeds the budget are
    skipped (recorded with measured_bytes None) rather than risking the
    machine; the channel-covariance path runs every rung.
    """
    for m in mechanisms:
        if m not in ("token", "xca"):
            raise ValueError(f"unknown attention mechanism {m!r}")
    rng = np.random.default_rng(seed)
    rows = []
    for side in sides:
        n = side * side
        k = rng.standard_normal((n, dim))
        q = rng.standard_normal((n, dim))
        v = rng.standard_normal((n, dim))
        for kind in mechanisms:
            predicted = predicted_peak_bytes(n, dim, heads, kind, k.itemsize)
            if kind == "token" and predicted > budget_bytes:
                measured = None
            elif kind == "token":
                measured = measure_peak_bytes(token_attention_np, k, q, v)
            else:
                measured = measure_peak_bytes(xca_attention_np, k, q, v, heads)
            row = {
                "kind": kind,
                "side": side,
                "n_tokens": n,
                "analytic_elements": attention_elements(n, dim, heads, kind),
                "predicted_bytes": predicted,
                "measured_bytes": measured,
            }
            rows.append(row)
            if log:
                shown = "skipped (over budget)" if measured is None else f"{measured / 1e6:10.1f} MB"
                log(f"  {kind:5s} side {side:4d}  N {n:6d}  peak {shown}")
    return rows


def fit_loglog_slope(n_tokens, bytes_) -> float:
    """Least-squares slope of log(bytes) against log(N)."""
    xs = [math.log(n) for n, b in zip(n_tokens, bytes_) if b]
    ys = [math.log(b) for b in bytes_ if b]
    if len(xs) < 2:
        raise ValueError("need at least two measured points to fit a slope")
    return float(np.polyfit(xs, ys, 1)[0])


def ladder_slopes(rows: list[dict]) -> dict:
    """Fitted memory-vs-tokens slopes per attention kind."""
    out = {}
    for kind in dict.fromkeys(r["kind"] for r in rows):
        pts = [r for r in rows if r["kind"] == kind and r["measured_bytes"]]
        if len(pts) < 4:
            raise ValueError(f"only {len(pts)} measured points for {kind} attention")
        out[kind] = fit_loglog_slope(
            [r["n_tokens"] for r in pts], [r["measured_bytes"] for r in pts]
        )
    return out


def write_csv(rows: list[dict], path: str):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def plot_ladder(rows: list[dict], path: str):
    """Log-log plot of measured peak memory against token count."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    styles = {"token": ("o-", "token-pair attention"), "xca": ("s-", "channel-covariance attention")}
    for kind, (style, label) in styles.items():
        pts = [r for r in rows if r["kind"] == kind and r["measured_bytes"]]
        ax.loglog(
            [r["n_tokens"] for r in pts],
            [r["measured_bytes"] for r in pts],
            style,
            label=label,
        )
    ax.set_xlabel("tokens N")
    ax.set_ylabel("peak transient bytes")
    ax.set_title("Attention memory vs. image area")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
