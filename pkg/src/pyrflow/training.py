"""Losses, synthetic flow data, and the toy training loop.

The synthetic generator crops both frames out of one oversized texture so
that frame1 at x equals the texture sampled at x + flow(x) exactly; the
ground truth is consistent with the image pair by construction, not by
resampling approximation.
"""

from __future__ import annotations

import csv
import math
import os
import time

import numpy as np
from scipy.ndimage import gaussian_filter

from . import ops
from .autodiff import Tensor, no_grad
from .config import ConfigError, TrainConfig
from .estimator import FlowModel
from .evalio import aepe, occlusion_from_fb
from .ops import bilinear_sample_np


class NumericError(ArithmeticError):
    """Loss or gradients stopped being finite."""


# ---------------------------------------------------------------------------
# losses


def make_loss_weights(count: int, gamma: float = 0.8) -> np.ndarray:
    """Exponentially increasing weights gamma^(count-1-k); the last
    prediction gets weight 1."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    return gamma ** (count - 1 - np.arange(count, dtype=np.float64))


def multiscale_loss(
    predictions: list,
    gt: np.ndarray,
    valid=None,
    kind: str = "l2",
    gamma: float = 0.8,
    eps: float = 0.01,
    q: float = 0.7,
    weights=None,
) -> Tensor:
    """Weighted sum of per-prediction flow errors.

    Every prediction must already be at ground-truth resolution. ``l2``
    averages the endpoint error; ``robust`` averages (epe + eps)^q, which
    flattens the penalty on large residuals.
    """
    if not predictions:
        raise ValueError("no predictions to supervise")
    if weights is None:
        weights = make_loss_weights(len(predictions), gamma)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(predictions),):
            raise ConfigError(
                f"{len(predictions)} predictions but {weights.size} loss weights"
            )
    if kind not in ("l2", "robust"):
        raise ConfigError(f"unknown loss kind {kind!r}")

    gt = np.asarray(gt)
    mask = None
    inv_count = None
    if valid is not None:
        mask = np.asarray(valid).astype(np.float64)
        n = float(mask.sum())
        if n == 0:
            raise ValueError("no valid pixels to supervise")
        inv_count = 1.0 / n

    total = None
    for w, pred in zip(weights, predictions):
        if pred.shape[1:] != gt.shape[1:]:
            raise ValueError(
                f"prediction {pred.shape} does not match ground truth {gt.shape}"
            )
        epe = ops.safe_norm(ops.sub(pred, gt.astype(pred.dtype)), axis=0)
        if kind == "robust":
            epe = ops.power(ops.add(epe, eps), q)
        if mask is None:
            term = ops.mean_(epe)
        else:
            term = ops.mul(ops.sum_(ops.mul(epe, mask.astype(pred.dtype))), inv_count)
        piece = ops.mul(term, float(w))
        total = piece if total is None else ops.add(total, piece)
    return total


# ---------------------------------------------------------------------------
# synthetic data


def _octave_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth random RGB texture in [-1, 1] with two spatial scales, so both
    coarse structure and fine gradient detail are present."""
    coarse = gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, 4.0, 4.0))
    fine = gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, 1.2, 1.2))
    tex = coarse / np.abs(coarse).max() + 0.45 * fine / np.abs(fine).max()
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    return 2.0 * (tex - lo) / (hi - lo) - 1.0


def _smooth_flow(rng: np.random.Generator, h: int, w: int, max_disp: float) -> np.ndarray:
    """Affine motion plus a smooth perturbation, clipped to max_disp."""
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ang = rng.uniform(-0.05, 0.05)
    scale = 1.0 + rng.uniform(-0.05, 0.05)
    ca, sa = scale * math.cos(ang), scale * math.sin(ang)
    tx, ty = rng.uniform(-0.5, 0.5, size=2) * max_disp
    dx, dy = jj - cx, ii - cy
    u = (ca - 1.0) * dx - sa * dy + tx
    v = sa * dx + (ca - 1.0) * dy + ty

    bump = gaussian_filter(rng.standard_normal((2, h, w)), sigma=(0, 6.0, 6.0))
    amp = rng.uniform(0.15, 0.4) * max_disp
    bump *= amp / max(np.abs(bump).max(), 1e-12)
    flow = np.stack([u, v]) + bump

    mag = np.sqrt((flow**2).sum(axis=0)).max()
    if mag > max_disp:
        flow *= max_disp / mag
    return flow


def _backward_flow(flow: np.ndarray, iterations: int = 8) -> np.ndarray:
    """Invert a flow field by fixed-point iteration on the target grid."""
    _, h, w = flow.shape
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    bw = -flow.copy()
    for _ in range(iterations):
        qx = np.clip(jj + bw[0], 0, w - 1)
        qy = np.clip(ii + bw[1], 0, h - 1)
        bw = -bilinear_sample_np(flow, qx, qy)
    return bw


def generate_synthetic(rng: np.random.Generator, size: int = 64, max_disp: float | None = None) -> dict:
    """One synthetic pair with exact ground truth.

    Returns img1, img2 as (3, size, size) in [-1, 1], flow (2, size, size),
    valid (correspondent lands inside frame2), and occ (invalid or
    forward-backward inconsistent).
    """
    if max_disp is None:
        max_disp = size / 8.0
    margin = int(math.ceil(max_disp)) + 2
    big = _octave_texture(rng, size + 2 * margin, size + 2 * margin)

    flow = _smooth_flow(rng, size, size, max_disp)
    img2 = big[:, margin : margin + size, margin : margin + size].copy()
    jj, ii = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    img1 = bilinear_sample_np(big, jj + margin + flow[0], ii + margin + flow[1])

    qx, qy = jj + flow[0], ii + flow[1]
    valid = (qx >= 0) & (qx <= size - 1) & (qy >= 0) & (qy <= size - 1)
    occ = occlusion_from_fb(flow, _backward_flow(flow), thresh=1.0) | ~valid
    return {"img1": img1, "img2": img2, "flow": flow, "valid": valid, "occ": occ}


def make_dataset(seed: int, num_samples: int, size: int = 64, max_disp: float | None = None) -> list:
    rng = np.random.default_rng(seed)
    return [generate_synthetic(rng, size, max_disp) for _ in range(num_samples)]


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias correction and optional decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {"t": np.int64(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m{i}"])
            self.v[i] = np.array(state[f"v{i}"])


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint Euclidean norm is at most
    max_norm. Returns the pre-clip norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    total = math.sqrt(sq)
    if total > max_norm > 0:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total


def lr_at(step: int, total_steps: int, base_lr: float, schedule: str = "onecycle") -> float:
    """Linear warmup over the first 5 percent of steps, then linear decay to
    5 percent of the base rate. ``constant`` skips both."""
    if schedule == "constant":
        return base_lr
    warm = max(1, int(0.05 * total_steps))
    if step < warm:
        return base_lr * (step + 1) / warm
    frac = (step - warm) / max(1, total_steps - warm)
    return base_lr * (1.0 - 0.95 * frac)


# ---------------------------------------------------------------------------
# training loop


def _eval_aepe(model: FlowModel, dataset: list, iters) -> float:
    model.eval()
    errs = []
    with no_grad():
        for sample in dataset:
            out = model(sample["img1"], sample["img2"], iters=iters)
            errs.append(aepe(out["flow"].data, sample["flow"], sample["valid"]))
    model.train()
    return float(np.mean(errs))


def train_toy(cfg: TrainConfig, log=print, resume: str | None = None) -> dict:
    """Overfit a small model on a fixed synthetic set.

    Writes loss_curve.csv and final.npz under cfg.out_dir and returns the
    model plus history. ``resume`` restores weights, optimizer state, and
    the step counter from an earlier checkpoint and continues toward
    cfg.steps. ``log`` takes a progress line; pass None to run silently.
    Raises NumericError if the loss leaves the reals.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    t0 = time.time()
    dataset = make_dataset(cfg.seed, cfg.num_samples, cfg.size, cfg.max_displacement)
    model = FlowModel(cfg.model, seed=cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    start_step = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck["config"].to_dict() != cfg.model.to_dict():
            raise ConfigError(f"checkpoint {resume} was trained with a different model config")
        model.load_state_dict(ck["state"])
        if ck["opt"]:
            opt.load_state_dict(ck["opt"])
        start_step = int(ck["extra"].get("step", 0))
    order_rng = np.random.default_rng(cfg.seed + 1)

    dtype = np.dtype(cfg.model.dtype)
    history = []
    best = float("inf")
    stopped_early = False
    order: list[int] = []
    steps_run = start_step

    model.train()
    for step in range(start_step, cfg.steps):
        lr = lr_at(step, cfg.steps, cfg.lr, cfg.lr_schedule)
        if len(order) < cfg.batch_size:
            order += list(order_rng.permutation(cfg.num_samples))
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]

        opt.zero_grad()
        loss_val = 0.0
        for i in idx:
            s = dataset[i]
            out = model(s["img1"].astype(dtype), s["img2"].astype(dtype), iters=cfg.iters)
            loss = multiscale_loss(
                out["predictions"],
                s["flow"],
                valid=s["valid"],
                kind=cfg.loss,
                gamma=cfg.loss_gamma,
                eps=cfg.robust_eps,
                q=cfg.robust_q,
            )
            ops.mul(loss, 1.0 / cfg.batch_size).backward()
            loss_val += float(loss.data) / cfg.batch_size
        if not math.isfinite(loss_val):
            raise NumericError(f"loss became {loss_val} at step {step}")
        clip_grad_norm(opt.params, cfg.clip_norm)
        opt.step(lr)
        steps_run = step + 1

        entry = {"step": step, "loss": loss_val, "lr": lr, "aepe": ""}
        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            err = _eval_aepe(model, dataset, cfg.iters)
            entry["aepe"] = err
            best = min(best, err)
            if log is not None:
                log(
                    f"step {step + 1:5d}  loss {loss_val:8.4f}  train AEPE {err:7.3f} px"
                    f"  lr {lr:.2e}  {time.time() - t0:6.0f}s"
                )
            if err < cfg.early_stop_aepe:
                stopped_early = True
                history.append(entry)
                break
        history.append(entry)

    final_aepe = best if stopped_early else _eval_aepe(model, dataset, cfg.iters)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "loss_curve.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "loss", "lr", "aepe"])
        writer.writeheader()
        writer.writerows(history)
    save_checkpoint(
        os.path.join(cfg.out_dir, "final.npz"),
        model,
        cfg.model,
        optimizer=opt,
        extra={"step": steps_run},
    )
    return {
        "model": model,
        "history": history,
        "final_aepe": final_aepe,
        "steps_run": steps_run,
        "stopped_early": stopped_early,
        "wall_time": time.time() - t0,
    }
