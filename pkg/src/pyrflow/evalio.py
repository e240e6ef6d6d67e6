"""Flow metrics, matched/unmatched splits, file formats, visualization.

Metric conventions:

* AEPE: mean Euclidean endpoint error over counted pixels
* Fl: percentage of outlier pixels, where a pixel is an outlier only if its
  endpoint error exceeds 3 px AND 5 percent of the ground-truth magnitude
* matched/unmatched: non-occluded / occluded subsets of the valid region
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import cv2
import numpy as np

from .ops import bilinear_sample_np

FLO_MAGIC = 202021.25
_MAX_DIM = 100_000


class FormatError(ValueError):
    """Malformed or unsupported flow/image file."""


# ---------------------------------------------------------------------------
# metrics


def _epe_map(flow: np.ndarray, gt: np.ndarray) -> np.ndarray:
    diff = np.asarray(flow, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.sqrt((diff * diff).sum(axis=0))


def _as_mask(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(valid).astype(bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != field shape {shape}")
    return mask


def aepe(flow: np.ndarray, gt: np.ndarray, valid=None) -> float:
    """Average endpoint error over the valid region."""
    epe = _epe_map(flow, gt)
    mask = _as_mask(valid, epe.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("aepe over an empty region")
    return float(epe[mask].mean())


def fl_error(flow: np.ndarray, gt: np.ndarray, valid=None) -> float:
    """Outlier percentage: error > 3 px and > 5 percent of gt magnitude."""
    epe = _epe_map(flow, gt)
    mag = np.sqrt((np.asarray(gt, dtype=np.float64) ** 2).sum(axis=0))
    mask = _as_mask(valid, epe.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("fl_error over an empty region")
    outlier = (epe > 3.0) & (epe > 0.05 * mag)
    return float(outlier[mask].mean() * 100.0)


def split_regions(metric_fn, flow, gt, occlusion, valid=None):
    """Evaluate a metric separately on matched (non-occluded) and unmatched
    (occluded) parts of the valid region. An empty region yields NaN."""
    occ = np.asarray(occlusion).astype(bool)
    mask = _as_mask(valid, occ.shape)
    matched = mask & ~occ
    unmatched = mask & occ
    m = metric_fn(flow, gt, matched) if matched.any() else float("nan")
    u = metric_fn(flow, gt, unmatched) if unmatched.any() else float("nan")
    return m, u


@dataclass
class EvalResult:
    aepe: float
    fl: float
    n_pixels: int
    aepe_matched: float = float("nan")
    aepe_unmatched: float = float("nan")
    fl_matched: float = float("nan")
    fl_unmatched: float = float("nan")
    n_matched: int = 0
    n_unmatched: int = 0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def evaluate_pair(flow, gt, occlusion=None, valid=None) -> EvalResult:
    """All metrics for one prediction/gt pair.

    The weighted decomposition aepe * n == aepe_m * n_m + aepe_u * n_u
    holds because both sides sum the same per-pixel errors.
    """
    epe = _epe_map(flow, gt)
    mask = _as_mask(valid, epe.shape)
    res = EvalResult(
        aepe=aepe(flow, gt, mask), fl=fl_error(flow, gt, mask), n_pixels=int(mask.sum())
    )
    if occlusion is not None:
        occ = np.asarray(occlusion).astype(bool)
        res.n_matched = int((mask & ~occ).sum())
        res.n_unmatched = int((mask & occ).sum())
        res.aepe_matched, res.aepe_unmatched = split_regions(aepe, flow, gt, occ, mask)
        res.fl_matched, res.fl_unmatched = split_regions(fl_error, flow, gt, occ, mask)
    return res


def occlusion_from_fb(flow_fw: np.ndarray, flow_bw: np.ndarray, thresh: float = 1.0) -> np.ndarray:
    """Occlusion by forward-backward consistency.

    A pixel is occluded if its correspondent leaves the frame or the
    backward flow there fails to return within ``thresh`` pixels.
    """
    _, h, w = flow_fw.shape
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    qx = jj + flow_fw[0]
    qy = ii + flow_fw[1]
    inside = (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
    bw = bilinear_sample_np(np.asarray(flow_bw, dtype=np.float64), np.clip(qx, 0, w - 1), np.clip(qy, 0, h - 1))
    err = np.sqrt(((flow_fw + bw) ** 2).sum(axis=0))
    return (~inside) | (err > thresh)


# ---------------------------------------------------------------------------
# .flo format (float32 little-endian: magic, width, height, interleaved u,v)


def write_flo(flow: np.ndarray, path: str):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = flow[0]
    data[:, :, 1] = flow[1]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(data.tobytes())


def read_flo(path: str) -> np.ndarray:
    """Read a .flo file to (2, H, W) float32."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (magic,) = struct.unpack_from("<f", raw, 0)
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise FormatError(f"{path}: bad magic {magic!r}")
    w, h = struct.unpack_from("<ii", raw, 4)
    if not (0 < w <= _MAX_DIM and 0 < h <= _MAX_DIM):
        raise FormatError(f"{path}: implausible size {w}x{h}")
    expect = 12 + 8 * w * h
    if len(raw) != expect:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expect}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return np.stack([data[:, :, 0], data[:, :, 1]])


# ---------------------------------------------------------------------------
# KITTI-style 16-bit PNG (u, v, valid), flow scaled by 64 around 2^15


def write_kitti_png(flow: np.ndarray, path: str, valid=None):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    arr = np.zeros((h, w, 3), dtype=np.uint16)
    arr[:, :, 0] = np.clip(np.rint(flow[0] * 64.0 + 2**15), 0, 2**16 - 1).astype(np.uint16)
    arr[:, :, 1] = np.clip(np.rint(flow[1] * 64.0 + 2**15), 0, 2**16 - 1).astype(np.uint16)
    arr[:, :, 2] = 1 if valid is None else np.asarray(valid).astype(np.uint16)
    if not cv2.imwrite(path, arr[:, :, ::-1]):
        raise OSError(f"could not write {path}")


def read_kitti_png(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a KITTI-style PNG; returns ((2, H, W) float64 flow, bool valid)."""
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path}: not readable as an image")
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.dtype != np.uint16:
        raise FormatError(
            f"{path}: expected 3-channel 16-bit PNG, got shape {raw.shape} dtype {raw.dtype}"
        )
    rgb = raw[:, :, ::-1].astype(np.float64)
    u = (rgb[:, :, 0] - 2**15) / 64.0
    v = (rgb[:, :, 1] - 2**15) / 64.0
    valid = rgb[:, :, 2] > 0
    return np.stack([u, v]), valid


# ---------------------------------------------------------------------------
# visualization


def flow_to_color(flow: np.ndarray, max_rad: float | None = None) -> np.ndarray:
    """Map flow to RGB in [0, 1]: hue encodes direction, saturation encodes
    magnitude (clipped at ``max_rad``), zero flow is white. Opposite vectors
    land on complementary hues (0.5 apart on the wheel)."""
    from matplotlib.colors import hsv_to_rgb

    flow = np.asarray(flow, dtype=np.float64)
    rad = np.sqrt((flow**2).sum(axis=0))
    if max_rad is None:
        max_rad = max(float(rad.max()), 1e-8)
    hue = (np.arctan2(flow[1], flow[0]) + np.pi) / (2.0 * np.pi)
    hue = np.clip(hue, 0.0, 1.0)
    sat = np.clip(rad / max_rad, 0.0, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return hsv_to_rgb(hsv)


def read_image(path: str) -> np.ndarray:
    """Load an image as (3, H, W) float64 in [-1, 1]."""
    raw = cv2.imread(path, cv2.IMREAD_COLOR)
    if raw is None:
        raise FormatError(f"{path}: not readable as an image")
    rgb = raw[:, :, ::-1].astype(np.float64)
    return (rgb / 127.5 - 1.0).transpose(2, 0, 1)


def write_image(img: np.ndarray, path: str):
    """Save (H, W, 3) float in [0, 1] (or uint8) as a PNG."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    if not cv2.imwrite(path, img[:, :, ::-1]):
        raise OSError(f"could not write {path}")
