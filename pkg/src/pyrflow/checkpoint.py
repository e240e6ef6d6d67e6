"""Model checkpoints as .npz archives.

The archive holds every parameter and buffer under its state_dict key, the
model configuration as a JSON string, and optionally optimizer state under
an ``opt:`` prefix, so training can resume and inference can rebuild the
exact model without outside information.
"""

from __future__ import annotations

import json

import numpy as np

from .config import ModelConfig
from .estimator import FlowModel

FORMAT_VERSION = 1


def save_checkpoint(path: str, model, config: ModelConfig, optimizer=None, extra: dict | None = None):
    arrays = {f"state:{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        arrays.update({f"opt:{k}": v for k, v in optimizer.state_dict().items()})
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "extra": extra or {},
    }
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str) -> dict:
    """Load the raw contents: {"config", "state", "opt", "extra"}."""
    with np.load(path) as z:
        if "meta_json" not in z:
            raise ValueError(f"{path}: not a checkpoint (no metadata entry)")
        meta = json.loads(bytes(z["meta_json"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: format version {meta.get('format_version')} unsupported"
            )
        state = {k[6:]: z[k] for k in z.files if k.startswith("state:")}
        opt = {k[4:]: z[k] for k in z.files if k.startswith("opt:")}
    return {
        "config": ModelConfig.from_dict(meta["config"]),
        "state": state,
        "opt": opt,
        "extra": meta.get("extra", {}),
    }


def load_model(path: str, seed: int = 0) -> FlowModel:
    """Rebuild the model a checkpoint was saved from."""
    ck = load_checkpoint(path)
    model = FlowModel(ck["config"], seed=seed)
    model.load_state_dict(ck["state"])
    model.eval()
    return model
