"""
Overfitting a tiny model on a handful of synthetic pairs
========================================================

Trains the smallest usable model for a short burst and prints the loss
curve.  This is a plumbing check that runs in well under a minute, not the
full toy convergence run; `pyrflow train-toy` with the default config does
the real thing.
"""

import numpy as np

from pyrflow.config import ModelConfig, TrainConfig
from pyrflow.training import train_toy

cfg = TrainConfig(
    seed=3,
    size=32,
    num_samples=4,
    steps=40,
    batch_size=2,
    lr=2e-3,
    iters=(1, 2, 2),
    eval_every=10,
    early_stop_aepe=0.0,  # never triggers; run all 40 steps
    out_dir="demos/_out/tiny_run",
    model=ModelConfig.small_test(),
)

result = train_toy(cfg, log=print)

history = result["history"]
first, last = history[0], history[-1]
print()
print("loss %8.4f -> %8.4f over %d steps" % (first["loss"], last["loss"], result["steps_run"]))
print("train AEPE after %d steps: %.3f px" % (result["steps_run"], result["final_aepe"]))
print("wall time: %.1fs" % result["wall_time"])

losses = np.array([h["loss"] for h in history])
print("loss decreased:", losses[-5:].mean() < losses[:5].mean())
print("artifacts in", cfg.out_dir, "(loss_curve.csv, final.npz)")
