"""
Recurrent refinement, scale handoff, and iteration presets
==========================================================

Shows how the estimator spends its update budget: the named presets map to
per-scale GRU iteration counts, the update counter proves the schedule is
honored, and a constant flow field doubles exactly when handed from one
scale to the next.
"""

import numpy as np

from pyrflow.autodiff import Tensor, no_grad
from pyrflow.config import ConfigError, ModelConfig
from pyrflow.estimator import FlowModel, preset_iterations

for scales in (4, 3):
    for preset in ("train", "sintel", "kitti"):
        try:
            iters = preset_iterations(preset, scales)
        except ConfigError as e:
            print("%d scales, %-6s -> rejected (%s)" % (scales, preset, e))
            continue
        print("%d scales, %-6s -> %s  (%d updates total)"
              % (scales, preset, iters, sum(iters)))

model = FlowModel(ModelConfig.small_test(), seed=0)
model.eval()
rng = np.random.default_rng(1)
img1 = rng.random((3, 32, 48)) * 2 - 1
img2 = rng.random((3, 32, 48)) * 2 - 1

schedule = (1, 2, 3)
with no_grad():
    out = model(Tensor(img1), Tensor(img2), iters=schedule)
print("\nrequested schedule %s, GRU ran %d times" % (schedule, out["gru_calls"]))
print("one flow prediction per update:", len(out["predictions"]) == sum(schedule))
print("all predictions live at full resolution:",
      {p.data.shape for p in out["predictions"]} == {(2, 32, 48)})

# Between scales the flow field is upsampled with the learned convex mask;
# resolution doubles and so do the displacement values.  A constant field
# makes the doubling exact regardless of what the mask learned, because a
# convex combination of equal values is that value.
from pyrflow.ops import convex_upsample2x

mask_logits = Tensor(rng.standard_normal((36, 8, 12)))
const = Tensor(np.full((2, 8, 12), 1.5))
up = convex_upsample2x(const, mask_logits)
print("\nconstant 1.5 px field upsampled 8x12 -> %s, all values %.1f"
      % (str(up.data.shape), up.data.flat[0]))
print("doubling exact:", np.allclose(up.data, 3.0, atol=1e-12))
