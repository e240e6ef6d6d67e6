"""
Flow files and flow metrics
===========================

Round trips both on-disk flow formats and walks through the evaluation
metrics: endpoint error, the two-condition outlier rate, and the
matched/unmatched split driven by an occlusion mask.
"""

import os
import tempfile

import numpy as np

from pyrflow.evalio import (
    aepe,
    evaluate_pair,
    fl_error,
    occlusion_from_fb,
    read_flo,
    read_kitti_png,
    write_flo,
    write_kitti_png,
)

rng = np.random.default_rng(0)
gt = rng.uniform(-20, 20, (2, 48, 64))
tmp = tempfile.mkdtemp()

# .flo stores raw float32, so reading back is bit-exact.
flo = os.path.join(tmp, "field.flo")
write_flo(gt, flo)
print(".flo file: %d bytes for 48x64 (12 header + 4 bytes/value)" % os.path.getsize(flo))
print("bit-exact round trip:", np.array_equal(read_flo(flo), gt.astype(np.float32)))

# The 16-bit PNG format quantizes to 1/64 px and carries a validity plane.
png = os.path.join(tmp, "field.png")
valid = rng.random((48, 64)) > 0.3
write_kitti_png(gt, png, valid=valid)
flow_back, valid_back = read_kitti_png(png)
err = np.abs(flow_back - gt)[:, valid].max()
print("png quantization error: %.5f px (bound 1/64 = %.5f)" % (err, 1 / 64))
print("validity plane preserved:", np.array_equal(valid_back, valid))

# Metrics.  A uniform 4 px error is a huge miss on tiny flows but within
# tolerance on large ones, which is exactly what the two-condition outlier
# test encodes.
offset = np.zeros_like(gt)
offset[0] = 4.0
small = np.full_like(gt, 0.5)
print("\nAEPE of a uniform 4 px offset: %.1f px" % aepe(gt + offset, gt))
print("outlier rate on 0.5 px flow: %.0f%%" % fl_error(small + offset, small))
big = np.full_like(gt, 200.0)
print("outlier rate on 200 px flow: %.0f%%" % fl_error(big + offset, big))

# Region split: pixels the occlusion mask marks are scored separately.
occ = np.zeros((48, 64), dtype=bool)
occ[:, :20] = True
pred = gt + rng.normal(0, 1, gt.shape)
result = evaluate_pair(pred, gt, occlusion=occ)
print("\noverall AEPE %.3f   visible %.3f   occluded %.3f" % (
    result.aepe, result.aepe_matched, result.aepe_unmatched))
print("pixel counts: %d = %d + %d" % (
    result.n_pixels, result.n_matched, result.n_unmatched))

# Occlusion masks can be estimated from forward/backward consistency.
fw = np.zeros((2, 32, 32))
fw[0] = 6.0  # everything moves right; the right edge leaves the frame
bw = -fw
occ_est = occlusion_from_fb(fw, bw)
print("\nforward/backward occlusion marks the leaving strip:",
      bool(occ_est[:, -3:].all() and not occ_est[:, :20].any()))
