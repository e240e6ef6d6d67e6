"""
Why channel attention scales and token attention does not
=========================================================

Measures the peak working memory of both attention mechanisms over a ladder
of image sizes and fits the log-log slope.  Token attention materializes an
N x N matrix (slope near 2); channel attention keeps a constant-size
attention matrix, so its peak grows only with the token buffers themselves
(slope near 1).

This is a reduced ladder for a quick run; `pyrflow bench-attn` runs the
full one with budget-guarded sizes.
"""

import os

from pyrflow.bench import (
    attention_elements,
    ladder_slopes,
    plot_ladder,
    run_ladder,
    write_csv,
)

rows = run_ladder(
    sides=(16, 24, 32, 48, 64, 91),
    dim=64,
    heads=8,
    seed=0,
    log=print,
)

slopes = ladder_slopes(rows)
print()
for kind, slope in slopes.items():
    print("%-6s log-log memory slope: %.2f" % (kind, slope))

# The analytic count makes the same point without running anything: channel
# attention stores heads * (dim/heads)^2 entries no matter how many tokens.
print(
    "\nanalytic attention entries at 64x64 tokens:",
    "token", attention_elements(64 * 64, 64, 8, "token"),
    "  xca", attention_elements(64 * 64, 64, 8, "xca"),
)

out_dir = os.path.join(os.path.dirname(__file__), "_out")
os.makedirs(out_dir, exist_ok=True)
write_csv(rows, os.path.join(out_dir, "attention_memory.csv"))
plot_ladder(rows, os.path.join(out_dir, "attention_memory.png"))
print("wrote", os.path.join(out_dir, "attention_memory.csv"))
print("wrote", os.path.join(out_dir, "attention_memory.png"))
