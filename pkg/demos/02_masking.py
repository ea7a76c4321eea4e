"""How much of a clip does chained segment masking hide?

Each segment is masked with probability p, and a masked segment extends into
the next one with probability p'. The per-position probability follows the
recursion q_n = p + (1-p) q_{n-1} p', which settles at p / (1 - (1-p) p').
Run: python demos/02_masking.py
"""

import numpy as np

from spectemp.masking import MaskConfig, fixed_point, mask_statistics, sample_segment_mask

rng = np.random.default_rng(0)
for _ in range(3):
    plan = sample_segment_mask(50, MaskConfig(), rng)
    row = np.full(50, ".")
    row[plan.indices] = "#"
    print("".join(row))

stats = mask_statistics(n_draws=100_000)
print(f"\npositions 0..4 empirical {np.round(stats.empirical[:5], 4)}")
print(f"positions 0..4 analytic  {np.round(stats.analytic[:5], 4)}")
print(f"aggregate {stats.aggregate:.4f}, fixed point {fixed_point(0.6, 0.2):.4f}, "
      f"worst |z| {stats.max_z:.2f}")

for pp in (0.0, 0.2, 0.5):
    print(f"p=0.6, p'={pp}: long-run masked fraction {fixed_point(0.6, pp):.3f}")
