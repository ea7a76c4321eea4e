"""Discrete targets: k-means codebooks over patches and frames.

Fits small codebooks on a handful of synthetic clips and counts how many
distinct labels each clip uses. Stationary clips reuse few labels; sweeps and
noise use many, which is what makes the temporal targets hard to predict.
Run: python demos/03_codebooks.py
"""

import numpy as np

from spectemp.data import SynthSpec, synth_clips
from spectemp.frontend import WaveformClip, compute_logmel
from spectemp.gridding import GridConfig
from spectemp.pipeline import build_corpus, fit_codebooks

grid = GridConfig()
clips = list(synth_clips(SynthSpec(count_per_class=2, seed=0)))
specs = np.stack([compute_logmel(WaveformClip(x)).values for _, _, x in clips])
cb_s, cb_t = fit_codebooks(specs, grid, K_s=100, K_t=500, max_iters=30)
corpus = build_corpus(specs, grid, cb_s, cb_t, [c[0] for c in clips])

print(f"spectral codebook {cb_s.centroids.shape}, temporal codebook {cb_t.centroids.shape}")
for i, clip_id in enumerate(corpus.ids):
    print(f"{clip_id:12s} distinct spectral labels {len(np.unique(corpus.spectral[i])):3d}, "
          f"temporal {len(np.unique(corpus.temporal[i])):3d}")
