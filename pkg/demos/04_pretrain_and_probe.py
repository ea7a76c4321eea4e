"""End to end at desk scale: pretrain on synthetic audio, then probe it frozen.

This takes a few minutes on one CPU core. Pass a smaller step count as the
first argument for a quicker look, e.g. ``python demos/04_pretrain_and_probe.py 100``.
"""

import sys
import time

import numpy as np

from spectemp.config import preset, with_overrides
from spectemp.data import SynthSpec, synth_clips
from spectemp.frontend import WaveformClip, compute_logmel
from spectemp.pipeline import build_corpus, fit_codebooks
from spectemp.probe import centroid_baseline, evaluate_kfold, extract_features, stratified_folds
from spectemp.trainer import run_pretraining

cfg = preset("desk-scale")
if len(sys.argv) > 1:
    cfg = with_overrides(cfg, steps=int(sys.argv[1]))

clips = list(synth_clips(SynthSpec(count_per_class=25, seed=5)))
labels = np.array([c[1] for c in clips])
specs = np.stack([compute_logmel(WaveformClip(x)).values for _, _, x in clips])
cb = cfg.codebook
cb_s, cb_t = fit_codebooks(specs, cfg.grid, cb.K_s, cb.K_t, cb.sample_size, max_iters=cb.max_iters)
corpus = build_corpus(specs, cfg.grid, cb_s, cb_t)

t0 = time.time()


def show(row):
    if row[0] % 50 == 0:
        print(f"  step {row[0]:4d} phase {row[1]} lr {row[2]:.1e} spectral {row[3]:.3f} "
              f"temporal {row[4]:.3f} total {row[5]:.3f}")


print(f"pretraining {cfg.plan.total_steps} steps on {len(corpus)} clips")
result = run_pretraining(cfg.plan, corpus, cfg.model, cfg.mask, cfg.optimizer, cfg.schedule,
                         progress=show)
print(f"done in {time.time() - t0:.0f} s")

feats = extract_features(result.model, corpus.patches)
fold_of = stratified_folds(labels, cfg.probe.folds)
probe = evaluate_kfold(feats, labels, cfg.probe, fold_of)
base = centroid_baseline(specs.mean(axis=2), labels, fold_of)
print(f"frozen-encoder probe accuracy {probe.mean_accuracy:.3f}; raw-mel centroids {base.mean_accuracy:.3f}")
