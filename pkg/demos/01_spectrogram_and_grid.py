"""From waveform to patches and frames.

Synthesizes one clip of each class, computes its log-mel spectrogram, and
shows how the grid cuts it into spectral patches and temporal frames.
Run: python demos/01_spectrogram_and_grid.py
"""

import numpy as np

from spectemp.data import SynthSpec, synth_clips
from spectemp.frontend import WaveformClip, compute_logmel, mel_center_frequencies
from spectemp.gridding import GridConfig, frame_temporal, patchify_spectral, segment

grid = GridConfig()
centers = mel_center_frequencies()
print(f"grid: P={grid.P}, P'={grid.P_prime}, D={grid.D} -> R_s={grid.R_s} patches and "
      f"R_t={grid.R_t} frames per segment\n")

for clip_id, label, samples in synth_clips(SynthSpec(count_per_class=1, seed=3)):
    spec = compute_logmel(WaveformClip(samples))
    seg = segment(spec, grid)
    patches, frames = patchify_spectral(seg, grid), frame_temporal(seg, grid)
    profile = spec.values.mean(axis=1)
    peak = centers[profile.argmax()]
    # how much the spectrum moves from frame to frame: near zero for steady tones
    flux = np.abs(np.diff(spec.values, axis=1)).mean()
    print(f"{clip_id:14s} spectrogram {spec.values.shape}, {seg.N} segments, "
          f"{patches.shape[0] * patches.shape[1]} patches {patches.shape[2:]}, "
          f"{frames.shape[0] * frames.shape[1]} frames {frames.shape[2:]}")
    print(f"{'':14s} peak mel bin near {peak:7.1f} Hz, mean spectral flux {flux:.3f}")
