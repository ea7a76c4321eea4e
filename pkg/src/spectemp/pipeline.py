"""Glue between stages: cached featurization, codebook fitting and corpus assembly."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import read_container, write_container, ContainerError
from .data import CorpusManifest
from .frontend import FrontendConfig, compute_logmel, load_clip
from .gridding import GridConfig, patch_vectors, frame_vectors
from .quantizer import Codebook, ProjectionSpec, fit_kmeans, build_targets
from .trainer import PretrainCorpus


def _config_key(config: FrontendConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def cache_key(path, config: FrontendConfig) -> str:
    """Audio content hash joined with the frontend config hash."""
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:24]
    return f"{digest}-{_config_key(config)}"


def _featurize_one(args):
    path, config, cache_dir = args
    if cache_dir is not None:
        entry = Path(cache_dir) / cache_key(path, config)
        if entry.exists():
            try:
                return read_container(entry)[0]["logmel"]
            except ContainerError:
                pass  # stale or corrupt entry, recompute
    values = compute_logmel(load_clip(path, config), config).values
    if cache_dir is not None:
        write_container(entry, {"logmel": values}, {"source": str(path)})
    return values


def featurize(manifest: CorpusManifest, config: FrontendConfig = FrontendConfig(),
              cache_dir=None, workers: int = 1) -> np.ndarray:
    """(C, n_mels, M) float32 log-mel stack in manifest order."""
    jobs = [(manifest.resolve(e), config, cache_dir) for e in manifest.entries]
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            specs = list(pool.map(_featurize_one, jobs))
    else:
        specs = [_featurize_one(j) for j in jobs]
    return np.stack(specs).astype(np.float32)


def _sample_rows(x: np.ndarray, n: int, seed: int) -> np.ndarray:
    if len(x) <= n:
        return x
    idx = np.sort(np.random.default_rng(seed).choice(len(x), size=n, replace=False))
    return x[idx]


def fit_codebooks(specs: np.ndarray, grid: GridConfig, K_s: int, K_t: int,
                  sample_size: int = 100_000, seed: int = 0, max_iters: int = 100,
                  tol: float = 1e-6, n_init: int = 1) -> tuple[Codebook, Codebook]:
    """Fit spectral and temporal codebooks on a random subsample of all vectors."""
    pv = np.concatenate([patch_vectors(s, grid) for s in specs])
    fv = np.concatenate([frame_vectors(s, grid) for s in specs])
    cb_s = fit_kmeans(_sample_rows(pv, sample_size, seed), K_s, seed=seed, max_iters=max_iters,
                      tol=tol, n_init=n_init,
                      projection=ProjectionSpec.for_patches(grid.patch_dim, seed))
    cb_t = fit_kmeans(_sample_rows(fv, sample_size, seed + 1), K_t, seed=seed, max_iters=max_iters,
                      tol=tol, n_init=n_init, source="temporal_frame")
    return cb_s, cb_t


def build_corpus(specs: np.ndarray, grid: GridConfig, cb_s: Codebook, cb_t: Codebook,
                 ids=None) -> PretrainCorpus:
    targets = [build_targets(s, grid, cb_s, cb_t) for s in specs]
    return PretrainCorpus(
        np.stack([patch_vectors(s, grid) for s in specs]).astype(np.float32),
        np.stack([t.spectral.reshape(-1) for t in targets]),
        np.stack([t.temporal for t in targets]),
        list(ids) if ids is not None else None,
    )
