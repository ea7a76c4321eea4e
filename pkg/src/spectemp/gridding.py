"""Segment / spectral-patch / temporal-frame partitions of a spectrogram.

Layout conventions used everywhere in the package:

* segments are ``(N, D, P)`` arrays in temporal order;
* spectral patches are ``(N, R_s, P, P)``, band-ascending within a segment,
  so the global patch index is ``n * R_s + k`` (0-based);
* temporal frames are ``(N, R_t, D, P')`` with global index ``n * R_t + j``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    P: int = 16
    P_prime: int = 2
    D: int = 128

    def __post_init__(self):
        if min(self.P, self.P_prime, self.D) < 1:
            raise GridError("grid sizes must be positive")
        if self.D % self.P:
            raise GridError(f"D={self.D} is not divisible by P={self.P}")
        if self.P % self.P_prime:
            raise GridError(f"P={self.P} is not divisible by P_prime={self.P_prime}")

    @property
    def R_s(self) -> int:
        return self.D // self.P

    @property
    def R_t(self) -> int:
        return self.P // self.P_prime

    @property
    def patch_dim(self) -> int:
        return self.P * self.P

    @property
    def frame_dim(self) -> int:
        return self.D * self.P_prime

    def n_segments(self, M: int) -> int:
        if M % self.P:
            raise GridError(f"M={M} frames is not divisible by P={self.P}")
        return M // self.P

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegmentGrid:
    segments: np.ndarray  # (N, D, P)

    @property
    def N(self) -> int:
        return self.segments.shape[0]


def _values(spec) -> np.ndarray:
    return np.asarray(getattr(spec, "values", spec))


def segment(spec, grid: GridConfig = GridConfig()) -> SegmentGrid:
    X = _values(spec)
    D, M = X.shape
    if D != grid.D:
        raise GridError(f"spectrogram has {D} bins, grid expects {grid.D}")
    N = grid.n_segments(M)
    return SegmentGrid(np.ascontiguousarray(X.reshape(D, N, grid.P).transpose(1, 0, 2)))


def unsegment(seg: SegmentGrid) -> np.ndarray:
    """Concatenate segments back into the (D, M) spectrogram."""
    return np.concatenate(list(seg.segments), axis=1)


def patchify_spectral(seg: SegmentGrid, grid: GridConfig = GridConfig()) -> np.ndarray:
    N, D, P = seg.segments.shape
    if D % grid.P or P != grid.P:
        raise GridError(f"segment shape {(D, P)} incompatible with P={grid.P}")
    return seg.segments.reshape(N, D // P, P, P)


def frame_temporal(seg: SegmentGrid, grid: GridConfig = GridConfig()) -> np.ndarray:
    N, D, P = seg.segments.shape
    if P % grid.P_prime:
        raise GridError(f"P={P} is not divisible by P_prime={grid.P_prime}")
    R_t = P // grid.P_prime
    return np.ascontiguousarray(
        seg.segments.reshape(N, D, R_t, grid.P_prime).transpose(0, 2, 1, 3)
    )


def flatten(a: np.ndarray) -> np.ndarray:
    """Row-major vectorization of the trailing two axes."""
    a = np.asarray(a)
    return a.reshape(a.shape[:-2] + (a.shape[-2] * a.shape[-1],))


def unflatten(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v)
    return v.reshape(v.shape[:-1] + (rows, cols))


def patch_vectors(spec, grid: GridConfig = GridConfig()) -> np.ndarray:
    """(N * R_s, P*P) flattened spectral patches in global-index order."""
    patches = patchify_spectral(segment(spec, grid), grid)
    return flatten(patches).reshape(-1, grid.patch_dim)


def frame_vectors(spec, grid: GridConfig = GridConfig()) -> np.ndarray:
    """(N * R_t, D*P') flattened temporal frames in global-index order."""
    frames = frame_temporal(segment(spec, grid), grid)
    return flatten(frames).reshape(-1, grid.frame_dim)


def patch_index(n: int, k: int, R_s: int) -> int:
    return n * R_s + k


def patch_position(g: int, R_s: int) -> tuple[int, int]:
    return divmod(g, R_s)
