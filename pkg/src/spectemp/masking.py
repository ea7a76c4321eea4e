"""Mask sampling for the two pretraining phases.

Segment mode (joint phase): a left-to-right pass masks segment ``n`` when a
Bernoulli(p) draw fires, or when segment ``n-1`` is masked (for any reason)
and a Bernoulli(p_prime) draw fires.

Patch mode (initialization phase): a fixed fraction of patches is drawn
uniformly without replacement.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

MAX_RESAMPLES = 100


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    mode: str = "segment"
    p: float = 0.6
    p_prime: float = 0.2
    patch_ratio: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("segment", "patch"):
            raise MaskError(f"unknown mask mode {self.mode!r}")
        for name in ("p", "p_prime", "patch_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MaskError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MaskPlan:
    mode: str
    indices: np.ndarray  # sorted masked segment (segment mode) or patch (patch mode) indices
    n_total: int

    @property
    def masked_segments(self) -> np.ndarray:
        if self.mode != "segment":
            raise MaskError("patch-mode plan has no masked segments")
        return self.indices

    @property
    def masked_patches(self) -> np.ndarray:
        if self.mode != "patch":
            raise MaskError("segment-mode plan stores segments; use masked_patch_indices")
        return self.indices


def _chain_pass(N, p, p_prime, rng):
    base = rng.random(N) < p
    carry = rng.random(N) < p_prime
    masked = np.empty(N, dtype=bool)
    prev = False
    for n in range(N):
        prev = base[n] or (prev and carry[n])
        masked[n] = prev
    return masked


def sample_segment_mask(N: int, cfg: MaskConfig, rng: np.random.Generator) -> MaskPlan:
    if cfg.mode != "segment":
        raise MaskError("config mode must be 'segment'")
    if N < 1:
        raise MaskError("need at least one segment")
    for _ in range(MAX_RESAMPLES):
        masked = _chain_pass(N, cfg.p, cfg.p_prime, rng)
        if masked.any():
            return MaskPlan("segment", np.flatnonzero(masked), N)
    raise MaskError(f"empty segment mask after {MAX_RESAMPLES} resamples (p={cfg.p})")


def sample_segment_masks(
    n_draws: int, N: int, p: float, p_prime: float, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized (n_draws, N) boolean masks of the chained process, no resampling.

    Used for Monte Carlo statistics; training uses :func:`sample_segment_mask`.
    """
    base = rng.random((n_draws, N)) < p
    carry = rng.random((n_draws, N)) < p_prime
    out = np.empty((n_draws, N), dtype=bool)
    out[:, 0] = base[:, 0]
    for n in range(1, N):
        out[:, n] = base[:, n] | (out[:, n - 1] & carry[:, n])
    return out


def sample_patch_mask(n_patches: int, cfg: MaskConfig, rng: np.random.Generator) -> MaskPlan:
    if cfg.mode != "patch":
        raise MaskError("config mode must be 'patch'")
    if n_patches < 1:
        raise MaskError("need at least one patch")
    count = int(round(cfg.patch_ratio * n_patches))
    if count == 0:
        raise MaskError(f"patch_ratio={cfg.patch_ratio} masks zero of {n_patches} patches")
    chosen = rng.choice(n_patches, size=count, replace=False)
    return MaskPlan("patch", np.sort(chosen), n_patches)


def masked_patch_indices(plan: MaskPlan, R_s: int) -> np.ndarray:
    """Global patch indices hidden by ``plan`` (segment-major, 0-based)."""
    if plan.mode == "patch":
        return plan.indices
    return (plan.indices[:, None] * R_s + np.arange(R_s)[None, :]).ravel()


def patch_mask_vector(plan: MaskPlan, R_s: int, n_patches: int) -> np.ndarray:
    mask = np.zeros(n_patches, dtype=bool)
    mask[masked_patch_indices(plan, R_s)] = True
    return mask


def marginal_recursion(N: int, p: float, p_prime: float) -> np.ndarray:
    """Exact per-position masking probabilities q_n = p + (1-p) q_{n-1} p'."""
    q = np.empty(N)
    q[0] = p
    for n in range(1, N):
        q[n] = p + (1 - p) * q[n - 1] * p_prime
    return q


def fixed_point(p: float, p_prime: float) -> float:
    return p / (1 - (1 - p) * p_prime)


@dataclass
class MaskStats:
    empirical: np.ndarray
    analytic: np.ndarray
    sigma: np.ndarray
    aggregate: float
    fixed_point: float
    n_draws: int

    @property
    def max_z(self) -> float:
        return float(np.max(np.abs(self.empirical - self.analytic) / self.sigma))

    def table(self) -> str:
        rows = ["n\tempirical\tanalytic\tz"]
        z = (self.empirical - self.analytic) / self.sigma
        for n in range(len(self.analytic)):
            rows.append(f"{n}\t{self.empirical[n]:.5f}\t{self.analytic[n]:.5f}\t{z[n]:+.2f}")
        rows.append(f"aggregate\t{self.aggregate:.5f}\t{self.analytic.mean():.5f}\t")
        rows.append(f"fixed_point\t\t{self.fixed_point:.5f}\t")
        return "\n".join(rows)


def mask_statistics(N: int = 50, p: float = 0.6, p_prime: float = 0.2,
                    n_draws: int = 100_000, seed: int = 0, chunk: int = 25_000) -> MaskStats:
    """Monte Carlo marginals of the chained segment mask against the exact recursion."""
    rng = np.random.default_rng(seed)
    counts = np.zeros(N)
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        counts += sample_segment_masks(m, N, p, p_prime, rng).sum(axis=0)
        done += m
    q = marginal_recursion(N, p, p_prime)
    emp = counts / n_draws
    sigma = np.sqrt(q * (1 - q) / n_draws)
    return MaskStats(emp, q, sigma, float(emp.mean()), fixed_point(p, p_prime), n_draws)
