"""Central finite-difference check of the model's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, SpectroTemporalModel
from .objective import spectral_loss_and_grad, temporal_loss_and_grad

TINY = ModelConfig(d_model=8, n_layers=1, n_heads=2, K_s=5, K_t=5, patch_dim=16,
                   R_s=2, R_t=2, N_max=2, init_std=0.5)


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    per_param: dict
    n_checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol

    def format(self, tol: float = 1e-4) -> str:
        lines = [f"{name}\t{err:.3e}" for name, err in sorted(self.per_param.items())]
        lines.append(f"max relative error {self.max_rel_error:.3e} at {self.worst_param}{list(self.worst_index)}"
                     f" over {self.n_checked} entries: {'PASS' if self.passed(tol) else 'FAIL'} (tol {tol:g})")
        return "\n".join(lines)


def relative_error(fd: float, an: float, floor: float = 1e-6) -> float:
    return abs(fd - an) / max(abs(fd), abs(an), floor)


def gradcheck(cfg: ModelConfig = TINY, lam: float = 0.75, h: float = 1e-5, seed: int = 0,
              batch: int = 3) -> GradcheckReport:
    """Compare backward() against (L(θ+h) - L(θ-h)) / 2h for every parameter entry, in float64."""
    rng = np.random.default_rng(seed)
    model = SpectroTemporalModel(cfg, seed=seed + 1, dtype=np.float64)
    N = cfg.N_max
    T = N * cfg.R_s
    x = rng.standard_normal((batch, T, cfg.patch_dim))
    seg = rng.random((batch, N)) < 0.5
    seg[:, 0] = True  # every clip keeps at least one masked segment
    seg[0, -1] = False
    pmask = np.repeat(seg, cfg.R_s, axis=1)
    ls = rng.integers(0, cfg.K_s, (batch, T))
    lt = rng.integers(0, cfg.K_t, (batch, N, cfg.R_t))

    def loss() -> float:
        _, s, t = model.forward(x, pmask)
        a, _ = spectral_loss_and_grad(s, ls, pmask)
        b, _ = temporal_loss_and_grad(t, lt, seg)
        return lam * float(b.mean()) + (1 - lam) * float(a.mean())

    out, s, t = model.forward(x, pmask)
    _, gs = spectral_loss_and_grad(s, ls, pmask)
    _, gt = temporal_loss_and_grad(t, lt, seg)
    grads = model.backward(out, (1 - lam) * gs, lam * gt)

    worst, where, per, count = 0.0, ("", ()), {}, 0
    for name, p in model.params.items():
        pmax = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss()
            p[idx] = orig - h
            down = loss()
            p[idx] = orig
            err = relative_error((up - down) / (2 * h), float(grads[name][idx]))
            count += 1
            pmax = max(pmax, err)
            if err > worst:
                worst, where = err, (name, idx)
        per[name] = pmax
    return GradcheckReport(worst, where[0], where[1], per, count)
