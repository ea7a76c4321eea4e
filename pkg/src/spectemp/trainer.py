"""Two-phase masked pretraining: schedule, AdamW, checkpoints and the training loop."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import batch_indices
from .masking import MaskConfig, sample_patch_mask, sample_segment_mask, patch_mask_vector
from .model import ModelConfig, SpectroTemporalModel, decays, DivergenceError
from .objective import spectral_loss_and_grad, temporal_loss_and_grad, total_loss

LOG_HEADER = ["step", "phase", "lr", "spectral", "temporal", "total"]


class ScheduleError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    warmup_fraction: float = 0.1
    lr_start: float = 1e-6
    lr_peak: float = 1e-4
    lr_end: float = 1e-6


def lr_at(step: float, sched: ScheduleConfig) -> float:
    """Linear warmup from ``lr_start`` to ``lr_peak``, then linear decay to ``lr_end``."""
    T = sched.total_steps
    if not 0 <= step <= T:
        raise ScheduleError(f"step {step} outside [0, {T}]")
    w = sched.warmup_fraction * T
    if step <= w and w > 0:
        frac = step / w
        return sched.lr_start * (1.0 - frac) + sched.lr_peak * frac
    if T == w:
        return sched.lr_peak
    frac = (step - w) / (T - w)
    return sched.lr_peak * (1.0 - frac) + sched.lr_end * frac


@dataclass(frozen=True)
class OptimizerConfig:
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    clip_norm: float | None = 1.0


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def optimizer_step(params: dict, grads: dict, opt: OptimState, cfg: OptimizerConfig,
                   lr: float) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name}")
    opt.step += 1
    t = opt.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        if cfg.weight_decay and decays(name):
            update = update + cfg.weight_decay * theta
        theta -= (lr * update).astype(theta.dtype, copy=False)


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


@dataclass(frozen=True)
class TrainPlan:
    phaseA_steps: int = 100_000
    joint_steps: int = 150_000
    batch_size: int = 32
    seed: int = 0
    lam: float = 0.75
    checkpoint_every: int = 0  # 0 disables periodic checkpoints; phase ends are always saved

    @property
    def total_steps(self) -> int:
        return self.phaseA_steps + self.joint_steps


@dataclass
class PretrainCorpus:
    """Pre-featurized clips: flattened patches and their discrete targets."""

    patches: np.ndarray  # (C, T, P*P) float32
    spectral: np.ndarray  # (C, T) int
    temporal: np.ndarray  # (C, N, R_t) int
    ids: list = field(default_factory=list)

    def __post_init__(self):
        C, T, _ = self.patches.shape
        if self.spectral.shape != (C, T) or self.temporal.shape[0] != C:
            raise ValueError("corpus arrays disagree on clip count or geometry")
        if C == 0:
            raise ValueError("empty corpus")

    def __len__(self):
        return self.patches.shape[0]


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


class Pretrainer:
    """Owns the model, optimizer state and step counter of one pretraining run.

    Step ``s`` (0-based, global across phases) is in phase A when
    ``s < plan.phaseA_steps``. Each phase has its own warmup/decay schedule
    and the optimizer moments are reset when phase B starts.
    """

    def __init__(self, model: SpectroTemporalModel, corpus: PretrainCorpus, plan: TrainPlan,
                 mask_cfg: MaskConfig = MaskConfig(), optim_cfg: OptimizerConfig = OptimizerConfig(),
                 schedule: ScheduleConfig = ScheduleConfig(1), config_hash: str = ""):
        self.model = model
        self.corpus = corpus
        self.plan = plan
        self.mask_cfg = mask_cfg
        self.optim_cfg = optim_cfg
        self.schedule = schedule
        self.config_hash = config_hash
        self.opt = OptimState.zeros_like(model.params)
        self.step = 0
        self.log: list[list] = []
        cfg = model.cfg
        if corpus.patches.shape[1] > cfg.N_max * cfg.R_s or corpus.patches.shape[2] != cfg.patch_dim:
            raise ValueError("corpus geometry does not fit the model configuration")
        if corpus.spectral.max() >= cfg.K_s or corpus.temporal.max() >= cfg.K_t:
            raise ValueError("targets exceed the model's head sizes")

    def phase_of(self, step: int) -> str:
        return "A" if step < self.plan.phaseA_steps else "B"

    def schedule_for(self, phase: str) -> ScheduleConfig:
        steps = self.plan.phaseA_steps if phase == "A" else self.plan.joint_steps
        return ScheduleConfig(steps, self.schedule.warmup_fraction, self.schedule.lr_start,
                              self.schedule.lr_peak, self.schedule.lr_end)

    def lr_for(self, step: int) -> float:
        phase = self.phase_of(step)
        local = step if phase == "A" else step - self.plan.phaseA_steps
        return lr_at(local, self.schedule_for(phase))

    def masks_for(self, step: int, slot: int, phase: str):
        """Patch mask (T,) and segment mask (N,) for one batch slot, from (seed, step, slot)."""
        T = self.corpus.patches.shape[1]
        R_s = self.model.cfg.R_s
        rng = _rng(self.plan.seed, step, slot + 1)
        if phase == "A":
            cfg = MaskConfig("patch", patch_ratio=self.mask_cfg.patch_ratio)
            plan = sample_patch_mask(T, cfg, rng)
        else:
            cfg = MaskConfig("segment", p=self.mask_cfg.p, p_prime=self.mask_cfg.p_prime)
            plan = sample_segment_mask(T // R_s, cfg, rng)
        pmask = patch_mask_vector(plan, R_s, T)
        return pmask, pmask.reshape(-1, R_s).all(1), plan

    def batch_for(self, step: int):
        phase = self.phase_of(step)
        idx = batch_indices(len(self.corpus), self.plan.batch_size, self.plan.seed, step)
        masks = [self.masks_for(step, slot, phase) for slot in range(len(idx))]
        pmask = np.stack([m[0] for m in masks])
        smask = np.stack([m[1] for m in masks])
        return idx, pmask, smask

    def loss_and_grads(self, idx, pmask, smask, phase: str):
        c = self.corpus
        lam = self.plan.lam if phase == "B" else 0.0
        out, s_logits, t_logits = self.model.forward(c.patches[idx], pmask, temporal=phase == "B")
        ls, ds = spectral_loss_and_grad(s_logits, c.spectral[idx], pmask)
        if phase == "A":
            grads = self.model.backward(out, d_spec=ds)
            return float(ls.mean()), float("nan"), float(ls.mean()), grads
        lt, dt = temporal_loss_and_grad(t_logits, c.temporal[idx], smask)
        spectral, temporal = float(ls.mean()), float(lt.mean())
        grads = self.model.backward(out, d_spec=(1.0 - lam) * ds, d_temp=lam * dt)
        return spectral, temporal, total_loss(spectral, temporal, lam), grads

    def train_step(self) -> list:
        s = self.step
        phase = self.phase_of(s)
        if s == self.plan.phaseA_steps and s > 0:
            self.opt = OptimState.zeros_like(self.model.params)
        idx, pmask, smask = self.batch_for(s)
        spectral, temporal, total, grads = self.loss_and_grads(idx, pmask, smask, phase)
        if self.optim_cfg.clip_norm:
            clip_by_global_norm(grads, self.optim_cfg.clip_norm)
        lr = self.lr_for(s)
        optimizer_step(self.model.params, grads, self.opt, self.optim_cfg, lr)
        self.step += 1
        row = [self.step, phase, lr, spectral, temporal, total]
        self.log.append(row)
        return row

    # -- persistence -----------------------------------------------------

    def save(self, path) -> Path:
        return save_checkpoint(path, self.model, self.opt, self.plan, self.step,
                               config_hash=self.config_hash)

    def restore(self, path) -> None:
        model, opt, meta = load_checkpoint(path, expected_config=self.model.cfg,
                                           expected_hash=self.config_hash or None)
        self.model.params = model.params
        self.opt = opt
        self.step = meta["step"]
        self.log = [r for r in self.log if r[0] <= self.step]


def save_checkpoint(path, model: SpectroTemporalModel, opt: OptimState, plan: TrainPlan,
                    step: int, config_hash: str = "", extra: dict | None = None) -> Path:
    tensors = {f"model/{k}": v for k, v in model.params.items()}
    tensors.update({f"optim/m/{k}": v for k, v in opt.m.items()})
    tensors.update({f"optim/v/{k}": v for k, v in opt.v.items()})
    meta = {
        "kind": "checkpoint",
        "step": int(step),
        "optim_step": int(opt.step),
        "model_config": model.cfg.to_dict(),
        "plan": asdict(plan),
        "seed": plan.seed,
        "config_hash": config_hash,
    }
    if extra:
        meta.update(extra)
    return ckpt.write_container(path, tensors, meta)


def load_checkpoint(path, expected_config: ModelConfig | None = None,
                    expected_hash: str | None = None):
    """Return ``(model, optimizer_state, meta)``; refuses mismatched configurations."""
    tensors, meta = ckpt.read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ckpt.ContainerError(f"{path}: not a training checkpoint")
    cfg = ModelConfig(**meta["model_config"])
    if expected_config is not None and cfg != expected_config:
        raise CheckpointMismatchError(f"{path}: model configuration differs from the requested one")
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise CheckpointMismatchError(f"{path}: config hash {meta.get('config_hash')!r} != {expected_hash!r}")
    params = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    m = {k[len("optim/m/"):]: v for k, v in tensors.items() if k.startswith("optim/m/")}
    v = {k[len("optim/v/"):]: v for k, v in tensors.items() if k.startswith("optim/v/")}
    model = SpectroTemporalModel(cfg, params)
    return model, OptimState(m, v, meta["optim_step"]), meta


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for step, phase, lr, s, t, tot in rows:
        w.writerow([step, phase, repr(float(lr)), repr(float(s)), repr(float(t)), repr(float(tot))])
    return buf.getvalue()


def read_log(path) -> list[list]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [[int(a), b, float(c), float(d), float(e), float(f)] for a, b, c, d, e, f in r]


@dataclass
class PretrainResult:
    model: SpectroTemporalModel
    log: list
    checkpoints: list
    trainer: Pretrainer


def run_pretraining(plan: TrainPlan, corpus: PretrainCorpus, model_cfg: ModelConfig,
                    mask_cfg: MaskConfig = MaskConfig(), optim_cfg: OptimizerConfig = OptimizerConfig(),
                    schedule: ScheduleConfig = ScheduleConfig(1), out_dir=None,
                    resume_from=None, stop_at: int | None = None, config_hash: str = "",
                    progress=None) -> PretrainResult:
    """Run (or resume) both phases. Writes ``train_log.csv``, ``timing.csv`` and checkpoints to ``out_dir``.

    ``stop_at`` ends the run early after that many global steps, leaving a
    checkpoint, which is how interruption is simulated.
    """
    model = SpectroTemporalModel(model_cfg, seed=plan.seed)
    trainer = Pretrainer(model, corpus, plan, mask_cfg, optim_cfg, schedule, config_hash)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        trainer.restore(resume_from)
        log_path = out / "train_log.csv" if out is not None else None
        if log_path is not None and log_path.exists():
            trainer.log = [r for r in read_log(log_path) if r[0] <= trainer.step]
    end = plan.total_steps if stop_at is None else min(stop_at, plan.total_steps)
    checkpoints = []
    timings = []
    while trainer.step < end:
        t0 = time.perf_counter()
        row = trainer.train_step()
        timings.append((row[0], (time.perf_counter() - t0) * 1000.0))
        if progress is not None:
            progress(row)
        s = trainer.step
        boundary = s in (plan.phaseA_steps, plan.total_steps) or s == end
        periodic = plan.checkpoint_every and s % plan.checkpoint_every == 0
        if out is not None and (boundary or periodic):
            checkpoints.append(trainer.save(out / f"ckpt_{s:07d}"))
    if out is not None:
        (out / "train_log.csv").write_text(format_log(trainer.log))
        with open(out / "timing.csv", "a") as fh:
            for step, ms in timings:
                fh.write(f"{step},{ms:.3f}\n")
    return PretrainResult(model, trainer.log, checkpoints, trainer)


def masked_spectral_accuracy(model: SpectroTemporalModel, corpus: PretrainCorpus,
                             mask_cfg: MaskConfig = MaskConfig(), seed: int = 12345,
                             draws: int = 4) -> float:
    """Top-1 accuracy of spectral predictions at segment-masked positions."""
    R_s = model.cfg.R_s
    T = corpus.patches.shape[1]
    cfg = MaskConfig("segment", p=mask_cfg.p, p_prime=mask_cfg.p_prime)
    hits = total = 0
    for d in range(draws):
        for c in range(len(corpus)):
            plan = sample_segment_mask(T // R_s, cfg, _rng(seed, d, c))
            pmask = patch_mask_vector(plan, R_s, T)
            _, logits, _ = model.forward(corpus.patches[c:c + 1], pmask[None], temporal=False)
            pred = logits[0].argmax(-1)
            hits += int((pred[pmask] == corpus.spectral[c][pmask]).sum())
            total += int(pmask.sum())
    return hits / total
