"""Run configuration: one JSON document covering every stage, with two presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

from .frontend import FrontendConfig
from .gridding import GridConfig
from .masking import MaskConfig
from .model import ModelConfig
from .probe import ProbeConfig
from .trainer import TrainPlan, ScheduleConfig, OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodebookConfig:
    K_s: int = 100
    K_t: int = 500
    sample_size: int = 100_000
    max_iters: int = 100
    tol: float = 1e-6
    n_init: int = 1
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk-scale"
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(1))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self) -> "RunConfig":
        """Check cross-field constraints; raises ConfigError naming the violated one."""
        fe, g, m = self.frontend, self.grid, self.model
        if fe.n_mels != g.D:
            raise ConfigError(f"frontend.n_mels={fe.n_mels} must equal grid.D={g.D}")
        if fe.n_frames % g.P:
            raise ConfigError(f"spectrogram frames M={fe.n_frames} not divisible by grid.P={g.P}")
        N = fe.n_frames // g.P
        checks = [
            (m.patch_dim == g.patch_dim, f"model.patch_dim={m.patch_dim} must equal P*P={g.patch_dim}"),
            (m.R_s == g.R_s, f"model.R_s={m.R_s} must equal D/P={g.R_s}"),
            (m.R_t == g.R_t, f"model.R_t={m.R_t} must equal P/P_prime={g.R_t}"),
            (m.N_max >= N, f"model.N_max={m.N_max} smaller than segment count N={N}"),
            (m.K_s == self.codebook.K_s, f"model.K_s={m.K_s} must equal codebook.K_s={self.codebook.K_s}"),
            (m.K_t == self.codebook.K_t, f"model.K_t={m.K_t} must equal codebook.K_t={self.codebook.K_t}"),
            (0.0 <= self.plan.lam <= 1.0, f"plan.lam={self.plan.lam} outside [0, 1]"),
            (self.plan.batch_size >= 1, "plan.batch_size must be >= 1"),
            (self.schedule.lr_peak > 0, "schedule.lr_peak must be positive"),
            (self.probe.folds >= 2, "probe.folds must be >= 2 for k-fold evaluation"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def hash(self) -> str:
        return _digest(self.to_dict())

    def stage_hash(self, stage: str) -> str:
        """Hash of the sections an artifact of ``stage`` depends on.

        Downstream commands compare it with the hash stored in their inputs, so
        changing e.g. probe settings does not invalidate a checkpoint.
        """
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        d = self.to_dict()
        return _digest({k: d[k] for k in STAGES[stage]})


STAGES = {
    "features": ("frontend",),
    "codebooks": ("frontend", "grid", "codebook"),
    "pretrain": ("frontend", "grid", "codebook", "mask", "model", "plan", "schedule", "optimizer"),
}


def _digest(d: dict) -> str:
    canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


_SECTIONS = {
    "frontend": FrontendConfig, "grid": GridConfig, "mask": MaskConfig,
    "codebook": CodebookConfig, "model": ModelConfig, "plan": TrainPlan,
    "schedule": ScheduleConfig, "optimizer": OptimizerConfig, "probe": ProbeConfig,
}


def _build(cls, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def from_dict(d: dict) -> RunConfig:
    base = preset(d.get("profile", "desk-scale"))
    updates = {}
    for name, cls in _SECTIONS.items():
        if name in d:
            merged = {**asdict(getattr(base, name)), **d[name]}
            updates[name] = _build(cls, merged)
    unknown = set(d) - set(_SECTIONS) - {"profile"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return replace(base, **updates)


def load_config(path, profile: str | None = None) -> RunConfig:
    """Read a JSON config; sections override the named profile's preset field by field."""
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    if profile is not None:
        d["profile"] = profile
    return from_dict(d)


# Log-mel mean and std over 100 synthetic clips at the default frontend. Raw values sit
# near the ln(1e-10) floor, which swamps positions and the probe; set your own for real data.
LOGMEL_STATS = {"input_mean": -18.18, "input_std": 6.76}


def preset(profile: str) -> RunConfig:
    """``paper-scale`` mirrors the published hyperparameters; ``desk-scale`` fits a laptop."""
    if profile == "paper-scale":
        return RunConfig(
            profile=profile,
            model=ModelConfig(d_model=768, n_layers=12, n_heads=12, **LOGMEL_STATS),
            plan=TrainPlan(phaseA_steps=100_000, joint_steps=150_000, batch_size=32, lam=0.75,
                           checkpoint_every=5000),
            schedule=ScheduleConfig(1, 0.1, 1e-6, 1e-4, 1e-6),
            probe=ProbeConfig(epochs=300),
        )
    if profile == "desk-scale":
        return RunConfig(
            profile=profile,
            codebook=CodebookConfig(sample_size=20_000, max_iters=50),
            model=ModelConfig(d_model=64, n_layers=2, n_heads=4, **LOGMEL_STATS),
            plan=TrainPlan(phaseA_steps=200, joint_steps=300, batch_size=16, lam=0.75,
                           checkpoint_every=100),
            schedule=ScheduleConfig(1, 0.1, 1e-6, 1e-2, 1e-6),
            probe=ProbeConfig(epochs=50),
        )
    raise ConfigError(f"unknown profile {profile!r} (expected paper-scale or desk-scale)")


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """Apply the command-line overrides that the CLI exposes."""
    if kw.get("seed") is not None:
        cfg = replace(cfg, plan=replace(cfg.plan, seed=kw["seed"]),
                      mask=replace(cfg.mask, seed=kw["seed"]))
    if kw.get("steps") is not None:
        total = kw["steps"]
        a = int(round(total * cfg.plan.phaseA_steps / max(cfg.plan.total_steps, 1)))
        cfg = replace(cfg, plan=replace(cfg.plan, phaseA_steps=a, joint_steps=total - a))
    if kw.get("lam") is not None:
        cfg = replace(cfg, plan=replace(cfg.plan, lam=kw["lam"]))
    if kw.get("p") is not None:
        cfg = replace(cfg, mask=_build(MaskConfig, {**asdict(cfg.mask), "p": kw["p"]}))
    if kw.get("pprime") is not None:
        cfg = replace(cfg, mask=_build(MaskConfig, {**asdict(cfg.mask), "p_prime": kw["pprime"]}))
    if kw.get("ks") is not None:
        cfg = replace(cfg, codebook=replace(cfg.codebook, K_s=kw["ks"]),
                      model=replace(cfg.model, K_s=kw["ks"]))
    if kw.get("kt") is not None:
        cfg = replace(cfg, codebook=replace(cfg.codebook, K_t=kw["kt"]),
                      model=replace(cfg.model, K_t=kw["kt"]))
    return cfg
