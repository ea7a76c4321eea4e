"""Corpus manifests and a synthetic labeled audio generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontend import SAMPLE_RATE, write_wav

CLASSES = ("tone", "chirp", "noise", "am-tone")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    path: str
    label: int | None = None
    fold: int | None = None


@dataclass
class CorpusManifest:
    entries: list
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate clip ids in manifest")
        self.root = Path(self.root)

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if e.label is None else e.label for e in self.entries])

    def check_paths(self) -> None:
        missing = [e.path for e in self.entries if not self.resolve(e).exists()]
        if missing:
            raise ManifestError(f"{len(missing)} manifest paths do not exist, e.g. {missing[0]}")


def _field(v):
    return "-" if v is None else str(v)


def write_manifest(manifest: CorpusManifest, path) -> None:
    lines = [f"{e.id}\t{e.path}\t{_field(e.label)}\t{_field(e.fold)}" for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path, root=None, check_paths: bool = False) -> CorpusManifest:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2 or len(parts) > 4:
            raise ManifestError(f"{path}:{lineno}: expected 2-4 tab-separated fields")
        parts += ["-"] * (4 - len(parts))
        try:
            label = None if parts[2] in ("-", "") else int(parts[2])
            fold = None if parts[3] in ("-", "") else int(parts[3])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: label/fold must be integers") from exc
        entries.append(ManifestEntry(parts[0], parts[1], label, fold))
    manifest = CorpusManifest(entries, root if root is not None else path.parent)
    if check_paths:
        manifest.check_paths()
    return manifest


@dataclass(frozen=True)
class SynthSpec:
    """Per-class parameter ranges. Frequency bands do not overlap between classes.

    * tone: steady sinusoid in ``tone_hz``
    * chirp: repeated linear sweeps inside ``chirp_hz`` with period in ``chirp_period_s``
    * noise: band-limited Gaussian noise spanning ``noise_hz``
    * am-tone: carrier in ``am_carrier_hz`` with sinusoidal envelope at ``am_rate_hz``
    """

    count_per_class: int = 50
    clip_seconds: float = 8.0
    sample_rate: int = SAMPLE_RATE
    seed: int = 0
    classes: tuple = CLASSES
    tone_hz: tuple = (250.0, 700.0)
    chirp_hz: tuple = (1500.0, 3500.0)
    chirp_period_s: tuple = (0.5, 2.0)
    noise_hz: tuple = (4500.0, 7000.0)
    am_carrier_hz: tuple = (800.0, 1200.0)
    am_rate_hz: tuple = (3.0, 8.0)
    amplitude: tuple = (0.3, 0.7)


def synth_clip(kind: str, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n = int(round(spec.clip_seconds * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    amp = rng.uniform(*spec.amplitude)
    phase = rng.uniform(0, 2 * np.pi)
    if kind == "tone":
        f = rng.uniform(*spec.tone_hz)
        x = np.sin(2 * np.pi * f * t + phase)
    elif kind == "chirp":
        lo, hi = spec.chirp_hz
        period = rng.uniform(*spec.chirp_period_s)
        tau = np.mod(t + rng.uniform(0, period), period) / period
        if rng.random() < 0.5:
            tau = 1.0 - tau
        inst = lo + (hi - lo) * tau
        x = np.sin(2 * np.pi * np.cumsum(inst) / spec.sample_rate + phase)
    elif kind == "noise":
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / spec.sample_rate)
        spectrum[(freqs < spec.noise_hz[0]) | (freqs > spec.noise_hz[1])] = 0.0
        x = np.fft.irfft(spectrum, n)
        x /= np.max(np.abs(x)) + 1e-12
    elif kind == "am-tone":
        fc = rng.uniform(*spec.am_carrier_hz)
        fm = rng.uniform(*spec.am_rate_hz)
        env = 0.5 * (1.0 + 0.9 * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi)))
        x = env * np.sin(2 * np.pi * fc * t + phase)
    else:
        raise ValueError(f"unknown synthetic class {kind!r}")
    return amp * x


def synth_clips(spec: SynthSpec):
    """Yield ``(clip_id, label, samples)`` deterministically from ``spec.seed``."""
    for label, kind in enumerate(spec.classes):
        for i in range(spec.count_per_class):
            rng = np.random.default_rng([spec.seed, CLASSES.index(kind), i])
            yield f"{kind}_{i:04d}", label, synth_clip(kind, spec, rng)


def generate_synthetic(spec: SynthSpec, out_dir) -> CorpusManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip_id, label, samples in synth_clips(spec):
        rel = f"{clip_id}.wav"
        write_wav(out / rel, samples, spec.sample_rate)
        entries.append(ManifestEntry(clip_id, rel, label, None))
    manifest = CorpusManifest(entries, out)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest


def batch_indices(n_clips: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    return np.random.default_rng([seed, step, 0]).integers(n_clips, size=batch_size)


def iterate_batches(manifest: CorpusManifest, batch_size: int, seed: int, step: int) -> list:
    """Uniform-with-replacement batch of entries, determined by ``(seed, step)``."""
    if len(manifest) == 0:
        raise ManifestError("empty manifest")
    idx = batch_indices(len(manifest), batch_size, seed, step)
    return [manifest.entries[i] for i in idx]
