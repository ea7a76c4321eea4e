"""Frozen-encoder probing: softmax-weighted layer mixture plus a small classifier."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .model import SpectroTemporalModel, state_hash, encoder_names, gelu, gelu_grad
from .objective import log_softmax, softmax
from .trainer import OptimizerConfig, OptimState, optimizer_step, load_checkpoint


class ProbeError(ValueError):
    pass


class FrozenEncoderViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    n_classes: int = 4
    head: str = "linear"  # or "mlp-1-hidden"
    hidden: int = 64
    epochs: int = 50
    lr: float = 1e-2
    lr_min: float = 1e-6
    batch_size: int = 32
    folds: int = 5
    pooling: str = "mean"
    standardize: bool = True  # z-score each layer's features with training-set statistics
    seed: int = 0

    def __post_init__(self):
        if self.head not in ("linear", "mlp-1-hidden"):
            raise ProbeError(f"unknown probe head {self.head!r}")
        if self.folds < 1:
            raise ProbeError("folds must be >= 1")
        if self.pooling != "mean":
            raise ProbeError("only mean pooling is supported")


@dataclass
class LayerWeights:
    raw: np.ndarray

    @property
    def effective(self) -> np.ndarray:
        return softmax(np.asarray(self.raw, dtype=np.float64))


def pooled_layers(out_or_layers) -> np.ndarray:
    """Token-mean of every layer: (B, L, D') from an EncodeOutput or a list of (B, T, D')."""
    layers = getattr(out_or_layers, "per_layer_tokens", out_or_layers)
    return np.stack([np.asarray(h, dtype=np.float64).mean(axis=1) for h in layers], axis=1)


def aggregate(output, w: LayerWeights) -> np.ndarray:
    """Softmax(w)-weighted sum of per-layer token means.

    ``output`` is an EncodeOutput, a list of per-layer (B, T, D') tokens, or
    already-pooled features of shape (B, L, D') or (L, D'). Returns (B, D'),
    or (D',) for a single (L, D') input.
    """
    pooled = output if isinstance(output, np.ndarray) else pooled_layers(output)
    single = pooled.ndim == 2
    if single:
        pooled = pooled[None]
    if pooled.shape[1] != len(w.raw):
        raise ProbeError(f"{len(w.raw)} layer weights for {pooled.shape[1]} layers")
    mixed = np.einsum("l,bld->bd", w.effective, pooled)
    return mixed[0] if single else mixed


def extract_features(model: SpectroTemporalModel, patches: np.ndarray, batch: int = 8) -> np.ndarray:
    """(C, L, D') per-layer token means of unmasked forward passes."""
    feats = []
    for start in range(0, len(patches), batch):
        feats.append(pooled_layers(model.hidden_states(patches[start:start + batch])))
    return np.concatenate(feats, axis=0)


@dataclass
class ProbeHead:
    params: dict
    kind: str

    @classmethod
    def init(cls, cfg: ProbeConfig, dim: int, rng: np.random.Generator) -> "ProbeHead":
        if cfg.head == "linear":
            p = {"w": rng.standard_normal((dim, cfg.n_classes)) / math.sqrt(dim),
                 "b": np.zeros(cfg.n_classes)}
        else:
            p = {"w1": rng.standard_normal((dim, cfg.hidden)) / math.sqrt(dim),
                 "b1": np.zeros(cfg.hidden),
                 "w2": rng.standard_normal((cfg.hidden, cfg.n_classes)) / math.sqrt(cfg.hidden),
                 "b2": np.zeros(cfg.n_classes)}
        return cls(p, cfg.head)

    def forward(self, x):
        p = self.params
        if self.kind == "linear":
            return x @ p["w"] + p["b"], None
        u = x @ p["w1"] + p["b1"]
        g, t = gelu(u)
        return g @ p["w2"] + p["b2"], (u, g, t)

    def backward(self, x, cache, dlogits):
        p = self.params
        if self.kind == "linear":
            return {"w": x.T @ dlogits, "b": dlogits.sum(0)}, dlogits @ p["w"].T
        u, g, t = cache
        du = (dlogits @ p["w2"].T) * gelu_grad(u, t)
        grads = {"w2": g.T @ dlogits, "b2": dlogits.sum(0), "w1": x.T @ du, "b1": du.sum(0)}
        return grads, du @ p["w1"].T


@dataclass
class ProbeModel:
    weights: LayerWeights
    head: ProbeHead
    shift: np.ndarray | float = 0.0  # (L, D') training means, or 0
    scale: np.ndarray | float = 1.0

    def normalize(self, feats: np.ndarray) -> np.ndarray:
        return (np.asarray(feats, dtype=np.float64) - self.shift) / self.scale

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return self.head.forward(aggregate(self.normalize(feats), self.weights))[0]

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return self.logits(feats).argmax(-1)


def _loss_and_grads(probe: ProbeModel, feats, labels):
    a = probe.weights.effective
    x = np.einsum("l,bld->bd", a, feats)
    logits, cache = probe.head.forward(x)
    logp = log_softmax(logits)
    B = len(labels)
    loss = -logp[np.arange(B), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    grads, dx = probe.head.backward(x, cache, dlogits)
    da = np.einsum("bd,bld->l", dx, feats)
    grads = {f"head.{k}": v for k, v in grads.items()}
    grads["layer_weights"] = a * (da - (a * da).sum())
    return float(loss), grads


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * step / (total - 1)))


def fit_probe(feats: np.ndarray, labels: np.ndarray, cfg: ProbeConfig) -> ProbeModel:
    """Train layer weights and head on cached (C, L, D') features."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ProbeError("label outside [0, n_classes)")
    rng = np.random.default_rng(cfg.seed)
    probe = ProbeModel(LayerWeights(np.zeros(feats.shape[1])),
                       ProbeHead.init(cfg, feats.shape[2], rng))
    if cfg.standardize:
        probe.shift = feats.mean(0)
        probe.scale = feats.std(0) + 1e-6
    feats = probe.normalize(feats)
    params = {"layer_weights": probe.weights.raw}
    params.update({f"head.{k}": v for k, v in probe.head.params.items()})
    opt = OptimState.zeros_like(params)
    ocfg = OptimizerConfig(weight_decay=0.0, clip_norm=None)
    steps_per_epoch = math.ceil(len(labels) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = _loss_and_grads(probe, feats[idx], labels[idx])
            optimizer_step(params, grads, opt, ocfg, cosine_lr(step, total, cfg.lr, cfg.lr_min))
            step += 1
    return probe


def accuracy(probe: ProbeModel, feats, labels) -> float:
    return float((probe.predict(feats) == np.asarray(labels)).mean())


def _resolve_model(checkpoint) -> SpectroTemporalModel:
    if isinstance(checkpoint, SpectroTemporalModel):
        return checkpoint
    return load_checkpoint(checkpoint)[0]


@dataclass
class ProbeResult:
    probe: ProbeModel
    train_accuracy: float
    test_accuracy: float | None
    encoder_hash: str


def train_probe(checkpoint, patches: np.ndarray, labels: np.ndarray, cfg: ProbeConfig,
                train_idx=None, test_idx=None, feats: np.ndarray | None = None) -> ProbeResult:
    """Probe a frozen encoder. ``checkpoint`` is a model or a checkpoint path.

    The encoder's parameters are hashed before and after; any change raises
    :class:`FrozenEncoderViolation`.
    """
    model = _resolve_model(checkpoint)
    names = encoder_names(model.params)
    before = state_hash(model.params, names)
    if feats is None:
        feats = extract_features(model, patches)
    labels = np.asarray(labels)
    train_idx = np.arange(len(labels)) if train_idx is None else np.asarray(train_idx)
    probe = fit_probe(feats[train_idx], labels[train_idx], cfg)
    after = state_hash(model.params, names)
    if before != after:
        raise FrozenEncoderViolation("encoder parameters changed during probing")
    test_acc = None if test_idx is None else accuracy(probe, feats[test_idx], labels[test_idx])
    return ProbeResult(probe, accuracy(probe, feats[train_idx], labels[train_idx]), test_acc, after)


def stratified_folds(labels: np.ndarray, folds: int, seed: int = 0) -> np.ndarray:
    """Fold id per example; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    fold_of = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < folds:
            raise ProbeError(f"class {cls} has {len(idx)} examples, fewer than {folds} folds")
        idx = idx[np.random.default_rng([seed, int(cls)]).permutation(len(idx))]
        fold_of[idx] = np.arange(len(idx)) % folds
    return fold_of


@dataclass
class KFoldResult:
    mean_accuracy: float
    fold_accuracies: list
    fold_of: np.ndarray = field(repr=False, default=None)


def evaluate_kfold(feats: np.ndarray, labels: np.ndarray, cfg: ProbeConfig,
                   fold_of: np.ndarray | None = None) -> KFoldResult:
    """k-fold probe accuracy on cached features (see :func:`extract_features`)."""
    if cfg.folds < 2:
        raise ProbeError("k-fold evaluation needs folds >= 2")
    labels = np.asarray(labels)
    if fold_of is None:
        fold_of = stratified_folds(labels, cfg.folds, cfg.seed)
    accs = []
    for k in range(cfg.folds):
        test = fold_of == k
        if set(np.unique(labels[test])) != set(np.unique(labels)):
            raise ProbeError(f"fold {k} is missing a class")
        probe = fit_probe(feats[~test], labels[~test], cfg)
        accs.append(accuracy(probe, feats[test], labels[test]))
    return KFoldResult(float(np.mean(accs)), accs, fold_of)


def centroid_baseline(feats: np.ndarray, labels: np.ndarray, fold_of: np.ndarray) -> KFoldResult:
    """Nearest-class-centroid accuracy per fold on plain feature vectors."""
    labels = np.asarray(labels)
    accs = []
    for k in np.unique(fold_of):
        test = fold_of == k
        classes = np.unique(labels[~test])
        cents = np.stack([feats[~test][labels[~test] == c].mean(0) for c in classes])
        d = ((feats[test][:, None, :] - cents[None]) ** 2).sum(-1)
        accs.append(float((classes[d.argmin(1)] == labels[test]).mean()))
    return KFoldResult(float(np.mean(accs)), accs, fold_of)


def write_report(path, result: KFoldResult, cfg: ProbeConfig, config_hash: str = "",
                 checkpoint_hash: str = "") -> None:
    report = {
        "mean_accuracy": result.mean_accuracy,
        "fold_accuracies": result.fold_accuracies,
        "probe_config": asdict(cfg),
        "config_hash": config_hash,
        "checkpoint_hash": checkpoint_hash,
    }
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
