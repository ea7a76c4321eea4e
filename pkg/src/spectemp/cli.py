"""Command-line entry point: ``spectemp <command> [flags]``.

Commands chain through files in ``--out`` directories::

    synth -> featurize -> fit-codebooks -> pretrain -> probe

``gradcheck`` and ``maskstats`` are standalone diagnostics.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .checkpoint import ContainerError, read_container, write_container
from .data import ManifestError, SynthSpec, generate_synthetic, read_manifest
from .frontend import AudioFormatError
from .gridding import GridError, patch_vectors
from .masking import MaskError, mask_statistics
from .model import DivergenceError
from .probe import (FrozenEncoderViolation, ProbeError, centroid_baseline, evaluate_kfold,
                    extract_features, stratified_folds, write_report)
from .quantizer import CodebookError, load_codebook, save_codebook
from .trainer import CheckpointMismatchError, ScheduleError, load_checkpoint, run_pretraining
from . import pipeline

# exit status per error class
EXIT_CODES = [
    (C.ConfigError, 2), (GridError, 2), (MaskError, 2), (ScheduleError, 2),
    (FileNotFoundError, 3), (ManifestError, 3),
    (AudioFormatError, 4),
    (CodebookError, 5),
    (CheckpointMismatchError, 6), (ContainerError, 6),
    (DivergenceError, 7),
    (FrozenEncoderViolation, 9), (ProbeError, 9),
]
EXIT_GRADCHECK_FAILED = 8


class MissingArtifact(FileNotFoundError):
    pass


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path} (run the earlier command first)")
    return path


def resolve_config(args) -> C.RunConfig:
    if args.config:
        cfg = C.load_config(args.config, profile=args.profile if args.profile_given else None)
    else:
        cfg = C.preset(args.profile)
    cfg = C.with_overrides(cfg, seed=args.seed, steps=args.steps, lam=args.lam, p=args.p,
                           pprime=args.pprime, ks=args.ks, kt=args.kt)
    return cfg.validate()


def _check_hash(meta: dict, expected: str, what: str) -> None:
    found = meta.get("config_hash")
    if found != expected:
        raise CheckpointMismatchError(
            f"{what} was produced under config hash {found}, current config hashes to {expected}")


def _features_path(out: Path) -> Path:
    return out / "features"


def _load_features(out: Path, cfg: C.RunConfig):
    tensors, meta = read_container(_need(_features_path(out), "features"))
    _check_hash(meta, cfg.stage_hash("features"), "features")
    return tensors["logmel"], meta


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    spec = SynthSpec(count_per_class=args.count, seed=args.seed or 0,
                     clip_seconds=cfg.frontend.clip_seconds)
    manifest = generate_synthetic(spec, args.out / "audio")
    print(f"wrote {len(manifest)} clips and manifest to {args.out / 'audio'}")
    return 0


def cmd_featurize(args, cfg) -> int:
    manifest_path = args.manifest or args.out / "audio" / "manifest.tsv"
    manifest = read_manifest(_need(Path(manifest_path), "manifest"), check_paths=True)
    specs = pipeline.featurize(manifest, cfg.frontend, cache_dir=args.out / "cache",
                               workers=args.workers)
    meta = {"config_hash": cfg.stage_hash("features"), "ids": [e.id for e in manifest.entries],
            "labels": manifest.labels.tolist()}
    write_container(_features_path(args.out), {"logmel": specs}, meta)
    print(f"featurized {len(specs)} clips -> {specs.shape[1:]} log-mel each")
    print(f"log-mel mean {specs.mean(dtype=np.float64):.2f}, std {specs.std(dtype=np.float64):.2f}"
          " (the model's input_mean / input_std)")
    return 0


def cmd_fit_codebooks(args, cfg) -> int:
    specs, _ = _load_features(args.out, cfg)
    cb = cfg.codebook
    cb_s, cb_t = pipeline.fit_codebooks(specs, cfg.grid, cb.K_s, cb.K_t, cb.sample_size, cb.seed,
                                        cb.max_iters, cb.tol, cb.n_init)
    save_codebook(cb_s, args.out / "codebook_spectral.stcb")
    save_codebook(cb_t, args.out / "codebook_temporal.stcb")
    (args.out / "codebooks.json").write_text(json.dumps({"config_hash": cfg.stage_hash("codebooks")}))
    print(f"fitted codebooks K_s={cb_s.K} K_t={cb_t.K}")
    return 0


def _load_codebooks(out: Path, cfg: C.RunConfig):
    meta = json.loads(_need(out / "codebooks.json", "codebook metadata").read_text())
    _check_hash(meta, cfg.stage_hash("codebooks"), "codebooks")
    return (load_codebook(_need(out / "codebook_spectral.stcb", "spectral codebook")),
            load_codebook(_need(out / "codebook_temporal.stcb", "temporal codebook")))


def cmd_pretrain(args, cfg) -> int:
    specs, meta = _load_features(args.out, cfg)
    cb_s, cb_t = _load_codebooks(args.out, cfg)
    corpus = pipeline.build_corpus(specs, cfg.grid, cb_s, cb_t, meta["ids"])
    run_dir = args.out / "pretrain"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    resume = Path(args.resume) if args.resume else None

    def progress(row):
        if row[0] % 50 == 0:
            print(f"step {row[0]} phase {row[1]} lr {row[2]:.2e} total {row[5]:.4f}", flush=True)

    result = run_pretraining(cfg.plan, corpus, cfg.model, cfg.mask, cfg.optimizer, cfg.schedule,
                             out_dir=run_dir, resume_from=resume, config_hash=cfg.stage_hash("pretrain"),
                             progress=progress)
    print(f"finished at step {result.trainer.step}; log in {run_dir / 'train_log.csv'}")
    return 0


def cmd_probe(args, cfg) -> int:
    specs, meta = _load_features(args.out, cfg)
    run_dir = args.out / "pretrain"
    ckpt = Path(args.checkpoint) if args.checkpoint else _need(
        run_dir / f"ckpt_{cfg.plan.total_steps:07d}", "final checkpoint")
    model, _, cmeta = load_checkpoint(_need(ckpt, "checkpoint"), expected_config=cfg.model,
                                      expected_hash=cfg.stage_hash("pretrain"))
    labels = np.asarray(meta["labels"])
    if (labels < 0).any():
        raise ProbeError("probe needs a labeled manifest")
    patches = np.stack([patch_vectors(s, cfg.grid) for s in specs]).astype(np.float32)
    feats = extract_features(model, patches)
    pcfg = replace(cfg.probe, n_classes=int(labels.max()) + 1)
    fold_of = stratified_folds(labels, pcfg.folds, pcfg.seed)
    result = evaluate_kfold(feats, labels, pcfg, fold_of)
    base = centroid_baseline(specs.mean(axis=2), labels, fold_of)
    write_report(args.out / "probe_report.json", result, pcfg, cfg.hash, cmeta["config_hash"])
    print(f"probe accuracy {result.mean_accuracy:.4f} (folds {np.round(result.fold_accuracies, 3).tolist()})")
    print(f"raw-mel centroid baseline {base.mean_accuracy:.4f}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import gradcheck
    lam = cfg.plan.lam if args.lam is not None else 0.75
    report = gradcheck(lam=lam, seed=args.seed or 0)
    print(report.format())
    return 0 if report.passed() else EXIT_GRADCHECK_FAILED


def cmd_maskstats(args, cfg) -> int:
    stats = mask_statistics(N=args.segments, p=cfg.mask.p, p_prime=cfg.mask.p_prime,
                            n_draws=args.draws, seed=args.seed or 0)
    print(stats.table())
    print(f"max |z| = {stats.max_z:.2f} over {len(stats.analytic)} positions")
    return 0


COMMANDS = {
    "synth": cmd_synth, "featurize": cmd_featurize, "fit-codebooks": cmd_fit_codebooks,
    "pretrain": cmd_pretrain, "probe": cmd_probe, "gradcheck": cmd_gradcheck,
    "maskstats": cmd_maskstats,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--profile", choices=["desk-scale", "paper-scale"], default=None)
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", type=Path, default=Path("run"))
    common.add_argument("--steps", type=int, help="total pretraining steps, split in the profile's ratio")
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--p", type=float)
    common.add_argument("--pprime", type=float)
    common.add_argument("--ks", type=int)
    common.add_argument("--kt", type=int)

    parser = argparse.ArgumentParser(prog="spectemp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic 4-class corpus") \
        .add_argument("--count", type=int, default=50, help="clips per class")
    sub.add_parser("featurize", parents=[common], help="compute cached log-mel spectrograms") \
        .add_argument("--manifest", help="defaults to <out>/audio/manifest.tsv")
    sub.add_parser("fit-codebooks", parents=[common], help="fit spectral and temporal codebooks")
    sub.add_parser("pretrain", parents=[common], help="two-phase masked pretraining") \
        .add_argument("--resume", help="checkpoint directory to resume from")
    sub.add_parser("probe", parents=[common], help="k-fold frozen-encoder probe") \
        .add_argument("--checkpoint", help="defaults to the final pretraining checkpoint")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    ms = sub.add_parser("maskstats", parents=[common], help="mask coverage: Monte Carlo vs recursion")
    ms.add_argument("--draws", type=int, default=100_000)
    ms.add_argument("--segments", type=int, default=50)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.profile_given = args.profile is not None
    if args.profile is None:
        args.profile = "desk-scale"
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
