"""The eleven acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (see ``conftest.py``); the lines are
repeated in the terminal summary at the end of the run.
"""

import math
import time

import numpy as np
import pytest

from spectemp.checkpoint import read_container
from spectemp.config import preset
from spectemp.data import CorpusManifest, ManifestEntry, SynthSpec, read_manifest, synth_clips, write_manifest
from spectemp.frontend import WaveformClip, compute_logmel
from spectemp.gradcheck import TINY, gradcheck
from spectemp.gridding import GridConfig, frame_temporal, patchify_spectral, segment, unsegment
from spectemp.masking import MaskConfig, fixed_point, marginal_recursion, sample_segment_mask
from spectemp.model import SpectroTemporalModel, encoder_names, state_hash
from spectemp.objective import spectral_loss_and_grad, temporal_loss_and_grad, total_loss
from spectemp.pipeline import build_corpus, fit_codebooks
from spectemp.probe import (ProbeConfig, centroid_baseline, evaluate_kfold, extract_features,
                            stratified_folds, train_probe)
from spectemp.quantizer import assign, fit_kmeans, inertia, load_codebook, save_codebook
from spectemp.trainer import (OptimState, ScheduleConfig, TrainPlan, Pretrainer, clip_by_global_norm,
                              format_log, load_checkpoint, lr_at, masked_spectral_accuracy,
                              run_pretraining, save_checkpoint)

from oracles import best_partition_inertia, brute_nearest

DESK = preset("desk-scale")
GRID = GridConfig()


def _spectrograms(spec: SynthSpec):
    ids, labels, specs = [], [], []
    for clip_id, label, x in synth_clips(spec):
        ids.append(clip_id)
        labels.append(label)
        specs.append(compute_logmel(WaveformClip(x), DESK.frontend).values)
    return ids, np.array(labels), np.stack(specs)


def _corpus(spec: SynthSpec):
    ids, labels, specs = _spectrograms(spec)
    cb = DESK.codebook
    cb_s, cb_t = fit_codebooks(specs, GRID, cb.K_s, cb.K_t, cb.sample_size, cb.seed, cb.max_iters,
                               cb.tol, cb.n_init)
    return build_corpus(specs, GRID, cb_s, cb_t, ids), labels, specs


@pytest.fixture(scope="module")
def overfit_corpus():
    """Eight synthetic clips, two per class."""
    return _corpus(SynthSpec(count_per_class=2, seed=0))[0]


def _train(corpus, out_dir=None, **plan_kw):
    plan = DESK.plan
    if plan_kw:
        plan = TrainPlan(**{**plan.__dict__, **plan_kw})
    return run_pretraining(plan, corpus, DESK.model, DESK.mask, DESK.optimizer, DESK.schedule,
                           out_dir=out_dir)


def test_c01_geometry(criterion):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(128000) * 0.1
    t0 = time.perf_counter()
    spec = compute_logmel(WaveformClip(x))
    seg = segment(spec, GRID)
    patches = patchify_spectral(seg, GRID)
    frames = frame_temporal(seg, GRID)
    elapsed = time.perf_counter() - t0
    ok = (spec.values.shape == (128, 800) and seg.N == 50
          and patches.shape[:2] == (50, 8) and patches.shape[2:] == (16, 16)
          and frames.shape[:2] == (50, 8) and frames.shape[2:] == (128, 2)
          and elapsed < 1.0)
    criterion(1, "geometry 128x800, 50 segments, 400 patches 16x16, 400 frames 128x2", ok,
              f"spec {spec.values.shape}, N={seg.N}, patches {patches.shape[0] * patches.shape[1]}"
              f" x {patches.shape[2:]}, frames {frames.shape[0] * frames.shape[1]} x {frames.shape[2:]},"
              f" {elapsed * 1000:.0f} ms/clip")


def test_c02_mask_statistics(criterion):
    N, draws = 50, 100_000
    cfg = MaskConfig(p=0.6, p_prime=0.2)
    rng = np.random.default_rng(0)
    counts = np.zeros(N)
    t0 = time.perf_counter()
    for _ in range(draws):
        counts[sample_segment_mask(N, cfg, rng).indices] += 1
    elapsed = time.perf_counter() - t0
    q = marginal_recursion(N, 0.6, 0.2)
    emp = counts / draws
    z = np.abs(emp - q) / np.sqrt(q * (1 - q) / draws)
    aggregate = emp.mean()
    ok = z.max() <= 3.0 and abs(aggregate - 0.6522) <= 0.005 and elapsed < 10.0
    criterion(2, "mask marginals vs recursion (3 sigma), aggregate 0.6522 +- 0.005", ok,
              f"max |z|={z.max():.2f}, aggregate={aggregate:.5f} (fixed point {fixed_point(0.6, 0.2):.5f}),"
              f" {elapsed:.1f} s")


def test_c03_gradient_correctness(criterion):
    t0 = time.perf_counter()
    report = gradcheck(TINY, lam=0.75, h=1e-5)
    elapsed = time.perf_counter() - t0
    ok = report.max_rel_error < 1e-4 and elapsed < 60
    criterion(3, "analytic vs central-difference gradients, float64, rel err < 1e-4", ok,
              f"max rel err {report.max_rel_error:.2e} ({report.worst_param}) over"
              f" {report.n_checked} entries, {elapsed:.1f} s")


def test_c04_loss_floors(criterion):
    rng = np.random.default_rng(4)
    cfg = DESK.model
    model = SpectroTemporalModel(cfg, seed=4)
    B, N = 4, 50
    patches = rng.standard_normal((B, N * cfg.R_s, cfg.patch_dim)).astype(np.float32)
    smask = np.stack([np.isin(np.arange(N), sample_segment_mask(N, DESK.mask, rng).indices)
                      for _ in range(B)])
    pmask = np.repeat(smask, cfg.R_s, axis=1)
    _, s_logits, t_logits = model.forward(patches, pmask)
    ls, _ = spectral_loss_and_grad(s_logits.astype(np.float64), rng.integers(0, cfg.K_s, (B, N * cfg.R_s)), pmask)
    lt, _ = temporal_loss_and_grad(t_logits.astype(np.float64), rng.integers(0, cfg.K_t, (B, N, cfg.R_t)), smask)
    Ls, Lt = float(ls.mean()), float(lt.mean())
    lam = 0.75
    identity_err = abs(total_loss(Ls, Lt, lam) - (lam * Lt + (1 - lam) * Ls))
    rs, rt = Ls / math.log(cfg.K_s), Lt / math.log(cfg.K_t)
    ok = abs(rs - 1) <= 0.1 and abs(rt - 1) <= 0.1 and identity_err <= 1e-12
    criterion(4, "fresh-model losses within 10% of ln K; total-loss identity to 1e-12", ok,
              f"L_s={Ls:.4f} (ln100={math.log(100):.4f}), L_t={Lt:.4f} (ln500={math.log(500):.4f}),"
              f" identity err {identity_err:.1e}")


def test_c05_overfit_memorization(criterion, overfit_corpus):
    t0 = time.perf_counter()
    result = _train(overfit_corpus)
    elapsed = time.perf_counter() - t0
    lam, Ks, Kt = DESK.plan.lam, DESK.model.K_s, DESK.model.K_t
    floor = lam * math.log(Kt) + (1 - lam) * math.log(Ks)
    final = result.log[-1][5]
    acc = masked_spectral_accuracy(result.model, overfit_corpus, DESK.mask)
    ok = final < 0.25 * floor and acc > 0.90 and elapsed < 600
    criterion(5, "8-clip overfit: final loss < 25% of floor, masked spectral top-1 > 90%", ok,
              f"final total {final:.4f} = {final / floor:.1%} of floor {floor:.4f};"
              f" masked accuracy {acc:.1%}; {elapsed:.0f} s")


def test_c06_two_phase_contract(criterion, overfit_corpus):
    plan = TrainPlan(phaseA_steps=5, joint_steps=3, batch_size=4, seed=3)
    model = SpectroTemporalModel(DESK.model, seed=3)
    tr = Pretrainer(model, overfit_corpus, plan, DESK.mask, DESK.optimizer, DESK.schedule)
    temp = [n for n in model.params if n.startswith("temp_head.")]
    zero_in_a = True
    while tr.step < plan.phaseA_steps:
        idx, pm, sm = tr.batch_for(tr.step)
        *_, grads = tr.loss_and_grads(idx, pm, sm, "A")
        zero_in_a &= all(not grads[n].any() for n in temp)
        tr.train_step()
    enc_end_a = state_hash(model.params, encoder_names(model.params))
    # gradients the first phase-B step will see, computed from the carried-over encoder
    idx, pm, sm = tr.batch_for(tr.step)
    *_, g = tr.loss_and_grads(idx, pm, sm, "B")
    clip_by_global_norm(g, DESK.optimizer.clip_norm)
    carried = state_hash(tr.model.params, encoder_names(tr.model.params)) == enc_end_a
    tr.train_step()
    b1 = DESK.optimizer.beta1
    reset = tr.opt.step == 1 and all(
        np.allclose(tr.opt.m[n], (1 - b1) * g[n], rtol=1e-5, atol=1e-12) for n in g)
    ok = zero_in_a and carried and reset
    criterion(6, "phase A temporal grads zero; encoder carried over; moments reset", ok,
              f"temporal grads zero in A: {zero_in_a}; encoder hash carried: {carried};"
              f" moments reset: {reset}")


def test_c07_schedule_exactness(criterion):
    checks = []
    for T in (100_000, 150_000, 1000, 777):
        s = ScheduleConfig(T)
        w = 0.1 * T
        left, right = lr_at(w * (1 - 1e-15), s), lr_at(w * (1 + 1e-15), s)
        checks.append(lr_at(0, s) == 1e-6 and lr_at(w, s) == 1e-4 and lr_at(T, s) == 1e-6
                      and abs(left - lr_at(w, s)) <= 1e-12 and abs(right - lr_at(w, s)) <= 1e-12)
    ok = all(checks)
    criterion(7, "lr(0)=1e-6, lr(0.1T)=1e-4, lr(T)=1e-6 bit-exact; continuous at 0.1T", ok,
              f"{sum(checks)}/{len(checks)} schedules exact")


def test_c08_kmeans_oracle(criterion):
    rng = np.random.default_rng(8)
    worst = -np.inf
    cases = 0
    for n in range(3, 13):
        for K in (1, 2, 3):
            for trial in range(2):
                x = rng.standard_normal((n, 2)) + (rng.integers(0, 3, (n, 1)) * 3.0 if trial else 0)
                cb = fit_kmeans(x, K, seed=trial, n_init=10)
                gap = inertia(x, cb.centroids) - best_partition_inertia(x, K)
                worst = max(worst, gap)
                cases += 1
    cb = fit_kmeans(rng.standard_normal((400, 8)), 30, seed=0)
    q = rng.standard_normal((1000, 8))
    agree = np.array_equal(assign(q, cb), brute_nearest(q, cb.centroids))
    ok = worst <= 1e-9 and agree
    criterion(8, "k-means inertia <= exhaustive optimum + 1e-9; assign == brute force", ok,
              f"{cases} datasets, worst excess inertia {worst:.2e}; 1000 queries agree: {agree}")


def test_c09_probe_protocol(criterion, tmp_path):
    corpus, labels, specs = _corpus(SynthSpec(count_per_class=50, seed=1))
    pre = _train(corpus)
    model = pre.model
    before = state_hash(model.params)
    t0 = time.perf_counter()
    feats = extract_features(model, corpus.patches)
    cfg = DESK.probe
    fold_of = stratified_folds(labels, cfg.folds, cfg.seed)
    result = evaluate_kfold(feats, labels, cfg, fold_of)
    single = train_probe(model, corpus.patches, labels, cfg, np.flatnonzero(fold_of != 0),
                         np.flatnonzero(fold_of == 0), feats=feats)
    elapsed = time.perf_counter() - t0
    frozen = state_hash(model.params) == before
    base = centroid_baseline(specs.mean(axis=2), labels, fold_of)
    ok = frozen and result.mean_accuracy > 0.95 and base.mean_accuracy > 0.90 and elapsed < 300
    criterion(9, "frozen encoder; probe > 95% on 200 clips (5-fold); raw-mel baseline > 90%", ok,
              f"probe {result.mean_accuracy:.1%} (folds {[round(a, 3) for a in result.fold_accuracies]}),"
              f" baseline {base.mean_accuracy:.1%}, encoder bit-identical: {frozen},"
              f" fold-0 single run {single.test_accuracy:.1%}; probing {elapsed:.0f} s")


def test_c10_determinism_and_resume(criterion, overfit_corpus, tmp_path):
    short = dict(phaseA_steps=20, joint_steps=30, checkpoint_every=10, batch_size=4)
    a = _train(overfit_corpus, tmp_path / "a", **short)
    b = _train(overfit_corpus, tmp_path / "b", **short)
    same = (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()
    full = format_log(a.log).splitlines()
    resumes = []
    for ck in sorted((tmp_path / "a").glob("ckpt_*")):
        step = int(ck.name.split("_")[1])
        if step >= 50:
            continue
        plan = TrainPlan(**{**DESK.plan.__dict__, **short})
        r = run_pretraining(plan, overfit_corpus, DESK.model, DESK.mask, DESK.optimizer, DESK.schedule,
                            resume_from=ck)
        resumes.append(format_log(r.log).splitlines()[1:] == full[1 + step:]
                       and state_hash(r.model.params) == state_hash(a.model.params))
    ok = same and len(resumes) == 4 and all(resumes)
    criterion(10, "same seed -> byte-identical logs; resume from every checkpoint is exact", ok,
              f"logs identical: {same}; resumed runs exact: {sum(resumes)}/{len(resumes)}")


def test_c11_roundtrips(criterion, tmp_path, overfit_corpus):
    rng = np.random.default_rng(11)
    X = rng.standard_normal((128, 800)).astype(np.float32)
    grid_ok = unsegment(segment(X, GRID)).tobytes() == X.tobytes()

    cb = fit_kmeans(rng.standard_normal((300, 256)), 12, seed=1)
    save_codebook(cb, tmp_path / "cb.stcb")
    cb_ok = load_codebook(tmp_path / "cb.stcb") == cb

    model = SpectroTemporalModel(DESK.model, seed=11)
    opt = OptimState.zeros_like(model.params)
    for v in list(opt.m.values()) + list(opt.v.values()):
        v[...] = rng.standard_normal(v.shape)
    opt.step = 9
    save_checkpoint(tmp_path / "ck", model, opt, DESK.plan, 9)
    m2, o2, _ = load_checkpoint(tmp_path / "ck")
    ck_ok = (state_hash(m2.params) == state_hash(model.params) and state_hash(o2.m) == state_hash(opt.m)
             and state_hash(o2.v) == state_hash(opt.v) and o2.step == 9)

    man = CorpusManifest([ManifestEntry(f"c{i}", f"d/c{i}.wav", i % 4, i % 5) for i in range(20)]
                         + [ManifestEntry("u", "u.wav")], tmp_path)
    write_manifest(man, tmp_path / "m.tsv")
    back = read_manifest(tmp_path / "m.tsv")
    write_manifest(back, tmp_path / "m2.tsv")
    man_ok = back.entries == man.entries and \
        (tmp_path / "m.tsv").read_bytes() == (tmp_path / "m2.tsv").read_bytes()
    ok = grid_ok and cb_ok and ck_ok and man_ok
    criterion(11, "bitwise round-trips: gridding, codebook, checkpoint, manifest", ok,
              f"grid {grid_ok}, codebook {cb_ok}, checkpoint {ck_ok}, manifest {man_ok}")
