import math

import numpy as np
import pytest

from spectemp.checkpoint import ContainerError
from spectemp.masking import MaskConfig
from spectemp.model import ModelConfig, SpectroTemporalModel, encoder_names, state_hash
from spectemp.trainer import (CheckpointMismatchError, OptimizerConfig, OptimState, PretrainCorpus,
                              Pretrainer, ScheduleConfig, ScheduleError, TrainPlan, load_checkpoint,
                              format_log, lr_at, optimizer_step, read_log, run_pretraining, save_checkpoint)

CFG = ModelConfig(d_model=16, n_layers=1, n_heads=2, K_s=6, K_t=8, patch_dim=16, R_s=4, R_t=4,
                  N_max=6)
SCHED = ScheduleConfig(1, 0.1, 1e-6, 1e-2, 1e-6)


def _corpus(seed=0, C=5):
    rng = np.random.default_rng(seed)
    return PretrainCorpus(rng.standard_normal((C, 24, 16)).astype(np.float32),
                          rng.integers(0, 6, (C, 24)), rng.integers(0, 8, (C, 6, 4)),
                          [f"c{i}" for i in range(C)])


def _plan(**kw):
    base = dict(phaseA_steps=6, joint_steps=9, batch_size=3, seed=11, checkpoint_every=5)
    base.update(kw)
    return TrainPlan(**base)


def test_schedule_breakpoints():
    s = ScheduleConfig(1000)
    assert lr_at(0, s) == 1e-6
    assert lr_at(0.1 * 1000, s) == 1e-4
    assert lr_at(1000, s) == 1e-6
    assert lr_at(0.55 * 1000, s) == pytest.approx(5.05e-5, rel=1e-12)
    w = 0.1 * 1000
    assert abs(lr_at(w - 1e-9, s) - lr_at(w + 1e-9, s)) < 1e-12
    flat = ScheduleConfig(50, 0.1, 3e-4, 3e-4, 3e-4)
    assert all(lr_at(k, flat) == pytest.approx(3e-4, rel=1e-15) for k in range(51))
    with pytest.raises(ScheduleError):
        lr_at(1001, s)


def test_adamw_hand_example():
    params = {"w": np.array([1.0])}
    opt = OptimState.zeros_like(params)
    optimizer_step(params, {"w": np.array([1.0])}, opt, OptimizerConfig(weight_decay=0.0), 0.1)
    assert params["w"][0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)
    assert params["w"][0] == pytest.approx(0.9, abs=1e-8)


def test_zero_grad_no_decay_is_noop(rng):
    params = {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 3))}
    before = {k: v.copy() for k, v in params.items()}
    opt = OptimState.zeros_like(params)
    for _ in range(3):
        optimizer_step(params, {k: np.zeros_like(v) for k, v in params.items()}, opt,
                       OptimizerConfig(weight_decay=0.0), 0.1)
    for k in params:
        assert params[k].tobytes() == before[k].tobytes()


def test_weight_decay_skips_layer_norm():
    params = {"layers.0.ln1.g": np.ones(3), "layers.0.attn.wq": np.ones(3)}
    opt = OptimState.zeros_like(params)
    optimizer_step(params, {k: np.zeros(3) for k in params}, opt, OptimizerConfig(weight_decay=0.5), 0.1)
    assert params["layers.0.ln1.g"].tolist() == [1.0] * 3
    np.testing.assert_allclose(params["layers.0.attn.wq"], 0.95)


def test_paper_scale_plan():
    plan = TrainPlan()
    assert (plan.phaseA_steps, plan.joint_steps) == (100_000, 150_000)


def test_phase_contract():
    corpus = _corpus()
    model = SpectroTemporalModel(CFG, seed=0)
    tr = Pretrainer(model, corpus, _plan(), MaskConfig(), OptimizerConfig(), SCHED)
    temp_names = [n for n in model.params if n.startswith("temp_head.")]
    for _ in range(6):
        idx, pm, sm = tr.batch_for(tr.step)
        *_, grads = tr.loss_and_grads(idx, pm, sm, "A")
        assert all(not grads[n].any() for n in temp_names)
        tr.train_step()
    enc = state_hash(model.params, encoder_names(model.params))
    assert tr.opt.step == 6
    row = tr.train_step()  # first phase B step resets the moments
    assert row[1] == "B" and tr.opt.step == 1
    assert not math.isnan(row[4])
    # the encoder entering phase B is the one phase A produced
    assert tr.log[5][1] == "A"
    assert enc != state_hash(model.params, encoder_names(model.params))


def test_phase_b_starts_from_phase_a_encoder(tmp_path):
    corpus = _corpus()
    res = run_pretraining(_plan(), corpus, CFG, schedule=SCHED, out_dir=tmp_path, stop_at=6)
    model, opt, meta = load_checkpoint(tmp_path / "ckpt_0000006")
    assert meta["step"] == 6
    assert state_hash(model.params, encoder_names(model.params)) == \
        state_hash(res.model.params, encoder_names(res.model.params))


def test_log_determinism(tmp_path):
    a = run_pretraining(_plan(), _corpus(), CFG, schedule=SCHED, out_dir=tmp_path / "a")
    b = run_pretraining(_plan(), _corpus(), CFG, schedule=SCHED, out_dir=tmp_path / "b")
    assert (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()
    assert len(a.log) == 15 and [r[1] for r in a.log] == ["A"] * 6 + ["B"] * 9
    assert all(math.isnan(r[4]) for r in a.log[:6])
    assert read_log(tmp_path / "a/train_log.csv")[3][5] == a.log[3][5]
    c = run_pretraining(_plan(seed=12), _corpus(), CFG, schedule=SCHED)
    assert format_log(c.log) != format_log(b.log)


@pytest.mark.parametrize("stop", [3, 6, 10])
def test_resume_matches_uninterrupted(tmp_path, stop):
    full = run_pretraining(_plan(), _corpus(), CFG, schedule=SCHED, out_dir=tmp_path / "full")
    part = tmp_path / "part"
    run_pretraining(_plan(), _corpus(), CFG, schedule=SCHED, out_dir=part, stop_at=stop)
    resumed = run_pretraining(_plan(), _corpus(), CFG, schedule=SCHED, out_dir=part,
                              resume_from=part / f"ckpt_{stop:07d}")
    assert format_log(resumed.log) == format_log(full.log)
    assert (part / "train_log.csv").read_bytes() == (tmp_path / "full/train_log.csv").read_bytes()
    assert state_hash(resumed.model.params) == state_hash(full.model.params)


def test_checkpoint_roundtrip_and_mismatch(tmp_path, rng):
    model = SpectroTemporalModel(CFG, seed=5)
    opt = OptimState.zeros_like(model.params)
    for v in opt.m.values():
        v[...] = rng.standard_normal(v.shape)
    opt.step = 17
    save_checkpoint(tmp_path / "ck", model, opt, _plan(), 42, config_hash="abc")
    m2, o2, meta = load_checkpoint(tmp_path / "ck", expected_config=CFG, expected_hash="abc")
    assert state_hash(m2.params) == state_hash(model.params)
    assert state_hash(o2.m) == state_hash(opt.m) and o2.step == 17 and meta["step"] == 42
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "ck", expected_config=ModelConfig(d_model=8, n_heads=2))
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "ck", expected_hash="other")
    blob = tmp_path / "ck" / "tensors.bin"
    data = bytearray(blob.read_bytes())
    data[10] ^= 0x55
    blob.write_bytes(bytes(data))
    with pytest.raises(ContainerError):
        load_checkpoint(tmp_path / "ck")


def test_loss_decreases_on_tiny_corpus():
    corpus = _corpus(C=2)
    res = run_pretraining(_plan(phaseA_steps=40, joint_steps=40, batch_size=2), corpus, CFG,
                          schedule=SCHED)
    first = np.mean([r[5] for r in res.log[:5]])
    last = np.mean([r[5] for r in res.log[35:40]])
    assert last < first
