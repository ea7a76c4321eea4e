import math

import numpy as np
import pytest

from spectemp.gridding import GridConfig
from spectemp.masking import MaskPlan
from spectemp.objective import (LossError, cross_entropy, spectral_loss, spectral_loss_and_grad,
                                temporal_loss, temporal_loss_and_grad, total_loss)
from spectemp.quantizer import TargetSet

G = GridConfig()


def _targets(rng, N=50):
    return TargetSet(rng.integers(0, 100, (N, 8)), rng.integers(0, 500, (N, 8)))


def test_uniform_logits_give_log_k(rng):
    t = _targets(rng)
    plan = MaskPlan("segment", np.array([0, 4, 9]), 50)
    assert spectral_loss(np.zeros((400, 100)), t, plan, G) == pytest.approx(math.log(100), abs=1e-12)
    assert temporal_loss(np.zeros((50, 8, 500)), t, plan, G) == pytest.approx(math.log(500), abs=1e-12)


def test_hand_computed_two_class():
    ce = cross_entropy(np.array([[math.log(3), 0.0]]), np.array([0]))
    assert ce[0] == pytest.approx(math.log(4 / 3), abs=1e-15)
    assert ce[0] == pytest.approx(0.28768, abs=1e-5)


def test_spectral_denominator_is_masked_patches(rng):
    t = _targets(rng)
    logits = rng.standard_normal((400, 100))
    plan = MaskPlan("segment", np.array([1, 7, 30]), 50)
    idx = np.concatenate([np.arange(s * 8, s * 8 + 8) for s in (1, 7, 30)])
    assert len(idx) == 24
    terms = cross_entropy(logits[idx], t.spectral.ravel()[idx])
    assert spectral_loss(logits, t, plan, G) == pytest.approx(terms.sum() / 24, rel=1e-14)


def test_large_margin_loss_vanishes(rng):
    t = _targets(rng)
    logits = np.zeros((50, 8, 500))
    np.put_along_axis(logits, t.temporal[..., None], 1e4, axis=-1)
    plan = MaskPlan("segment", np.arange(10), 50)
    assert temporal_loss(logits, t, plan, G) < 1e-12


def test_total_loss_identity():
    assert total_loss(4.0, 2.0, 0.75) == 2.5
    assert total_loss(3.3, 1.1, 0.0) == 3.3
    assert total_loss(3.3, 1.1, 1.0) == 1.1
    with pytest.raises(LossError):
        total_loss(1.0, 1.0, 1.5)


def test_errors(rng):
    t = _targets(rng)
    with pytest.raises(LossError):
        temporal_loss(np.zeros((50, 8, 500)), t, MaskPlan("patch", np.array([1]), 400), G)
    with pytest.raises(LossError):
        spectral_loss(np.zeros((400, 100)), t, MaskPlan("segment", np.array([], int), 50), G)
    with pytest.raises(LossError):
        spectral_loss_and_grad(np.zeros((1, 4, 3)), np.zeros((1, 4), int), np.zeros((1, 4), bool))


def test_batched_matches_single_clip(rng):
    B = 3
    t = [_targets(rng) for _ in range(B)]
    segs = [np.array([0, 1, 2]), np.array([10]), np.arange(20, 40)]
    s_logits = rng.standard_normal((B, 400, 100))
    t_logits = rng.standard_normal((B, 50, 8, 500))
    smask = np.zeros((B, 50), bool)
    for b, s in enumerate(segs):
        smask[b, s] = True
    pmask = np.repeat(smask, 8, axis=1)
    ls, _ = spectral_loss_and_grad(s_logits, np.stack([x.spectral.ravel() for x in t]), pmask)
    lt, _ = temporal_loss_and_grad(t_logits, np.stack([x.temporal for x in t]), smask)
    for b in range(B):
        plan = MaskPlan("segment", segs[b], 50)
        assert ls[b] == pytest.approx(spectral_loss(s_logits[b], t[b], plan, G), rel=1e-12)
        assert lt[b] == pytest.approx(temporal_loss(t_logits[b], t[b], plan, G), rel=1e-12)


def test_logit_gradient_finite_difference(rng):
    logits = rng.standard_normal((2, 6, 4))
    labels = rng.integers(0, 4, (2, 6))
    mask = rng.random((2, 6)) < 0.5
    mask[:, 0] = True
    _, grad = spectral_loss_and_grad(logits, labels, mask)
    h = 1e-6
    for idx in [(0, 0, 1), (1, 3, 2), (0, 5, 0)]:
        up = logits.copy(); up[idx] += h
        dn = logits.copy(); dn[idx] -= h
        fd = (spectral_loss_and_grad(up, labels, mask)[0].mean()
              - spectral_loss_and_grad(dn, labels, mask)[0].mean()) / (2 * h)
        assert grad[idx] == pytest.approx(fd, abs=1e-8)
