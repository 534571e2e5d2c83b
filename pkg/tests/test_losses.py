import math

import numpy as np
import pytest

from protoadapt import losses as L
from protoadapt import numerics as nm
from protoadapt.numerics import Tensor

LOG10 = math.log(10.0)


# -- reliability filter -----------------------------------------------------------


def test_uniform_sample_excluded_at_default_threshold():
    e0 = L.default_entropy_threshold(10)
    assert abs(e0 - 0.4 * LOG10) < 1e-12
    logits = np.zeros((1, 10))  # entropy ln 10 = 2.3026 > 0.9210
    rel = L.reliability_mask(logits, e0)
    assert len(rel) == 0
    np.testing.assert_allclose(rel.entropies, [LOG10], atol=1e-12)


def test_confident_sample_included():
    logits = np.zeros((1, 10))
    logits[0, 3] = 50.0
    rel = L.reliability_mask(logits, L.default_entropy_threshold(10))
    assert list(rel.indices) == [0]
    assert list(rel.pseudo_labels) == [3]


def test_threshold_is_strict():
    logits = np.array([[1.0, 0.0]])
    h = nm.entropy(logits[0])
    assert len(L.reliability_mask(logits, h)) == 0
    assert len(L.reliability_mask(logits, h + 1e-9)) == 1


def test_filter_monotone_in_threshold(rng):
    logits = rng.normal(size=(50, 10)) * 2
    lo = L.reliability_mask(logits, 0.3)
    hi = L.reliability_mask(logits, 1.5)
    assert set(lo.indices) <= set(hi.indices)


def test_pseudo_label_tie_breaks_to_lowest_index():
    logits = np.array([[5.0, 5.0, 0.0]])
    rel = L.reliability_mask(logits, 10.0)
    assert rel.pseudo_labels[0] == 0


def test_logit_shift_leaves_labels_and_entropies(rng):
    logits = rng.normal(size=(20, 10)) * 3
    rel = L.reliability_mask(logits, 0.9)
    shifted = L.reliability_mask(logits + 123.456, 0.9)
    np.testing.assert_array_equal(rel.indices, shifted.indices)
    np.testing.assert_array_equal(rel.pseudo_labels, shifted.pseudo_labels)
    np.testing.assert_allclose(rel.entropies, shifted.entropies, atol=1e-10)


# -- prototype cross-entropy -------------------------------------------------------


def test_ema_loss_orthonormal_reference():
    protos = np.eye(2)
    feats = Tensor(np.array([[1.0, 0.0]]))
    loss = L.ema_proto_loss(feats, np.array([0]), protos)
    assert abs(float(loss.value) - math.log(1 + math.exp(-1))) <= 1e-9


def test_ema_loss_unnormalized_feature_sharpens():
    protos = np.eye(2)
    feats = Tensor(np.array([[10.0, 0.0]]))
    loss = L.ema_proto_loss(feats, np.array([0]), protos)
    assert abs(float(loss.value) - math.log(1 + math.exp(-10))) <= 1e-12


def test_ema_loss_mean_aggregation():
    protos = np.eye(2)
    one = L.ema_proto_loss(Tensor([[1.0, 0.0]]), np.array([0]), protos)
    two = L.ema_proto_loss(Tensor([[1.0, 0.0], [1.0, 0.0]]), np.array([0, 0]), protos)
    assert abs(float(one.value) - float(two.value)) <= 1e-12


def test_ema_loss_normalizes_prototype_rows():
    feats = Tensor(np.array([[1.0, 0.0]]))
    a = L.ema_proto_loss(feats, np.array([0]), np.eye(2))
    b = L.ema_proto_loss(feats, np.array([0]), 7.5 * np.eye(2))
    assert abs(float(a.value) - float(b.value)) <= 1e-12


def test_ema_loss_empty_returns_zero():
    loss = L.ema_proto_loss(Tensor(np.empty((0, 2))), np.empty(0, dtype=int), np.eye(2))
    assert float(loss.value) == 0.0


def test_ema_loss_blocks_gradient_to_prototypes():
    protos = Tensor(np.eye(2))
    feats = Tensor(np.array([[0.5, 0.2]]))
    loss_fn = lambda: L.ema_proto_loss(feats, np.array([0]), protos)
    _, (g_protos, g_feats) = nm.value_and_grad(loss_fn, [protos, feats])
    np.testing.assert_array_equal(g_protos, np.zeros((2, 2)))
    assert np.abs(g_feats).sum() > 0


def test_ema_loss_soft_mode_and_confident_limit(rng):
    protos = rng.normal(size=(4, 6))
    feats = Tensor(rng.normal(size=(3, 6)))
    labels = np.array([2, 0, 1])
    hard = L.ema_proto_loss(feats, labels, protos, label_mode="hard")
    onehot = np.eye(4)[labels]
    soft_equal = L.ema_proto_loss(feats, labels, protos, label_mode="soft",
                                  soft_targets=onehot)
    assert abs(float(hard.value) - float(soft_equal.value)) <= 1e-12
    nearly = 0.999 * onehot + 0.001 / 4
    soft_near = L.ema_proto_loss(feats, labels, protos, label_mode="soft",
                                 soft_targets=nearly)
    assert abs(float(soft_near.value) - float(hard.value)) < 0.01
    with pytest.raises(ValueError):
        L.ema_proto_loss(feats, labels, protos, label_mode="soft")
    with pytest.raises(ValueError):
        L.ema_proto_loss(feats, labels, protos, label_mode="medium")


def test_ema_loss_gradient_matches_finite_differences(rng):
    protos = rng.normal(size=(3, 4))
    feats = Tensor(rng.normal(size=(2, 4)))
    labels = np.array([1, 2])
    loss_fn = lambda: L.ema_proto_loss(feats, labels, protos)
    _, (g,) = nm.value_and_grad(loss_fn, [feats])
    for idx in ((0, 1), (1, 3)):
        step = 1e-5
        orig = feats.value[idx]
        feats.value[idx] = orig + step
        up = float(loss_fn().value)
        feats.value[idx] = orig - step
        down = float(loss_fn().value)
        feats.value[idx] = orig
        num = (up - down) / (2 * step)
        assert abs(num - g[idx]) / max(abs(num), 1e-8) < 1e-4


# -- source alignment ---------------------------------------------------------------


def test_source_align_zero_at_anchor():
    src = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = L.source_align_loss(Tensor([[1.0, 0.0]]), np.array([0]), src)
    assert float(loss.value) == 0.0


def test_source_align_reference_value():
    src = np.array([[1.0, 0.0]])
    loss = L.source_align_loss(Tensor([[0.0, 1.0]]), np.array([0]), src)
    assert abs(float(loss.value) - 2.0) <= 1e-12


def test_source_align_mean_over_batch():
    src = np.array([[1.0, 0.0], [0.0, 1.0]])
    feats = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))  # losses 0 and 2
    loss = L.source_align_loss(feats, np.array([0, 1]), src)
    assert abs(float(loss.value) - 1.0) <= 1e-12


def test_source_align_empty_returns_zero():
    loss = L.source_align_loss(Tensor(np.empty((0, 2))), np.empty(0, dtype=int), np.eye(2))
    assert float(loss.value) == 0.0


def test_source_align_gradient_treats_anchor_as_constant(rng):
    src = rng.normal(size=(3, 5))
    feats = Tensor(rng.normal(size=(4, 5)))
    labels = np.array([0, 2, 1, 0])
    _, (g,) = nm.value_and_grad(lambda: L.source_align_loss(feats, labels, src), [feats])
    expected = 2.0 * (feats.value - src[labels]) / 4.0
    np.testing.assert_allclose(g, expected, atol=1e-12)


# -- entropy and consistency -----------------------------------------------------------


def test_entropy_loss_uniform_c4():
    loss = L.entropy_min_loss(Tensor(np.zeros((5, 4))))
    assert abs(float(loss.value) - math.log(4)) <= 1e-12


def test_entropy_loss_near_one_hot():
    z = np.zeros((3, 4))
    z[:, 0] = 60.0
    assert float(L.entropy_min_loss(Tensor(z)).value) < 1e-12


def test_entropy_loss_is_mean_of_per_sample(rng):
    z = rng.normal(size=(6, 5)) * 2
    loss = L.entropy_min_loss(Tensor(z))
    per = nm.entropy(z, axis=1)
    assert abs(float(loss.value) - per.mean()) <= 1e-12


def test_entropy_loss_filtered_variant(rng):
    z = rng.normal(size=(6, 5)) * 2
    idx = np.array([1, 4])
    loss = L.entropy_min_loss(Tensor(z), indices=idx)
    assert abs(float(loss.value) - nm.entropy(z[idx], axis=1).mean()) <= 1e-12
    empty = L.entropy_min_loss(Tensor(z), indices=np.empty(0, dtype=int))
    assert float(empty.value) == 0.0


def test_consistency_zero_when_views_agree_confidently():
    z = np.zeros((2, 3))
    z[:, 1] = 50.0
    loss = L.consistency_loss(Tensor(z), Tensor(z.copy()))
    assert float(loss.value) < 1e-12


def test_consistency_uniform_identical_equals_ln2():
    z = np.zeros((4, 2))
    loss = L.consistency_loss(Tensor(z), Tensor(z.copy()))
    assert abs(float(loss.value) - math.log(2)) <= 1e-12


def test_consistency_disagreement_is_large():
    za = np.zeros((1, 3)); za[0, 0] = 30.0
    zb = np.zeros((1, 3)); zb[0, 2] = 30.0
    assert float(L.consistency_loss(Tensor(za), Tensor(zb)).value) > 10.0
    with pytest.raises(ValueError):
        L.consistency_loss(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 3))))


def test_consistency_gradient_reaches_both_branches(rng):
    za = Tensor(rng.normal(size=(3, 4)))
    zb = Tensor(rng.normal(size=(3, 4)))
    _, (ga, gb) = nm.value_and_grad(lambda: L.consistency_loss(za, zb), [za, zb])
    assert np.abs(ga).sum() > 0 and np.abs(gb).sum() > 0


# -- overall objective --------------------------------------------------------------


def parts_with(entropy=0.0, ema=0.0, src=0.0, cons=0.0):
    return L.LossParts(entropy=Tensor(entropy), ema=Tensor(ema),
                       src=Tensor(src), cons=Tensor(cons))


def test_overall_reduces_to_entropy_for_plain_tent():
    parts = parts_with(entropy=1.234)
    total = L.overall_loss(parts, L.LossWeights(ema=0, src=0, cons=0), "tent")
    assert abs(float(total.value) - 1.234) <= 1e-12


def test_overall_ours_only_reference_weights():
    parts = parts_with(entropy=99.0, ema=0.5, src=0.25)
    total = L.overall_loss(parts, L.LossWeights(ema=2.0, src=20.0, cons=0), "ours-only")
    assert abs(float(total.value) - (2 * 0.5 + 20 * 0.25)) <= 1e-12


def test_overall_tent_plus_ours_reference_weights():
    parts = parts_with(entropy=1.0, ema=0.5, src=0.25, cons=0.125)
    total = L.overall_loss(parts, L.LossWeights(ema=2.0, src=50.0, cons=0), "tent+ours")
    assert abs(float(total.value) - (1.0 + 2 * 0.5 + 50 * 0.25)) <= 1e-12
    with_cons = L.overall_loss(parts, L.LossWeights(ema=2.0, src=50.0, cons=4.0), "tent+ours")
    assert abs(float(with_cons.value) - (1.0 + 2 * 0.5 + 50 * 0.25 + 4 * 0.125)) <= 1e-12


def test_overall_rejects_negative_weights():
    with pytest.raises(ValueError):
        L.overall_loss(parts_with(), L.LossWeights(ema=-1.0, src=0, cons=0), "tent")
