import hashlib

import numpy as np
import pytest

from protoadapt import prototypes
from protoadapt.numerics import l2_normalize
from protoadapt.prototypes import TargetPrototypes, ema_update, init_target_prototypes


# -- source prototypes ---------------------------------------------------------


def frozen_features(m, x):
    f, _ = m.forward(x, mode="frozen")
    return f.value


def test_source_prototypes_are_per_class_means(small_setup):
    m, (xt, yt) = small_setup["model"], small_setup["train"]
    built = prototypes.build_source_prototypes(m, xt, yt, seed=0)
    feats = frozen_features(m, xt)
    for c in range(m.config.num_classes):
        np.testing.assert_allclose(built.matrix[c], feats[yt == c].mean(axis=0), atol=1e-10)
        assert built.counts[c] == (yt == c).sum()


def test_single_sample_class_prototype_equals_feature(small_setup):
    m = small_setup["model"]
    xt, yt = small_setup["train"]
    keep = np.concatenate([np.flatnonzero(yt == 0)[:1],
                           np.flatnonzero(yt != 0)])
    built = prototypes.build_source_prototypes(m, xt[keep], yt[keep], seed=0)
    np.testing.assert_allclose(built.matrix[0],
                               frozen_features(m, xt[keep][:1])[0], atol=1e-10)


def test_cap_sampling_deterministic(small_setup):
    m, (xt, yt) = small_setup["model"], small_setup["train"]
    a = prototypes.build_source_prototypes(m, xt, yt, cap=200, seed=3)
    b = prototypes.build_source_prototypes(m, xt, yt, cap=200, seed=3)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert a.counts.sum() == 200


def test_missing_class_after_cap_rejected(small_setup):
    m, (xt, yt) = small_setup["model"], small_setup["train"]
    mask = yt != 4
    with pytest.raises(ValueError):
        prototypes.build_source_prototypes(m, xt[mask], yt[mask], seed=0)


def test_source_prototypes_immutable(small_setup):
    m, (xt, yt) = small_setup["model"], small_setup["train"]
    built = prototypes.build_source_prototypes(m, xt, yt, seed=0)
    with pytest.raises(ValueError):
        built.matrix[0, 0] = 1.0


# -- target prototypes -----------------------------------------------------------


def test_init_normalizes_head_rows():
    head = np.array([[3.0, 4.0], [0.0, 2.0]])
    protos = init_target_prototypes(head)
    np.testing.assert_allclose(protos.matrix[0], [0.6, 0.8], atol=1e-12)
    np.testing.assert_allclose(protos.matrix[1], [0.0, 1.0], atol=1e-12)
    assert protos.matrix.shape == head.shape


def test_init_keeps_unit_rows():
    head = np.eye(3)
    np.testing.assert_allclose(init_target_prototypes(head).matrix, head, atol=1e-12)


def test_init_rejects_zero_row():
    with pytest.raises(ValueError):
        init_target_prototypes(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_ema_single_feature_blend():
    protos = TargetPrototypes(matrix=np.eye(3), alpha=0.996)
    ema_update(protos, np.array([[0.0, 1.0, 0.0]]), np.array([0]))
    np.testing.assert_allclose(protos.matrix[0], [0.996, 0.004, 0.0], atol=1e-12)
    np.testing.assert_array_equal(protos.matrix[1], [0.0, 1.0, 0.0])


def test_ema_averages_then_normalizes():
    protos = TargetPrototypes(matrix=np.eye(2), alpha=0.5)
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    ema_update(protos, feats, np.array([1, 1]))
    s = 1.0 / np.sqrt(2.0)
    np.testing.assert_allclose(protos.matrix[1], [0.5 * s, 0.5 + 0.5 * s], atol=1e-12)


def test_ema_empty_set_is_noop():
    protos = TargetPrototypes(matrix=np.eye(2), alpha=0.5)
    before = protos.matrix.copy()
    ema_update(protos, np.empty((0, 2)), np.empty(0, dtype=int))
    np.testing.assert_array_equal(protos.matrix, before)


def test_ema_rejects_bad_label():
    protos = TargetPrototypes(matrix=np.eye(2), alpha=0.5)
    with pytest.raises(ValueError):
        ema_update(protos, np.ones((1, 2)), np.array([2]))
    with pytest.raises(ValueError):
        ema_update(protos, np.ones((1, 2)), np.array([-1]))


def test_fixed_point_contraction_at_alpha():
    alpha = 0.996
    protos = TargetPrototypes(matrix=np.eye(4), alpha=alpha)
    v = np.array([0.3, -0.4, 0.5, 1.0])
    u = l2_normalize(v)
    err = np.linalg.norm(protos.matrix[2] - u)
    for _ in range(100):
        ema_update(protos, v[None, :], np.array([2]))
        new_err = np.linalg.norm(protos.matrix[2] - u)
        assert abs(new_err / err - alpha) < 1e-9
        err = new_err


def test_norm_bound_under_random_updates(rng):
    protos = init_target_prototypes(rng.normal(size=(5, 8)), alpha=0.9)
    for _ in range(200):
        r = int(rng.integers(1, 6))
        feats = rng.normal(size=(r, 8)) * rng.uniform(0.1, 10)
        labels = rng.integers(0, 5, size=r)
        ema_update(protos, feats, labels)
        norms = np.linalg.norm(protos.matrix, axis=1)
        assert np.all(norms > 0) and np.all(norms <= 1 + 1e-9)


def test_export_csv_roundtrip(tmp_path, small_setup):
    m, (xt, yt) = small_setup["model"], small_setup["train"]
    source = prototypes.build_source_prototypes(m, xt, yt, seed=0)
    target = init_target_prototypes(m.head.value)
    gt = np.arange(source.matrix.size, dtype=float).reshape(source.matrix.shape)
    path = tmp_path / "protos.csv"
    prototypes.export_csv(path, source, target, gt)
    import csv
    with open(path) as fh:
        rows = list(csv.reader(fh))
    c, d = source.matrix.shape
    assert rows[0] == ["kind", "class"] + [f"v{i}" for i in range(d)]
    assert len(rows) == 1 + 3 * c
    kinds = {r[0] for r in rows[1:]}
    assert kinds == {"source", "target", "target-gt"}
    row = next(r for r in rows[1:] if r[0] == "source" and r[1] == "2")
    np.testing.assert_allclose([float(v) for v in row[2:]], source.matrix[2], atol=0)


def test_source_matrix_hash_stable(small_setup):
    m, (xt, yt) = small_setup["model"], small_setup["train"]
    built = prototypes.build_source_prototypes(m, xt, yt, seed=0)
    h1 = hashlib.sha256(built.matrix.tobytes()).hexdigest()
    # touching target prototypes must not affect the frozen source side
    target = init_target_prototypes(m.head.value)
    ema_update(target, np.ones((3, m.config.feature_dim)), np.array([0, 1, 2]))
    assert hashlib.sha256(built.matrix.tobytes()).hexdigest() == h1
