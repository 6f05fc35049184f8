import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from instslam.contrastive import (LabeledFeatureSet, Margins, cross_pull_loss, gradient_check,
                                  hinge_clearance, intra_pull_loss, optimize_toy_embeddings,
                                  push_loss, random_feature_set, total_loss)
from instslam.embed_cluster import ClusterConfig, cluster_embeddings

M = Margins()


def one_mask(features):
    n = len(features)
    return LabeledFeatureSet(features, np.zeros(n, int), [0], [0])


def test_identical_features_give_zero_intra_loss():
    f = np.tile([0.6, 0.8, 0, 0, 0, 0, 0, 0], (4, 1))
    loss, grad = intra_pull_loss(one_mask(f), M)
    assert loss == 0.0 and not grad.any()


def test_orthogonal_pair_intra_loss_closed_form():
    f = np.eye(8)[:2]
    loss, _ = intra_pull_loss(one_mask(f), Margins(0.9, 0.2))
    assert loss == pytest.approx(0.9 - 1 / np.sqrt(2), abs=1e-12)


def two_masks(fa, fb, same_identity, views=(0, 1)):
    return LabeledFeatureSet(np.array([fa, fb], float), [0, 1], list(views),
                             [0, 0] if same_identity else [0, 1])


def test_cross_pull_zero_for_identical_centroids():
    e = np.eye(8)[0]
    assert cross_pull_loss(two_masks(e, e, True), M)[0] == 0.0


def test_cross_pull_zero_without_same_identity_pairs():
    e = np.eye(8)
    lfs = LabeledFeatureSet(e[:3], [0, 1, 2], [0, 0, 0], [0, 1, 2])
    assert cross_pull_loss(lfs, M)[0] == 0.0


def test_push_closed_forms():
    e = np.eye(8)
    assert push_loss(two_masks(e[0], e[1], False), Margins(0.9, 0.1))[0] == 0.0
    loss, _ = push_loss(two_masks(e[0], e[0], False), Margins(0.9, 0.2))
    assert loss == pytest.approx(0.8, abs=1e-12)


def test_cross_pull_closed_form():
    e = np.eye(8)
    loss, _ = cross_pull_loss(two_masks(e[0], e[1], True), Margins(0.9, 0.2))
    # two ordered pairs, each 0.9 - 0, divided by two centroids
    assert loss == pytest.approx(0.9, abs=1e-12)


def test_gradients_match_finite_differences():
    checked = 0
    for seed in range(30):
        lfs = random_feature_set(np.random.default_rng(seed))
        if hinge_clearance(lfs, M) < 1e-4:
            continue
        checked += 1
        errs = gradient_check(lfs, M)
        assert max(errs.values()) < 1e-5, errs
    assert checked >= 25


def test_gradients_with_step_1e5():
    lfs = random_feature_set(np.random.default_rng(99), n_identities=2, n_views=3, pixels_per_mask=3)
    assert hinge_clearance(lfs, M) > 1e-4
    assert max(gradient_check(lfs, M, h=1e-5).values()) < 1e-5


def test_losses_zero_on_margin_satisfying_configuration():
    e = np.eye(8)
    f = np.repeat(e[:3], 4, axis=0)
    lfs = LabeledFeatureSet(f, np.repeat(np.arange(6), 2), [0, 1] * 3, [0, 0, 1, 1, 2, 2])
    for fn in (intra_pull_loss, cross_pull_loss, push_loss):
        loss, grad = fn(lfs, M)
        assert loss == 0.0 and not grad.any()


def test_rotation_invariance():
    rng = np.random.default_rng(4)
    lfs = random_feature_set(rng)
    q = special_ortho_group.rvs(8, random_state=7)
    rotated = lfs.with_features(lfs.features @ q.T)
    for fn in (intra_pull_loss, cross_pull_loss, push_loss):
        assert abs(fn(lfs, M)[0] - fn(rotated, M)[0]) < 1e-9


@given(st.integers(0, 10_000))
def test_property_losses_nonnegative(seed):
    lfs = random_feature_set(np.random.default_rng(seed), n_identities=2, n_views=2, pixels_per_mask=3)
    for fn in (intra_pull_loss, cross_pull_loss, push_loss):
        assert fn(lfs, M)[0] >= 0.0


def test_optimization_separates_identities():
    rng = np.random.default_rng(0)
    lfs = random_feature_set(rng, n_identities=3, n_views=2, pixels_per_mask=5)
    out = optimize_toy_embeddings(lfs, M, steps=500)
    assert total_loss(out, M)[0] < total_loss(lfs, M)[0]
    mu = out.centroids()
    mu = mu / np.linalg.norm(mu, axis=1, keepdims=True)
    cos = mu @ mu.T
    same = out.identity_of[:, None] == out.identity_of[None, :]
    off = ~np.eye(len(mu), dtype=bool)
    assert cos[same & off].min() >= M.m_pull - 1e-3
    assert cos[~same].max() <= M.m_push + 1e-3
    # pixels sit within acos(0.9) of their centroid, so same-identity pixel
    # pairs have cosine above cos(2 acos 0.9) = 0.62; cluster just below that
    n = len(out.features)
    masks = cluster_embeddings(out.features.reshape(1, n, -1), None, ClusterConfig(0.6, 1, seed=0))
    ident = out.identity_of[out.mask_of]
    assert len(masks) == 3
    for m in masks:
        assert len(set(ident[m.flat].tolist())) == 1


def test_already_separated_set_stays_put():
    e = np.eye(8)
    f = np.repeat(e[:2], 3, axis=0)
    lfs = LabeledFeatureSet(f, [0, 0, 0, 1, 1, 1], [0, 0], [0, 1])
    out = optimize_toy_embeddings(lfs, M, steps=10)
    assert total_loss(out, M)[0] == 0.0
    np.testing.assert_array_equal(out.features, f)


def test_margin_validation():
    with pytest.raises(ValueError):
        Margins(0.2, 0.9)
    with pytest.raises(ValueError):
        Margins(1.5, 0.2)


def test_mask_without_pixels_rejected():
    with pytest.raises(ValueError):
        LabeledFeatureSet(np.eye(8)[:2], [0, 0], [0, 1], [0, 1])
