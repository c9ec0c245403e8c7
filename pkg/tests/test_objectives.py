import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtask.errors import NoNegativesError, ShapeError
from dualtask.numeric import grad_check, sigmoid
from dualtask.objectives import (
    LabelVector,
    LossHyperParams,
    bce_per_class,
    class_sensitive_loss,
    combined_loss,
    plain_bce_loss,
    ranking_loss,
    ranking_loss_terms,
)


def _ranking_oracle(phi, tau, margin, ids=None):
    """Direct double loop over every pair, hardest negatives by max."""
    B = phi.shape[0]
    ids = list(range(B)) if ids is None else list(ids)

    def cos(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

    total = 0.0
    for i in range(B):
        pos = cos(phi[i], tau[i])
        negs_v = [cos(phi[j], tau[i]) for j in range(B) if ids[j] != ids[i]]
        negs_q = [cos(phi[i], tau[j]) for j in range(B) if ids[j] != ids[i]]
        if negs_v:
            total += max(0.0, margin + max(negs_v) - pos) + max(0.0, margin + max(negs_q) - pos)
    return total / B


def test_ranking_loss_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        B, d = rng.integers(2, 7), rng.integers(2, 6)
        phi, tau = rng.normal(size=(B, d)), rng.normal(size=(B, d))
        loss, _, _ = ranking_loss(phi, tau, 0.2)
        assert loss == pytest.approx(_ranking_oracle(phi, tau, 0.2), abs=1e-12)


def test_ranking_loss_masks_same_video_negatives():
    rng = np.random.default_rng(1)
    phi, tau = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    ids = ["a", "a", "b", "c", "c"]
    loss, _, _ = ranking_loss(phi, tau, 0.2, ids)
    assert loss == pytest.approx(_ranking_oracle(phi, tau, 0.2, ids), abs=1e-12)


def test_ranking_loss_zero_for_well_separated_pairs():
    E = np.eye(4)
    loss, dphi, dtau = ranking_loss(E, E, 0.2)
    assert loss == 0.0
    np.testing.assert_array_equal(dphi, 0.0)
    np.testing.assert_array_equal(dtau, 0.0)


def test_ranking_loss_needs_negatives():
    with pytest.raises(NoNegativesError):
        ranking_loss(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(ShapeError):
        ranking_loss(np.ones((2, 3)), np.ones((2, 4)))


def test_ranking_loss_gradcheck():
    rng = np.random.default_rng(2)
    phi, tau = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    assert grad_check(lambda z: ranking_loss(z, tau, 0.5)[:2], phi) < 1e-6
    assert grad_check(lambda z: (lambda r: (r[0], r[2]))(ranking_loss(phi, z, 0.5)), tau) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_ranking_loss_nonnegative_and_scale_invariant(B, d, margin, seed):
    rng = np.random.default_rng(seed)
    phi, tau = rng.normal(size=(B, d)), rng.normal(size=(B, d))
    per_pair, _ = ranking_loss_terms(phi, tau, margin)
    assert np.all(per_pair >= 0)
    scaled, _ = ranking_loss_terms(3.0 * phi, 0.5 * tau, margin)
    np.testing.assert_allclose(per_pair, scaled, atol=1e-12)


def test_bce_per_class_known_values():
    np.testing.assert_allclose(bce_per_class([0.5, 0.5], [1, 0]), [np.log(2), np.log(2)])
    assert np.isfinite(bce_per_class([0.0, 1.0], [1, 0])).all()


def test_class_sensitive_hand_computed():
    p = np.array([0.9, 0.2, 0.4, 0.1])
    y = np.array([1, 0, 1, 0])
    expected = 0.2 * (-np.log(0.9) - np.log(0.4)) / 2 + 0.8 * (-np.log(0.8) - np.log(0.9)) / 2
    loss, _ = class_sensitive_loss(p, y, 0.2)
    assert loss == pytest.approx(expected, rel=1e-12)


def test_class_sensitive_empty_term_contributes_zero():
    p = np.array([0.3, 0.6])
    loss_all_neg, _ = class_sensitive_loss(p, [0, 0], 0.2)
    assert loss_all_neg == pytest.approx(0.8 * (-np.log(0.7) - np.log(0.4)) / 2)
    loss_all_pos, _ = class_sensitive_loss(p, [1, 1], 0.2)
    assert loss_all_pos == pytest.approx(0.2 * (-np.log(0.3) - np.log(0.6)) / 2)


def test_class_sensitive_balanced_half_equals_plain_bce():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.01, 0.99, size=10)
    y = np.array([1] * 5 + [0] * 5)
    assert class_sensitive_loss(p, y, 0.5)[0] == pytest.approx(plain_bce_loss(p, y)[0], abs=1e-9)


def test_class_sensitive_lambda_one_ignores_negatives():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.01, 0.99, size=8)
    y = (rng.random(8) < 0.4).astype(float)
    y[0] = 1.0
    _, grad = class_sensitive_loss(p, y, 1.0)
    assert np.all(grad[y == 0] == 0.0)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_class_sensitive_linear_in_lambda(l1, l2, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, size=6)
    y = np.array([1, 0, 0, 1, 0, 0])
    a = 0.3
    mixed = class_sensitive_loss(p, y, a * l1 + (1 - a) * l2)[0]
    assert mixed == pytest.approx(a * class_sensitive_loss(p, y, l1)[0] + (1 - a) * class_sensitive_loss(p, y, l2)[0],
                                  abs=1e-12)


def test_class_sensitive_gradcheck_wrt_logits():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 7))
    Y = (rng.random((3, 7)) < 0.3).astype(float)
    Y[:, 0] = 1.0

    def f(logits):
        loss, g = class_sensitive_loss(sigmoid(logits), Y, 0.2)
        return float(np.sum(loss)), g

    assert grad_check(f, z) < 1e-6

    def f_plain(logits):
        loss, g = plain_bce_loss(sigmoid(logits), Y)
        return float(np.sum(loss)), g

    assert grad_check(f_plain, z) < 1e-6


def test_clipped_predictions_get_zero_gradient():
    _, g = class_sensitive_loss(np.array([0.0, 1.0, 0.5]), np.array([1.0, 0.0, 1.0]), 0.2)
    assert g[0] == 0.0 and g[1] == 0.0 and g[2] != 0.0


def test_batched_loss_is_row_wise():
    rng = np.random.default_rng(6)
    P = rng.uniform(0.05, 0.95, size=(4, 5))
    Y = (rng.random((4, 5)) < 0.5).astype(float)
    rows, _ = class_sensitive_loss(P, Y, 0.2)
    for i in range(4):
        assert rows[i] == pytest.approx(class_sensitive_loss(P[i], Y[i], 0.2)[0])


def test_label_vector_and_hyperparams():
    lv = LabelVector.from_indices([0, 3], 5)
    assert lv.positive_count == 2 and lv.m == 5
    with pytest.raises(ValueError):
        LossHyperParams(lam=1.5)
    with pytest.raises(ValueError):
        LossHyperParams(margin=-0.1)


def test_combined_loss_mean_over_batch():
    assert combined_loss([1.0, 3.0], [0.5, 0.5]) == pytest.approx(2.5)
    assert combined_loss(1.0, 2.0) == 3.0
