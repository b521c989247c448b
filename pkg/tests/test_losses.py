from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kdssl.data import ISIC2018_COUNTS
from kdssl.errors import ConfigurationError, InvalidInputError, InvalidParameterError, InvalidStateError
from kdssl.losses import SoftTargets, class_weights, combined_loss, entropy_rows, kd_loss, weighted_ce
from kdssl.numkernel import finite_diff_grad, relative_error, tempered_softmax

logit_rows = arrays(np.float64, (5, 4), elements=st.floats(-8, 8, allow_nan=False))


def targets_from(z, T):
    return SoftTargets(tempered_softmax(z, T), T)


def test_class_weights_equal_counts():
    np.testing.assert_allclose(class_weights([4, 4, 4]), [1 / 3] * 3, atol=1e-15)


def test_class_weights_80_10_10():
    # 1/80 : 1/10 : 1/10 = 1 : 8 : 8
    np.testing.assert_allclose(class_weights([80, 10, 10]), [1 / 17, 8 / 17, 8 / 17], atol=1e-15)
    np.testing.assert_allclose(class_weights([80, 10, 10]), [0.0588, 0.4706, 0.4706], atol=1e-4)


def test_class_weights_isic2018_dermatofibroma():
    inv = [Fraction(1, n) for n in ISIC2018_COUNTS]
    oracle = [float(v / sum(inv)) for v in inv]
    w = class_weights(ISIC2018_COUNTS)
    np.testing.assert_allclose(w, oracle, atol=1e-15)
    assert abs(w[5] - 0.367) < 1e-3


@given(st.lists(st.integers(1, 10_000), min_size=2, max_size=10))
def test_class_weights_positive_and_normalized(counts):
    w = class_weights(counts)
    assert np.all(w > 0)
    assert abs(w.sum() - 1.0) <= 1e-12


def test_class_weights_reject_empty_class():
    with pytest.raises(ConfigurationError):
        class_weights([5, 0, 3])


def test_weighted_ce_single_example():
    loss, _ = weighted_ce([[0.0, 0.0]], [0], [0.5, 0.5])
    assert abs(loss - 0.5 * np.log(2)) < 1e-15


def test_weighted_ce_near_perfect_prediction_goes_to_zero():
    loss, _ = weighted_ce([[60.0, 0.0, 0.0]], [0], [0.2, 0.4, 0.4])
    assert 0.0 <= loss < 1e-20


def test_weighted_ce_rejects_bad_labels():
    with pytest.raises(InvalidInputError):
        weighted_ce(np.zeros((2, 3)), [0, 3], [0.3, 0.3, 0.4])
    with pytest.raises(InvalidInputError):
        weighted_ce(np.zeros((2, 3)), [0], [0.3, 0.3, 0.4])


def test_kd_loss_worked_example():
    # ensemble [2,0] and student [1,0] at T=2, evaluated from scratch
    T = 2.0
    pt = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    qs = np.exp([0.5, 0.0]) / np.exp([0.5, 0.0]).sum()
    oracle = -T * T * float(np.sum(pt * np.log(qs)))
    loss, _ = kd_loss([[1.0, 0.0]], targets_from(np.array([[2.0, 0.0]]), T), T)
    assert abs(loss - oracle) < 1e-14
    assert abs(loss - 2.434) < 1e-3


def test_kd_uniform_student_equals_t2_log_c(rng):
    for T in (0.5, 1.0, 2.0, 4.0):
        tg = targets_from(rng.normal(size=(6, 5)) * 3, T)
        loss, _ = kd_loss(np.full((6, 5), 0.7), tg, T)
        assert abs(loss - T * T * np.log(5)) <= 1e-12


def test_kd_equal_logits_gives_entropy(rng):
    z = rng.normal(size=(4, 3))
    tg = targets_from(z, 2.0)
    loss, d = kd_loss(z, tg, 2.0)
    assert abs(loss - 4.0 * entropy_rows(tg.probs).mean()) < 1e-12
    np.testing.assert_allclose(d, 0.0, atol=1e-15)


@given(logit_rows, logit_rows, st.floats(0.25, 8))
def test_kd_gibbs_bound(student, teacher, T):
    tg = targets_from(teacher, T)
    loss, _ = kd_loss(student, tg, T)
    assert loss - T * T * entropy_rows(tg.probs).mean() >= -1e-12


@given(logit_rows, logit_rows)
def test_gradient_rows_sum_to_zero(student, teacher):
    _, d_kd = kd_loss(student, targets_from(teacher, 2.0), 2.0)
    _, d_ce = weighted_ce(student, [0, 1, 2, 3, 0], [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(d_kd.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(d_ce.sum(axis=1), 0.0, atol=1e-12)


@given(logit_rows, logit_rows, st.floats(-30, 30))
def test_losses_shift_invariant(student, teacher, c):
    tg = targets_from(teacher, 2.0)
    y, w = [0, 1, 2, 3, 1], [0.25] * 4
    assert abs(kd_loss(student + c, tg, 2.0)[0] - kd_loss(student, tg, 2.0)[0]) < 1e-9
    assert abs(weighted_ce(student + c, y, w)[0] - weighted_ce(student, y, w)[0]) < 1e-9


def test_kd_temperature_mismatch_is_state_error(rng):
    tg = targets_from(rng.normal(size=(2, 3)), 2.0)
    with pytest.raises(InvalidStateError):
        kd_loss(np.zeros((2, 3)), tg, 1.0)


def test_soft_targets_are_read_only(rng):
    tg = targets_from(rng.normal(size=(2, 3)), 1.0)
    with pytest.raises(ValueError):
        tg.probs[0, 0] = 1.0
    with pytest.raises(InvalidInputError):
        SoftTargets(np.array([[0.5, 0.6]]), 1.0)


def test_combined_lambda_zero_is_ce_bit_for_bit(rng):
    z = rng.normal(size=(7, 4))
    y = rng.integers(0, 4, 7)
    w = class_weights([5, 3, 2, 9])
    tg = targets_from(rng.normal(size=(7, 4)), 2.0)
    ce, d_ce = weighted_ce(z, y, w)
    loss, d = combined_loss(z, y, w, tg, 0.0)
    assert loss == ce
    assert np.array_equal(d, d_ce)


def test_combined_with_zero_kd_equals_ce():
    # one-hot targets and a student that matches them to machine precision
    z = np.array([[400.0, 0.0], [0.0, 400.0]])
    tg = SoftTargets(np.eye(2), 1.0)
    ce, _ = weighted_ce(z, [0, 1], [0.5, 0.5])
    loss, _ = combined_loss(z, [0, 1], [0.5, 0.5], tg, 1.0)
    assert loss == ce


def test_combined_parts_and_negative_lambda(rng):
    z = rng.normal(size=(3, 3))
    tg = targets_from(rng.normal(size=(3, 3)), 2.0)
    loss, _, parts = combined_loss(z, [0, 1, 2], [1 / 3] * 3, tg, 10.0, return_parts=True)
    assert abs(loss - (parts["ce"] + 10.0 * parts["kd"])) < 1e-12
    with pytest.raises(InvalidParameterError):
        combined_loss(z, [0, 1, 2], [1 / 3] * 3, tg, -1.0)


@pytest.mark.parametrize("trial", range(20))
def test_loss_gradients_match_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    N, C = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    T = float(rng.uniform(0.5, 4.0))
    lam = float(rng.uniform(0.0, 10.0))
    z = rng.normal(size=(N, C)) * 2
    y = rng.integers(0, C, N)
    w = class_weights(rng.integers(1, 50, C))
    tg = targets_from(rng.normal(size=(N, C)) * 2, T)
    for fn in (lambda v: weighted_ce(v, y, w), lambda v: kd_loss(v, tg, T),
               lambda v: combined_loss(v, y, w, tg, lam)):
        _, d = fn(z)
        assert relative_error(d, finite_diff_grad(lambda v: fn(v)[0], z)) <= 1e-6
