import math

import numpy as np
import pytest

from library.errors import ConfigurationError, ContractViolation, InfeasibleTargetError, InvalidTargetError
from library.losses import LossResult, combine_losses, ctc_loss_and_grad, extend_with_blanks, framewise_ce_loss, \
    min_frames, sequence_log_likelihood, trellis_consistency_check
from library.nn import log_softmax


def _random_instances(count, seed=0):
    rng = np.random.default_rng(seed)
    made = 0
    while made < count:
        vocab = int(rng.integers(2, 4))
        length = int(rng.integers(1, 4))
        labels = rng.integers(1, vocab, size=length)
        needed = min_frames(labels)
        if needed > 6:
            continue
        steps = int(rng.integers(needed, 7))
        logits = rng.normal(size=(steps, vocab))
        made += 1
        yield log_softmax(logits), labels


def test_matches_brute_force_enumeration(ctc_oracle):
    for logprobs, labels in _random_instances(300):
        result, _ = ctc_loss_and_grad(logprobs, labels)
        assert abs(-result.loss - ctc_oracle(logprobs, labels)) < 1e-9


def test_alpha_beta_consistent_over_time():
    for logprobs, labels in _random_instances(200, seed=1):
        result, trellis = ctc_loss_and_grad(logprobs, labels)
        per_step = trellis_consistency_check(trellis, logprobs)
        np.testing.assert_allclose(per_step, trellis.log_likelihood, rtol=0, atol=1e-9)
        assert trellis.log_likelihood == pytest.approx(-result.loss)


def test_ctc_gradient(finite_difference, rel_error):
    rng = np.random.default_rng(2)
    for _ in range(20):
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(1, 4, size=int(rng.integers(1, 3)))

        def loss():
            return ctc_loss_and_grad(log_softmax(logits), labels)[0].loss

        result, _ = ctc_loss_and_grad(log_softmax(logits), labels)
        assert rel_error(result.grad_logits, finite_difference(loss, logits)) < 1e-4


def test_single_frame_single_label():
    logprobs = np.log(np.array([[0.2, 0.5, 0.3]]))
    result, _ = ctc_loss_and_grad(logprobs, [1])
    assert result.loss == pytest.approx(-math.log(0.5))


def test_two_uniform_frames_one_label():
    result, _ = ctc_loss_and_grad(np.log(np.full((2, 2), 0.5)), [1])
    assert result.loss == pytest.approx(-math.log(0.75), abs=1e-12)
    assert result.loss == pytest.approx(0.2877, abs=1e-4)


def test_gradient_rows_sum_to_zero():
    for logprobs, labels in _random_instances(100, seed=4):
        result, _ = ctc_loss_and_grad(logprobs, labels)
        np.testing.assert_allclose(result.grad_logits.sum(axis=1), 0.0, atol=1e-9)
        frames = np.zeros(logprobs.shape[0], dtype=np.int64)
        ce = framewise_ce_loss(logprobs, frames)
        np.testing.assert_allclose(ce.grad_logits.sum(axis=1), 0.0, atol=1e-9)


def test_feasible_exactly_when_enough_frames():
    rng = np.random.default_rng(5)
    for _ in range(100):
        labels = rng.integers(1, 3, size=int(rng.integers(1, 5)))
        repeats = sum(int(a == b) for a, b in zip(labels[:-1], labels[1:]))
        for steps in range(1, 9):
            logprobs = log_softmax(rng.normal(size=(steps, 3)))
            if steps >= len(labels) + repeats:
                result, _ = ctc_loss_and_grad(logprobs, labels)
                assert math.isfinite(result.loss)
                assert sequence_log_likelihood(logprobs, labels) == pytest.approx(-result.loss, abs=1e-12)
            else:
                with pytest.raises(InfeasibleTargetError):
                    ctc_loss_and_grad(logprobs, labels)
                assert sequence_log_likelihood(logprobs, labels) == -math.inf


def test_empty_sequence_likelihood_is_all_blank_path():
    logprobs = np.log(np.array([[0.6, 0.4], [0.3, 0.7]]))
    assert sequence_log_likelihood(logprobs, []) == pytest.approx(math.log(0.18))


def test_repeated_labels_need_a_blank():
    assert min_frames([1, 1]) == 3
    assert min_frames([1, 2]) == 2
    with pytest.raises(InfeasibleTargetError):
        ctc_loss_and_grad(np.log(np.full((2, 2), 0.5)), [1, 1])


def test_invalid_targets():
    logprobs = np.log(np.full((4, 3), 1 / 3))
    with pytest.raises(InvalidTargetError):
        ctc_loss_and_grad(logprobs, [])
    with pytest.raises(InvalidTargetError):
        ctc_loss_and_grad(logprobs, [3])
    with pytest.raises(InvalidTargetError):
        ctc_loss_and_grad(logprobs, [0])


def test_unnormalized_rows_rejected():
    with pytest.raises(ContractViolation):
        ctc_loss_and_grad(np.zeros((3, 3)), [1])


def test_extend_with_blanks():
    np.testing.assert_array_equal(extend_with_blanks([2, 1]), [0, 2, 0, 1, 0])


def test_framewise_ce_value_and_gradient(finite_difference, rel_error):
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 3, 1, 2])

    def loss():
        return framewise_ce_loss(log_softmax(logits), labels).loss

    result = framewise_ce_loss(log_softmax(logits), labels)
    expected = -sum(log_softmax(logits)[t, labels[t]] for t in range(5))
    assert result.loss == pytest.approx(expected)
    assert rel_error(result.grad_logits, finite_difference(loss, logits)) < 1e-4

    normalized = framewise_ce_loss(log_softmax(logits), labels, normalize=True)
    assert normalized.loss == pytest.approx(result.loss / 5)


def test_framewise_ce_length_mismatch():
    with pytest.raises(InvalidTargetError):
        framewise_ce_loss(np.log(np.full((3, 2), 0.5)), [0, 1])


def test_combined_loss_formula():
    ctc = LossResult(2.0, np.zeros(1))
    ce = LossResult(1.0, np.zeros(1))
    assert combine_losses(ctc, ce, 0.9).loss == 1.1
    assert combine_losses(ctc, ce, 0.0).loss == 2.0
    assert combine_losses(ctc, ce, 1.0).loss == 1.0
    combined = combine_losses(ctc, ce, 0.9)
    assert combined.ce_scale == 0.9
    with pytest.raises(ConfigurationError):
        combine_losses(ctc, ce, 1.5)
