"""
Training criteria: CTC (log-space forward-backward), framewise cross-entropy
and their lambda-weighted combination over whole utterances.

All gradients are taken with respect to the pre-softmax activations of the
head that produced `logprobs`.
"""
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit
from scipy.special import logsumexp

from library.errors import ConfigurationError, ContractViolation, InfeasibleTargetError, InvalidTargetError, \
    NumericError

BLANK = 0
NEG_INF = -math.inf

# Row normalization tolerance; loose enough for float32 model outputs
NORMALIZATION_TOLERANCE = 1e-5


@dataclass
class LossResult:
    loss: float
    grad_logits: np.ndarray


@dataclass
class CtcTrellis:
    extended: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    log_likelihood: float


@dataclass
class CombinedLoss:
    loss: float
    ctc_scale: float
    ce_scale: float


@njit(cache=True)
def log_add(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _alpha_recursion(emit, skip):
    steps, states = emit.shape
    alpha = np.full((steps, states), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    alpha[0, 1] = emit[0, 1]
    for t in range(1, steps):
        for s in range(states):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = log_add(acc, alpha[t - 1, s - 1])
            if skip[s]:
                acc = log_add(acc, alpha[t - 1, s - 2])
            if acc != NEG_INF:
                alpha[t, s] = acc + emit[t, s]
    return alpha


@njit(cache=True)
def _beta_recursion(emit, skip):
    steps, states = emit.shape
    beta = np.full((steps, states), NEG_INF)
    beta[steps - 1, states - 1] = emit[steps - 1, states - 1]
    beta[steps - 1, states - 2] = emit[steps - 1, states - 2]
    for t in range(steps - 2, -1, -1):
        for s in range(states):
            acc = beta[t + 1, s]
            if s + 1 < states:
                acc = log_add(acc, beta[t + 1, s + 1])
            if s + 2 < states and skip[s + 2]:
                acc = log_add(acc, beta[t + 1, s + 2])
            if acc != NEG_INF:
                beta[t, s] = acc + emit[t, s]
    return beta


def check_labels(labels: Sequence[int], vocabulary_size: int) -> np.ndarray:
    z = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.size == 0:
        raise InvalidTargetError("label sequence is empty")
    if np.any(z < 1) or np.any(z >= vocabulary_size):
        raise InvalidTargetError(f"labels must lie in [1, {vocabulary_size - 1}] (0 is blank), got {z.tolist()}")
    return z


def min_frames(labels: Sequence[int]) -> int:
    """ Shortest path length: one frame per label plus a blank between repeats """
    z = np.asarray(labels)
    return int(z.size + np.count_nonzero(z[1:] == z[:-1]))


def extend_with_blanks(labels: Sequence[int]) -> np.ndarray:
    z = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.size == 0:
        raise InvalidTargetError("label sequence is empty")
    extended = np.full(2 * z.size + 1, BLANK, dtype=np.int64)
    extended[1::2] = z
    return extended


def _skip_transitions(extended: np.ndarray) -> np.ndarray:
    skip = np.zeros(extended.size, dtype=np.bool_)
    skip[2:] = (extended[2:] != BLANK) & (extended[2:] != extended[:-2])
    return skip


def _check_normalized(logprobs: np.ndarray):
    if logprobs.ndim != 2 or logprobs.shape[0] < 1:
        raise ContractViolation(f"expected a non-empty T x V log-probability matrix, got {logprobs.shape}")
    with np.errstate(divide="ignore"):
        totals = logsumexp(logprobs, axis=1)
    if not np.all(np.abs(totals) < NORMALIZATION_TOLERANCE):
        raise ContractViolation("log-probability rows are not normalized")


def _occupancy_terms(trellis: CtcTrellis, emit: np.ndarray) -> np.ndarray:
    unreachable = np.isneginf(trellis.alpha) | np.isneginf(trellis.beta)
    # alpha and beta both include the emission at t, remove one copy
    with np.errstate(invalid="ignore"):
        terms = trellis.alpha + trellis.beta - emit
    terms[unreachable] = NEG_INF
    return terms


def ctc_loss_and_grad(logprobs: np.ndarray, labels: Sequence[int]):
    """ Returns (LossResult, CtcTrellis) for one utterance """
    _check_normalized(logprobs)
    steps, vocab = logprobs.shape
    z = check_labels(labels, vocab)
    needed = min_frames(z)
    if steps < needed:
        raise InfeasibleTargetError(f"{steps} frames cannot emit {z.size} labels (need at least {needed})")

    lp = np.asarray(logprobs, dtype=np.float64)
    extended = extend_with_blanks(z)
    emit = np.ascontiguousarray(lp[:, extended])
    skip = _skip_transitions(extended)
    alpha = _alpha_recursion(emit, skip)
    beta = _beta_recursion(emit, skip)
    log_likelihood = float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))
    if not math.isfinite(log_likelihood):
        raise NumericError("every valid CTC path has zero probability")
    trellis = CtcTrellis(extended, alpha, beta, log_likelihood)

    terms = _occupancy_terms(trellis, emit)
    log_occupancy = np.full((steps, vocab), NEG_INF)
    with np.errstate(divide="ignore"):
        for symbol in np.unique(extended):
            log_occupancy[:, symbol] = logsumexp(terms[:, extended == symbol], axis=1)
    grad = np.exp(lp) - np.exp(log_occupancy - log_likelihood)
    return LossResult(-log_likelihood, grad.astype(logprobs.dtype, copy=False)), trellis


def sequence_log_likelihood(logprobs: np.ndarray, labels: Sequence[int]) -> float:
    """ log p(labels | x) over every CTC path, -inf when there are too few frames """
    lp = np.asarray(logprobs, dtype=np.float64)
    z = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.size == 0:
        return float(np.sum(lp[:, BLANK]))
    if lp.shape[0] < min_frames(z):
        return NEG_INF
    extended = extend_with_blanks(z)
    alpha = _alpha_recursion(np.ascontiguousarray(lp[:, extended]), _skip_transitions(extended))
    return float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))


def trellis_consistency_check(trellis: CtcTrellis, logprobs: np.ndarray) -> np.ndarray:
    """ Per-timestep total log-likelihood recovered from alpha and beta """
    emit = np.asarray(logprobs, dtype=np.float64)[:, trellis.extended]
    with np.errstate(divide="ignore"):
        return logsumexp(_occupancy_terms(trellis, emit), axis=1)


def framewise_ce_loss(logprobs: np.ndarray, frame_labels: Sequence[int], normalize: bool = False) -> LossResult:
    labels = np.asarray(frame_labels, dtype=np.int64).reshape(-1)
    steps, states = logprobs.shape
    if labels.size != steps:
        raise InvalidTargetError(f"{labels.size} frame labels for {steps} frames")
    if np.any(labels < 0) or np.any(labels >= states):
        raise InvalidTargetError(f"frame labels must lie in [0, {states - 1}]")
    rows = np.arange(steps)
    loss = -float(np.sum(logprobs[rows, labels], dtype=np.float64))
    grad = np.exp(logprobs)
    grad[rows, labels] -= 1.0
    if normalize:
        loss /= steps
        grad /= steps
    return LossResult(loss, grad)


def combine_losses(ctc: LossResult, ce: LossResult, lam: float) -> CombinedLoss:
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must be in [0, 1], got {lam}")
    return CombinedLoss((1.0 - lam) * ctc.loss + lam * ce.loss, 1.0 - lam, lam)
