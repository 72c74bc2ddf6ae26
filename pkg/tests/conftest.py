import itertools
import math
import os
import sys

import numpy as np
import pytest
from scipy.special import logsumexp

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from library.data import SyntheticTaskSpec  # noqa: E402
from library.decoder import collapse  # noqa: E402


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """ Central differences of the scalar f() w.r.t. every entry of x (x is perturbed in place) """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        up = f()
        flat[i] = original - eps
        down = f()
        flat[i] = original
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def brute_force_ctc(logprobs: np.ndarray, labels) -> float:
    """ log p(labels | x) by enumerating all V^T paths """
    steps, vocab = logprobs.shape
    target = tuple(int(z) for z in labels)
    scores = [sum(logprobs[t, s] for t, s in enumerate(path))
              for path in itertools.product(range(vocab), repeat=steps) if collapse(path) == target]
    return float(logsumexp(scores)) if scores else -math.inf


def random_logprobs(rng: np.random.Generator, steps: int, vocab: int) -> np.ndarray:
    logits = rng.normal(size=(steps, vocab))
    return logits - logsumexp(logits, axis=1, keepdims=True)


@pytest.fixture
def finite_difference():
    return numeric_gradient


@pytest.fixture
def rel_error():
    return relative_error


@pytest.fixture
def ctc_oracle():
    return brute_force_ctc


@pytest.fixture
def make_logprobs():
    return random_logprobs


@pytest.fixture
def tiny_spec():
    return SyntheticTaskSpec(vocab_size=4, states_per_label=2, feature_dim=4, duration_range=(1, 2),
                             noise_sigma=0.5, label_length_range=(1, 3), num_utterances=12,
                             num_conversations=3, seed=7)


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("MTL_NUM_THREADS", "1")
    monkeypatch.delenv("MTL_DETERMINISTIC", raising=False)
