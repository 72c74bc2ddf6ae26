import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from library.errors import ConfigurationError, TrainingDivergedError
from library.log import logger
from library.nn import Parameter

# Relative CV-loss improvement below which new-bob starts decaying
NEWBOB_THRESHOLD = 0.005


def check_finite_gradients(params: Dict[str, Parameter]):
    for name, param in params.items():
        if not np.all(np.isfinite(param.grad)):
            raise TrainingDivergedError(f"non-finite gradient in {name}")


def global_grad_norm(params: Dict[str, Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))


def clip_grad_norm(params: Dict[str, Parameter], max_norm: float) -> float:
    """ Rescale all gradients so their global L2 norm is at most max_norm, returns the norm before clipping """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for param in params.values():
            param.grad *= scale
    return norm


def sgd_step(params: Dict[str, Parameter], lr: float):
    for param in params.values():
        param.value -= lr * param.grad
        param.version += 1


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Parameter], lr: float, state: AdamState):
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        m = state.first_moment.setdefault(name, np.zeros_like(param.value))
        v = state.second_moment.setdefault(name, np.zeros_like(param.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * param.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * param.grad * param.grad
        param.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.version += 1


class Optimizer(ABC):
    default_lr = 0.0
    default_decay = 0.0

    def __init__(self, params: Dict[str, Parameter], lr: Optional[float] = None):
        self.params = params
        self.lr = self.default_lr if lr is None else lr
        if not self.lr > 0.0:
            raise ConfigurationError(f"train.initial_lr must be > 0, got {self.lr}")

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def clip(self, max_norm: Optional[float]) -> float:
        if max_norm is None or max_norm <= 0:
            return global_grad_norm(self.params)
        return clip_grad_norm(self.params, max_norm)

    def step(self):
        check_finite_gradients(self.params)
        self.update()

    @abstractmethod
    def update(self):
        pass


class Sgd(Optimizer):
    default_lr = 0.05
    default_decay = 0.8

    def update(self):
        sgd_step(self.params, self.lr)


class Adam(Optimizer):
    default_lr = 1e-3
    default_decay = 0.25

    def __init__(self, params: Dict[str, Parameter], lr: Optional[float] = None):
        super().__init__(params, lr)
        self.state = AdamState()

    def update(self):
        adam_step(self.params, self.lr, self.state)


OPTIMIZERS = {"sgd": Sgd, "adam": Adam}


def build_optimizer(name: str, params: Dict[str, Parameter], lr: Optional[float] = None) -> Optimizer:
    try:
        return OPTIMIZERS[name](params, lr)
    except KeyError:
        raise ConfigurationError(f"train.optimizer must be one of {sorted(OPTIMIZERS)}, got '{name}'")


@dataclass
class NewBobState:
    current_lr: float
    best_cv_loss: float = math.inf
    decay_triggered: bool = False
    history: List[Tuple[int, float, float]] = field(default_factory=list)


def newbob_update(state: NewBobState, cv_loss: float, decay_factor: float,
                  threshold: float = NEWBOB_THRESHOLD, epoch: Optional[int] = None) -> float:
    """
    Classic new-bob: keep the rate while the CV loss improves by at least `threshold`
    (relative), then decay by `decay_factor` and keep decaying every epoch after that.
    """
    if not math.isfinite(cv_loss):
        raise TrainingDivergedError(f"cross-validation loss is {cv_loss}")
    if not 0.0 < decay_factor < 1.0:
        raise ConfigurationError(f"decay factor must be in (0, 1), got {decay_factor}")
    epoch = len(state.history) + 1 if epoch is None else epoch
    state.history.append((epoch, cv_loss, state.current_lr))
    if not state.decay_triggered and math.isfinite(state.best_cv_loss):
        improvement = (state.best_cv_loss - cv_loss) / abs(state.best_cv_loss) if state.best_cv_loss else 0.0
        if improvement < threshold:
            state.decay_triggered = True
            logger.info(f"CV loss improved by {improvement:.2%} only, starting learning rate decay")
    state.best_cv_loss = min(state.best_cv_loss, cv_loss)
    if state.decay_triggered:
        state.current_lr *= decay_factor
    return state.current_lr
