"""
Dense network building blocks with hand-derived backward passes.

Every layer owns its Parameters. Backward passes take an optional
`Gradients` buffer: when given, parameter gradients are accumulated into
the buffer (one buffer per utterance, reduced later in a fixed order),
otherwise straight into Parameter.grad.
"""
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from library.errors import ConfigurationError, InternalError, NumericError

DTYPES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(name: str):
    try:
        return DTYPES[name]
    except KeyError:
        raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}, got '{name}'")


class Direction(IntEnum):
    FORWARD = 0
    BACKWARD = 1


class Parameter:
    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        # Bumped on every in-place update so stale forward caches can be detected
        self.version = 0

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)

    def assign(self, value: np.ndarray):
        if value.shape != self.value.shape:
            raise ConfigurationError(f"{self.name}: shape {value.shape} does not match {self.value.shape}")
        self.value[...] = value
        self.version += 1


class Gradients(dict):
    """ Gradient buffer keyed by parameter name """

    def add(self, param: Parameter, grad: np.ndarray):
        if param.name in self:
            self[param.name] += grad
        else:
            self[param.name] = np.array(grad, dtype=param.value.dtype, copy=True)


def _accumulate(grads: Optional[Gradients], param: Parameter, grad: np.ndarray):
    if grads is None:
        param.grad += grad
    else:
        grads.add(param, grad)


def reduce_gradients(params: Dict[str, Parameter], buffers: Iterable[Gradients]):
    """ Single-writer reduction: buffers are summed in the order given """
    for buffer in buffers:
        for name, grad in buffer.items():
            params[name].grad += grad


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _check_matrix(name: str, x: np.ndarray, cols: int):
    if x.ndim != 2 or x.shape[0] < 1:
        raise ConfigurationError(f"{name}: expected a non-empty T x {cols} matrix, got shape {x.shape}")
    if x.shape[1] != cols:
        raise ConfigurationError(f"{name}: expected {cols} columns, got {x.shape[1]}")


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def _activate(pre: np.ndarray, hidden: int) -> np.ndarray:
    # gate order: input, forget, cell candidate, output
    act = np.empty_like(pre)
    act[..., :2 * hidden] = expit(pre[..., :2 * hidden])
    act[..., 2 * hidden:3 * hidden] = np.tanh(pre[..., 2 * hidden:3 * hidden])
    act[..., 3 * hidden:] = expit(pre[..., 3 * hidden:])
    return act


def _gate_backward(act: np.ndarray, dh: np.ndarray, dc_next: np.ndarray, cell: np.ndarray,
                   cell_prev: np.ndarray, hidden: int):
    """ Returns (gradient w.r.t. gate pre-activations, gradient w.r.t. previous cell) """
    i = act[:hidden]
    f = act[hidden:2 * hidden]
    g = act[2 * hidden:3 * hidden]
    o = act[3 * hidden:]
    tc = np.tanh(cell)
    dc = dc_next + dh * o * (1.0 - tc * tc)
    d_pre = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * cell_prev * f * (1.0 - f),
        dc * i * (1.0 - g * g),
        dh * tc * o * (1.0 - o),
    ])
    return d_pre, dc * f


@dataclass
class ForwardCache:
    owner: "LstmLayer"
    versions: Tuple[int, int, int]
    inputs: np.ndarray      # in traversal order
    gates: np.ndarray       # activated gates, T x 4H
    cells: np.ndarray
    hidden: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class StepCache:
    owner: "LstmLayer"
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: np.ndarray
    cell: np.ndarray


class LstmLayer:
    """ One unidirectional LSTM layer (the parameters of lstm_forward / lstm_backward) """

    def __init__(self, name: str, input_dim: int, hidden_dim: int, direction: Direction = Direction.FORWARD,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64, forget_bias: float = 1.0):
        if input_dim < 1 or hidden_dim < 1:
            raise ConfigurationError(f"{name}: input_dim and hidden_dim must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.direction = Direction(direction)
        self.w_input = Parameter(f"{name}.w_input", uniform_init(rng, (input_dim, 4 * hidden_dim), input_dim, dtype))
        self.w_hidden = Parameter(f"{name}.w_hidden",
                                  uniform_init(rng, (hidden_dim, 4 * hidden_dim), hidden_dim, dtype))
        bias = np.zeros(4 * hidden_dim, dtype=dtype)
        bias[hidden_dim:2 * hidden_dim] = forget_bias
        self.bias = Parameter(f"{name}.bias", bias)

    def parameters(self) -> List[Parameter]:
        return [self.w_input, self.w_hidden, self.bias]

    def _versions(self) -> Tuple[int, int, int]:
        return self.w_input.version, self.w_hidden.version, self.bias.version

    def forward(self, seq: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        _check_matrix(self.name, seq, self.input_dim)
        x = seq[::-1] if self.direction == Direction.BACKWARD else seq
        steps, hidden = x.shape[0], self.hidden_dim
        dtype = self.w_input.value.dtype
        x_proj = x @ self.w_input.value + self.bias.value
        gates = np.empty((steps, 4 * hidden), dtype=dtype)
        cells = np.empty((steps, hidden), dtype=dtype)
        states = np.empty((steps, hidden), dtype=dtype)
        h = np.zeros(hidden, dtype=dtype)
        c = np.zeros(hidden, dtype=dtype)
        for t in range(steps):
            act = _activate(x_proj[t] + h @ self.w_hidden.value, hidden)
            c = act[hidden:2 * hidden] * c + act[:hidden] * act[2 * hidden:3 * hidden]
            h = act[3 * hidden:] * np.tanh(c)
            gates[t] = act
            cells[t] = c
            states[t] = h
        cache = ForwardCache(self, self._versions(), x, gates, cells, states)
        out = states[::-1] if self.direction == Direction.BACKWARD else states
        return np.ascontiguousarray(out), cache

    def backward(self, cache: ForwardCache, grad_hidden: np.ndarray,
                 grads: Optional[Gradients] = None) -> np.ndarray:
        if cache.owner is not self or cache.versions != self._versions():
            raise InternalError(f"{self.name}: forward cache is stale or belongs to another layer")
        if grad_hidden.shape != cache.hidden.shape:
            raise InternalError(f"{self.name}: gradient shape {grad_hidden.shape} != {cache.hidden.shape}")
        dh_seq = grad_hidden[::-1] if self.direction == Direction.BACKWARD else grad_hidden
        steps, hidden = cache.hidden.shape
        dtype = cache.hidden.dtype
        d_pre = np.empty((steps, 4 * hidden), dtype=dtype)
        dh_next = np.zeros(hidden, dtype=dtype)
        dc_next = np.zeros(hidden, dtype=dtype)
        zeros = np.zeros(hidden, dtype=dtype)
        for t in reversed(range(steps)):
            cell_prev = cache.cells[t - 1] if t > 0 else zeros
            d_pre[t], dc_next = _gate_backward(cache.gates[t], dh_seq[t] + dh_next, dc_next,
                                               cache.cells[t], cell_prev, hidden)
            dh_next = d_pre[t] @ self.w_hidden.value.T
        h_prev = np.vstack([zeros[None, :], cache.hidden[:-1]])
        _accumulate(grads, self.w_input, cache.inputs.T @ d_pre)
        _accumulate(grads, self.w_hidden, h_prev.T @ d_pre)
        _accumulate(grads, self.bias, d_pre.sum(axis=0))
        dx = d_pre @ self.w_input.value.T
        return np.ascontiguousarray(dx[::-1]) if self.direction == Direction.BACKWARD else dx

    def step(self, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
        """ Advance a single timestep (used by the attention decoder) """
        hidden = self.hidden_dim
        act = _activate(x @ self.w_input.value + h_prev @ self.w_hidden.value + self.bias.value, hidden)
        c = act[hidden:2 * hidden] * c_prev + act[:hidden] * act[2 * hidden:3 * hidden]
        h = act[3 * hidden:] * np.tanh(c)
        return h, c, StepCache(self, x, h_prev, c_prev, act, c)

    def step_backward(self, cache: StepCache, dh: np.ndarray, dc: np.ndarray, grads: Optional[Gradients] = None):
        if cache.owner is not self:
            raise InternalError(f"{self.name}: step cache belongs to another layer")
        d_pre, dc_prev = _gate_backward(cache.gates, dh, dc, cache.cell, cache.c_prev, self.hidden_dim)
        _accumulate(grads, self.w_input, np.outer(cache.x, d_pre))
        _accumulate(grads, self.w_hidden, np.outer(cache.h_prev, d_pre))
        _accumulate(grads, self.bias, d_pre)
        return d_pre @ self.w_input.value.T, d_pre @ self.w_hidden.value.T, dc_prev


def lstm_forward(seq: np.ndarray, layer: LstmLayer):
    return layer.forward(seq)


def lstm_backward(cache: ForwardCache, grad_hidden: np.ndarray, layer: LstmLayer,
                  grads: Optional[Gradients] = None) -> np.ndarray:
    return layer.backward(cache, grad_hidden, grads)


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

def dropout_apply(x: np.ndarray, rate: float, rng: Optional[np.random.Generator]):
    """ Inverted dropout, returns (output, mask) """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x, np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


# ---------------------------------------------------------------------------
# Bidirectional stack
# ---------------------------------------------------------------------------

class BiLstmStack:
    def __init__(self, name: str, input_dim: int, hidden_dim: int, num_layers: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        if num_layers < 0:
            raise ConfigurationError(f"{name}: num_layers must be >= 0")
        self.name = name
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.layers: List[Tuple[LstmLayer, LstmLayer]] = []
        dim = input_dim
        for k in range(num_layers):
            self.layers.append((
                LstmLayer(f"{name}.layer{k}.fwd", dim, hidden_dim, Direction.FORWARD, rng, dtype),
                LstmLayer(f"{name}.layer{k}.bwd", dim, hidden_dim, Direction.BACKWARD, rng, dtype),
            ))
            dim = 2 * hidden_dim

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim if self.layers else self.input_dim

    def parameters(self) -> List[Parameter]:
        return [p for pair in self.layers for layer in pair for p in layer.parameters()]

    def forward(self, seq, dropout_rate=0.0, training=False, rng=None):
        return bilstm_stack_forward(seq, self.layers, dropout_rate, training, rng)

    def backward(self, caches, grad_out, grads: Optional[Gradients] = None):
        return bilstm_stack_backward(caches, grad_out, self.layers, grads)


def check_layer_chain(layers: List[Tuple[LstmLayer, LstmLayer]], input_dim: int):
    dim = input_dim
    for k, (fwd, bwd) in enumerate(layers):
        if fwd.direction != Direction.FORWARD or bwd.direction != Direction.BACKWARD:
            raise ConfigurationError(f"layer {k}: expected a (forward, backward) pair")
        if fwd.input_dim != dim or bwd.input_dim != dim or fwd.hidden_dim != bwd.hidden_dim:
            raise ConfigurationError(f"layer {k}: input dim {fwd.input_dim}/{bwd.input_dim} does not chain from {dim}")
        dim = 2 * fwd.hidden_dim


def bilstm_stack_forward(seq: np.ndarray, layers: List[Tuple[LstmLayer, LstmLayer]], dropout_rate: float = 0.0,
                         training: bool = False, rng: Optional[np.random.Generator] = None):
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    if layers:
        check_layer_chain(layers, seq.shape[1])
    caches = []
    x = seq
    for k, (fwd, bwd) in enumerate(layers):
        mask = None
        # between layers only, never on the stack input or output
        if k > 0 and training and dropout_rate > 0.0:
            x, mask = dropout_apply(x, dropout_rate, rng)
        h_fwd, cache_fwd = fwd.forward(x)
        h_bwd, cache_bwd = bwd.forward(x)
        x = np.concatenate([h_fwd, h_bwd], axis=1)
        caches.append((mask, cache_fwd, cache_bwd))
    return x, caches


def bilstm_stack_backward(caches, grad_out: np.ndarray, layers: List[Tuple[LstmLayer, LstmLayer]],
                          grads: Optional[Gradients] = None) -> np.ndarray:
    if len(caches) != len(layers):
        raise InternalError("stack cache depth does not match the layer stack")
    grad = grad_out
    for (fwd, bwd), (mask, cache_fwd, cache_bwd) in zip(reversed(layers), reversed(caches)):
        hidden = fwd.hidden_dim
        grad_in = fwd.backward(cache_fwd, np.ascontiguousarray(grad[:, :hidden]), grads)
        grad_in = grad_in + bwd.backward(cache_bwd, np.ascontiguousarray(grad[:, hidden:]), grads)
        if mask is not None:
            grad_in = grad_in * mask
        grad = grad_in
    return grad


# ---------------------------------------------------------------------------
# Linear / projection
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, name: str, input_dim: int, output_dim: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        if input_dim < 1 or output_dim < 1:
            raise ConfigurationError(f"{name}: dimensions must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.weight = Parameter(f"{name}.weight", uniform_init(rng, (input_dim, output_dim), input_dim, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(output_dim, dtype=dtype))

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return linear_forward(x, self.weight.value, self.bias.value)

    def backward(self, x: np.ndarray, grad_out: np.ndarray, grads: Optional[Gradients] = None) -> np.ndarray:
        grad_input, grad_weight, grad_bias = linear_backward(x, grad_out, self.weight.value)
        _accumulate(grads, self.weight, grad_weight)
        _accumulate(grads, self.bias, grad_bias)
        return grad_input


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if weight.ndim != 2 or bias.shape != (weight.shape[1],):
        raise ConfigurationError(f"weight {weight.shape} and bias {bias.shape} are inconsistent")
    if x.shape[-1] != weight.shape[0]:
        raise ConfigurationError(f"input has {x.shape[-1]} columns, weight expects {weight.shape[0]}")
    return x @ weight + bias


def linear_backward(x: np.ndarray, grad_out: np.ndarray, weight: np.ndarray):
    """ Returns (grad_input, grad_weight, grad_bias) """
    return grad_out @ weight.T, np.atleast_2d(x).T @ np.atleast_2d(grad_out), np.atleast_2d(grad_out).sum(axis=0)


# ---------------------------------------------------------------------------
# Softmax family, pooling
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError("log_softmax received non-finite logits")
    # scipy shifts by the row max before exponentiating
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - np.sum(probs * grad_probs, axis=-1, keepdims=True))


def maxpool_time(hidden: np.ndarray, width: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """ Max over non-overlapping blocks of `width` timesteps, returns (pooled, source rows) """
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise ConfigurationError(f"maxpool_time expects a non-empty T x D matrix, got {hidden.shape}")
    steps, dim = hidden.shape
    out_steps = -(-steps // width)
    pooled = np.empty((out_steps, dim), dtype=hidden.dtype)
    source = np.empty((out_steps, dim), dtype=np.int64)
    cols = np.arange(dim)
    for i in range(out_steps):
        block = hidden[i * width:min((i + 1) * width, steps)]
        # argmax returns the first maximum: ties go to the earlier timestep
        k = np.argmax(block, axis=0)
        source[i] = i * width + k
        pooled[i] = block[k, cols]
    return pooled, source


def maxpool_time_backward(grad_out: np.ndarray, source: np.ndarray, steps: int) -> np.ndarray:
    grad = np.zeros((steps, grad_out.shape[1]), dtype=grad_out.dtype)
    grad[source, np.arange(grad_out.shape[1])[None, :]] = grad_out
    return grad
