"""
Attention encoder-decoder built on top of a transferred multi-task trunk.

Encoder: frame stacking -> trunk (bi-LSTM + projection) -> extra bi-LSTM
layers, with a time max-pool right below the topmost encoder layer.
Decoder: additive attention over the encoder outputs feeding a stack of
unidirectional LSTM cells and an output layer over the label vocabulary.
Index 0 (the CTC blank) doubles as end-of-sequence, the start symbol is
an extra embedding row.
"""
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from library.decoder import DEFAULT_BEAM, Hypothesis
from library.errors import CheckpointError, ConfigurationError, InvalidInputError, TransferError
from library.log import logger
from library.losses import check_labels
from library.model import Checkpoint, Model, SharedEncoder, SharedEncoderConfig, downsample_features, \
    encoder_config_from_echo, with_stacking
from library.nn import BiLstmStack, Gradients, Linear, LstmLayer, Parameter, _accumulate, dropout_apply, \
    log_softmax, maxpool_time, maxpool_time_backward, resolve_dtype, softmax, softmax_backward, uniform_init

EOS = 0


@dataclass
class AttentionConfig:
    extra_layers: int = 5
    extra_hidden: int = 0       # 0: same width as the trunk layers
    decoder_layers: int = 2
    decoder_hidden: int = 0     # 0: encoder output size
    attention_dim: int = 0      # 0: decoder hidden size
    downsample: bool = True
    pool_width: int = 2
    sampling_rate: float = 0.3

    def validate(self):
        for name in ("extra_layers", "extra_hidden", "decoder_hidden", "attention_dim"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"attention_model.{name} must be >= 0, got {getattr(self, name)}")
        if self.decoder_layers < 1:
            raise ConfigurationError(f"attention_model.decoder_layers must be >= 1, got {self.decoder_layers}")
        if self.pool_width < 1:
            raise ConfigurationError(f"attention_model.pool_width must be >= 1, got {self.pool_width}")
        if not 0.0 <= self.sampling_rate <= 1.0:
            raise ConfigurationError(f"attention_model.sampling_rate must be in [0, 1], got {self.sampling_rate}")
        return self


@dataclass
class DecoderState:
    hidden: List[np.ndarray]
    cells: List[np.ndarray]


@dataclass
class StepOutput:
    logprobs: np.ndarray
    weights: np.ndarray
    context: np.ndarray
    state: DecoderState


@dataclass
class DecoderStepCache:
    prev_label: int
    query_state: np.ndarray
    scores_pre: np.ndarray      # tanh(keys + query), T' x A
    weights: np.ndarray
    context: np.ndarray
    cells: list
    output_input: np.ndarray
    logprobs: np.ndarray


class AttentionDecoder:
    def __init__(self, encoder_dim: int, vocab_size: int, hidden_dim: int, attention_dim: int, num_layers: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.encoder_dim = encoder_dim
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.sos = vocab_size
        self.embedding = Parameter("decoder.embedding",
                                   uniform_init(rng, (vocab_size + 1, hidden_dim), hidden_dim, dtype))
        self.w_query = Parameter("attention.w_query",
                                 uniform_init(rng, (hidden_dim, attention_dim), hidden_dim, dtype))
        self.w_key = Parameter("attention.w_key", uniform_init(rng, (encoder_dim, attention_dim), encoder_dim, dtype))
        self.b_key = Parameter("attention.b_key", np.zeros(attention_dim, dtype=dtype))
        self.v = Parameter("attention.v", uniform_init(rng, (attention_dim,), attention_dim, dtype))
        self.cells = []
        for k in range(num_layers):
            input_dim = hidden_dim + encoder_dim if k == 0 else hidden_dim
            self.cells.append(LstmLayer(f"decoder.lstm{k}", input_dim, hidden_dim, rng=rng, dtype=dtype))
        self.output = Linear("decoder.output", hidden_dim + encoder_dim, vocab_size, rng, dtype)

    def parameters(self) -> List[Parameter]:
        params = [self.embedding, self.w_query, self.w_key, self.b_key, self.v]
        for cell in self.cells:
            params += cell.parameters()
        return params + self.output.parameters()

    def initial_state(self) -> DecoderState:
        dtype = self.embedding.value.dtype
        zeros = [np.zeros(self.hidden_dim, dtype=dtype) for _ in self.cells]
        return DecoderState(zeros, [z.copy() for z in zeros])

    def keys(self, encoder_out: np.ndarray) -> np.ndarray:
        if encoder_out.ndim != 2 or encoder_out.shape[1] != self.encoder_dim:
            raise ConfigurationError(f"encoder outputs must be T' x {self.encoder_dim}, got {encoder_out.shape}")
        return encoder_out @ self.w_key.value + self.b_key.value

    def keys_backward(self, encoder_out: np.ndarray, grad_keys: np.ndarray, grads: Optional[Gradients] = None):
        _accumulate(grads, self.w_key, encoder_out.T @ grad_keys)
        _accumulate(grads, self.b_key, grad_keys.sum(axis=0))
        return grad_keys @ self.w_key.value.T

    def step(self, state: DecoderState, encoder_out: np.ndarray, keys: np.ndarray, prev_label: int):
        query_state = state.hidden[-1]
        pre = np.tanh(keys + query_state @ self.w_query.value)
        weights = softmax(pre @ self.v.value)
        context = weights @ encoder_out
        x = np.concatenate([self.embedding.value[prev_label], context])
        hidden, cells, caches = [], [], []
        for k, cell in enumerate(self.cells):
            h, c, cache = cell.step(x, state.hidden[k], state.cells[k])
            hidden.append(h)
            cells.append(c)
            caches.append(cache)
            x = h
        output_input = np.concatenate([hidden[-1], context])
        logprobs = log_softmax(self.output.forward(output_input))
        cache = DecoderStepCache(prev_label, query_state, pre, weights, context, caches, output_input, logprobs)
        return StepOutput(logprobs, weights, context, DecoderState(hidden, cells)), cache

    def step_backward(self, cache: DecoderStepCache, grad_logits: np.ndarray, grad_state: DecoderState,
                      encoder_out: np.ndarray, grads: Optional[Gradients] = None):
        """
        grad_state holds the gradients flowing into this step's new (h, c) from the
        following step. Returns (gradient for the previous state, gradient w.r.t.
        encoder_out through the context, gradient w.r.t. the attention keys).
        """
        hidden_dim = self.hidden_dim
        num_layers = len(self.cells)
        grad_output_input = self.output.backward(cache.output_input, grad_logits, grads)
        grad_context = grad_output_input[hidden_dim:].copy()
        grad_hidden = list(grad_state.hidden)
        grad_hidden[-1] = grad_hidden[-1] + grad_output_input[:hidden_dim]

        prev_hidden: List[np.ndarray] = [None] * num_layers
        prev_cells: List[np.ndarray] = [None] * num_layers
        grad_x = None
        for k in reversed(range(num_layers)):
            dh = grad_hidden[k] if grad_x is None else grad_hidden[k] + grad_x
            grad_x, prev_hidden[k], prev_cells[k] = self.cells[k].step_backward(cache.cells[k], dh,
                                                                                grad_state.cells[k], grads)
        grad_embedding = np.zeros_like(self.embedding.value)
        grad_embedding[cache.prev_label] = grad_x[:hidden_dim]
        _accumulate(grads, self.embedding, grad_embedding)
        grad_context += grad_x[hidden_dim:]

        # context = weights @ encoder_out, weights = softmax(v . tanh(keys + query))
        grad_encoder = np.outer(cache.weights, grad_context)
        grad_scores = softmax_backward(cache.weights, encoder_out @ grad_context)
        _accumulate(grads, self.v, cache.scores_pre.T @ grad_scores)
        grad_keys = np.outer(grad_scores, self.v.value) * (1.0 - cache.scores_pre ** 2)
        grad_query = grad_keys.sum(axis=0)
        _accumulate(grads, self.w_query, np.outer(cache.query_state, grad_query))
        prev_hidden[-1] = prev_hidden[-1] + grad_query @ self.w_query.value.T
        return DecoderState(prev_hidden, prev_cells), grad_encoder, grad_keys


@dataclass
class EncodeCache:
    trunk: object
    upper: list = field(default_factory=list)
    pool_source: Optional[np.ndarray] = None
    pool_steps: int = 0


class AttentionModel(Model):
    kind = "attention"

    def __init__(self, encoder_config: SharedEncoderConfig, config: AttentionConfig, vocab_size: int,
                 seed: int = 0):
        config.validate()
        encoder_config = with_stacking(encoder_config, config.downsample).validate()
        if vocab_size < 2:
            raise ConfigurationError(f"attention vocabulary needs end-of-sequence plus one label, got {vocab_size}")
        self.encoder_config = encoder_config
        self.config = config
        self.vocab_size = vocab_size
        self.seed = seed
        self.dtype = resolve_dtype(encoder_config.dtype)
        rng = np.random.default_rng(seed)
        self.encoder = SharedEncoder(encoder_config, rng, self.dtype)
        extra_hidden = config.extra_hidden or encoder_config.hidden_per_direction
        self.upper = BiLstmStack("encoder.upper", encoder_config.projection_dim, extra_hidden,
                                 config.extra_layers, rng, self.dtype)
        encoder_dim = self.upper.output_dim
        decoder_hidden = config.decoder_hidden or encoder_dim
        self.decoder = AttentionDecoder(encoder_dim, vocab_size, decoder_hidden,
                                        config.attention_dim or decoder_hidden, config.decoder_layers, rng, self.dtype)

    @property
    def encoder_depth(self) -> int:
        return self.encoder_config.num_layers + self.config.extra_layers

    def parameters(self):
        params = self.encoder.parameters() + self.upper.parameters() + self.decoder.parameters()
        return {p.name: p for p in params}

    def encoder_parameters(self):
        return {p.name: p for p in self.encoder.parameters()}

    def config_echo(self) -> dict:
        return {"kind": self.kind, "encoder": asdict(self.encoder_config), "attention": asdict(self.config),
                "vocab_size": self.vocab_size, "seed": self.seed}

    def encode(self, features: np.ndarray, training: bool = False, rng: Optional[np.random.Generator] = None):
        cfg = self.encoder_config
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] != cfg.input_dim:
            raise InvalidInputError(f"features must be a non-empty T x {cfg.input_dim} matrix, got {features.shape}")
        x = features.astype(self.dtype, copy=False)
        if self.config.downsample:
            x = downsample_features(x)
        x, trunk_cache = self.encoder.forward(x, training, rng)
        cache = EncodeCache(trunk_cache)
        layers = self.upper.layers
        if not layers:
            cache.pool_steps = x.shape[0]
            x, cache.pool_source = maxpool_time(x, self.config.pool_width)
            return x, cache
        for k, (fwd, bwd) in enumerate(layers):
            mask = None
            if training and cfg.dropout_rate > 0.0:
                x, mask = dropout_apply(x, cfg.dropout_rate, rng)
            if k == len(layers) - 1:
                # pool right below the topmost encoder layer
                cache.pool_steps = x.shape[0]
                x, cache.pool_source = maxpool_time(x, self.config.pool_width)
            h_fwd, cache_fwd = fwd.forward(x)
            h_bwd, cache_bwd = bwd.forward(x)
            x = np.concatenate([h_fwd, h_bwd], axis=1)
            cache.upper.append((mask, cache_fwd, cache_bwd))
        return x, cache

    def encode_backward(self, cache: EncodeCache, grad_out: np.ndarray, grads: Optional[Gradients] = None):
        grad = grad_out
        layers = self.upper.layers
        if not layers:
            grad = maxpool_time_backward(grad, cache.pool_source, cache.pool_steps)
        for k in reversed(range(len(layers))):
            fwd, bwd = layers[k]
            mask, cache_fwd, cache_bwd = cache.upper[k]
            hidden = fwd.hidden_dim
            grad_in = fwd.backward(cache_fwd, np.ascontiguousarray(grad[:, :hidden]), grads)
            grad_in = grad_in + bwd.backward(cache_bwd, np.ascontiguousarray(grad[:, hidden:]), grads)
            if k == len(layers) - 1:
                grad_in = maxpool_time_backward(grad_in, cache.pool_source, cache.pool_steps)
            if mask is not None:
                grad_in = grad_in * mask
            grad = grad_in
        return self.encoder.backward(cache.trunk, grad, grads)


def transfer_encoder(ckpt: Checkpoint, attn_config: AttentionConfig, seed: int = 0) -> AttentionModel:
    """ Copy the trunk and projection of a multi-task checkpoint into a fresh attention model """
    encoder_config = encoder_config_from_echo(ckpt.config)
    vocab_size = ckpt.config.get("ctc_vocab", ckpt.config.get("vocab_size"))
    if vocab_size is None:
        raise CheckpointError("checkpoint config does not record the label vocabulary size")
    model = AttentionModel(encoder_config, attn_config, vocab_size, seed)
    targets = model.encoder_parameters()
    mismatched = [name for name, param in targets.items()
                  if name not in ckpt.params or ckpt.params[name].shape != param.shape]
    if mismatched:
        raise TransferError(mismatched)
    for name, param in targets.items():
        param.assign(ckpt.params[name])
    logger.info(f"Transferred {len(targets)} encoder tensors; encoder depth "
                f"{encoder_config.num_layers} + {attn_config.extra_layers} new layers")
    return model


@dataclass
class AttentionLoss:
    loss: float
    fed_labels: List[int]
    num_steps: int


def attention_forward_train(model: AttentionModel, features: np.ndarray, target, sampling_rate: float,
                            rng: Optional[np.random.Generator] = None, training: bool = True,
                            grads: Optional[Gradients] = None, loss_scale: float = 1.0,
                            backward: bool = True) -> AttentionLoss:
    """
    Sequence cross-entropy of `target` plus end-of-sequence. With probability
    `sampling_rate` the next decoder input is sampled from the model's own output
    distribution instead of the reference label.
    """
    if not 0.0 <= sampling_rate <= 1.0:
        raise ConfigurationError(f"sampling rate must be in [0, 1], got {sampling_rate}")
    labels = [int(z) for z in check_labels(target, model.vocab_size)] + [EOS]
    decoder = model.decoder
    encoder_out, encode_cache = model.encode(features, training, rng)
    keys = decoder.keys(encoder_out)
    state = decoder.initial_state()
    prev = decoder.sos
    loss = 0.0
    fed = []
    caches = []
    for n, label in enumerate(labels):
        fed.append(prev)
        out, cache = decoder.step(state, encoder_out, keys, prev)
        loss -= float(out.logprobs[label])
        caches.append((cache, label))
        state = out.state
        if n == len(labels) - 1:
            break
        prev = label
        if sampling_rate > 0.0 and rng.random() < sampling_rate:
            probs = np.exp(out.logprobs.astype(np.float64))
            prev = int(rng.choice(model.vocab_size, p=probs / probs.sum()))

    if backward:
        zeros = decoder.initial_state()
        grad_state = DecoderState(zeros.hidden, zeros.cells)
        grad_encoder = np.zeros_like(encoder_out)
        grad_keys = np.zeros_like(keys)
        for cache, label in reversed(caches):
            grad_logits = np.exp(cache.logprobs)
            grad_logits[label] -= 1.0
            grad_state, grad_enc, grad_k = decoder.step_backward(cache, grad_logits * loss_scale, grad_state,
                                                                 encoder_out, grads)
            grad_encoder += grad_enc
            grad_keys += grad_k
        grad_encoder += decoder.keys_backward(encoder_out, grad_keys, grads)
        model.encode_backward(encode_cache, grad_encoder, grads)
    return AttentionLoss(loss, fed, len(labels))


def score_sequence(model: AttentionModel, features: np.ndarray, labels, terminate: bool = True) -> float:
    """ Teacher-forced log-probability of `labels` (optionally followed by end-of-sequence) """
    decoder = model.decoder
    encoder_out, _ = model.encode(features)
    keys = decoder.keys(encoder_out)
    state = decoder.initial_state()
    prev = decoder.sos
    total = 0.0
    sequence = list(labels) + ([EOS] if terminate else [])
    for label in sequence:
        out, _ = decoder.step(state, encoder_out, keys, prev)
        total += float(out.logprobs[label])
        state = out.state
        prev = label
    return total


def attention_beam_decode(model: AttentionModel, features: np.ndarray, beam: int = DEFAULT_BEAM,
                          max_len: Optional[int] = None) -> List[Hypothesis]:
    """
    Beam search over output symbols. Every returned hypothesis ends in end-of-sequence:
    after `max_len` labels the only expansion left is end-of-sequence, so its
    log-probability is part of every score.
    """
    if beam < 1:
        raise ConfigurationError(f"beam must be >= 1, got {beam}")
    decoder = model.decoder
    encoder_out, _ = model.encode(features)
    if max_len is None:
        max_len = encoder_out.shape[0]
    if max_len < 1:
        raise ConfigurationError(f"max_len must be >= 1, got {max_len}")
    keys = decoder.keys(encoder_out)
    alive: List[Tuple[float, Tuple[int, ...], DecoderState, int]] = [(0.0, (), decoder.initial_state(), decoder.sos)]
    finished: List[Hypothesis] = []
    for length in range(max_len + 1):
        symbols = range(model.vocab_size) if length < max_len else (EOS,)
        candidates = []
        for score, labels, state, prev in alive:
            out, _ = decoder.step(state, encoder_out, keys, prev)
            for symbol in symbols:
                candidates.append((score + float(out.logprobs[symbol]), labels, symbol, out.state))
        candidates.sort(key=lambda c: (-c[0], c[1] + (c[2],)))
        alive = []
        for score, labels, symbol, state in candidates[:beam]:
            if symbol == EOS:
                finished.append(Hypothesis(labels, score))
            else:
                alive.append((score, labels + (symbol,), state, symbol))
        if not alive or len(finished) >= beam:
            break
    finished.sort(key=lambda h: (-h.score, h.labels))
    return finished[:beam]


def restore_attention(ckpt: Checkpoint) -> AttentionModel:
    try:
        attn_config = AttentionConfig(**ckpt.config["attention"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint config has no usable attention section: {e}")
    model = AttentionModel(encoder_config_from_echo(ckpt.config), attn_config, ckpt.config["vocab_size"],
                           ckpt.config.get("seed", 0))
    model.load_state_dict(ckpt.params)
    return model
