import json
import os
import struct
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import bitmath
import numpy as np

from library.errors import CheckpointError, ConfigurationError
from library.log import logger
from library.nn import BiLstmStack, Gradients, Linear, Parameter, log_softmax, resolve_dtype


@dataclass
class SharedEncoderConfig:
    num_layers: int = 5
    hidden_per_direction: int = 320  # "big" models use 500
    projection_dim: int = 256
    dropout_rate: float = 0.2
    input_dim: int = 40
    # Train the trunk on stacked frame pairs, as the attention encoder sees them
    stack_frames: bool = False
    dtype: str = "float64"

    def validate(self):
        for name in ("num_layers", "hidden_per_direction", "projection_dim", "input_dim"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigurationError(f"model.{name} must be an integer >= 1, got {getattr(self, name)!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"model.dropout_rate must be in [0, 1), got {self.dropout_rate}")
        resolve_dtype(self.dtype)
        return self

    @property
    def trunk_input_dim(self) -> int:
        return 2 * self.input_dim if self.stack_frames else self.input_dim


def downsample_features(features: np.ndarray) -> np.ndarray:
    """ Stack frames (2i, 2i+1) into row i; an odd last frame is paired with itself """
    if features.ndim != 2 or features.shape[0] < 1:
        raise ConfigurationError(f"cannot downsample features of shape {features.shape}")
    if features.shape[0] % 2:
        features = np.vstack([features, features[-1:]])
    return np.ascontiguousarray(features).reshape(-1, 2 * features.shape[1])


def downsample_frame_labels(frame_labels: np.ndarray) -> np.ndarray:
    # label of the first frame of every stacked pair
    return np.asarray(frame_labels)[::2]


class Model(ABC):
    kind = ""

    @abstractmethod
    def parameters(self) -> Dict[str, Parameter]:
        pass

    @abstractmethod
    def config_echo(self) -> dict:
        pass

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters().values())

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """ Copies matching tensors, returns the names that were loaded """
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise CheckpointError(f"state mismatch, missing={missing} unexpected={unexpected}")
        loaded = []
        for name, param in params.items():
            value = state.get(name)
            if value is None:
                continue
            if value.shape != param.shape:
                if strict:
                    raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {param.shape}")
                continue
            param.assign(value)
            loaded.append(name)
        return loaded


@dataclass
class EncoderCache:
    lstm_out: np.ndarray
    lstm: list


class SharedEncoder:
    """ Bidirectional LSTM stack followed by a purely linear projection """

    def __init__(self, config: SharedEncoderConfig, rng: np.random.Generator, dtype, name: str = "encoder"):
        self.config = config
        self.lstm = BiLstmStack(f"{name}.lstm", config.trunk_input_dim, config.hidden_per_direction,
                                config.num_layers, rng, dtype)
        self.projection = Linear(f"{name}.projection", self.lstm.output_dim, config.projection_dim, rng, dtype)

    def parameters(self) -> List[Parameter]:
        return self.lstm.parameters() + self.projection.parameters()

    def forward(self, x: np.ndarray, training: bool = False, rng: Optional[np.random.Generator] = None):
        hidden, caches = self.lstm.forward(x, self.config.dropout_rate, training, rng)
        return self.projection.forward(hidden), EncoderCache(hidden, caches)

    def backward(self, cache: EncoderCache, grad_projection: np.ndarray, grads: Optional[Gradients] = None):
        grad_hidden = self.projection.backward(cache.lstm_out, grad_projection, grads)
        return self.lstm.backward(cache.lstm, grad_hidden, grads)


@dataclass
class MultiTaskCache:
    encoder: EncoderCache
    projection: np.ndarray


@dataclass
class MultiTaskOutput:
    ctc_logprobs: np.ndarray
    ce_logprobs: np.ndarray
    cache: MultiTaskCache


class MultiTaskModel(Model):
    """ Shared trunk (bi-LSTM + projection) feeding a CTC head and a framewise CE head """
    kind = "multitask"

    def __init__(self, config: SharedEncoderConfig, ctc_vocab: int, num_states: int, seed: int = 0):
        config.validate()
        if ctc_vocab < 2:
            raise ConfigurationError(f"CTC vocabulary needs the blank and at least one label, got {ctc_vocab}")
        if num_states < 1:
            raise ConfigurationError(f"number of CE states must be >= 1, got {num_states}")
        self.config = config
        self.ctc_vocab = ctc_vocab
        self.num_states = num_states
        self.seed = seed
        self.dtype = resolve_dtype(config.dtype)
        rng = np.random.default_rng(seed)
        self.encoder = SharedEncoder(config, rng, self.dtype)
        self.ctc_head = Linear("ctc_head", config.projection_dim, ctc_vocab, rng, self.dtype)
        self.ce_head = Linear("ce_head", config.projection_dim, num_states, rng, self.dtype)

    def parameters(self) -> Dict[str, Parameter]:
        params = self.encoder.parameters() + self.ctc_head.parameters() + self.ce_head.parameters()
        return {p.name: p for p in params}

    def config_echo(self) -> dict:
        return {"kind": self.kind, "encoder": asdict(self.config), "ctc_vocab": self.ctc_vocab,
                "num_states": self.num_states, "seed": self.seed}

    def prepare_features(self, features: np.ndarray) -> np.ndarray:
        if features.ndim != 2 or features.shape[1] != self.config.input_dim:
            raise ConfigurationError(f"features must be T x {self.config.input_dim}, got {features.shape}")
        features = features.astype(self.dtype, copy=False)
        return downsample_features(features) if self.config.stack_frames else features

    def frame_targets(self, frame_labels: np.ndarray) -> np.ndarray:
        return downsample_frame_labels(frame_labels) if self.config.stack_frames else np.asarray(frame_labels)


def build_multitask_model(config: SharedEncoderConfig, ctc_vocab: int, num_states: int,
                          seed: int = 0) -> MultiTaskModel:
    model = MultiTaskModel(config, ctc_vocab, num_states, seed)
    logger.debug(f"Built multi-task model: {config.num_layers}x{config.hidden_per_direction} bi-LSTM, "
                 f"projection {config.projection_dim}, {model.num_parameters()} parameters")
    return model


def forward_multitask(model: MultiTaskModel, features: np.ndarray, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> MultiTaskOutput:
    x = model.prepare_features(features)
    projection, encoder_cache = model.encoder.forward(x, training, rng)
    ctc_logprobs = log_softmax(model.ctc_head.forward(projection))
    ce_logprobs = log_softmax(model.ce_head.forward(projection))
    return MultiTaskOutput(ctc_logprobs, ce_logprobs, MultiTaskCache(encoder_cache, projection))


def backward_multitask(model: MultiTaskModel, cache: MultiTaskCache, ctc_grad: Optional[np.ndarray] = None,
                       ce_grad: Optional[np.ndarray] = None, grads: Optional[Gradients] = None):
    """ Backprop head gradients (w.r.t. pre-softmax logits) through both heads into the shared trunk """
    grad_projection = None
    if ctc_grad is not None:
        grad_projection = model.ctc_head.backward(cache.projection, ctc_grad, grads)
    if ce_grad is not None:
        grad_ce = model.ce_head.backward(cache.projection, ce_grad, grads)
        grad_projection = grad_ce if grad_projection is None else grad_projection + grad_ce
    if grad_projection is not None:
        model.encoder.backward(cache.encoder, grad_projection, grads)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MTLCKPT\x01"
CHECKPOINT_VERSION = 1
_LENGTH = struct.Struct("<Q")


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: dict
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)


def checkpoint_from_model(model: Model, epoch: int = 0, rng_state: Optional[dict] = None,
                          extra: Optional[dict] = None) -> Checkpoint:
    config = model.config_echo()
    if extra:
        config.update(extra)
    return Checkpoint(model.state_dict(), config, epoch, dict(rng_state or {}))


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    """
    Layout: magic, u64 header length, JSON header (config echo, epoch, rng state and
    a manifest of name/shape/dtype/offset per tensor), then raw little-endian payloads.
    """
    manifest = []
    payloads = []
    offset = 0
    for name, value in ckpt.params.items():
        array = np.ascontiguousarray(value)
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        data = array.tobytes()
        manifest.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.str,
                         "offset": offset, "nbytes": len(data)})
        payloads.append(data)
        offset += len(data)
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": ckpt.config, "epoch": ckpt.epoch,
                         "rng_state": ckpt.rng_state, "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as stream:
        stream.write(CHECKPOINT_MAGIC)
        stream.write(_LENGTH.pack(len(header)))
        stream.write(header)
        for data in payloads:
            stream.write(data)
    os.replace(tmp_path, path)
    size = len(CHECKPOINT_MAGIC) + _LENGTH.size + len(header) + offset
    logger.debug(f"Saved checkpoint {path} ({bitmath.Byte(size).best_prefix().format('{value:.1f} {unit}')})")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as stream:
            blob = stream.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    start = len(CHECKPOINT_MAGIC) + _LENGTH.size
    if len(blob) < start or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (header_len,) = _LENGTH.unpack_from(blob, len(CHECKPOINT_MAGIC))
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt checkpoint header")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = blob[start + header_len:]
    params = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} extends past the end of the file")
        array = np.frombuffer(payload[entry["offset"]:end], dtype=np.dtype(entry["dtype"]))
        params[entry["name"]] = array.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))
    return Checkpoint(params, header["config"], header["epoch"], header["rng_state"])


def encoder_config_from_echo(echo: dict) -> SharedEncoderConfig:
    try:
        return SharedEncoderConfig(**echo["encoder"]).validate()
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint config has no usable encoder section: {e}")


def restore_multitask(ckpt: Checkpoint) -> MultiTaskModel:
    config = encoder_config_from_echo(ckpt.config)
    model = MultiTaskModel(config, ckpt.config["ctc_vocab"], ckpt.config["num_states"], ckpt.config.get("seed", 0))
    model.load_state_dict(ckpt.params)
    return model


def with_stacking(config: SharedEncoderConfig, stack_frames: bool) -> SharedEncoderConfig:
    return replace(config, stack_frames=stack_frames)
