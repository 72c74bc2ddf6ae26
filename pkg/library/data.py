"""
Synthetic corpus with exact frame alignments, per-conversation feature
normalization, speed perturbation and the on-disk dataset format.

Each label owns `states_per_label` left-to-right states (state index =
label * states_per_label + position). An utterance samples a label
sequence, walks every label's states with a random duration per state and
emits Gaussian frames around the state mean plus a per-conversation offset.
"""
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from library.errors import ConfigurationError, DatasetLoadError
from library.log import logger
from library.scheduler import run_jobs
from library.stats import human_size

FORMAT_VERSION = 1
MANIFEST_FILE = "dataset.manifest.json"
BINARY_FILE = "dataset.bin"
STD_FLOOR = 1e-8
SPEED_RANGE = (0.8, 1.25)

# id length, conversation, T, F, L, alignment segments
_RECORD_HEADER = struct.Struct("<6I")


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 12
    states_per_label: int = 3
    feature_dim: int = 40
    duration_range: Tuple[int, int] = (2, 6)
    noise_sigma: float = 1.5
    mean_scale: float = 1.0
    conversation_offset: float = 0.5
    label_length_range: Tuple[int, int] = (3, 10)
    num_utterances: int = 2000
    num_conversations: int = 100
    seed: int = 0
    dtype: str = "float64"

    @property
    def num_states(self) -> int:
        return self.vocab_size * self.states_per_label

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigurationError(f"data.vocab_size must be >= 2, got {self.vocab_size}")
        for name in ("states_per_label", "feature_dim", "num_utterances", "num_conversations"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"data.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("duration_range", "label_length_range"):
            low, high = getattr(self, name)
            if low < 1 or high < low:
                raise ConfigurationError(f"data.{name} must be [min, max] with 1 <= min <= max, got {[low, high]}")
        if not self.noise_sigma > 0:
            raise ConfigurationError(f"data.noise_sigma must be > 0, got {self.noise_sigma}")
        if self.mean_scale < 0 or self.conversation_offset < 0:
            raise ConfigurationError("data.mean_scale and data.conversation_offset must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"data.dtype must be float32 or float64, got '{self.dtype}'")
        return self


@dataclass
class UtteranceRecord:
    id: str
    conversation_id: int
    features: np.ndarray
    ctc_labels: Optional[np.ndarray] = None
    frame_labels: Optional[np.ndarray] = None
    # (label, start, end) triples partitioning [0, T)
    alignment: Optional[np.ndarray] = None

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class DatasetManifest:
    spec: dict
    utterances: List[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps({"format_version": self.format_version, "spec": self.spec,
                           "utterances": self.utterances}, indent=2, sort_keys=True)


def spec_from_manifest(manifest: DatasetManifest) -> SyntheticTaskSpec:
    spec = dict(manifest.spec)
    for name in ("duration_range", "label_length_range"):
        spec[name] = tuple(spec[name])
    return SyntheticTaskSpec(**spec)


def state_means(spec: SyntheticTaskSpec) -> np.ndarray:
    return np.random.default_rng([spec.seed, 0]).standard_normal((spec.num_states, spec.feature_dim)) * spec.mean_scale


def conversation_offsets(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1])
    return rng.standard_normal((spec.num_conversations, spec.feature_dim)) * spec.conversation_offset


def _sample_labels(rng: np.random.Generator, spec: SyntheticTaskSpec) -> np.ndarray:
    length = int(rng.integers(spec.label_length_range[0], spec.label_length_range[1] + 1))
    labels = rng.integers(1, spec.vocab_size, size=length)
    if spec.states_per_label == 1 and spec.vocab_size > 2:
        # single-state labels: adjacent repeats would be indistinguishable in the frame labels
        for i in range(1, length):
            while labels[i] == labels[i - 1]:
                labels[i] = rng.integers(1, spec.vocab_size)
    return labels.astype(np.uint32)


def generate_utterance(spec: SyntheticTaskSpec, index: int, means: np.ndarray,
                       offsets: np.ndarray) -> UtteranceRecord:
    rng = np.random.default_rng([spec.seed, 2, index])
    conversation = index % spec.num_conversations
    labels = _sample_labels(rng, spec)
    frame_labels = []
    alignment = []
    for label in labels:
        start = len(frame_labels)
        for position in range(spec.states_per_label):
            duration = int(rng.integers(spec.duration_range[0], spec.duration_range[1] + 1))
            frame_labels.extend([int(label) * spec.states_per_label + position] * duration)
        alignment.append((int(label), start, len(frame_labels)))
    frame_labels = np.asarray(frame_labels, dtype=np.uint32)
    noise = rng.standard_normal((frame_labels.size, spec.feature_dim)) * spec.noise_sigma
    features = (means[frame_labels] + offsets[conversation] + noise).astype(spec.dtype)
    return UtteranceRecord(f"utt-{index:06d}", conversation, features, labels, frame_labels,
                           np.asarray(alignment, dtype=np.uint32))


def collapse_frame_labels(frame_labels: Sequence[int], states_per_label: int) -> Tuple[int, ...]:
    """ Label sequence implied by a state sequence: a new label starts wherever position 0 is entered """
    labels = []
    prev = None
    for state in frame_labels:
        state = int(state)
        if state != prev and state % states_per_label == 0:
            labels.append(state // states_per_label)
        prev = state
    return tuple(labels)


def encode_record(record: UtteranceRecord, dtype: str = "float64") -> bytes:
    uid = record.id.encode("utf-8")
    ctc = np.asarray(record.ctc_labels if record.ctc_labels is not None else [], dtype="<u4")
    frames = np.asarray(record.frame_labels if record.frame_labels is not None else [], dtype="<u4")
    alignment = np.asarray(record.alignment if record.alignment is not None else np.zeros((0, 3)), dtype="<u4")
    steps, dim = record.features.shape
    if frames.size not in (0, steps):
        raise ConfigurationError(f"{record.id}: {frames.size} frame labels for {steps} frames")
    header = _RECORD_HEADER.pack(len(uid), record.conversation_id, steps, dim, ctc.size, alignment.shape[0])
    features = np.ascontiguousarray(record.features, dtype=np.dtype(dtype).newbyteorder("<"))
    # frame label count is either 0 or T
    flag = struct.pack("<I", 1 if frames.size else 0)
    return header + uid + flag + features.tobytes() + ctc.tobytes() + frames.tobytes() + alignment.tobytes()


def decode_record(blob: bytes, dtype: str = "float64") -> UtteranceRecord:
    try:
        id_len, conversation, steps, dim, num_labels, num_segments = _RECORD_HEADER.unpack_from(blob, 0)
        pos = _RECORD_HEADER.size
        uid = blob[pos:pos + id_len].decode("utf-8")
        pos += id_len
        (has_frames,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        item = np.dtype(dtype).newbyteorder("<")

        def take(count, kind):
            nonlocal pos
            size = count * kind.itemsize
            if pos + size > len(blob):
                raise DatasetLoadError(f"record {uid!r} is truncated")
            if count == 0:
                return np.zeros(0, dtype=kind)
            array = np.frombuffer(blob, dtype=kind, count=count, offset=pos)
            pos += size
            return array

        features = take(steps * dim, item).reshape(steps, dim).astype(np.dtype(dtype))
        ctc = take(num_labels, np.dtype("<u4")).astype(np.uint32)
        frames = take(steps if has_frames else 0, np.dtype("<u4")).astype(np.uint32)
        alignment = take(num_segments * 3, np.dtype("<u4")).reshape(num_segments, 3).astype(np.uint32)
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise DatasetLoadError(f"corrupt record: {e}")
    return UtteranceRecord(uid, conversation, features, ctc if num_labels else None,
                           frames if has_frames else None, alignment if num_segments else None)


def build_manifest(spec_echo: dict, records: Sequence[UtteranceRecord], dtype: str = "float64"):
    """ Returns (manifest, encoded records) with the index sorted by id """
    ordered = sorted(records, key=lambda r: r.id)
    blobs = []
    utterances = []
    offset = 0
    for record in ordered:
        blob = encode_record(record, dtype)
        utterances.append({"id": record.id, "conversation_id": record.conversation_id,
                           "num_frames": record.num_frames,
                           "num_labels": 0 if record.ctc_labels is None else int(len(record.ctc_labels)),
                           "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    return DatasetManifest(spec_echo, utterances), blobs


def generate_corpus(spec: SyntheticTaskSpec, num_workers: int = None):
    spec.validate()
    means = state_means(spec)
    offsets = conversation_offsets(spec)
    records = run_jobs(lambda index: generate_utterance(spec, index, means, offsets),
                       list(range(spec.num_utterances)), num_workers)
    manifest, _ = build_manifest(spec_echo(spec), records, spec.dtype)
    frames = sum(r.num_frames for r in records)
    logger.info(f"Generated {len(records)} utterances, {frames} frames, "
                f"{spec.vocab_size} labels / {spec.num_states} states")
    return manifest, records


def spec_echo(spec: SyntheticTaskSpec) -> dict:
    echo = asdict(spec)
    for name in ("duration_range", "label_length_range"):
        echo[name] = list(echo[name])
    return echo


def save_dataset(manifest: DatasetManifest, records: Sequence[UtteranceRecord], path: str) -> str:
    os.makedirs(path, exist_ok=True)
    dtype = manifest.spec.get("dtype", "float64")
    manifest, blobs = build_manifest(manifest.spec, records, dtype)
    with open(os.path.join(path, BINARY_FILE), "wb") as stream:
        for blob in blobs:
            stream.write(blob)
    with open(os.path.join(path, MANIFEST_FILE), "w") as stream:
        stream.write(manifest.to_json())
    size = sum(len(blob) for blob in blobs)
    logger.info(f"Saved dataset to {path} ({human_size(size)})")
    return path


def load_dataset(path: str):
    manifest_path = os.path.join(path, MANIFEST_FILE)
    try:
        with open(manifest_path, "r") as stream:
            raw = json.load(stream)
        with open(os.path.join(path, BINARY_FILE), "rb") as stream:
            blob = stream.read()
    except FileNotFoundError as e:
        raise DatasetLoadError(f"no dataset at {path}: {e.filename} missing")
    except json.JSONDecodeError as e:
        raise DatasetLoadError(f"{manifest_path}: corrupt manifest ({e})")
    version = raw.get("format_version") if isinstance(raw, dict) else None
    if version != FORMAT_VERSION:
        raise DatasetLoadError(f"{manifest_path}: unsupported format version {version}")
    try:
        manifest = DatasetManifest(raw["spec"], raw["utterances"], raw["format_version"])
        dtype = manifest.spec.get("dtype", "float64")
        index = [(entry["id"], int(entry["offset"]), int(entry["length"])) for entry in manifest.utterances]
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        raise DatasetLoadError(f"{manifest_path}: manifest is missing or has a malformed field ({e!r})")
    records = []
    for utt_id, offset, length in index:
        end = offset + length
        if offset < 0 or end > len(blob):
            raise DatasetLoadError(f"corrupt index: {utt_id} points past the end of {BINARY_FILE}")
        record = decode_record(blob[offset:end], dtype)
        if record.id != utt_id:
            raise DatasetLoadError(f"corrupt index: expected {utt_id} at offset {offset}, found {record.id}")
        records.append(record)
    logger.debug(f"Loaded {len(records)} utterances from {path}")
    return manifest, records


def normalize_per_conversation(records: Sequence[UtteranceRecord], variance: bool = True) -> List[UtteranceRecord]:
    groups: Dict[int, List[int]] = {}
    for index, record in enumerate(records):
        groups.setdefault(record.conversation_id, []).append(index)
    out = list(records)
    for indices in groups.values():
        stacked = np.vstack([records[i].features for i in indices]).astype(np.float64)
        mean = stacked.mean(axis=0)
        std = np.maximum(stacked.std(axis=0), STD_FLOOR) if variance else np.ones_like(mean)
        for i in indices:
            features = ((records[i].features - mean) / std).astype(records[i].features.dtype)
            out[i] = replace(records[i], features=features)
    return out


def speed_perturb(features: np.ndarray, factor: float) -> np.ndarray:
    if not SPEED_RANGE[0] <= factor <= SPEED_RANGE[1]:
        raise ConfigurationError(f"speed perturbation factor must be in {list(SPEED_RANGE)}, got {factor}")
    steps = features.shape[0]
    new_steps = max(1, int(round(steps / factor)))
    positions = np.minimum(np.arange(new_steps) * factor, steps - 1)
    low = np.floor(positions).astype(np.int64)
    high = np.minimum(low + 1, steps - 1)
    weight = (positions - low)[:, None]
    return ((1.0 - weight) * features[low] + weight * features[high]).astype(features.dtype)


def perturb_corpus(records: Sequence[UtteranceRecord], factors: Sequence[float]) -> List[UtteranceRecord]:
    """ Originals followed by speed-perturbed copies; copies keep the label sequence only """
    out = list(records)
    for factor in factors:
        if factor == 1.0:
            continue
        for record in records:
            out.append(UtteranceRecord(f"{record.id}-sp{factor:g}", record.conversation_id,
                                       speed_perturb(record.features, factor), record.ctc_labels))
    return out


def split_into_subsequences(record: UtteranceRecord, chunk: int = 50, overlap: int = 25) -> List[UtteranceRecord]:
    if chunk < 1 or not 0 <= overlap < chunk:
        raise ConfigurationError(f"chunking needs chunk >= 1 and 0 <= overlap < chunk, got {chunk}/{overlap}")
    steps = record.num_frames
    if steps <= chunk:
        starts = [0]
    else:
        starts = list(range(0, steps - chunk + 1, chunk - overlap))
        if starts[-1] + chunk < steps:
            starts.append(steps - chunk)
    chunks = []
    for k, start in enumerate(starts):
        end = min(start + chunk, steps)
        frames = None if record.frame_labels is None else record.frame_labels[start:end]
        chunks.append(UtteranceRecord(f"{record.id}-c{k}", record.conversation_id, record.features[start:end],
                                      None, frames))
    return chunks


def split_train_cv(records: Sequence[UtteranceRecord], fraction: float = 0.05, seed: int = 0):
    """ Fixed held-out split, both halves keep corpus order """
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError(f"train.cv_fraction must be in [0, 1), got {fraction}")
    count = len(records)
    num_cv = min(count - 1, max(1, int(round(count * fraction)))) if count > 1 and fraction > 0 else 0
    held_out = set(np.random.default_rng([seed, 3]).permutation(count)[:num_cv].tolist())
    train = [r for i, r in enumerate(records) if i not in held_out]
    cv = [r for i, r in enumerate(records) if i in held_out]
    return train, cv
