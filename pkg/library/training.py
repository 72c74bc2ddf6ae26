"""
Training loop for the multi-task, single-task and attention stages.

Per mini-batch every utterance is run on a worker with its own gradient
buffer and its own RNG stream; buffers are summed in utterance order before
the optimizer step, so results do not depend on the number of workers.
"""
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from library.attention import AttentionConfig, AttentionModel, attention_beam_decode, attention_forward_train, \
    restore_attention, transfer_encoder
from library.data import UtteranceRecord, perturb_corpus, split_into_subsequences
from library.decoder import EditStats, edit_distance, greedy_decode
from library.errors import CheckpointError, ConfigurationError, TrainingDivergedError
from library.log import logger
from library.losses import combine_losses, ctc_loss_and_grad, framewise_ce_loss
from library.model import Checkpoint, Model, MultiTaskModel, backward_multitask, checkpoint_from_model, \
    forward_multitask, load_checkpoint, restore_multitask, save_checkpoint
from library.nn import Gradients, reduce_gradients
from library.optim import NEWBOB_THRESHOLD, NewBobState, OPTIMIZERS, build_optimizer, newbob_update
from library.scheduler import deterministic_mode, run_jobs, worker_count
from library.stats import METRICS_FILE, process_memory

BEST_POINTER = "best"


class Stage(Enum):
    JOINT = "joint"
    FINETUNE_CTC = "finetune_ctc"
    FINETUNE_CE = "finetune_ce"
    ATTENTION = "attention"


class Ordering(Enum):
    ASCENDING = "ascending"
    DESCENDING = "descending"
    RANDOM = "random"


@dataclass
class TrainConfig:
    lam: float = 0.9
    ordering: str = "random"
    optimizer: Optional[str] = None         # sgd, or adam for the attention stage
    initial_lr: Optional[float] = None      # optimizer default when unset
    decay_factor: Optional[float] = None
    epochs: int = 30
    batch_size: int = 8
    stage: str = "joint"
    init_from: Optional[str] = None
    init_scope: str = "all"
    seed: int = 0
    clip_norm: Optional[float] = 5.0
    newbob_threshold: float = NEWBOB_THRESHOLD
    ce_normalize: bool = False
    sampling_rate: Optional[float] = None   # attention_model.sampling_rate when unset
    speed_perturb: List[float] = field(default_factory=list)
    ce_chunk_frames: int = 0
    ce_chunk_overlap: int = 25
    cv_fraction: float = 0.05
    normalization: str = "mean_variance"

    def resolved(self) -> "TrainConfig":
        """ Fill optimizer-dependent defaults and validate """
        stage = Stage(self.stage) if self.stage in {s.value for s in Stage} else None
        if stage is None:
            raise ConfigurationError(f"train.stage must be one of {[s.value for s in Stage]}, got '{self.stage}'")
        optimizer = self.optimizer or ("adam" if stage == Stage.ATTENTION else "sgd")
        if optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"train.optimizer must be one of {sorted(OPTIMIZERS)}, got '{optimizer}'")
        cls = OPTIMIZERS[optimizer]
        config = replace(self, optimizer=optimizer,
                         initial_lr=cls.default_lr if self.initial_lr is None else self.initial_lr,
                         decay_factor=cls.default_decay if self.decay_factor is None else self.decay_factor)
        config.validate()
        return config

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"train.lam must be in [0, 1], got {self.lam}")
        if self.ordering not in {o.value for o in Ordering}:
            raise ConfigurationError(f"train.ordering must be one of {[o.value for o in Ordering]}, "
                                     f"got '{self.ordering}'")
        if self.initial_lr is not None and not self.initial_lr > 0:
            raise ConfigurationError(f"train.initial_lr must be > 0, got {self.initial_lr}")
        if self.decay_factor is not None and not 0.0 < self.decay_factor < 1.0:
            raise ConfigurationError(f"train.decay_factor must be in (0, 1), got {self.decay_factor}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("train.epochs and train.batch_size must be >= 1")
        if self.init_scope not in ("all", "encoder"):
            raise ConfigurationError(f"train.init_scope must be 'all' or 'encoder', got '{self.init_scope}'")
        if self.sampling_rate is not None and not 0.0 <= self.sampling_rate <= 1.0:
            raise ConfigurationError(f"train.sampling_rate must be in [0, 1], got {self.sampling_rate}")
        if self.normalization not in ("mean_variance", "mean", "none"):
            raise ConfigurationError(f"train.normalization must be mean_variance, mean or none, "
                                     f"got '{self.normalization}'")
        return self

    @property
    def head_weights(self):
        """ (CTC weight, CE weight) of the stage """
        stage = Stage(self.stage)
        if stage == Stage.JOINT:
            return 1.0 - self.lam, self.lam
        if stage == Stage.FINETUNE_CTC:
            return 1.0, 0.0
        if stage == Stage.FINETUNE_CE:
            return 0.0, 1.0
        return 1.0, 0.0


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_ctc_loss: Optional[float]
    train_ce_loss: Optional[float]
    cv_loss: float
    ter: Optional[float]
    framewise_error_rate: Optional[float]
    lr: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class EvalMetrics:
    cv_loss: float
    ter: Optional[float]
    framewise_error_rate: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UtteranceResult:
    grads: Gradients
    loss: float
    ctc_loss: Optional[float] = None
    ce_loss: Optional[float] = None


def order_utterances(records: Sequence[UtteranceRecord], policy: str, seed: int = 0, epoch: int = 0) -> List[int]:
    lengths = [r.num_frames for r in records]
    ordering = Ordering(policy)
    if ordering == Ordering.ASCENDING:
        return sorted(range(len(records)), key=lambda i: lengths[i])
    if ordering == Ordering.DESCENDING:
        return sorted(range(len(records)), key=lambda i: -lengths[i])
    return np.random.default_rng([seed, 0, epoch]).permutation(len(records)).tolist()


def utterance_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, epoch, position])


def utterance_metrics(ctc_logprobs: Optional[np.ndarray], ce_logprobs: Optional[np.ndarray],
                      ctc_labels, frame_targets):
    """ Returns (EditStats or None, frame errors, frames) for one utterance """
    stats = None
    if ctc_logprobs is not None and ctc_labels is not None:
        stats = edit_distance([int(z) for z in ctc_labels], greedy_decode(ctc_logprobs))
    errors = frames = 0
    if ce_logprobs is not None and frame_targets is not None:
        predicted = np.argmax(ce_logprobs, axis=1)
        errors = int(np.count_nonzero(predicted != np.asarray(frame_targets)))
        frames = len(frame_targets)
    return stats, errors, frames


def stage_loss(model: MultiTaskModel, config: TrainConfig, record: UtteranceRecord, training: bool,
               rng: Optional[np.random.Generator] = None, grads: Optional[Gradients] = None,
               scale: float = 1.0):
    """
    Forward one utterance through the multi-task model, compute the stage loss and,
    when `grads` is given, accumulate scaled gradients. Heads with weight 0 get no backward.
    Returns (UtteranceResult, MultiTaskOutput).
    """
    ctc_weight, ce_weight = config.head_weights
    stage = Stage(config.stage)
    out = forward_multitask(model, record.features, training, rng)
    ctc = ce = None
    if record.ctc_labels is not None and (ctc_weight > 0.0 or stage == Stage.JOINT):
        ctc, _ = ctc_loss_and_grad(out.ctc_logprobs, record.ctc_labels)
    if record.frame_labels is not None and (ce_weight > 0.0 or stage == Stage.JOINT):
        ce = framewise_ce_loss(out.ce_logprobs, model.frame_targets(record.frame_labels), config.ce_normalize)
    if stage == Stage.JOINT:
        if ctc is None or ce is None:
            raise ConfigurationError(f"{record.id}: joint training needs both CTC labels and frame labels")
        loss = combine_losses(ctc, ce, config.lam).loss
    elif stage == Stage.FINETUNE_CTC:
        if ctc is None:
            raise ConfigurationError(f"{record.id}: CTC fine-tuning needs CTC labels")
        loss = ctc.loss
    else:
        if ce is None:
            raise ConfigurationError(f"{record.id}: CE fine-tuning needs frame labels")
        loss = ce.loss
    result = UtteranceResult(grads if grads is not None else Gradients(), loss,
                             None if ctc is None else ctc.loss, None if ce is None else ce.loss)
    if grads is not None:
        ctc_grad = ctc.grad_logits * (ctc_weight * scale) if ctc_weight > 0.0 else None
        ce_grad = ce.grad_logits * (ce_weight * scale) if ce_weight > 0.0 else None
        backward_multitask(model, out.cache, ctc_grad, ce_grad, grads)
    return result, out


def evaluate(model: Model, records: Sequence[UtteranceRecord], config: TrainConfig,
             max_len: Optional[int] = None) -> EvalMetrics:
    """ Dropout off, no RNG: the same call always returns the same numbers """
    if not records:
        raise ConfigurationError("cannot evaluate on an empty set")
    total_loss = 0.0
    edits = EditStats()
    have_edits = False
    frame_errors = frames = 0
    for record in records:
        if isinstance(model, AttentionModel):
            result = attention_forward_train(model, record.features, record.ctc_labels, 0.0, training=False,
                                             backward=False)
            total_loss += result.loss
            best = attention_beam_decode(model, record.features, beam=1, max_len=max_len)[0]
            edits = edits + edit_distance([int(z) for z in record.ctc_labels], best.labels)
            have_edits = True
            continue
        result, out = stage_loss(model, config, record, training=False)
        total_loss += result.loss
        frame_targets = None if record.frame_labels is None else model.frame_targets(record.frame_labels)
        stats, errors, count = utterance_metrics(out.ctc_logprobs, out.ce_logprobs, record.ctc_labels, frame_targets)
        if stats is not None:
            edits = edits + stats
            have_edits = True
        frame_errors += errors
        frames += count
    return EvalMetrics(total_loss / len(records), edits.error_rate if have_edits else None,
                       frame_errors / frames if frames else None)


def restore_model(ckpt: Checkpoint) -> Model:
    kind = ckpt.config.get("kind")
    if kind == MultiTaskModel.kind:
        return restore_multitask(ckpt)
    if kind == AttentionModel.kind:
        return restore_attention(ckpt)
    raise CheckpointError(f"unknown model kind '{kind}' in checkpoint")


def resolve_checkpoint_path(path: str) -> str:
    """ A run directory resolves to its best checkpoint """
    if os.path.isdir(path):
        pointer = os.path.join(path, BEST_POINTER)
        if not os.path.exists(pointer):
            raise CheckpointError(f"run directory {path} has no '{BEST_POINTER}' pointer")
        with open(pointer, "r") as stream:
            return os.path.join(path, stream.read().strip())
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} does not exist")
    return path


def init_from_checkpoint(model: Model, ckpt: Checkpoint, scope: str = "all") -> List[str]:
    """ Copy every tensor whose name and shape match; scope=encoder restricts to the shared trunk """
    params = model.parameters()
    copied, skipped = [], []
    for name, param in params.items():
        if scope == "encoder" and not name.startswith("encoder."):
            continue
        value = ckpt.params.get(name)
        if value is None or value.shape != param.shape:
            skipped.append(name)
            continue
        param.assign(value)
        copied.append(name)
    if skipped:
        logger.warning(f"Not initialized from checkpoint ({len(skipped)}): {', '.join(skipped)}")
    logger.info(f"Initialized {len(copied)} tensors from checkpoint (scope={scope})")
    return copied


class Trainer:
    def __init__(self, model: Model, config: TrainConfig, run_dir: Optional[str] = None,
                 num_workers: Optional[int] = None, max_decode_len: Optional[int] = None):
        self.config = config.resolved()
        self.stage = Stage(self.config.stage)
        if (self.stage == Stage.ATTENTION) != isinstance(model, AttentionModel):
            raise ConfigurationError(f"a {model.kind} model cannot run the {self.stage.value} stage")
        self.model = model
        self.params = model.parameters()
        self.optimizer = build_optimizer(self.config.optimizer, self.params, self.config.initial_lr)
        self.newbob = NewBobState(self.optimizer.lr)
        self.run_dir = run_dir
        self.num_workers = worker_count() if num_workers is None else num_workers
        self.max_decode_len = max_decode_len
        self.sampling_rate = self.config.sampling_rate
        if self.sampling_rate is None:
            self.sampling_rate = model.config.sampling_rate if isinstance(model, AttentionModel) else 0.0
        self.reports: List[EpochReport] = []
        self.best_cv_loss = math.inf
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)

    def _utterance_step(self, job):
        record, rng, scale = job
        grads = Gradients()
        if self.stage == Stage.ATTENTION:
            result = attention_forward_train(self.model, record.features, record.ctc_labels, self.sampling_rate,
                                             rng, training=True, grads=grads, loss_scale=scale)
            return UtteranceResult(grads, result.loss)
        result, _ = stage_loss(self.model, self.config, record, True, rng, grads, scale)
        return result

    def train_epoch(self, records: Sequence[UtteranceRecord], epoch: int) -> Dict[str, Optional[float]]:
        order = order_utterances(records, self.config.ordering, self.config.seed, epoch)
        totals = {"loss": 0.0, "ctc": 0.0, "ce": 0.0}
        seen = {"ctc": 0, "ce": 0}
        for start in range(0, len(order), self.config.batch_size):
            positions = range(start, min(start + self.config.batch_size, len(order)))
            scale = 1.0 / len(positions)
            jobs = [(records[order[p]], utterance_rng(self.config.seed, epoch, p), scale) for p in positions]
            results = run_jobs(self._utterance_step, jobs, self.num_workers)
            batch_loss = sum(r.loss for r in results)
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(f"epoch {epoch}: non-finite training loss")
            self.optimizer.zero_grad()
            reduce_gradients(self.params, [r.grads for r in results])
            norm = self.optimizer.clip(self.config.clip_norm)
            self.optimizer.step()
            totals["loss"] += batch_loss
            for result in results:
                if result.ctc_loss is not None:
                    totals["ctc"] += result.ctc_loss
                    seen["ctc"] += 1
                if result.ce_loss is not None:
                    totals["ce"] += result.ce_loss
                    seen["ce"] += 1
            logger.debug(f"epoch {epoch} batch {start // self.config.batch_size}: "
                         f"loss {batch_loss / len(positions):.4f}, grad norm {norm:.3f}")
        return {"loss": totals["loss"] / len(order),
                "ctc": totals["ctc"] / seen["ctc"] if seen["ctc"] else None,
                "ce": totals["ce"] / seen["ce"] if seen["ce"] else None}

    def run_epoch(self, train: Sequence[UtteranceRecord], cv: Sequence[UtteranceRecord], epoch: int) -> EpochReport:
        started = time.time()
        lr = self.optimizer.lr
        train_stats = self.train_epoch(train, epoch)
        metrics = evaluate(self.model, cv, self.config, self.max_decode_len)
        wall_time = 0.0 if deterministic_mode() else time.time() - started
        report = EpochReport(epoch, train_stats["loss"], train_stats["ctc"], train_stats["ce"], metrics.cv_loss,
                             metrics.ter, metrics.framewise_error_rate, lr, wall_time)
        self.optimizer.lr = newbob_update(self.newbob, metrics.cv_loss, self.config.decay_factor,
                                          self.config.newbob_threshold, epoch)
        if self.optimizer.lr < lr:
            logger.info(f"Learning rate decayed to {self.optimizer.lr:.3g}")
        return report

    def checkpoint(self, epoch: int) -> Checkpoint:
        rng_state = {"seed": self.config.seed, "next_epoch": epoch + 1, "lr": self.optimizer.lr,
                     "decay_triggered": self.newbob.decay_triggered}
        extra = {"training": {"stage": self.stage.value, "lam": self.config.lam,
                              "ce_normalize": self.config.ce_normalize,
                              "normalization": self.config.normalization,
                              "cv_fraction": self.config.cv_fraction}}
        return checkpoint_from_model(self.model, epoch, rng_state, extra)

    def _record(self, report: EpochReport):
        self.reports.append(report)
        if not self.run_dir:
            return
        name = f"ckpt-epoch-{report.epoch}"
        save_checkpoint(self.checkpoint(report.epoch), os.path.join(self.run_dir, name))
        if report.cv_loss < self.best_cv_loss:
            self.best_cv_loss = report.cv_loss
            with open(os.path.join(self.run_dir, BEST_POINTER), "w") as stream:
                stream.write(name + "\n")
        with open(os.path.join(self.run_dir, METRICS_FILE), "a") as stream:
            stream.write(report.to_json() + "\n")

    def fit(self, train: Sequence[UtteranceRecord], cv: Sequence[UtteranceRecord],
            epochs: Optional[int] = None) -> List[EpochReport]:
        epochs = self.config.epochs if epochs is None else epochs
        logger.info(f"Training stage {self.stage.value}: {len(train)} train / {len(cv)} cv utterances, "
                    f"{self.model.num_parameters()} parameters, {self.num_workers} worker(s)")
        for epoch in range(1, epochs + 1):
            try:
                report = self.run_epoch(train, cv, epoch)
            except TrainingDivergedError:
                logger.error(f"Training diverged in epoch {epoch}, last good checkpoint is epoch {epoch - 1}")
                raise
            self._record(report)
            ter = "n/a" if report.ter is None else f"{report.ter:.2%}"
            fer = "n/a" if report.framewise_error_rate is None else f"{report.framewise_error_rate:.2%}"
            logger.info(f"Epoch {epoch}: train {report.train_loss:.4f}, cv {report.cv_loss:.4f}, TER {ter}, "
                        f"FER {fer}, lr {report.lr:.3g}, rss {process_memory()}")
        return self.reports


def build_stage_model(stage: Stage, encoder_config, attention_config: AttentionConfig, vocab_size: int,
                      num_states: int, config: TrainConfig) -> Model:
    """ Fresh or checkpoint-initialized model for a stage """
    ckpt = load_checkpoint(resolve_checkpoint_path(config.init_from)) if config.init_from else None
    if stage == Stage.ATTENTION:
        if ckpt is None:
            return AttentionModel(encoder_config, attention_config, vocab_size, config.seed)
        if ckpt.config.get("kind") == AttentionModel.kind:
            return restore_attention(ckpt)
        return transfer_encoder(ckpt, attention_config, config.seed)
    model = MultiTaskModel(encoder_config, vocab_size, num_states, config.seed)
    if ckpt is not None:
        init_from_checkpoint(model, ckpt, config.init_scope)
    return model


def run_two_step(train: Sequence[UtteranceRecord], cv: Sequence[UtteranceRecord], encoder_config,
                 vocab_size: int, num_states: int, joint_config: TrainConfig,
                 finetune_configs: Dict[str, TrainConfig], run_dir: str, snapshot_epoch: Optional[int] = None,
                 num_workers: Optional[int] = None) -> Dict[str, str]:
    """
    Joint training, then one fine-tune per entry of `finetune_configs` (keyed by stage
    name) initialized from the joint snapshot of `snapshot_epoch` (default: last epoch).
    Returns the best checkpoint path of every stage.
    """
    joint_dir = os.path.join(run_dir, Stage.JOINT.value)
    joint = build_stage_model(Stage.JOINT, encoder_config, None, vocab_size, num_states,
                              replace(joint_config, stage=Stage.JOINT.value))
    Trainer(joint, replace(joint_config, stage=Stage.JOINT.value), joint_dir, num_workers).fit(train, cv)
    snapshot_epoch = joint_config.epochs if snapshot_epoch is None else snapshot_epoch
    snapshot = os.path.join(joint_dir, f"ckpt-epoch-{snapshot_epoch}")
    if not os.path.exists(snapshot):
        raise ConfigurationError(f"snapshot m-pretrain-{snapshot_epoch} ({snapshot}) does not exist")
    finals = {Stage.JOINT.value: resolve_checkpoint_path(joint_dir)}
    for stage_name, stage_config in finetune_configs.items():
        stage_config = replace(stage_config, stage=stage_name, init_from=snapshot, init_scope="all")
        model = build_stage_model(Stage(stage_name), encoder_config, None, vocab_size, num_states, stage_config)
        stage_dir = os.path.join(run_dir, f"{stage_name}-m-pretrain-{snapshot_epoch}")
        # fresh optimizer and learning-rate schedule per fine-tune
        Trainer(model, stage_config, stage_dir, num_workers).fit(stage_train_records(train, stage_config), cv)
        finals[stage_name] = resolve_checkpoint_path(stage_dir)
    return finals


def stage_train_records(records: Sequence[UtteranceRecord], config: TrainConfig) -> List[UtteranceRecord]:
    """ Speed-perturbed copies for the CTC/attention stages, CE chunks for the CE stage """
    stage = Stage(config.stage)
    if stage in (Stage.FINETUNE_CTC, Stage.ATTENTION) and config.speed_perturb:
        return perturb_corpus(records, config.speed_perturb)
    if stage == Stage.FINETUNE_CE and config.ce_chunk_frames > 0:
        return [chunk for record in records
                for chunk in split_into_subsequences(record, config.ce_chunk_frames, config.ce_chunk_overlap)]
    return list(records)
