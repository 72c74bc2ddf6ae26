import argparse
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from library.attention import AttentionModel, attention_beam_decode
from library.config import DEFAULT_CONFIG, RunConfig, load_config, parse_overrides
from library.data import generate_corpus, load_dataset, normalize_per_conversation, save_dataset, \
    spec_from_manifest, split_train_cv
from library.decoder import Hypothesis, format_nbest, greedy_decode, prefix_beam_search
from library.errors import CheckpointError, ConfigurationError, DatasetLoadError, InvalidInputError, \
    InvalidTargetError, MtlError, TransferError
from library.log import logger
from library.model import forward_multitask, load_checkpoint
from library.scheduler import worker_count
from library.stats import aggregate, convergence_report, first_epoch_below, write_csv
from library.training import Stage, TrainConfig, Trainer, build_stage_model, evaluate, resolve_checkpoint_path, \
    restore_model, run_two_step, stage_train_records

STAGE_FLAGS = {"joint": "joint", "ctc": "finetune_ctc", "ce": "finetune_ce", "attention": "attention",
               "finetune_ctc": "finetune_ctc", "finetune_ce": "finetune_ce"}
ORDER_FLAGS = {"asc": "ascending", "ascending": "ascending", "desc": "descending", "descending": "descending",
               "random": "random"}
SWEEP_HEADER = ["lambda", "ter_mean", "ter_std", "fer_mean", "fer_std", "epochs_to_threshold_mean",
                "epochs_to_threshold_std", "runs_reaching_threshold", "num_seeds"]

USAGE_ERRORS = (ConfigurationError, InvalidInputError, TransferError, CheckpointError, DatasetLoadError,
                InvalidTargetError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got '{text}'")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got '{text}'")


def _config_path(args) -> Optional[str]:
    if args.config:
        return args.config
    return DEFAULT_CONFIG if os.path.isfile(DEFAULT_CONFIG) else None


def prepare_records(data_dir: str, normalization: str = "mean_variance", cv_fraction: float = 0.05):
    """ Load, normalize per conversation and split; returns (spec, train, cv, all) """
    manifest, records = load_dataset(data_dir)
    spec = spec_from_manifest(manifest)
    if normalization != "none":
        records = normalize_per_conversation(records, variance=normalization == "mean_variance")
    train, cv = split_train_cv(records, cv_fraction, spec.seed)
    return spec, train, cv, records


def _encoder_config(run_config: RunConfig, spec):
    if run_config.model.input_dim != spec.feature_dim:
        logger.info(f"model.input_dim set to the dataset feature dimension {spec.feature_dim}")
    return replace(run_config.model, input_dim=spec.feature_dim)


def _train_stage(run_config: RunConfig, train_config: TrainConfig, data_dir: str, run_dir: str):
    spec, train, cv, _ = prepare_records(data_dir, train_config.normalization, train_config.cv_fraction)
    if not cv:
        raise ConfigurationError("the cross-validation split is empty, raise train.cv_fraction or the corpus size")
    stage = Stage(train_config.stage)
    model = build_stage_model(stage, _encoder_config(run_config, spec), run_config.attention_model,
                              spec.vocab_size, spec.num_states, train_config)
    run_config.write_resolved(run_dir, {"stage": stage.value, "data": data_dir, "train": train_config})
    max_len = run_config.decode.max_len or None
    trainer = Trainer(model, train_config, run_dir, max_decode_len=max_len)
    return trainer.fit(stage_train_records(train, train_config), cv)


def cmd_gen_data(args, overrides) -> int:
    run_config = load_config(_config_path(args), overrides)
    manifest, records = generate_corpus(run_config.data, worker_count())
    save_dataset(manifest, records, args.out)
    return 0


def cmd_train(args, overrides) -> int:
    run_config = load_config(_config_path(args), overrides)
    stage = STAGE_FLAGS[args.stage]
    train_config = run_config.train_config(stage, init_from=args.init_from,
                                           ordering=ORDER_FLAGS[args.order] if args.order else None,
                                           lam=args.lam, seed=args.seed, epochs=args.epochs)
    _train_stage(run_config, train_config, args.data, args.run_dir)
    return 0


def cmd_two_step(args, overrides) -> int:
    run_config = load_config(_config_path(args), overrides)
    joint = run_config.train_config(Stage.JOINT.value, seed=args.seed)
    spec, train, cv, _ = prepare_records(args.data, joint.normalization, joint.cv_fraction)
    finetune = {stage: run_config.train_config(stage, seed=args.seed)
                for stage in (Stage.FINETUNE_CTC.value, Stage.FINETUNE_CE.value)}
    run_config.write_resolved(args.run_dir, {"command": "two-step", "snapshot": args.snapshot, "data": args.data})
    finals = run_two_step(train, cv, _encoder_config(run_config, spec), spec.vocab_size, spec.num_states, joint,
                          finetune, args.run_dir, args.snapshot)
    for stage, path in finals.items():
        logger.info(f"{stage}: {path}")
    return 0


def cmd_lambda_sweep(args, overrides) -> int:
    run_config = load_config(_config_path(args), overrides)
    sweep = run_config.sweep
    grid = args.grid or sweep.grid
    seeds = args.seeds or sweep.seeds
    epochs = args.epochs or sweep.epochs
    rows = []
    for lam in grid:
        ters, fers, reached = [], [], []
        for seed in seeds:
            train_config = run_config.train_config(Stage.JOINT.value, lam=lam, seed=seed, epochs=epochs)
            run_dir = os.path.join(args.run_dir, f"lambda-{lam:g}", f"seed-{seed}")
            reports = _train_stage(run_config, train_config, args.data, run_dir)
            ters.append(reports[-1].ter)
            fers.append(reports[-1].framewise_error_rate)
            reached.append(first_epoch_below([r.__dict__ for r in reports], "ter", sweep.ter_threshold))
        ter_mean, ter_std = aggregate(ters)
        fer_mean, fer_std = aggregate(fers)
        e2t_mean, e2t_std = aggregate(reached)
        rows.append([f"{lam:g}", _cell(ter_mean), _cell(ter_std), _cell(fer_mean), _cell(fer_std),
                     _cell(e2t_mean), _cell(e2t_std), sum(r is not None for r in reached), len(seeds)])
        logger.info(f"lambda {lam:g}: TER {_cell(ter_mean)} +- {_cell(ter_std)} over {len(seeds)} seed(s)")
    path = os.path.join(args.run_dir, "sweep.csv")
    write_csv(path, SWEEP_HEADER, rows)
    logger.info(f"Wrote {path}")
    return 0


def _cell(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _load_for_eval(args):
    ckpt = load_checkpoint(resolve_checkpoint_path(args.checkpoint))
    model = restore_model(ckpt)
    training = ckpt.config.get("training", {})
    spec, train, cv, everything = prepare_records(args.data, training.get("normalization", "mean_variance"),
                                                  training.get("cv_fraction", 0.05))
    records = {"cv": cv, "train": train, "all": everything}[args.split]
    config = TrainConfig(stage=training.get("stage", Stage.ATTENTION.value if isinstance(model, AttentionModel)
                                            else Stage.JOINT.value),
                         lam=training.get("lam", 0.9), ce_normalize=training.get("ce_normalize", False))
    return model, config, records


def decode_utterance(model, features: np.ndarray, mode: str, beam: int, max_len: Optional[int] = None):
    if features.ndim != 2 or features.shape[0] == 0:
        raise InvalidInputError("cannot decode an utterance without feature frames")
    if isinstance(model, AttentionModel):
        return attention_beam_decode(model, features, 1 if mode == "greedy" else beam, max_len)
    logprobs = forward_multitask(model, features).ctc_logprobs
    if mode == "greedy":
        score = float(np.sum(np.max(logprobs, axis=1)))
        return [Hypothesis(greedy_decode(logprobs), score)]
    return prefix_beam_search(logprobs, beam)


def decode_metadata(model, checkpoint: str, mode: str, beam: int) -> str:
    if isinstance(model, AttentionModel):
        note = "greedy is attention beam search with beam=1"
    else:
        note = "greedy is best-path decoding scored by its path log-prob; beam=1 prefix search scores prefixes " \
               "and can differ"
    return f"# checkpoint={checkpoint} model={model.kind} mode={mode} beam={beam if mode == 'beam' else 1} " \
           f"({note})"


def _decode_settings(args, run_config: RunConfig):
    """ Command-line flags win over the decode section """
    decode = run_config.decode
    mode = getattr(args, "mode", None) or decode.mode
    beam = getattr(args, "beam", None) or decode.beam
    max_len = args.max_len if args.max_len is not None else decode.max_len
    if beam < 1 or max_len < 0:
        raise ConfigurationError(f"beam must be >= 1 and max_len >= 0, got beam={beam} max_len={max_len}")
    return mode, beam, max_len or None


def cmd_decode(args, overrides) -> int:
    run_config = load_config(_config_path(args), overrides)
    mode, beam, max_len = _decode_settings(args, run_config)
    model, _, records = _load_for_eval(args)
    lines = [decode_metadata(model, args.checkpoint, mode, beam)]
    for record in records:
        if record.features.shape[0] == 0:
            raise InvalidInputError(f"{record.id}: utterance has no feature frames")
        hyps = decode_utterance(model, record.features, mode, beam, max_len)
        lines.extend(format_nbest(record.id, hyps))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as stream:
            stream.write(text)
        logger.info(f"Wrote {len(records)} n-best lists to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args, overrides) -> int:
    run_config = load_config(_config_path(args), overrides)
    _, _, max_len = _decode_settings(args, run_config)
    model, config, records = _load_for_eval(args)
    metrics = evaluate(model, records, config, max_len)
    sys.stdout.write(json.dumps(metrics.to_dict(), sort_keys=True) + "\n")
    return 0


def cmd_convergence_report(args, overrides) -> int:
    # only validates overrides, the report itself is driven by its flags
    load_config(_config_path(args), overrides)
    header, rows, summary_header, summary = convergence_report(args.run_dirs, args.reference)
    if args.out:
        write_csv(args.out, header, rows)
        root, ext = os.path.splitext(args.out)
        write_csv(f"{root}.summary{ext or '.csv'}", summary_header, summary)
        logger.info(f"Wrote {args.out}")
    else:
        for row in [header] + rows + [[]] + [summary_header] + summary:
            sys.stdout.write(",".join(str(v) for v in row) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="app.py", description="Multi-task CTC / framewise CE training lab")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(func=func)
        return sub

    gen = command("gen-data", cmd_gen_data, "generate the synthetic corpus")
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)

    train = command("train", cmd_train, "train one stage")
    train.add_argument("--config")
    train.add_argument("--data", required=True)
    train.add_argument("--run-dir", required=True)
    train.add_argument("--stage", choices=sorted(STAGE_FLAGS), default="joint")
    train.add_argument("--init-from")
    train.add_argument("--order", choices=sorted(ORDER_FLAGS))
    train.add_argument("--lambda", dest="lam", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--epochs", type=int)

    two_step = command("two-step", cmd_two_step, "joint training then CTC and CE fine-tuning from a snapshot")
    two_step.add_argument("--config")
    two_step.add_argument("--data", required=True)
    two_step.add_argument("--run-dir", required=True)
    two_step.add_argument("--snapshot", type=int)
    two_step.add_argument("--seed", type=int)

    sweep = command("lambda-sweep", cmd_lambda_sweep, "train one joint model per lambda and seed")
    sweep.add_argument("--config")
    sweep.add_argument("--data", required=True)
    sweep.add_argument("--run-dir", required=True)
    sweep.add_argument("--grid", type=_float_list)
    sweep.add_argument("--seeds", type=_int_list)
    sweep.add_argument("--epochs", type=int)

    for name, func, help_text in (("decode", cmd_decode, "write n-best hypotheses"),
                                  ("eval", cmd_eval, "print CV loss, TER and framewise error as JSON")):
        sub = command(name, func, help_text)
        sub.add_argument("--config")
        sub.add_argument("--checkpoint", required=True)
        sub.add_argument("--data", required=True)
        sub.add_argument("--split", choices=["cv", "train", "all"], default="cv")
        sub.add_argument("--max-len", type=int)
        if name == "decode":
            sub.add_argument("--mode", choices=["greedy", "beam"])
            sub.add_argument("--beam", type=int)
            sub.add_argument("--out")

    report = command("convergence-report", cmd_convergence_report, "compare CV-loss curves across runs")
    report.add_argument("--config")
    report.add_argument("run_dirs", nargs="+")
    report.add_argument("--reference", type=int, default=0)
    report.add_argument("--out")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """ Exit codes: 0 success, 1 usage / configuration / input error, 2 runtime or numeric failure """
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = parse_overrides(extra)
        return args.func(args, overrides)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        logger.error(str(e))
        return 1
    except USAGE_ERRORS as e:
        logger.error(str(e))
        return 1
    except MtlError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 2
