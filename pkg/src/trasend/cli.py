"""Command-line interface: ``trasend <command> [options]``.

Commands::

    synth        generate a synthetic dataset (canonical CSV) from a spec
    preprocess   canonical CSV dataset -> sample archive (.npz)
    train        leave-one-user-out evaluation, or one fold with --fold USER
    evaluate     score a saved checkpoint on a dataset / archive
    personalize  adapt the output layer of a checkpoint to one user
    validate     gradcheck | permuted | ablation suites

Every command accepts ``--seed``, ``--config FILE``, ``--variant`` and
``--out DIR``. The config file is JSON with optional sections
``synthetic``, ``preprocess``, ``model``, ``train`` and ``personalize``;
unknown sections or keys are errors. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamHyper, NumericError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    SyntheticSpec,
    default_data_dir,
    extract_samples,
    generate_synthetic_dataset,
    load_dataset_csv,
    load_samples,
    save_samples,
    stack_inputs,
    write_dataset_csv,
)
from .model import ConfigError, Model, ModelConfig
from .personalize import PERSONALIZATION_ADAM, permuted_label_validation, personalize_run
from .preprocess import AlignmentError, GapError, PreprocessConfig, PreprocessedSample
from .train import TrainConfig, augment_all, confusion_matrix, leave_one_user_out, per_class_f1, train
from .validation import GRADCHECK_TOLERANCE, augmentation_ablation, gradcheck_suite

log = logging.getLogger("trasend")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
VARIANT_FLAGS = {"deepsense": "deepsense", "trasend": "trasend", "trasend-bd": "trasend_bd", "trasend-ca": "trasend_ca"}
CONFIG_SECTIONS = ("synthetic", "preprocess", "model", "train", "personalize")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be an object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def _from_section(cls, section: dict, what: str, **overrides):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {what} config keys: {sorted(unknown)}")
    values = {**section, **overrides}
    if hasattr(cls, "from_dict"):
        return cls.from_dict(values)
    return cls(**values)


def train_config(cfg: dict, seed: int) -> TrainConfig:
    return _from_section(TrainConfig, cfg.get("train", {}), "train", seed=seed)


def preprocess_config(cfg: dict) -> PreprocessConfig:
    return _from_section(PreprocessConfig, cfg.get("preprocess", {}), "preprocess")


def personalize_hyper(cfg: dict) -> AdamHyper:
    section = cfg.get("personalize", {})
    unknown = set(section) - {"lr", "beta1", "beta2", "eps"}
    if unknown:
        raise UsageError(f"unknown personalize config keys: {sorted(unknown)}")
    return dataclasses.replace(PERSONALIZATION_ADAM, **section)


def model_config(cfg: dict, samples: Sequence[PreprocessedSample], variant: str | None) -> ModelConfig:
    """Model config with sensors, T, f and C taken from the data unless given explicitly."""
    section = dict(cfg.get("model", {}))
    first = samples[0]
    inferred = {
        "sensors": [[sid, int(t.shape[0])] for sid, t in first.tensors.items()],
        "T": int(first.tensors[next(iter(first.tensors))].shape[2]),
        "f": int(first.tensors[next(iter(first.tensors))].shape[1]) // 2,
        "num_classes": int(max(s.label for s in samples)) + 1,
    }
    for k, v in inferred.items():
        section.setdefault(k, v)
    if variant is not None:
        section["variant"] = VARIANT_FLAGS[variant]
    return _from_section(ModelConfig, section, "model")


# --------------------------------------------------------------------------
# data


def resolve_data(path: str | None) -> Path:
    """``--data`` if given, else ``$TRASEND_DATA_DIR``; a directory means its manifest.json."""
    if path is None:
        root = default_data_dir()
        if root is None:
            raise UsageError("no --data given and TRASEND_DATA_DIR is not set")
        p = root
    else:
        p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise DataError(f"data not found: {p}")
    return p


def load_input_samples(path: str | None, cfg: dict) -> list[PreprocessedSample]:
    p = resolve_data(path)
    if p.suffix == ".npz":
        samples = load_samples(p)
    else:
        samples = extract_samples(load_dataset_csv(p), preprocess_config(cfg), keep_raw=True)
    if not samples:
        raise DataError(f"{p}: no complete samples")
    return samples


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg) -> int:
    spec = SyntheticSpec.from_dict({**cfg.get("synthetic", {}), "seed": args.seed})
    manifest = write_dataset_csv(generate_synthetic_dataset(spec), _out_dir(args))
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_preprocess(args, cfg) -> int:
    samples = load_input_samples(args.data, cfg)
    path = _out_dir(args) / "samples.npz"
    save_samples(samples, path)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    samples = [s for s in load_input_samples(args.data, cfg) if s.origin == "real"]
    mcfg = model_config(cfg, samples, args.variant)
    tcfg = train_config(cfg, args.seed)
    out = _out_dir(args)
    factory = lambda: Model.build(mcfg, args.seed)
    if args.fold is None:
        report = leave_one_user_out(samples, factory, tcfg)
        (out / "eval_report.json").write_text(report.to_json())
        print(f"aggregate macro-F1 {report.aggregate_f1:.4f} over {len(report.per_user)} users")
        for user, r in sorted(report.per_user.items()):
            print(f"  {user}: {r['f1']:.4f}")
        return EXIT_OK
    users = {s.user_id for s in samples}
    if args.fold not in users:
        raise DataError(f"unknown user {args.fold!r}; known: {sorted(users)}")
    train_real = [s for s in samples if s.user_id != args.fold]
    test = [s for s in samples if s.user_id == args.fold]
    copies = augment_all(train_real, tcfg.augmentation, tcfg.seed)
    train_set = [x for s, cs in zip(train_real, copies) for x in (s, *cs)]
    model = factory()
    _, history = train(model, train_set, tcfg, val_samples=test)
    save_checkpoint(model, out / "checkpoint")
    _write_json(out / "history.json", {
        "train_loss": history.train_loss, "val_f1": history.val_f1, "best_epoch": history.best_epoch,
    })
    print(f"fold {args.fold}: best epoch {history.best_epoch + 1}, macro-F1 {max(history.val_f1):.4f}")
    print(f"checkpoint written to {out / 'checkpoint'}")
    return EXIT_OK


def _checkpoint_model(args) -> Model:
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(args.checkpoint).model()


def cmd_evaluate(args, cfg) -> int:
    model = _checkpoint_model(args)
    samples = [s for s in load_input_samples(args.data, cfg) if s.origin == "real"]
    if args.user is not None:
        samples = [s for s in samples if s.user_id == args.user]
        if not samples:
            raise DataError(f"no samples for user {args.user!r}")
    C = model.config.num_classes
    pred = model.predict(stack_inputs(samples, [sid for sid, _ in model.config.sensors]))
    true = np.array([s.label for s in samples])
    per_user = {}
    for user in sorted({s.user_id for s in samples}):
        idx = [i for i, s in enumerate(samples) if s.user_id == user]
        cm = confusion_matrix(pred[idx], true[idx], C)
        per_user[user] = {"f1": float(per_class_f1(cm).mean()), "confusion": cm.tolist()}
    report = {
        "per_user": per_user,
        "aggregate_f1": float(np.mean([r["f1"] for r in per_user.values()])),
        "config_hash": model.config.fingerprint(),
        "seed": model.seed,
        "averaging": "macro",
    }
    _write_json(_out_dir(args) / "evaluation.json", report)
    print(f"aggregate macro-F1 {report['aggregate_f1']:.4f}")
    return EXIT_OK


def cmd_personalize(args, cfg) -> int:
    model = _checkpoint_model(args)
    if args.user is None:
        raise UsageError("--user is required")
    samples = [s for s in load_input_samples(args.data, cfg) if s.user_id == args.user]
    if not samples:
        raise DataError(f"no samples for user {args.user!r}")
    result, session = personalize_run(model, samples, personalize_hyper(cfg))
    out = _out_dir(args)
    _write_json(out / "personalization.json", {"user": args.user, **result.to_dict()})
    print(f"user {args.user}: macro-F1 {result.f1_before:.4f} -> {result.f1_after:.4f} "
          f"({result.n_adapt} adaptation / {result.n_test} test samples)")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args, cfg) -> int:
    out = _out_dir(args)
    if args.suite == "gradcheck":
        errors = gradcheck_suite(args.seed, include_model=True)
        worst = max(errors.values())
        for name, err in errors.items():
            flag = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
            print(f"{name:28s} {err:.3e}  {flag}")
        _write_json(out / "gradcheck.json", errors)
        return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_NUMERIC
    if args.data is None and default_data_dir() is None:
        spec = SyntheticSpec.from_dict({**cfg.get("synthetic", {}), "seed": args.seed})
        samples = extract_samples(generate_synthetic_dataset(spec), preprocess_config(cfg))
    else:
        samples = load_input_samples(args.data, cfg)
    mcfg = model_config(cfg, samples, args.variant)
    tcfg = train_config(cfg, args.seed)
    if args.suite == "permuted":
        result = permuted_label_validation(samples, lambda: Model.build(mcfg, args.seed), tcfg,
                                           hyper=personalize_hyper(cfg))
        result["chance"] = 1.0 / mcfg.num_classes
        print(f"permuted-label training: macro-F1 {result['f1_random_train']:.4f} "
              f"(chance {result['chance']:.4f}); after personalization {result['f1_after_personalization']:.4f}")
        _write_json(out / "permuted.json", result)
    else:
        result = augmentation_ablation(samples, lambda s: Model.build(mcfg, s), tcfg,
                                       seeds=[args.seed + i for i in range(args.repeats)])
        print(f"noisy-test macro-F1: {result['mean_copies_0']:.4f} without augmentation, "
              f"{result['mean_copies_9']:.4f} with 9 copies")
        _write_json(out / "ablation.json", result)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "evaluate": cmd_evaluate,
    "personalize": cmd_personalize, "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--variant", choices=sorted(VARIANT_FLAGS), help="architecture (overrides config)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--data", help="manifest.json, dataset directory or .npz archive "
                                       "(default: $TRASEND_DATA_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="trasend", description="Multimodal HAR experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("preprocess", parents=[common], help="CSV dataset -> sample archive")
    p = sub.add_parser("train", parents=[common], help="leave-one-user-out, or a single fold")
    p.add_argument("--fold", metavar="USER", help="train one fold holding out USER and save a checkpoint")
    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--user")
    p = sub.add_parser("personalize", parents=[common], help="output-layer adaptation for one user")
    p.add_argument("--checkpoint")
    p.add_argument("--user")
    p = sub.add_parser("validate", parents=[common], help="validation suites")
    p.add_argument("--suite", choices=("gradcheck", "permuted", "ablation"), required=True)
    p.add_argument("--repeats", type=int, default=3, help="seeds for the ablation suite")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, TypeError, ValueError) as err:
        if isinstance(err, (DataError, GapError, AlignmentError)):
            print(f"data error: {err}", file=sys.stderr)
            return EXIT_DATA
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FileNotFoundError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
