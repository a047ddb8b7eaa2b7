"""Command line front end: synthesize data, train per plane, predict,
fuse, evaluate, verify.

Every subcommand resolves its settings from three layers, strongest
last applied first: built-in defaults, then an optional JSON config
file (--config), then explicit flags.  The fully resolved configuration
is echoed (and for runs that produce a directory, written next to the
outputs) before any work starts, so a run can be reproduced from its
artifacts alone.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import verify, volume
from .arch import NetConfig, Network
from .augment import expand_slices, policy_for_plane
from .errors import (ConfigError, DataError, MixNetError, ParameterError,
                     VerificationFailure)
from .metrics import evaluate_segmentation
from .tensor import derive_seed
from .trainer import (TrainConfig, Trainer, load_network, resume_trainer,
                      save_checkpoint)
from .volume import PLANES

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    """argparse, but usage errors exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _ints(text: str) -> tuple:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(defaults: dict, config_path, flags: dict) -> dict:
    """defaults <- config file <- explicit flags; unknown keys rejected."""
    resolved = dict(defaults)
    if config_path:
        try:
            with open(config_path) as fh:
                from_file = json.load(fh)
        except OSError as e:
            raise DataError(f"cannot read config file: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: invalid JSON: {e}") from None
        if not isinstance(from_file, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise ConfigError(f"{config_path}: unknown config keys "
                              f"{sorted(unknown)}; known: {sorted(defaults)}")
        resolved.update(from_file)
    for key, value in flags.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _echo_config(command: str, resolved: dict, out_dir=None) -> None:
    doc = {"command": command, **{k: resolved[k] for k in sorted(resolved)}}
    text = json.dumps(doc, indent=1, sort_keys=False)
    print(text)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            fh.write(text + "\n")


# ---------------------------------------------------------------------------
# generate


GENERATE_DEFAULTS = {
    "subjects": 3,
    "dims": (64, 64, 64),
    "spacing": (1.0, 1.0, 1.0),
    "classes": 4,
    "modalities": 3,
    "seed": 0,
}


def cmd_generate(args) -> int:
    cfg = resolve_config(GENERATE_DEFAULTS, args.config, {
        "subjects": args.subjects, "dims": args.dims, "spacing": args.spacing,
        "classes": args.classes, "modalities": args.modalities, "seed": args.seed,
    })
    _echo_config("generate", cfg, args.out)
    manifest = volume.generate_dataset(
        args.out, subjects=cfg["subjects"], dims=tuple(cfg["dims"]),
        classes=cfg["classes"], modalities=cfg["modalities"],
        spacing=tuple(cfg["spacing"]), seed=cfg["seed"])
    print(f"wrote {len(manifest['subjects'])} subjects "
          f"({cfg['modalities']} modalities each) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "variant": "v2",
    "plane": "transverse",
    "filters": 24,
    "epochs": 40,
    "batch_size": 4,
    "lr0": 2e-4,
    "momentum": 0.99,
    "weight_decay": 1e-3,
    "loss_reduction": "mean",
    "lr_schedule": True,
    "augment": "plane",
    "max_slices": 0,
    "holdout": "",
    "val_every": 1,
    "checkpoint_every": 0,
    "seed": 0,
}


def _stack_subjects(data_dir, entries, plane):
    """All slices of all subjects along one plane."""
    images, labels = [], []
    for entry in entries:
        sub = volume.load_subject(data_dir, entry)
        images.append(volume.slice_stack(sub["images"], plane))
        labels.append(volume.slice_stack(sub["labels"], plane))
    return np.concatenate(images, axis=0), np.concatenate(labels, axis=0)


def cmd_train(args) -> int:
    cfg = resolve_config(TRAIN_DEFAULTS, args.config, {
        "variant": args.variant, "plane": args.plane, "filters": args.filters,
        "epochs": args.epochs, "batch_size": args.batch_size, "lr0": args.lr0,
        "momentum": args.momentum, "weight_decay": args.weight_decay,
        "loss_reduction": args.loss_reduction, "lr_schedule": args.lr_schedule,
        "augment": args.augment, "max_slices": args.max_slices,
        "holdout": args.holdout, "val_every": args.val_every,
        "checkpoint_every": args.checkpoint_every, "seed": args.seed,
    })
    if cfg["plane"] not in PLANES:
        raise ConfigError(f"plane must be one of {PLANES}, got {cfg['plane']!r}")
    cfg["data"] = args.data
    cfg["resume"] = args.resume or ""
    _echo_config("train", cfg, args.out)

    manifest = volume.load_manifest(args.data)
    entries = manifest["subjects"]
    val = None
    if cfg["holdout"]:
        held = [e for e in entries if e["id"] == cfg["holdout"]]
        if not held:
            raise DataError(f"holdout subject {cfg['holdout']!r} not in manifest "
                            f"({[e['id'] for e in entries]})")
        entries = [e for e in entries if e["id"] != cfg["holdout"]]
        val = _stack_subjects(args.data, held, cfg["plane"])
    if not entries:
        raise DataError("no training subjects left after holdout")
    images, labels = _stack_subjects(args.data, entries, cfg["plane"])

    if cfg["max_slices"] and images.shape[0] > cfg["max_slices"]:
        rng = np.random.Generator(np.random.PCG64(
            derive_seed(cfg["seed"], "subsample")))
        keep = np.sort(rng.choice(images.shape[0], size=cfg["max_slices"],
                                  replace=False))
        images, labels = images[keep], labels[keep]

    policy = cfg["augment"]
    if policy == "plane":
        policy = policy_for_plane(cfg["plane"])
    if policy != "none":
        images, labels = expand_slices(images, labels, policy,
                                       seed=derive_seed(cfg["seed"], "augment"))
    print(f"training on {images.shape[0]} slices of {images.shape[1]}x"
          f"{images.shape[2]} ({cfg['plane']}, policy {policy})")

    train_config = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr0=cfg["lr0"],
        momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        loss_reduction=cfg["loss_reduction"], use_lr_schedule=cfg["lr_schedule"],
        seed=derive_seed(cfg["seed"], "batches"), val_every=cfg["val_every"],
        checkpoint_every=cfg["checkpoint_every"]).validate()
    log_path = os.path.join(args.out, "train_log.csv")
    ckpt_path = os.path.join(args.out, "checkpoint.ckpt")
    if args.resume:
        trainer = resume_trainer(args.resume, images, labels, val=val,
                                 log_path=log_path, checkpoint_path=ckpt_path)
        trainer.config.epochs = cfg["epochs"]
    else:
        net_config = NetConfig(
            variant=cfg["variant"], modalities=len(entries[0]["modalities"]),
            classes=manifest["classes"], filters=cfg["filters"])
        net = Network(net_config, seed=derive_seed(cfg["seed"], "params"))
        trainer = Trainer(net, images, labels, train_config, val=val,
                          log_path=log_path, checkpoint_path=ckpt_path)

    trainer.fit()
    save_checkpoint(ckpt_path, trainer.net, trainer)
    if trainer.history:
        last = trainer.history[-1]
        note = f", val dice {last['val_dice_mean']:.4f}" if "val_dice_mean" in last \
            else ""
        print(f"epoch {last['epoch']}: loss {last['loss']:.4f}{note}")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict / fuse / evaluate


def cmd_predict(args) -> int:
    if args.plane not in PLANES:
        raise ConfigError(f"plane must be one of {PLANES}, got {args.plane!r}")
    net = load_network(args.checkpoint)
    manifest = volume.load_manifest(args.data)
    matches = [e for e in manifest["subjects"] if e["id"] == args.subject]
    if not matches:
        raise DataError(f"subject {args.subject!r} not in manifest "
                        f"({[e['id'] for e in manifest['subjects']]})")
    sub = volume.load_subject(args.data, matches[0])
    if sub["images"].shape[-1] != net.config.modalities:
        raise DataError(
            f"subject has {sub['images'].shape[-1]} modalities, checkpoint "
            f"expects {net.config.modalities}")
    probs = volume.predict_volume(net, sub["images"], args.plane,
                                  batch_size=args.batch_size)
    volume.write_volume(args.out, probs, sub["spacing"], "probs",
                        classes=net.config.classes)
    print(f"wrote {probs.shape} probabilities ({args.plane}) to {args.out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    vols, metas = [], []
    for path in args.inputs:
        data, meta = volume.read_volume(path)
        if meta.kind != "probs":
            raise DataError(f"{path}: expected a probability volume, "
                            f"got kind {meta.kind!r}")
        vols.append(data)
        metas.append(meta)
    for meta in metas[1:]:
        if meta.dims != metas[0].dims or meta.classes != metas[0].classes:
            raise DataError("probability volumes disagree on dims/classes")
        if meta.spacing != metas[0].spacing:
            raise DataError("probability volumes disagree on spacing")
    weights = args.weights
    if weights is None:
        # sagittal : coronal : transverse convention for the usual 3 planes
        weights = (1.0, 1.0, 4.0) if len(vols) == 3 else (1.0,) * len(vols)
    if len(weights) != len(vols):
        raise ParameterError(f"{len(vols)} inputs but {len(weights)} weights")
    labels, _ = volume.fuse_predictions(vols, weights)
    volume.write_volume(args.out, labels, metas[0].spacing, "labels",
                        classes=metas[0].classes)
    print(f"fused {len(vols)} volumes with weights "
          f"{tuple(float(w) for w in weights)} -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred, pmeta = volume.read_volume(args.pred)
    truth, tmeta = volume.read_volume(args.truth)
    for name, meta in (("pred", pmeta), ("truth", tmeta)):
        if meta.kind != "labels":
            raise DataError(f"{name} volume must be labels, got {meta.kind!r}")
    if pmeta.dims != tmeta.dims:
        raise DataError(f"pred dims {pmeta.dims} != truth dims {tmeta.dims}")
    if pmeta.spacing != tmeta.spacing:
        raise DataError(f"pred spacing {pmeta.spacing} != truth {tmeta.spacing}")
    classes = tmeta.classes or int(max(pred.max(), truth.max())) + 1
    report = evaluate_segmentation(pred, truth, classes, tmeta.spacing)
    print(report.format_table())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json() + "\n")
        print(f"report: {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


SUITES = {
    "gradcheck": lambda trials, seed: (verify.check_op_gradients(seed)
                                       + verify.check_network_gradients(seed)),
    "shapes": lambda trials, seed: verify.check_structure(),
    "embedding": lambda trials, seed: verify.check_embedding(seed),
    "metrics": lambda trials, seed: verify.check_metrics(trials=trials, seed=seed),
}


def cmd_verify(args) -> int:
    if args.suite == "all":
        results = verify.run_all(trials=args.trials, seed=args.seed)
    else:
        results = SUITES[args.suite](args.trials, args.seed)
    print(verify.format_results(results))
    if args.json:
        summary = {"suite": args.suite,
                   "passed": all(r.passed for r in results),
                   "checks": [{"name": r.name, "passed": r.passed,
                               "detail": r.detail} for r in results]}
        with open(args.json, "w") as fh:
            json.dump(summary, fh, indent=1)
            fh.write("\n")
    verify.require_all(results)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="mixnet",
                     description="Multi-modality 2D segmentation networks: "
                                 "data synthesis, training, multi-plane "
                                 "fusion, evaluation, self-verification.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--subjects", type=int)
    p.add_argument("--dims", type=_ints, help="X,Y,Z e.g. 96,96,96")
    p.add_argument("--spacing", type=_floats, help="mm per voxel, e.g. 1,1,1")
    p.add_argument("--classes", type=int)
    p.add_argument("--modalities", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one network on one plane")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--variant", choices=("v1", "v2", "v3"))
    p.add_argument("--plane", choices=PLANES)
    p.add_argument("--filters", type=int, help="per-stream channel width")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--loss-reduction", choices=("sum", "mean"))
    p.add_argument("--lr-schedule", action=argparse.BooleanOptionalAction,
                   default=None, help="halve the rate on the standard "
                                      "epoch-fraction boundaries")
    p.add_argument("--augment", choices=("plane", "full", "light", "none"),
                   help="plane = full for transverse, light otherwise")
    p.add_argument("--max-slices", type=int,
                   help="subsample the training slices before augmentation")
    p.add_argument("--holdout", help="subject id kept out for validation")
    p.add_argument("--val-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="probability volume for one subject")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--subject", required=True, help="subject id")
    p.add_argument("--plane", required=True, choices=PLANES)
    p.add_argument("--out", required=True, help="output .vol path")
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fuse", help="fuse probability volumes into labels")
    p.add_argument("--inputs", required=True, nargs="+",
                   help="probability volumes, e.g. sagittal coronal transverse")
    p.add_argument("--weights", type=_floats,
                   help="default 1,1,4 for three inputs, uniform otherwise")
    p.add_argument("--out", required=True, help="output label volume")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="score a prediction against truth")
    p.add_argument("--pred", required=True, help="predicted label volume")
    p.add_argument("--truth", required=True, help="reference label volume")
    p.add_argument("--out", help="write the report as JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", help="run the self-verification suites")
    p.add_argument("--suite", choices=("all",) + tuple(SUITES), default="all")
    p.add_argument("--trials", type=int, default=100,
                   help="random trials for the metrics suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write a machine-readable summary here")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VerificationFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MixNetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
