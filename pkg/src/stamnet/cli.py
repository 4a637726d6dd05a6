"""Command-line entry point: dataset synthesis, training, evaluation,
profiling, and batch configuration runs.

Configuration is JSON with three sections, all optional:

    {"model": {... ModelConfig fields, septcn nested ...},
     "train": {... TrainConfig fields ...},
     "data":  {... DataConfig fields ...}}

Unknown keys anywhere are rejected. ``--set section.key=value`` overrides
individual entries (JSON-typed values, bare strings accepted). Exit codes:
0 success, 1 runtime/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .dataio import (generate_synthetic, load_csv, load_manifest, ManifestEntry,
                     DatasetManifest, split_manifest, write_csv, write_manifest)
from .errors import ParameterError, StamnetError
from .model import ModelConfig, StamModel
from .profiler import audit_against_runtime, count_macs
from .training import (ConfigurationSpec, DataConfig, TrainConfig, TrialSource,
                       evaluate, read_history_csv, run_configuration, train,
                       write_history_csv)

SECTIONS = ("model", "train", "data")


def _parse_set_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if parts[0] not in SECTIONS:
        raise ParameterError(
            f"--set key must start with one of {SECTIONS}, got {dotted!r}")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ParameterError(f"--set {dotted!r} descends into a non-section")
    node[parts[-1]] = value


def load_run_config(args) -> tuple[ModelConfig, TrainConfig, DataConfig]:
    doc: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            doc = json.load(fh)
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ParameterError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        _apply_override(doc, key.strip(), _parse_set_value(value.strip()))
    if getattr(args, "seed", None) is not None:
        doc.setdefault("model", {})["seed"] = args.seed
        doc.setdefault("train", {})["seed"] = args.seed
    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    data_cfg = DataConfig.from_dict(doc.get("data", {}))
    return model_cfg, train_cfg, data_cfg


def cmd_synth(args) -> int:
    if args.per_class < 1:
        raise ParameterError(f"--per-class must be >= 1, got {args.per_class}")
    if args.classes < 2:
        raise ParameterError(f"--classes must be >= 2, got {args.classes}")
    os.makedirs(args.out, exist_ok=True)
    trials, manifest = generate_synthetic(
        args.classes, args.per_class, t_frames=args.frames,
        noise_std=args.noise, seed=args.seed or 0, name=args.name)
    csv_path = os.path.join(args.out, f"{args.name}.csv")
    write_csv(csv_path, trials)
    entries = [ManifestEntry(os.path.abspath(csv_path), e.trial_id, e.label)
               for e in manifest.entries]
    manifest = DatasetManifest(manifest.name, manifest.classes, entries)
    if args.split:
        manifest = split_manifest(manifest, args.split, args.seed or 0)
    man_path = os.path.join(args.out, f"{args.name}.json")
    write_manifest(man_path, manifest)
    # validate outputs by re-reading them
    reloaded = load_csv(csv_path)
    back = load_manifest(man_path)
    assert len(reloaded) == len(trials) and len(back.entries) == len(manifest.entries)
    print(f"wrote {len(trials)} trials across {args.classes} classes to {csv_path}")
    print(f"manifest: {man_path}")
    return 0


def _split_trials(manifest, source):
    if not manifest.split_ids("test"):
        raise StamnetError(
            f"manifest {manifest.name!r} has no test split; run synth with "
            "--split or pre-split the manifest")
    return (source.load_split(manifest, "train"), source.load_split(manifest, "test"))


def cmd_train(args) -> int:
    model_cfg, train_cfg, data_cfg = load_run_config(args)
    manifest = load_manifest(args.manifest)
    if model_cfg.n_classes != len(manifest.classes):
        model_cfg = ModelConfig.from_dict(
            {**model_cfg.to_dict(), "n_classes": len(manifest.classes)})
    source = TrialSource(data_cfg, base_dir=os.path.dirname(args.manifest) or ".")
    if not manifest.split_ids("test"):
        manifest = split_manifest(manifest, args.train_fraction, train_cfg.seed)
    train_trials, val_trials = _split_trials(manifest, source)
    model, history = train(model_cfg, train_trials, val_trials, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "model.npz")
    hist_path = os.path.join(args.out, "history.csv")
    model.save(ckpt_path)
    write_history_csv(hist_path, history)
    # validate outputs by re-reading them
    StamModel.load(ckpt_path)
    assert len(read_history_csv(hist_path)) == len(history)
    best = min(history, key=lambda h: h.val_loss)
    print(f"trained {len(history)} epochs; best val loss {best.val_loss:.6f} "
          f"at epoch {best.epoch} (val acc {best.val_acc:.2f}%)")
    print(f"checkpoint: {ckpt_path}")
    print(f"history: {hist_path}")
    return 0


def cmd_eval(args) -> int:
    _, train_cfg, data_cfg = load_run_config(args)
    model = StamModel.load(args.checkpoint)
    manifest = load_manifest(args.manifest)
    source = TrialSource(data_cfg, base_dir=os.path.dirname(args.manifest) or ".")
    split = None if args.split == "all" else args.split
    trials = source.load_split(manifest, split)
    if not trials:
        raise StamnetError(f"no trials in split {args.split!r} of {args.manifest}")
    report = evaluate(model, trials, manifest.classes,
                      configuration=args.label or manifest.name)
    report.write_json(args.out)
    with open(args.out) as fh:  # validate output by re-reading
        doc = json.load(fh)
    assert "accuracy" in doc and "confusion" in doc
    print(f"accuracy {report.accuracy:.2f}% on {len(trials)} trials "
          f"({args.split} split); macro-F1 {report.macro_f1:.2f}")
    print(f"report: {args.out}")
    return 0


def cmd_profile(args) -> int:
    model_cfg, _, _ = load_run_config(args)
    report = count_macs(model_cfg, batch_size=args.batch_size,
                        batch_count=args.batch_count)
    if args.audit:
        audit_against_runtime(StamModel(model_cfg))
    print(report.as_table())
    if args.out:
        report.write_json(args.out)
        with open(args.out) as fh:
            json.load(fh)
        print(f"report: {args.out}")
    return 0


def cmd_configs(args) -> int:
    model_cfg, train_cfg, data_cfg = load_run_config(args)
    with open(args.specs) as fh:
        doc = json.load(fh)
    for key in ("manifests", "configurations"):
        if key not in doc:
            raise ParameterError(f"{args.specs}: missing {key!r}")
    base = os.path.dirname(os.path.abspath(args.specs))
    manifests = {}
    for name, rel in doc["manifests"].items():
        path = rel if os.path.isabs(rel) else os.path.join(base, rel)
        manifests[name] = load_manifest(path)
    source = TrialSource(data_cfg, base_dir=base)
    specs = [ConfigurationSpec.from_dict(entry) for entry in doc["configurations"]]
    os.makedirs(args.out, exist_ok=True)
    summary = []
    for spec in specs:
        report = run_configuration(spec, model_cfg, train_cfg, source, manifests)
        out_path = os.path.join(args.out, f"report_{spec.name}.json")
        report.write_json(out_path)
        with open(out_path) as fh:
            json.load(fh)
        summary.append((spec.name, "+".join(spec.train_manifests),
                        spec.test_manifest, report.accuracy, spec.category))
    print(f"{'configuration':<16}{'train':<24}{'test':<16}{'accuracy %':>12}  category")
    for name, tr, te, acc, cat in summary:
        print(f"{name:<16}{tr:<24}{te:<16}{acc:>12.2f}  {cat}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stamnet",
        description="skeleton-based gesture recognition: synthesize data, "
                    "train, evaluate, profile")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (model/train/data sections)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. model.heads=4")
        p.add_argument("--seed", type=int, help="seed for both model init and training")

    p = sub.add_parser("synth", help="generate a synthetic skeleton dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, default=0.7,
                   help="train fraction for the manifest split (0 disables)")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-fraction", type=float, default=0.7,
                   help="used only when the manifest carries no split")
    p.add_argument("--lr", type=float, help="shorthand for train.learning_rate")
    p.add_argument("--epochs", type=int, help="shorthand for train.max_epochs")
    p.add_argument("--patience", type=int, help="shorthand for train.patience")
    p.add_argument("--batch-size", type=int, help="shorthand for train.batch_size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--label", help="configuration label echoed in the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="closed-form parameter and MAC accounting")
    common(p)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--batch-count", type=int, default=1)
    p.add_argument("--audit", action="store_true",
                   help="also check the counts against an instantiated model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("configs", help="run a batch of dataset configurations")
    common(p)
    p.add_argument("--specs", required=True,
                   help="JSON file with manifests{} and configurations[]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_configs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # fold the train shorthands into --set so one code path applies them
    shorthand = {"lr": "train.learning_rate", "epochs": "train.max_epochs",
                 "patience": "train.patience", "batch_size": "train.batch_size"}
    for attr, dotted in shorthand.items():
        value = getattr(args, attr, None)
        if value is not None:
            args.set = (args.set or []) + [f"{dotted}={value}"]
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (StamnetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
