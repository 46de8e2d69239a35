"""Operator entry point: dataset generation, training, evaluation, comparison
against published numbers, and attention export.

Configuration is one JSON file of flat, documented keys; ``--set key=value``
flags override file keys. Exit codes: 0 success, 1 usage/config error,
2 runtime failure, 3 divergence. The LANGLOC_OUT environment variable sets
the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as data_mod
from . import report as report_mod
from . import training as training_mod
from .model import ConfigError, ModelConfig, forward
from .training import DivergenceError, TrainConfig


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


# key: (python type, default); None default means the key is required where used
SCHEMA: dict[str, tuple[type, object]] = {
    "channels": (int, 3),
    "crop_size": (int, 224),          # model input height = width
    "patch": (int, 16),
    "d_model": (int, 256),
    "n_heads": (int, 4),
    "n_layers": (int, 4),
    "max_caption_len": (int, 32),
    "dropout": (float, 0.5),
    "lr0": (float, 4.5e-5),
    "weight_decay": (float, 4e-5),
    "batch_size": (int, 64),
    "epochs": (int, 280),
    "seed": (int, 0),
    "eval_every": (int, 100),
    "jitter_brightness": (float, 0.6),
    "jitter_contrast": (float, 0.7),
    "jitter_saturation": (float, 0.7),
    "jitter_hue": (float, 0.5),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "gen_image_size": (int, 64),      # synthetic render height = width
    "samples_per_scene": (int, 32),
    "catalog": (str, "synthetic3"),
    "dataset_dir": (str, None),
    "out_dir": (str, None),
}


def _coerce(key: str, value) -> object:
    expected, _ = SCHEMA[key]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(key, f"expected {expected.__name__}, got {value!r}")
    if not isinstance(value, expected):
        raise ConfigError(key, f"expected {expected.__name__}, got {value!r}")
    return value


def load_run_config(path: str | None, overrides: list[str]) -> dict:
    """Defaults, then file keys, then --set overrides; unknown keys rejected."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    if path is not None:
        file_path = Path(path)
        if not file_path.is_file():
            raise ConfigError("config", f"no such file: {path}")
        try:
            loaded = json.loads(file_path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON in {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config", f"{path} must hold a JSON object")
        for key, value in loaded.items():
            if key not in SCHEMA:
                raise ConfigError(key, "unknown config key")
            values[key] = _coerce(key, value)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set needs key=value, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in SCHEMA:
            raise ConfigError(key, "unknown config key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        values[key] = _coerce(key, value)
    if values["out_dir"] is None:
        values["out_dir"] = os.environ.get("LANGLOC_OUT", "out")
    return values


def _require(values: dict, key: str) -> object:
    if values[key] is None:
        raise ConfigError(key, "required but not set")
    return values[key]


def _resolve_catalog(values: dict) -> data_mod.SceneCatalog:
    try:
        return data_mod.resolve_catalog(values["catalog"])
    except data_mod.DataError as e:
        raise ConfigError("catalog", str(e)) from e


def _model_config(values: dict, catalog: data_mod.SceneCatalog) -> ModelConfig:
    vocab = data_mod.build_vocab(catalog)
    return ModelConfig(
        channels=values["channels"],
        height=values["crop_size"],
        width=values["crop_size"],
        patch=values["patch"],
        d_model=values["d_model"],
        n_heads=values["n_heads"],
        n_layers=values["n_layers"],
        n_scenes=len(catalog),
        vocab_size=len(vocab),
        max_caption_len=values["max_caption_len"],
        dropout=values["dropout"],
    )


def _train_config(values: dict) -> TrainConfig:
    try:
        return TrainConfig(
            lr0=values["lr0"],
            weight_decay=values["weight_decay"],
            batch_size=values["batch_size"],
            epochs=values["epochs"],
            dropout=values["dropout"],
            seed=values["seed"],
            eval_every=values["eval_every"],
            jitter_brightness=values["jitter_brightness"],
            jitter_contrast=values["jitter_contrast"],
            jitter_saturation=values["jitter_saturation"],
            jitter_hue=values["jitter_hue"],
            crop_size=values["crop_size"],
            adam_beta1=values["adam_beta1"],
            adam_beta2=values["adam_beta2"],
        )
    except training_mod.TrainingError as e:
        raise ConfigError("training", str(e)) from e


def cmd_gen_data(args) -> int:
    values = load_run_config(args.config, args.set or [])
    catalog = _resolve_catalog(values)
    dataset_dir = Path(_require(values, "dataset_dir"))
    ds_config = data_mod.DatasetConfig(
        channels=values["channels"],
        height=values["gen_image_size"],
        width=values["gen_image_size"],
        max_caption_len=values["max_caption_len"],
    )
    samples = data_mod.generate_synthetic(
        values["seed"], catalog, values["samples_per_scene"], ds_config
    )
    digest = data_mod.save_dataset(samples, catalog, ds_config, values["seed"], dataset_dir)
    print(f"wrote {len(samples)} samples across {len(catalog)} scenes to {dataset_dir}")
    print(f"manifest digest: {digest}")
    return 0


def _load_dataset_checked(values: dict):
    raw = values["dataset_dir"]
    if raw is None:
        raise ConfigError("dataset_dir", "required but not set")
    dataset_dir = Path(raw)
    if not dataset_dir.is_dir():
        raise ConfigError("dataset_dir", f"no such dataset directory: {dataset_dir}")
    samples, ds_catalog, ds_config = data_mod.load_dataset(dataset_dir)
    return samples, ds_catalog, ds_config


def cmd_train(args) -> int:
    values = load_run_config(args.config, args.set or [])
    catalog = _resolve_catalog(values)
    samples, ds_catalog, _ = _load_dataset_checked(values)
    if [(s.name, s.description) for s in catalog] != [
        (s.name, s.description) for s in ds_catalog
    ]:
        raise ConfigError("catalog", "does not match the catalog embedded in the dataset")
    model_config = _model_config(values, catalog)
    train_config = _train_config(values)
    out_dir = Path(values["out_dir"])
    result = training_mod.train(model_config, train_config, samples, catalog, out_dir)
    report_mod.render_loss_curves(result.records, out_dir / "loss_curve.png")
    last = result.records[-1]
    print(f"trained {len(result.records)} steps; final loss {last.loss:.6f}")
    print(f"loss log: {result.loss_log_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    values = load_run_config(args.config, args.set or [])
    checkpoint_path = Path(args.checkpoint)
    if not checkpoint_path.is_file():
        raise ConfigError("checkpoint", f"no such file: {checkpoint_path}")
    samples, ds_catalog, _ = _load_dataset_checked(values)
    params, model_config = ckpt.load(checkpoint_path)
    report = training_mod.evaluate(params, model_config, samples, ds_catalog)
    out_dir = Path(values["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report_mod.save_metrics_report(report, out_dir / "report.tsv")
    (out_dir / "report.txt").write_text(report_mod.format_metrics_table(report) + "\n")
    report_mod.render_metrics_figure(report, out_dir / "report.png")
    print(report_mod.format_metrics_table(report))
    print(f"report: {out_dir / 'report.tsv'}")
    return 0


def cmd_compare(args) -> int:
    report_path = Path(args.report)
    if not report_path.is_file():
        raise ConfigError("report", f"no such file: {report_path}")
    report = report_mod.load_metrics_report(report_path)
    table = report_mod.compare_report(report, args.suite, args.method)
    out_dir = Path(args.out_dir or os.environ.get("LANGLOC_OUT", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    report_mod.save_comparison(table, out_dir / "comparison.tsv")
    report_mod.render_comparison_figure(table, out_dir / "comparison.png")
    print(report_mod.format_comparison_table(table))
    print(f"comparison: {out_dir / 'comparison.tsv'}")
    return 0


def cmd_export_attention(args) -> int:
    checkpoint_path = Path(args.checkpoint)
    if not checkpoint_path.is_file():
        raise ConfigError("checkpoint", f"no such file: {checkpoint_path}")
    values = load_run_config(args.config, args.set or [])
    samples, ds_catalog, _ = _load_dataset_checked(values)
    params, model_config = ckpt.load(checkpoint_path)
    wanted = [
        s for s in samples if s.scene_index == args.scene
    ]
    if not wanted:
        raise ConfigError("scene", f"dataset has no scene index {args.scene}")
    if not 0 <= args.sample < len(wanted):
        raise ConfigError("sample", f"scene {args.scene} has {len(wanted)} samples")
    sample = training_mod._eval_image(wanted[args.sample], model_config)
    out = forward([sample], params, model_config, training=False, collect_attention=True)[0]
    gh, gw = model_config.grid
    n_visual = model_config.n_visual_tokens
    out_dir = Path(values["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for layer_index, (_, mha_map) in enumerate(out.attention.layers):
        for head_index in range(mha_map.shape[0]):
            received = mha_map[head_index][:, :n_visual].mean(axis=0).reshape(gh, gw)
            path = out_dir / f"attention-layer{layer_index:02d}-head{head_index:02d}.pgm"
            report_mod.write_pgm(path, received)
            count += 1
    print(f"wrote {count} attention maps to {out_dir}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="langloc", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def add_config_args(p):
        p.add_argument("--config", help="JSON config file of documented keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("gen-data", help="write the seeded synthetic dataset")
    add_config_args(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write report + figure")
    add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare a report against published numbers")
    p.add_argument("--report", required=True, help="report.tsv from eval")
    p.add_argument("--suite", required=True, choices=sorted(report_mod.FIXTURES))
    p.add_argument("--method", default="reference")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-attention", help="write per-layer/head attention PGMs")
    add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--sample", type=int, default=0)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required (gen-data, train, eval, "
                             "compare, export-attention)")
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError, OSError) as e:
        print(f"failure: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:  # console script
    sys.exit(main())
