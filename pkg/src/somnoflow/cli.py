"""Command-line entry point: synth | train | evaluate | predict | attention.

A JSON run config is the experiment record: it carries the model, loss,
optimizer and train sections plus the front-end selector, and its seed
is echoed into every output's metadata.  Exit codes are stable:
0 success, 1 I/O or corruption, 2 usage/validation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import data as datamod
from . import evaluation, figures, training
from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    DataError,
    DimensionError,
    NumericalError,
    ParseError,
    SomnoflowError,
)
from .model import ModelConfig
from .training import LossConfig, OptimizerConfig, TrainConfig

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

_USAGE_ERRORS = (ConfigError, ParseError, DataError, ContractError, DimensionError)


@dataclass
class RunConfig:
    """Validated contents of the --config JSON file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_manifest: str | None = None


def _build_section(cls, payload: dict, name: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r} section: {sorted(unknown)}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: invalid config JSON: {exc.msg}") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    allowed = {"model", "loss", "optimizer", "train", "front_end", "data"}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown top-level config keys: {sorted(unknown)}")

    model_section = dict(payload.get("model", {}))
    if "front_end" in payload:
        model_section["front_end"] = payload["front_end"]
    model = ModelConfig.from_dict(model_section)
    loss = _build_section(LossConfig, payload.get("loss", {}), "loss")
    optimizer = _build_section(OptimizerConfig, payload.get("optimizer", {}), "optimizer")
    train_cfg = _build_section(TrainConfig, payload.get("train", {}), "train")

    manifest = None
    if "data" in payload:
        data_section = payload["data"]
        unknown = set(data_section) - {"manifest"}
        if unknown:
            raise ConfigError(f"{path}: unknown keys in 'data' section: {sorted(unknown)}")
        manifest = data_section.get("manifest")
    return RunConfig(model=model, loss=loss, optimizer=optimizer, train=train_cfg,
                     data_manifest=manifest)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    gen_config = datamod.GeneratorConfig()
    if args.gen_config:
        payload = json.loads(Path(args.gen_config).read_text())
        gen_config = datamod.GeneratorConfig.from_dict(payload)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = datamod.synthesize_dataset(args.n, args.seed, gen_config)
    splits = datamod.assign_splits(records, gen_config)

    subjects = {}
    for record in records:
        rel = f"{record.subject_id}.csv"
        datamod.save_record(record, out_dir / rel)
        subjects[record.subject_id] = {
            "record": rel,
            "labels": datamod.labels_path_for(rel).name,
            "split": splits[record.subject_id],
        }
    datamod.write_manifest(
        out_dir / "manifest.json",
        subjects,
        metadata={"seed": args.seed, "generator": gen_config.to_dict()},
    )

    total_epochs = sum(r.n_epochs for r in records)
    wake = sum(int(r.labels.sum()) for r in records)
    sleep = total_epochs - wake
    ratio = wake / sleep if sleep else float("inf")
    print(
        f"synthesized {len(records)} records, {total_epochs} epochs, "
        f"wake/sleep time ratio {ratio:.3f}" if total_epochs else
        "synthesized 0 records"
    )
    return EXIT_OK


def _split_records(manifest: Path, split: str) -> list[datamod.SleepRecord]:
    records = datamod.load_split(manifest, split)
    if not records:
        raise ConfigError(f"manifest {manifest} has no records in split {split!r}")
    return records


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    manifest_arg = args.data or run.data_manifest
    if not manifest_arg:
        raise ConfigError("no dataset manifest given (use --data or the config's data.manifest)")
    manifest = Path(manifest_arg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_records = _split_records(manifest, "train")
    val_records = _split_records(manifest, "val")

    init_params = None
    if args.init_checkpoint:
        ckpt = training.load_checkpoint(args.init_checkpoint)
        ckpt.ensure_config(run.model)
        init_params = ckpt.params

    train_cfg = TrainConfig(
        n_batch=run.train.n_batch,
        max_epochs=run.train.max_epochs,
        dropout=run.train.dropout,
        seed=run.train.seed,
        checkpoint_path=str(out_dir / "model.ckpt"),
        log_path=str(out_dir / "train_log.jsonl"),
        report_every=run.train.report_every,
    )
    result = training.train(
        run.model,
        train_records,
        val_records,
        loss_config=run.loss,
        optimizer_config=run.optimizer,
        train_config=train_cfg,
        init_params=init_params,
        verbose=True,
    )
    meta = result.checkpoint.metadata
    print(
        f"best validation accuracy {meta['val_acc']:.4f} at epoch {meta['epoch']}"
        if meta.get("val_acc") is not None
        else f"finished at epoch {meta['epoch']} (no validation records)"
    )
    print(f"checkpoint: {out_dir / 'model.ckpt'}")
    print(f"training log: {out_dir / 'train_log.jsonl'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    records = _split_records(Path(args.data), args.split)
    report = evaluation.evaluate_records(
        ckpt.stager(),
        records,
        ckpt.stats(),
        metadata={
            "checkpoint": str(args.checkpoint),
            "split": args.split,
            "seed": ckpt.metadata.get("seed"),
        },
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(out_dir / "metrics.json")
    if not args.no_figures:
        figures.save_metrics_figure(report, out_dir / "metrics.png")

    avg = report.average

    def fmt(v):
        return "undefined" if v is None else f"{v:.4f}"

    print(
        f"average over {len(report.patients)} patients: "
        f"Acc={fmt(avg.acc)} Se={fmt(avg.se)} Sp={fmt(avg.sp)} "
        f"PPV={fmt(avg.ppv)} NPV={fmt(avg.npv)} kappa={fmt(avg.kappa)}"
    )
    print(f"report: {out_dir / 'metrics.json'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    record = datamod.load_record(args.record)
    stats = ckpt.stats()
    prepared = datamod.preprocess_record(record, stats)
    pred = ckpt.stager().predict(prepared.hr[None, :])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{record.subject_id}.hypnogram.csv"
    evaluation.export_hypnogram(pred, prepared.labels, csv_path)
    if not args.no_figures:
        figures.save_hypnogram_figure(
            pred, prepared.labels, out_dir / f"{record.subject_id}.hypnogram.png",
            subject_id=record.subject_id,
        )
    counts = evaluation.confusion(pred, prepared.labels)
    vals = evaluation.metrics(counts)
    acc = "undefined" if vals.acc is None else f"{vals.acc:.4f}"
    print(f"{record.subject_id}: {pred.shape[0]} epochs, accuracy {acc}")
    print(f"hypnogram: {csv_path}")
    return EXIT_OK


def cmd_attention(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    record = datamod.load_record(args.record)
    maps = evaluation.extract_attention(ckpt.stager(), record, ckpt.stats())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for amap in maps:
        csv_path = out_dir / f"{record.subject_id}.attention_layer{amap.layer}.csv"
        evaluation.export_attention_csv(amap, csv_path)
        if not args.no_figures:
            figures.save_attention_figure(
                amap.matrix, amap.layer,
                out_dir / f"{record.subject_id}.attention_layer{amap.layer}.png",
                subject_id=record.subject_id,
            )
        print(f"layer {amap.layer}: {csv_path}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser and dispatch
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="somnoflow",
        description="Wake/sleep staging from pulse-oximeter heart rate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gen-config", help="generator config JSON file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--data", help="dataset manifest (overrides config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init-checkpoint", help="warm-start from an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write a predicted hypnogram for one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True, help="record CSV path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attention", help="export per-layer attention maps for one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True, help="record CSV path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CorruptionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SomnoflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
