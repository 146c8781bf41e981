"""Command-line entry points.

    damtl pretrain|split|train|eval|ablate|gradcheck --config <path> [--seed N] [--out DIR]

Every command is idempotent given identical inputs and seed, writes its
artifacts atomically into the output directory, and records a run.json
provenance file (config hash, seed, versions, timings). Exit codes:
0 success, 1 config error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from .checks import run_gradcheck_battery
from .config import ExperimentConfig, load_experiment_config
from .data import load_csv, load_idx, make_synthetic, manifest_json, split_tasks
from .errors import CheckFailure, ConfigError, DamtlError, DataError
from .network import AuxModel, TaskNetwork
from .reporting import (
    RunAccuracy,
    atomic_write_text,
    config_hash,
    summarize_runs,
    summary_csv_text,
    summary_table_text,
    write_metrics_csv,
    write_run_json,
)
from .training import evaluate, pretrain_aux, train_damtl

AUX_CHECKPOINT = "aux.ckpt"


def _load_corpus(cfg: ExperimentConfig):
    d = cfg.dataset
    if d.source == "synthetic":
        return make_synthetic(
            class_count=d.classes,
            samples_per_class=d.samples_per_class,
            image_size=d.image_size,
            noise=d.noise,
            max_shift=d.max_shift,
            seed=d.seed,
        )
    if d.source == "idx":
        return load_idx(d.images_path, d.labels_path)
    return load_csv(d.csv_path)


def _apply_overrides(cfg: ExperimentConfig, seed, out) -> ExperimentConfig:
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {seed}")
        cfg = dataclasses.replace(cfg, train=cfg.train.replace(seed=seed))
    if out is not None:
        cfg = dataclasses.replace(cfg, output_dir=out)
    return cfg


def _run_payload(cfg: ExperimentConfig, command: str, **extra) -> dict:
    resolved = cfg.resolved_dict()
    payload = {
        "command": command,
        "mode": cfg.mode,
        "seed": cfg.train.seed,
        "config": resolved,
        "config_sha256": config_hash(resolved),
        "versions": {
            "damtl": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    payload.update(extra)
    return payload


def _prepare_split(cfg: ExperimentConfig):
    corpus = _load_corpus(cfg)
    spec = cfg.split.overlap_spec(cfg.train.seed)
    aux_pool, tasks = split_tasks(
        corpus,
        spec,
        train_fraction=cfg.split.train_fraction,
        train_cap=cfg.split.train_cap,
        test_cap=cfg.split.test_cap,
    )
    return corpus, spec, aux_pool, tasks


def _get_aux(cfg: ExperimentConfig, aux_pool, out_dir: str):
    """Load the cached auxiliary checkpoint or pretrain and cache it."""
    arch = cfg.arch.architecture(aux_pool.image_shape, aux_pool.class_count)
    path = os.path.join(out_dir, AUX_CHECKPOINT)
    if os.path.exists(path):
        aux = AuxModel.load(path)
        if aux.arch != arch:
            raise DataError(
                f"{path}: checkpoint architecture does not match the configured one; "
                "remove it or point --out elsewhere"
            )
        return aux, 0.0
    t0 = time.perf_counter()
    aux = pretrain_aux(aux_pool, arch, cfg.pretrain, cfg.train.seed)
    seconds = time.perf_counter() - t0
    aux.save(path)
    return aux, seconds


def _train_settings(cfg: ExperimentConfig):
    """Map the experiment mode onto trainer arguments."""
    train = cfg.train
    if cfg.mode == "ablate-no-alignment":
        return train.replace(lambda_align=0.0), True, "uniform"
    if cfg.mode == "single-task-baseline":
        return train.replace(lambda_l1=0.0, lambda_align=0.0), False, "ones"
    return train, True, "uniform"


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    _, spec, aux_pool, tasks = _prepare_split(cfg)
    path = os.path.join(cfg.output_dir, AUX_CHECKPOINT)
    t0 = time.perf_counter()
    arch = cfg.arch.architecture(aux_pool.image_shape, aux_pool.class_count)
    aux = pretrain_aux(aux_pool, arch, cfg.pretrain, cfg.train.seed)
    seconds = time.perf_counter() - t0
    aux.save(path)
    acc = evaluate(aux, aux_pool)
    write_run_json(
        os.path.join(cfg.output_dir, "run.json"),
        _run_payload(
            cfg, "pretrain",
            outputs=[AUX_CHECKPOINT],
            aux_train_accuracy=acc,
            aux_digest=aux.digest(),
            timings={"pretrain_seconds": seconds},
        ),
    )
    print(f"pretrained auxiliary model on {len(aux_pool)} samples "
          f"({aux_pool.class_count} classes): train acc {acc:.4f} -> {path}")
    return 0


def cmd_split(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    _, spec, aux_pool, tasks = _prepare_split(cfg)
    manifest_path = os.path.join(cfg.output_dir, "manifest.json")
    atomic_write_text(manifest_path, manifest_json(spec, aux_pool, tasks))
    write_run_json(
        os.path.join(cfg.output_dir, "run.json"),
        _run_payload(cfg, "split", outputs=["manifest.json"]),
    )
    for t in tasks:
        print(f"task {t.task_id}: classes {list(t.label_map)}, "
              f"{len(t.train)} train / {len(t.test)} test")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    _, spec, aux_pool, tasks = _prepare_split(cfg)
    aux, pretrain_seconds = _get_aux(cfg, aux_pool, cfg.output_dir)
    digest_before = aux.digest()

    train_cfg, mask_trainable, mask_init = _train_settings(cfg)
    t0 = time.perf_counter()
    result = train_damtl(aux, tasks, train_cfg, mask_trainable=mask_trainable, mask_init=mask_init)
    train_seconds = time.perf_counter() - t0
    if aux.digest() != digest_before:
        raise DamtlError("auxiliary parameters changed during training; frozen contract broken")

    write_metrics_csv(os.path.join(cfg.output_dir, "metrics.csv"), result.metrics, cfg.record_timings)
    atomic_write_text(os.path.join(cfg.output_dir, "manifest.json"), manifest_json(spec, aux_pool, tasks))

    outputs = ["metrics.csv", "manifest.json"]
    records = []
    for net, task in zip(result.networks, tasks):
        name = f"task_{task.task_id}.ckpt"
        net.save(os.path.join(cfg.output_dir, name))
        outputs.append(name)
        records.append(RunAccuracy(task.task_id, cfg.mode, train_cfg.seed, evaluate(net, task.test)))
    rows = summarize_runs(records)
    atomic_write_text(os.path.join(cfg.output_dir, "summary.csv"), summary_csv_text(rows))
    atomic_write_text(os.path.join(cfg.output_dir, "summary.txt"), summary_table_text(rows))
    outputs += ["summary.csv", "summary.txt"]

    write_run_json(
        os.path.join(cfg.output_dir, "run.json"),
        _run_payload(
            cfg, "train",
            outputs=outputs,
            aux_digest=digest_before,
            converged_epoch=result.converged_epoch,
            epochs_run=max(m.epoch for m in result.metrics),
            timings={
                "pretrain_seconds": pretrain_seconds,
                "train_seconds": train_seconds,
                "per_epoch": [[m.epoch, m.task, m.seconds] for m in result.metrics],
            },
        ),
    )
    print(summary_table_text(rows), end="")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    _, spec, aux_pool, tasks = _prepare_split(cfg)
    aux_path = os.path.join(cfg.output_dir, AUX_CHECKPOINT)
    if not os.path.exists(aux_path):
        raise DataError(f"no auxiliary checkpoint at {aux_path}; run train or pretrain first")
    aux = AuxModel.load(aux_path)
    records = []
    for task in tasks:
        path = os.path.join(cfg.output_dir, f"task_{task.task_id}.ckpt")
        if not os.path.exists(path):
            raise DataError(f"no checkpoint for task {task.task_id} at {path}; run train first")
        net = TaskNetwork.load(path, aux)
        if tuple(net.label_map) != tuple(task.label_map):
            raise DataError(
                f"task {task.task_id}: checkpoint label map {net.label_map} does not match "
                f"the split {task.label_map}; seed or split config changed"
            )
        records.append(RunAccuracy(task.task_id, cfg.mode, cfg.train.seed, evaluate(net, task.test)))
    rows = summarize_runs(records)
    atomic_write_text(os.path.join(cfg.output_dir, "eval_summary.csv"), summary_csv_text(rows))
    atomic_write_text(os.path.join(cfg.output_dir, "eval_summary.txt"), summary_table_text(rows))
    write_run_json(
        os.path.join(cfg.output_dir, "eval_run.json"),
        _run_payload(cfg, "eval", outputs=["eval_summary.csv", "eval_summary.txt"]),
    )
    print(summary_table_text(rows), end="")
    return 0


def cmd_gradcheck(out_dir=None) -> int:
    report = run_gradcheck_battery()
    text = report.render()
    print(text)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(os.path.join(out_dir, "gradcheck.txt"), text + "\n")
    if not report.passed:
        raise CheckFailure("gradient check battery failed; see report above")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="damtl",
        description="Multi-task training with soft-masked knowledge transfer from an auxiliary network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "pretrain": "pretrain the auxiliary classifier and write aux.ckpt",
        "split": "carve the corpus into tasks and write manifest.json",
        "train": "run joint training per the configured mode",
        "eval": "re-evaluate saved task checkpoints on their test splits",
        "ablate": "train with the alignment term removed (lambda2 = 0)",
        "gradcheck": "verify gradients against finite differences",
    }
    for name, help_text in descriptions.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=(name != "gradcheck"), help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override [train] seed")
        p.add_argument("--out", default=None, help="override [experiment] output_dir")
    args = parser.parse_args(argv)

    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.out)
        cfg = _apply_overrides(load_experiment_config(args.config), args.seed, args.out)
        if args.command == "ablate":
            cfg = dataclasses.replace(cfg, mode="ablate-no-alignment")
        handler = {
            "pretrain": cmd_pretrain,
            "split": cmd_split,
            "train": cmd_train,
            "eval": cmd_eval,
            "ablate": cmd_train,
        }[args.command]
        return handler(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except CheckFailure as e:
        print(f"check failure: {e}", file=sys.stderr)
        return 3
    except DamtlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
