"""Command-line front end: config resolution, checkpoints, and run commands.

Commands:
    synth       generate a synthetic dataset + task registry
    pretrain    multi-task pre-training on the meta-training tasks
    meta-train  MAML / FO-MAML / ANIL meta-initialization
    benchmark   low-resource evaluation matrix + rank report

Every command resolves its configuration as defaults <- METAGRAPH_SEED env
(seed only) <- JSON config file <- repeated ``--set key=value`` overrides,
then prints the result to stderr and writes it to ``<out>/config.json`` so a
run is replayable from its artifact directory alone.

Checkpoint file layout (little-endian throughout):
    bytes 0..3   magic b"MGCK"
    bytes 4..7   uint32 manifest length L
    bytes 8..8+L UTF-8 JSON manifest: schema_version, model (config fields),
                 tensors [{name, shape, offset}], task_columns, seed
    rest         concatenated float32 tensor payloads; ``offset`` counts
                 float32 elements from payload start

Exit codes: 0 success, 1 usage or config error, 2 data error (datasets,
registries, checkpoints), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import struct
import sys
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .baselines import PretrainConfig, pretrain_multitask
from .chemgraph import (
    SynthSpec,
    TASK_TYPES,
    DatasetFormatError,
    build_registry,
    load_dataset,
    load_registry,
    save_dataset,
    save_registry,
    synthesize_tasks,
)
from .evalbench import (
    BenchmarkConfig,
    BenchmarkMethod,
    FinetuneConfig,
    UndefinedMetricError,
    _METHOD_KINDS,
    aggregate,
    run_benchmark,
    save_records,
    write_report,
)
from .ggnn import ModelConfig, ParamSet, check_params, init_params
from .metalearn import ALGORITHMS, MetaConfig, meta_train, save_training_log
from .tensor import Tensor

__all__ = [
    "CheckpointError",
    "DEFAULTS",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_model",
    "resolve_config",
    "main",
]

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or internally inconsistent checkpoint file."""


def save_checkpoint(path, params: ParamSet, model_config: ModelConfig,
                    seed: int, task_columns: Optional[Sequence[str]] = None) -> None:
    """Write parameters as float32 payload plus a JSON manifest.

    ``task_columns`` records the task order behind a multi-column output
    head so pretrained checkpoints stay interpretable.
    """
    tensors = []
    chunks = []
    offset = 0
    for name in params.names():
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
        chunks.append(arr.reshape(-1))
    manifest = {
        "schema_version": CHECKPOINT_VERSION,
        "model": dataclasses.asdict(model_config),
        "tensors": tensors,
        "task_columns": None if task_columns is None else [str(t) for t in task_columns],
        "seed": int(seed),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def checkpoint_model(manifest: Mapping) -> ModelConfig:
    """The ModelConfig stored in a loaded checkpoint manifest."""
    try:
        return ModelConfig(**manifest["model"])
    except TypeError as err:
        raise CheckpointError(f"manifest model config is invalid ({err})") from err


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (ParamSet, manifest dict).

    Parameters come back as float64 (training precision); values round-trip
    through float32 storage. Raises CheckpointError on bad magic, version
    mismatch, truncated or oversized payload, or tensor shapes that do not
    match the stored model config.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (blob_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + blob_len:
        raise CheckpointError(f"{path}: manifest is truncated")
    try:
        manifest = json.loads(raw[8:8 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({err})") from err
    version = manifest.get("schema_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: schema version {version!r} is unsupported "
            f"(this build reads {CHECKPOINT_VERSION})")
    for key in ("model", "tensors", "seed"):
        if key not in manifest:
            raise CheckpointError(f"{path}: manifest is missing {key!r}")

    payload = raw[8 + blob_len:]
    try:
        total = 0
        for entry in manifest["tensors"]:
            size = 1
            for dim in entry["shape"]:
                size *= int(dim)
            total += size
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"{path}: malformed tensor entry ({err})") from err
    expected = total * 4
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes but the manifest "
            f"implies {expected}")
    flat = np.frombuffer(payload, dtype="<f4")
    entries = {}
    cursor = 0
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(int(d) for d in entry["shape"])
        size = 1
        for dim in shape:
            size *= dim
        if int(entry["offset"]) != cursor:
            raise CheckpointError(
                f"{path}: tensor {name!r} offset {entry['offset']} != {cursor}; "
                f"offsets must be contiguous")
        if name in entries:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        data = flat[cursor:cursor + size].astype(np.float64).reshape(shape)
        entries[name] = Tensor(data)
        cursor += size
    params = ParamSet(entries)
    model = checkpoint_model(manifest)
    try:
        check_params(params, model)
    except ValueError as err:
        raise CheckpointError(
            f"{path}: tensors do not match the stored model config ({err})") from err
    return params, manifest


# ---------------------------------------------------------------------------
# Configuration


def _default_config() -> dict:
    from .chemgraph import DEFAULT_MOTIFS

    return {
        "seed": 0,
        "model": {
            "layers": 7,
            "feature_dim": 75,
            "hidden_dim": 1024,
            "num_edge_types": 4,
            "dropout_p": 0.2,
            "output_dim": 1,
        },
        "meta": {
            "algorithm": "maml",
            "inner_lr": 0.05,
            "inner_steps": 2,
            "inner_batch": 32,
            "query_size": 32,
            "outer_lr": None,
            "meta_batch": 32,
            "max_meta_iterations": 1000,
            "val_every": 50,
            "patience": 3,
            "outer_opt": "adam",
            "inner_dropout": False,
            "anil_adapt": "head",
            "k_val": 128,
        },
        "finetune": {"lr": 1e-4, "patience": 10, "max_epochs": 500},
        "pretrain": {
            "lr": 10.0 ** -3.75,
            "batch_size": 512,
            "patience": 20,
            "max_epochs": 500,
            "val_fraction": 0.1,
        },
        "synth": {
            "task_counts": {"B": 6, "F": 6, "P": 1},
            "instances_per_task": 128,
            "min_nodes": 3,
            "max_nodes": 30,
            "balance": [0.3, 0.7],
            "motifs": list(DEFAULT_MOTIFS),
        },
        "registry": {
            "min_instances": 32,
            "fractions": [0.6, 0.2, 0.2],
            "val_counts": {"B": 1, "F": 1},
            "test_counts": {"B": 1, "F": 1},
        },
        "benchmark": {
            "ks": [16, 32, 64, 128, 256],
            "instance_sets": 5,
            "seeds": 5,
            "seed_offset": 0,
            "base_seed": 0,
            "jobs": 1,
        },
    }


DEFAULTS = _default_config()

# Sections whose keys are data (task types, task counts), not a fixed schema:
# overriding them replaces the default mapping instead of merging into it.
_OPEN_PATHS = frozenset({"synth.task_counts", "registry.val_counts",
                         "registry.test_counts"})


def _merge(base: Mapping, incoming: Mapping, path: str = "") -> dict:
    out = dict(base)
    for key, value in incoming.items():
        dotted = f"{path}.{key}" if path else str(key)
        if key not in base and path not in _OPEN_PATHS:
            raise ValueError(f"unknown config key {dotted!r}")
        default = base.get(key)
        if (isinstance(default, dict) and isinstance(value, dict)
                and dotted not in _OPEN_PATHS):
            out[key] = _merge(default, value, dotted)
        else:
            out[key] = value
    return out


def _parse_override(text: str) -> tuple:
    """Split 'dotted.key=value'; value parses as JSON, else stays a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ValueError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _set_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for depth, part in enumerate(parts[:-1]):
        walked = ".".join(parts[:depth + 1])
        if not isinstance(node, dict) or part not in node:
            raise ValueError(f"unknown config key {walked!r}")
        node = node[part]
    parent = ".".join(parts[:-1])
    if not isinstance(node, dict):
        raise ValueError(f"config key {parent!r} is not a section")
    if parts[-1] not in node and parent not in _OPEN_PATHS:
        raise ValueError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def resolve_config(config_path=None, overrides: Sequence[str] = (),
                   env: Optional[Mapping] = None) -> dict:
    """Defaults, env seed, config file, then --set overrides, in that order."""
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    env_seed = env.get("METAGRAPH_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ValueError(
                f"METAGRAPH_SEED must be an integer, got {env_seed!r}") from None
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ValueError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ValueError(f"config file {path}: invalid JSON ({err})") from err
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path}: top level must be an object")
        cfg = _merge(cfg, loaded)
    for text in overrides:
        key, value = _parse_override(text)
        _set_path(cfg, key, value)
    return cfg


def _model_config(cfg: Mapping) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def _meta_config(cfg: Mapping) -> MetaConfig:
    return MetaConfig(**cfg["meta"])


def _persist_config(cfg: Mapping, out_dir: Path, command: str) -> None:
    doc = {"command": command, "config": cfg}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    sys.stderr.write(text)
    (out_dir / "config.json").write_text(text, encoding="utf-8")


def _make_out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(data_dir) -> tuple:
    """Read <data>/dataset.jsonl + <data>/registry.json into a TaskRegistry."""
    data = Path(data_dir)
    dataset_path = data / "dataset.jsonl"
    registry_path = data / "registry.json"
    for path in (dataset_path, registry_path):
        if not path.is_file():
            raise FileNotFoundError(f"missing data file: {path}")
    records = load_dataset(dataset_path)
    registry = load_registry(registry_path, records)
    return records, registry


# ---------------------------------------------------------------------------
# Commands


def _cmd_synth(args) -> None:
    cfg = resolve_config(args.config, args.set)
    out = _make_out_dir(args)
    _persist_config(cfg, out, "synth")
    seed = int(cfg["seed"])
    rng = np.random.default_rng(seed)

    synth_cfg = cfg["synth"]
    spec = SynthSpec(task_counts=synth_cfg["task_counts"],
                     instances_per_task=int(synth_cfg["instances_per_task"]),
                     min_nodes=int(synth_cfg["min_nodes"]),
                     max_nodes=int(synth_cfg["max_nodes"]),
                     motifs=tuple(synth_cfg["motifs"]),
                     balance=tuple(synth_cfg["balance"]))
    datasets = synthesize_tasks(spec, rng)

    reg_cfg = cfg["registry"]
    registry = build_registry(datasets, int(reg_cfg["min_instances"]),
                              reg_cfg["val_counts"], reg_cfg["test_counts"],
                              rng, fractions=tuple(reg_cfg["fractions"]))

    records = [(graph, {task_id: label})
               for task_id in sorted(datasets)
               for graph, label in datasets[task_id]]
    save_dataset(records, out / "dataset.jsonl")
    save_registry(registry, out / "registry.json",
                  int(reg_cfg["min_instances"]), seed)

    lines = ["task counts per split and type:",
             "split  " + "  ".join(f"{t:>3}" for t in TASK_TYPES)]
    for split in ("train", "val", "test"):
        counts = {t: 0 for t in TASK_TYPES}
        for task in registry.split_tasks(split):
            counts[task.task_type] += 1
        lines.append(f"{split:<5}  " + "  ".join(
            f"{counts[t]:>3}" for t in TASK_TYPES))
    lines.append(f"instances written: {len(records)}")
    sys.stderr.write("\n".join(lines) + "\n")


def _cmd_pretrain(args) -> None:
    cfg = resolve_config(args.config, args.set)
    out = _make_out_dir(args)
    _persist_config(cfg, out, "pretrain")
    seed = int(cfg["seed"])
    _, registry = _load_data(args.data)
    train_tasks = registry.split_tasks("train")
    if not train_tasks:
        raise ValueError("registry has no training tasks to pre-train on")

    base_model = _model_config(cfg)
    # one output column per meta-training task
    model = dataclasses.replace(base_model, output_dim=len(train_tasks))
    pre_cfg = PretrainConfig(**cfg["pretrain"])
    params, task_ids, log = pretrain_multitask(train_tasks, pre_cfg,
                                               np.random.default_rng(seed), model)
    save_checkpoint(out / "pretrained.ckpt", params, model, seed,
                    task_columns=task_ids)
    save_training_log(log, out / "pretrain_log.jsonl")
    last = log[-1] if log else {}
    logger.info("pretrained on %d tasks for %d epochs (val loss %s)",
                len(task_ids), len(log), last.get("val_loss"))


def _cmd_meta_train(args) -> None:
    cfg = resolve_config(args.config, args.set)
    if args.algo is not None:
        cfg["meta"]["algorithm"] = args.algo
    out = _make_out_dir(args)
    _persist_config(cfg, out, "meta-train")
    seed = int(cfg["seed"])
    _, registry = _load_data(args.data)

    model = _model_config(cfg)
    meta_cfg = _meta_config(cfg)
    params, log = meta_train(registry, meta_cfg, model,
                             np.random.default_rng(seed),
                             val_finetune=FinetuneConfig(**cfg["finetune"]))
    save_checkpoint(out / f"meta_{meta_cfg.algorithm}.ckpt", params, model, seed)
    save_training_log(log, out / "meta_log.jsonl")
    vals = [e["val_auprc"] for e in log if "val_auprc" in e]
    logger.info("meta-trained %s for %d iterations (best val AUPRC %s)",
                meta_cfg.algorithm, len(log), max(vals) if vals else None)


def _parse_methods(specs: Sequence[str], model: ModelConfig, seed: int) -> list:
    """Build BenchmarkMethods from NAME=random or NAME=KIND:CHECKPOINT specs."""
    methods = []
    for text in specs:
        name, sep, source = text.partition("=")
        if not sep or not name or not source:
            raise ValueError(
                f"method spec {text!r} is not NAME=random or NAME=KIND:CHECKPOINT")
        if source == "random":
            params = init_params(model, np.random.default_rng(seed))
            methods.append(BenchmarkMethod(name=name, kind="finetune",
                                           params=params))
            continue
        kind, sep, ckpt_path = source.partition(":")
        if not sep or not ckpt_path:
            raise ValueError(
                f"method spec {text!r} needs KIND:CHECKPOINT after '='")
        if kind not in _METHOD_KINDS:
            raise ValueError(
                f"method kind {kind!r} must be one of {_METHOD_KINDS}")
        params, manifest = _load_method_checkpoint(ckpt_path, kind, model)
        methods.append(BenchmarkMethod(name=name, kind=kind, params=params))
    return methods


def _load_method_checkpoint(ckpt_path, kind: str, model: ModelConfig) -> tuple:
    params, manifest = load_checkpoint(ckpt_path)
    stored = checkpoint_model(manifest)
    for field in ("layers", "feature_dim", "hidden_dim", "num_edge_types"):
        if getattr(stored, field) != getattr(model, field):
            raise CheckpointError(
                f"{ckpt_path}: checkpoint {field}={getattr(stored, field)} "
                f"differs from configured {field}={getattr(model, field)}")
    if kind == "finetune" and stored.output_dim != model.output_dim:
        raise CheckpointError(
            f"{ckpt_path}: {stored.output_dim}-column head cannot be "
            f"fine-tuned directly; use finetune_top, finetune_all, or knn")
    return params, manifest


def _parse_ks(text: Optional[str], cfg: Mapping) -> list:
    if text is None:
        ks = list(cfg["benchmark"]["ks"])
    else:
        try:
            ks = [int(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise ValueError(f"--ks must be comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise ValueError(f"ks must be positive integers, got {ks}")
    return ks


def _cmd_benchmark(args) -> None:
    cfg = resolve_config(args.config, args.set)
    ks = _parse_ks(args.ks, cfg)
    cfg["benchmark"]["ks"] = ks
    if args.jobs is not None:
        cfg["benchmark"]["jobs"] = int(args.jobs)
    out = _make_out_dir(args)
    records_path = out / "records.csv"
    if records_path.exists() and not args.force:
        raise ValueError(f"{records_path} exists; pass --force to overwrite")
    _persist_config(cfg, out, "benchmark")
    seed = int(cfg["seed"])
    _, registry = _load_data(args.data)

    model = _model_config(cfg)
    specs = [part for chunk in args.methods for part in chunk.split(",") if part]
    methods = _parse_methods(specs, model, seed)
    bench_cfg = cfg["benchmark"]
    bench = BenchmarkConfig(model=model,
                            finetune=FinetuneConfig(**cfg["finetune"]),
                            instance_sets=int(bench_cfg["instance_sets"]),
                            seeds=int(bench_cfg["seeds"]),
                            seed_offset=int(bench_cfg["seed_offset"]),
                            base_seed=int(bench_cfg["base_seed"]),
                            jobs=int(bench_cfg["jobs"]))
    records = run_benchmark(methods, registry, ks, bench)
    save_records(records, records_path)
    report = aggregate(records)
    write_report(report, out)
    lines = [f"wrote {len(records)} records to {records_path}",
             "overall average ranks:"]
    overall = report["average_ranks"]["overall"]
    for k in sorted(overall):
        ranked = sorted(overall[k].items(), key=lambda kv: kv[1])
        lines.append(f"  k={k}: " + ", ".join(
            f"{name}={rank:.2f}" for name, rank in ranked))
    sys.stderr.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Entry point


def _add_common(sub) -> None:
    sub.add_argument("--config", default=None,
                     help="JSON config file merged over the defaults")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted-path config override, repeatable")
    sub.add_argument("--out", required=True,
                     help="artifact directory (created if absent)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metagraph",
        description="Meta-learned GGNN initializations for low-resource "
                    "molecular property prediction.")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser(
        "synth", help="generate a synthetic dataset and task registry")
    _add_common(synth)
    synth.set_defaults(func=_cmd_synth)

    pretrain = commands.add_parser(
        "pretrain", help="multi-task pre-training on the training split")
    _add_common(pretrain)
    pretrain.add_argument("--data", required=True,
                          help="directory holding dataset.jsonl + registry.json")
    pretrain.set_defaults(func=_cmd_pretrain)

    meta = commands.add_parser(
        "meta-train", help="train a meta-initialization")
    _add_common(meta)
    meta.add_argument("--data", required=True,
                      help="directory holding dataset.jsonl + registry.json")
    meta.add_argument("--algo", choices=ALGORITHMS, default=None,
                      help="meta-learning algorithm (default: config value)")
    meta.set_defaults(func=_cmd_meta_train)

    bench = commands.add_parser(
        "benchmark", help="run the low-resource evaluation matrix")
    _add_common(bench)
    bench.add_argument("--data", required=True,
                       help="directory holding dataset.jsonl + registry.json")
    bench.add_argument("--methods", required=True, nargs="+",
                       metavar="NAME=SOURCE",
                       help="NAME=random or NAME=KIND:CHECKPOINT with KIND "
                            "one of finetune, finetune_top, finetune_all, knn")
    bench.add_argument("--ks", default=None,
                       help="comma-separated fine-tuning set sizes")
    bench.add_argument("--jobs", type=int, default=None,
                       help="worker processes for benchmark cells")
    bench.add_argument("--force", action="store_true",
                       help="overwrite an existing records.csv")
    bench.set_defaults(func=_cmd_benchmark)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code in (0, None) else 1
    try:
        args.func(args)
        return 0
    except (CheckpointError, DatasetFormatError, FileNotFoundError,
            IsADirectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (UndefinedMetricError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
