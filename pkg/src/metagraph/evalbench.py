"""Low-resource evaluation protocol.

A method is judged by fine-tuning its initialization on k labeled instances
of an unseen task and measuring test AUPRC.  Each (method, task, k) cell is
repeated 25 times: 5 fixed instance sets x 5 training seeds.  Instance sets
are derived from (task, k, set index) only, so every method fine-tunes on
identical instances — a paired design.  Aggregation ranks methods by mean
AUPRC per (task, k) and averages ranks across tasks.
"""

from __future__ import annotations

import csv
import logging
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .chemgraph.graphs import IN_DISTRIBUTION_TYPES, Task, TaskRegistry
from .ggnn import ModelConfig, ParamSet, forward_batch
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, bce_with_logits, grad, reshape

__all__ = [
    "UndefinedMetricError",
    "FinetuneConfig",
    "BenchmarkConfig",
    "BenchmarkMethod",
    "EvalRecord",
    "auprc",
    "batch_size_rule",
    "finetune",
    "score_on_partition",
    "run_benchmark",
    "save_records",
    "load_records",
    "aggregate",
    "write_report",
    "write_rank_chart",
]

logger = logging.getLogger(__name__)

RECORD_FIELDS = ("method", "task", "task_type", "k", "instance_set", "seed", "auprc")


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. single-class labels)."""


def auprc(scores, labels) -> float:
    """Average precision with tie blocks.

    Scores are sorted descending; equal scores form one block and precision/
    recall are evaluated only at block boundaries, so a constant scorer gets
    exactly the positive prevalence.  AP = sum over blocks of (R_n - R_{n-1}) * P_n.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if scores.size == 0:
        raise ValueError("empty inputs")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.float64)
    positives = labels.sum()
    if positives == 0 or positives == labels.size:
        raise UndefinedMetricError("AUPRC undefined: labels contain a single class")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = 0.0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        tp += y[i:j].sum()
        seen += j - i
        recall = tp / positives
        precision = tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(ap)


def batch_size_rule(k: int) -> int:
    """Fine-tuning batch size: b = min(64, k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return min(64, k)


@dataclass(frozen=True)
class FinetuneConfig:
    """Fine-tuning loop settings: Adam at 1e-4, early stopping patience 10."""

    lr: float = 1e-4
    patience: int = 10
    max_epochs: int = 500

    def __post_init__(self):
        if self.lr < 0.0:
            raise ValueError("lr must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


def _batch_loss(params, items, model_config, mode, rng):
    graphs = [g for g, _ in items]
    labels = np.asarray([float(y) for _, y in items])
    logits = forward_batch(graphs, params, model_config, mode=mode, rng=rng)
    return bce_with_logits(reshape(logits, (len(graphs),)), Tensor(labels))


def _eval_loss(params, items, model_config) -> float:
    return float(_batch_loss(params, items, model_config, "eval", None).item())


def score_on_partition(params: ParamSet, task: Task, partition: str,
                       model_config: ModelConfig) -> float:
    """Test-time AUPRC of eval-mode scores on one partition of a task."""
    items = task.partition_instances(partition)
    if not items:
        raise ValueError(f"task {task.task_id} has an empty {partition} partition")
    graphs = [g for g, _ in items]
    labels = [y for _, y in items]
    logits = forward_batch(graphs, params, model_config).data.reshape(-1)
    return auprc(logits, labels)


def finetune(init: ParamSet, task: Task, k: int, config: FinetuneConfig,
             rng: np.random.Generator, model_config: ModelConfig,
             trainable_names: Optional[Sequence[str]] = None,
             instance_indices: Optional[Sequence[int]] = None) -> tuple:
    """Fine-tune on k train instances of a task; returns (params, test AUPRC).

    Samples k instances without replacement (or uses ``instance_indices``),
    trains with Adam in batches of min(64, k), evaluates BCE on the task's
    val partition after each epoch, stops after ``patience`` epochs without
    improvement, and restores the best-validation parameters before scoring
    test AUPRC.  ``trainable_names`` restricts updates to a parameter subset;
    all other entries stay frozen.
    """
    pool = task.partition_instances("train")
    if instance_indices is None:
        if len(pool) < k:
            raise ValueError(f"task {task.task_id} has {len(pool)} train "
                             f"instances, need {k}")
        instance_indices = rng.choice(len(pool), size=k, replace=False)
    instance_indices = [int(i) for i in instance_indices]
    if len(instance_indices) != k:
        raise ValueError(f"expected {k} instance indices, got {len(instance_indices)}")
    if any(i < 0 or i >= len(pool) for i in instance_indices):
        raise ValueError("instance index out of range")
    train_items = [pool[i] for i in instance_indices]
    val_items = task.partition_instances("val")
    if not val_items:
        raise ValueError(f"task {task.task_id} has an empty val partition")

    params = init.detach()
    names = list(params) if trainable_names is None else list(trainable_names)
    unknown = sorted(set(names) - set(params.names()))
    if unknown:
        raise KeyError(f"unknown trainable names {unknown}")
    b = batch_size_rule(k)
    opt = AdamState.initialize({n: params[n] for n in names})
    best_params = params
    best_val = np.inf
    stale = 0
    for _ in range(config.max_epochs):
        order = rng.permutation(k)
        for start in range(0, k, b):
            batch = [train_items[i] for i in order[start:start + b]]
            tape = Tape()
            watched = {n: tape.tensor(params[n].data) for n in names}
            full = params.with_entries(watched)
            mode = "train" if model_config.dropout_p > 0.0 else "eval"
            loss = _batch_loss(full, batch, model_config, mode,
                               rng if mode == "train" else None)
            grads = grad(loss, [watched[n] for n in names])
            opt, stepped = adam_step(opt, {n: params[n] for n in names},
                                     dict(zip(names, grads)), config.lr)
            params = params.with_entries(stepped)
        val_loss = _eval_loss(params, val_items, model_config)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    score = score_on_partition(best_params, task, "test", model_config)
    return best_params, score


@dataclass(frozen=True)
class EvalRecord:
    """One benchmark measurement."""

    method: str
    task: str
    task_type: str
    k: int
    instance_set: int
    seed: int
    auprc: float

    def __post_init__(self):
        if not 0.0 <= self.auprc <= 1.0:
            raise ValueError(f"auprc {self.auprc} outside [0, 1]")

    @property
    def key(self):
        return (self.method, self.task, self.k, self.instance_set, self.seed)


_METHOD_KINDS = ("finetune", "finetune_top", "finetune_all", "knn")


@dataclass(frozen=True)
class BenchmarkMethod:
    """An initialization source plus the evaluation recipe applied to it."""

    name: str
    kind: str
    params: ParamSet

    def __post_init__(self):
        if self.kind not in _METHOD_KINDS:
            raise ValueError(f"kind must be one of {_METHOD_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class BenchmarkConfig:
    """Experiment matrix settings; 5 instance sets x 5 seeds = 25 repeats."""

    model: ModelConfig
    finetune: FinetuneConfig = FinetuneConfig()
    instance_sets: int = 5
    seeds: int = 5
    seed_offset: int = 0
    base_seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.instance_sets < 1 or self.seeds < 1:
            raise ValueError("instance_sets and seeds must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


def _instance_indices(task: Task, k: int, instance_set: int, base_seed: int):
    """The shared instance sample for one (task, k, instance_set) cell."""
    pool_size = len(task.partition_instances("train"))
    ss = np.random.SeedSequence(
        [base_seed, zlib.crc32(task.task_id.encode()), k, instance_set])
    rng = np.random.default_rng(ss)
    return [int(i) for i in rng.choice(pool_size, size=k, replace=False)]


def _cell_seed(method_name: str, task_id: str, k: int, instance_set: int,
               seed_id: int, base_seed: int) -> list:
    return [base_seed, zlib.crc32(method_name.encode()),
            zlib.crc32(task_id.encode()), k, instance_set, seed_id]


def _evaluate_cell(method: BenchmarkMethod, task: Task, k: int,
                   indices: list, seed_entropy: list,
                   ft_config: FinetuneConfig, model_config: ModelConfig) -> float:
    from . import baselines

    rng = np.random.default_rng(np.random.SeedSequence(seed_entropy))
    if method.kind == "finetune":
        _, score = finetune(method.params, task, k, ft_config, rng,
                            model_config, instance_indices=indices)
        return score
    if method.kind == "finetune_top":
        tuned = baselines.finetune_top(method.params, task, k, ft_config, rng,
                                       model_config, instance_indices=indices)
        return score_on_partition(tuned, task, "test", model_config)
    if method.kind == "finetune_all":
        tuned = baselines.finetune_all(method.params, task, k, ft_config, rng,
                                       model_config, instance_indices=indices)
        return score_on_partition(tuned, task, "test", model_config)
    if method.kind == "knn":
        scores = baselines.knn_predict(method.params, task, k, rng=rng,
                                       model_config=model_config,
                                       instance_indices=indices)
        labels = [y for _, y in task.partition_instances("test")]
        return auprc(scores, labels)
    raise ValueError(f"unknown method kind {method.kind!r}")


def _run_cell(args):
    method, task, k, indices, entropy, ft_config, model_config = args
    score = _evaluate_cell(method, task, k, indices, entropy, ft_config,
                           model_config)
    return score


def run_benchmark(methods: Sequence[BenchmarkMethod], registry: TaskRegistry,
                  ks: Sequence[int], config: BenchmarkConfig) -> list:
    """The full method x task x k x instance_set x seed matrix over the
    registry's test split.  Infeasible (task, k) cells are skipped with a
    warning.  Returns EvalRecords sorted by key."""
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ValueError("duplicate method names")
    tasks = registry.split_tasks("test")
    if not tasks:
        raise ValueError("registry has no test tasks")
    seed_ids = range(config.seed_offset, config.seed_offset + config.seeds)
    jobs = []
    meta = []
    for task in tasks:
        pool_size = len(task.partition_instances("train"))
        for k in ks:
            if pool_size < k:
                logger.warning(
                    "skipping task %s at k=%d: only %d train instances",
                    task.task_id, k, pool_size)
                continue
            for instance_set in range(config.instance_sets):
                indices = _instance_indices(task, k, instance_set,
                                            config.base_seed)
                for method in methods:
                    for seed_id in seed_ids:
                        entropy = _cell_seed(method.name, task.task_id, k,
                                             instance_set, seed_id,
                                             config.base_seed)
                        jobs.append((method, task, k, indices, entropy,
                                     config.finetune, config.model))
                        meta.append((method.name, task.task_id,
                                     task.task_type, k, instance_set, seed_id))
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            scores = list(pool.map(_run_cell, jobs))
    else:
        scores = [_run_cell(job) for job in jobs]
    records = [EvalRecord(method=m, task=t, task_type=tt, k=k,
                          instance_set=iset, seed=s, auprc=score)
               for (m, t, tt, k, iset, s), score in zip(meta, scores)]
    records.sort(key=lambda r: r.key)
    return records


def save_records(records: Sequence[EvalRecord], path) -> None:
    """CSV with a fixed header; rows sorted by key, floats via repr."""
    rows = sorted(records, key=lambda r: r.key)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_FIELDS)
        for r in rows:
            writer.writerow([r.method, r.task, r.task_type, r.k,
                             r.instance_set, r.seed, repr(r.auprc)])


def load_records(path) -> list:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(RECORD_FIELDS):
            raise ValueError(f"unexpected header {header}")
        records = []
        for row in reader:
            records.append(EvalRecord(
                method=row[0], task=row[1], task_type=row[2], k=int(row[3]),
                instance_set=int(row[4]), seed=int(row[5]),
                auprc=float(row[6])))
    return records


def _group_cells(records: Sequence[EvalRecord]) -> dict:
    """(task, k) -> method -> list of auprc values; validates key uniqueness."""
    seen = set()
    cells: dict = {}
    for r in records:
        if r.key in seen:
            raise ValueError(f"duplicate record key {r.key}")
        seen.add(r.key)
        cells.setdefault((r.task, r.task_type, r.k), {}).setdefault(
            r.method, []).append(r.auprc)
    return cells


def aggregate(records: Sequence[EvalRecord]) -> dict:
    """Per-(task, k) means, ranks, and significance; per-k average ranks.

    Ranks are 1..M by descending mean AUPRC with ties receiving the average
    rank, so each cell's ranks sum to M(M+1)/2.  Significance compares the
    best and second-best methods' repeats with Welch's t-test at p < 0.05.
    The record matrix must be complete: every method must have the same
    repeat count in every cell.
    """
    if not records:
        raise ValueError("no records to aggregate")
    methods = sorted({r.method for r in records})
    cells = _group_cells(records)
    repeats = {len(v) for cell in cells.values() for v in cell.values()}
    missing = []
    for (task, _, k), per_method in sorted(cells.items()):
        for m in methods:
            if m not in per_method:
                missing.append((task, k, m))
    if missing:
        raise ValueError(f"incomplete record matrix, missing cells: {missing}")
    if len(repeats) != 1:
        raise ValueError(f"uneven repeat counts across cells: {sorted(repeats)}")

    cell_reports = []
    rank_table: dict = {}
    for (task, task_type, k), per_method in sorted(cells.items()):
        means = np.array([float(np.mean(per_method[m])) for m in methods])
        ranks = stats.rankdata(-means, method="average")
        entry = {"task": task, "task_type": task_type, "k": k, "methods": {}}
        for m, mean, rank in zip(methods, means, ranks):
            values = per_method[m]
            sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            entry["methods"][m] = {"mean": float(mean), "sd": sd,
                                   "rank": float(rank),
                                   "n": len(values)}
        by_mean = sorted(methods, key=lambda m: -entry["methods"][m]["mean"])
        entry["best"] = by_mean[0]
        if len(by_mean) > 1:
            entry["second"] = by_mean[1]
            a = per_method[by_mean[0]]
            b = per_method[by_mean[1]]
            with warnings.catch_warnings():
                # near-identical samples legitimately yield an undefined p
                warnings.simplefilter("ignore", RuntimeWarning)
                result = stats.ttest_ind(a, b, equal_var=False)
            p = float(result.pvalue)
            if np.isfinite(p):
                entry["p_value"] = p
                entry["significant"] = bool(p < 0.05)
            else:
                entry["p_value"] = None
                entry["significant"] = False
        else:
            entry["second"] = None
            entry["p_value"] = None
            entry["significant"] = False
        cell_reports.append(entry)
        for m in methods:
            rank_table.setdefault(m, {}).setdefault(k, {}).setdefault(
                "groups", []).append(
                (task_type, entry["methods"][m]["rank"]))

    def average_ranks(group_filter):
        out: dict = {}
        for m in methods:
            for k, data in rank_table[m].items():
                ranks = [r for tt, r in data["groups"] if group_filter(tt)]
                if ranks:
                    out.setdefault(k, {})[m] = float(np.mean(ranks))
        return out

    report = {
        "metadata": {
            "methods": methods,
            "ks": sorted({r.k for r in records}),
            "repeats": repeats.pop(),
            "significance_test": "welch_t",
            "alpha": 0.05,
        },
        "cells": cell_reports,
        "average_ranks": {
            "overall": average_ranks(lambda tt: True),
            "in_distribution": average_ranks(
                lambda tt: tt in IN_DISTRIBUTION_TYPES),
            "out_of_distribution": average_ranks(
                lambda tt: tt not in IN_DISTRIBUTION_TYPES),
        },
    }
    return report


def write_report(report: Mapping, out_dir) -> dict:
    """Persist the aggregate report: JSON summary, rank CSV, and SVG chart.

    Returns the paths written, keyed by artifact name.
    """
    import json
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "report": os.path.join(out_dir, "report.json"),
        "ranks": os.path.join(out_dir, "ranks.csv"),
        "chart": os.path.join(out_dir, "ranks.svg"),
    }
    with open(paths["report"], "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(paths["ranks"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "k", "method", "average_rank"])
        for group in ("overall", "in_distribution", "out_of_distribution"):
            table = report["average_ranks"][group]
            for k in sorted(table):
                for method in sorted(table[k]):
                    writer.writerow([group, k, method, repr(table[k][method])])
    write_rank_chart(report, paths["chart"])
    return paths


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f")


def _panel_svg(title, table, methods, x0, width, height) -> list:
    """One average-rank-vs-k panel as SVG fragments."""
    pad_l, pad_r, pad_t, pad_b = 46, 12, 28, 34
    parts = [f'<text x="{x0 + width / 2:.1f}" y="16" text-anchor="middle" '
             f'font-size="13" font-weight="bold">{title}</text>']
    plot_w = width - pad_l - pad_r
    plot_h = height - pad_t - pad_b
    ks = sorted(table)
    if not ks:
        parts.append(f'<text x="{x0 + width / 2:.1f}" y="{height / 2:.1f}" '
                     f'text-anchor="middle" font-size="12" fill="#666">no tasks'
                     f'</text>')
        return parts
    m_count = max(len(methods), 2)

    def x_of(i):
        if len(ks) == 1:
            return x0 + pad_l + plot_w / 2
        return x0 + pad_l + plot_w * i / (len(ks) - 1)

    def y_of(rank):
        # rank 1 (best) at the top
        return pad_t + plot_h * (rank - 1.0) / (m_count - 1.0)

    parts.append(f'<rect x="{x0 + pad_l}" y="{pad_t}" width="{plot_w}" '
                 f'height="{plot_h}" fill="none" stroke="#999"/>')
    for i, k in enumerate(ks):
        parts.append(f'<text x="{x_of(i):.1f}" y="{height - 14}" '
                     f'text-anchor="middle" font-size="11">{k}</text>')
    for rank in range(1, m_count + 1):
        parts.append(f'<text x="{x0 + pad_l - 6}" y="{y_of(rank) + 4:.1f}" '
                     f'text-anchor="end" font-size="11">{rank}</text>')
        parts.append(f'<line x1="{x0 + pad_l}" y1="{y_of(rank):.1f}" '
                     f'x2="{x0 + pad_l + plot_w}" y2="{y_of(rank):.1f}" '
                     f'stroke="#eee"/>')
    parts.append(f'<text x="{x0 + width / 2:.1f}" y="{height - 2}" '
                 f'text-anchor="middle" font-size="11">k</text>')
    for mi, method in enumerate(methods):
        color = _PALETTE[mi % len(_PALETTE)]
        points = [(x_of(i), y_of(table[k][method]))
                  for i, k in enumerate(ks) if method in table[k]]
        if not points:
            continue
        coords = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        for x, y in points:
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" '
                         f'fill="{color}"/>')
    return parts


def write_rank_chart(report: Mapping, path) -> None:
    """Two-panel SVG (in- and out-of-distribution) of average rank vs k."""
    methods = report["metadata"]["methods"]
    panel_w, height = 340, 260
    legend_h = 18 * len(methods) + 10
    total_h = height + legend_h
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * panel_w}" '
             f'height="{total_h}" font-family="sans-serif">',
             f'<rect width="{2 * panel_w}" height="{total_h}" fill="white"/>']
    parts += _panel_svg("In-distribution tasks",
                        report["average_ranks"]["in_distribution"],
                        methods, 0, panel_w, height)
    parts += _panel_svg("Out-of-distribution tasks",
                        report["average_ranks"]["out_of_distribution"],
                        methods, panel_w, panel_w, height)
    for mi, method in enumerate(methods):
        color = _PALETTE[mi % len(_PALETTE)]
        y = height + 14 + 18 * mi
        parts.append(f'<line x1="20" y1="{y}" x2="44" y2="{y}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="50" y="{y + 4}" font-size="12">{method}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
