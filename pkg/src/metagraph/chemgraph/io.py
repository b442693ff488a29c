"""Dataset and registry files.

Dataset: UTF-8 JSON Lines, one instance per line:
    {"id": str, "smiles": str? , "nodes": [[float x F]]?, "edges": [[u, v, type]],
     "labels": {task_id: 0|1}}
Exactly one of ``smiles`` / ``nodes`` per line; ``edges`` is required with
``nodes`` and derived from parsing otherwise.

Registry: JSON with the split lists, per-task partitions, and provenance:
    {"splits": {...}, "partitions": {task_id: {...}}, "min_instances": int, "seed": int}
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .featurize import featurize
from .graphs import MolecularGraph, Task, TaskRegistry, SPLIT_NAMES, PARTITION_NAMES
from .smiles import parse_smiles

__all__ = [
    "DatasetFormatError",
    "load_dataset",
    "save_dataset",
    "group_by_task",
    "save_registry",
    "load_registry",
]


class DatasetFormatError(ValueError):
    """Malformed dataset or registry file; includes file position context."""


def save_dataset(records: Iterable[tuple], path) -> None:
    """Write (graph, labels) records as JSON Lines.

    Graphs that carry a source SMILES string are stored by string (features
    re-derived on load); others are stored as explicit feature rows + edges.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for graph, labels in records:
            entry: dict = {"id": graph.graph_id}
            if graph.smiles is not None:
                entry["smiles"] = graph.smiles
            else:
                if graph.node_features is None:
                    raise ValueError(
                        f"graph {graph.graph_id!r} has neither SMILES nor features")
                entry["nodes"] = [[float(x) for x in row] for row in graph.node_features]
                entry["edges"] = [[u, v, t] for u, v, t in graph.edges]
            entry["labels"] = {str(k): int(v) for k, v in labels.items()}
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _load_line(obj: dict, lineno: int, widths: set) -> tuple:
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"line {lineno}: expected an object")
    if "labels" not in obj or not isinstance(obj["labels"], dict):
        raise DatasetFormatError(f"line {lineno}: missing labels map")
    labels = {}
    for task_id, value in obj["labels"].items():
        if value not in (0, 1):
            raise DatasetFormatError(f"line {lineno}: label for {task_id!r} must be 0 or 1")
        labels[str(task_id)] = int(value)
    has_smiles = "smiles" in obj
    has_nodes = "nodes" in obj
    if has_smiles == has_nodes:
        raise DatasetFormatError(
            f"line {lineno}: exactly one of 'smiles'/'nodes' is required")
    graph_id = obj.get("id")
    if has_smiles:
        try:
            graph = featurize(parse_smiles(obj["smiles"]))
        except ValueError as err:
            raise DatasetFormatError(f"line {lineno}: {err}") from err
        graph = MolecularGraph(graph.num_nodes, graph.edges, graph.atoms,
                               graph.node_features, graph.smiles, graph_id)
    else:
        if "edges" not in obj:
            raise DatasetFormatError(f"line {lineno}: 'nodes' requires 'edges'")
        nodes = np.asarray(obj["nodes"], dtype=np.float64)
        if nodes.ndim != 2:
            raise DatasetFormatError(f"line {lineno}: 'nodes' must be a matrix")
        try:
            graph = MolecularGraph(num_nodes=nodes.shape[0], edges=obj["edges"],
                                   node_features=nodes, graph_id=graph_id)
        except ValueError as err:
            raise DatasetFormatError(f"line {lineno}: {err}") from err
    width = graph.node_features.shape[1]
    widths.add(width)
    if len(widths) > 1:
        raise DatasetFormatError(
            f"line {lineno}: feature width {width} differs from earlier lines "
            f"(widths seen: {sorted(widths)})")
    return graph, labels


def load_dataset(path) -> list:
    """Read JSON Lines records as a list of (MolecularGraph, labels map)."""
    path = Path(path)
    records = []
    widths: set = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({err})") from err
            records.append(_load_line(obj, lineno, widths))
    return records


def group_by_task(records: Iterable[tuple]) -> dict:
    """Per-task instance lists, ordered by record appearance."""
    grouped: dict = {}
    for graph, labels in records:
        for task_id, label in labels.items():
            grouped.setdefault(task_id, []).append((graph, label))
    return grouped


def save_registry(registry: TaskRegistry, path, min_instances: int, seed: int) -> None:
    payload = {
        "splits": {name: list(registry.splits[name]) for name in SPLIT_NAMES},
        "partitions": {
            tid: {name: list(task.partitions[name]) for name in PARTITION_NAMES}
            for tid, task in sorted(registry.tasks.items())
        },
        "min_instances": int(min_instances),
        "seed": int(seed),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_registry(path, records: Iterable[tuple]) -> TaskRegistry:
    """Rebuild a TaskRegistry from a registry file plus the dataset records.

    Instance order within each task is the dataset file order, which the
    stored partitions index into.
    """
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"registry file: invalid JSON ({err})") from err
    for key in ("splits", "partitions"):
        if key not in payload:
            raise DatasetFormatError(f"registry file: missing {key!r}")
    grouped = group_by_task(records)
    tasks = {}
    listed = [tid for name in SPLIT_NAMES for tid in payload["splits"].get(name, [])]
    for tid in listed:
        if tid not in grouped:
            raise DatasetFormatError(f"registry references task {tid!r} absent from dataset")
        if tid not in payload["partitions"]:
            raise DatasetFormatError(f"registry is missing partitions for task {tid!r}")
        try:
            tasks[tid] = Task(task_id=tid, task_type=tid[0],
                              instances=grouped[tid],
                              partitions=payload["partitions"][tid])
        except ValueError as err:
            raise DatasetFormatError(f"task {tid!r}: {err}") from err
    splits = {name: tuple(payload["splits"].get(name, [])) for name in SPLIT_NAMES}
    return TaskRegistry(tasks=tasks, splits=splits)
