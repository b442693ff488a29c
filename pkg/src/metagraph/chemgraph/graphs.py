"""Molecular graph, task, and registry data model.

Everything here is immutable after construction and validated eagerly, so
downstream code can assume well-formed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

BOND_SINGLE = 0
BOND_DOUBLE = 1
BOND_TRIPLE = 2
BOND_AROMATIC = 3
NUM_EDGE_TYPES = 4

# fractional contribution of each bond type to an atom's used valence
BOND_ORDER = {BOND_SINGLE: 1.0, BOND_DOUBLE: 2.0, BOND_TRIPLE: 3.0, BOND_AROMATIC: 1.5}

TASK_TYPES = ("A", "T", "P", "B", "F")
IN_DISTRIBUTION_TYPES = frozenset({"B", "F"})


@dataclass(frozen=True)
class Atom:
    """Node metadata kept alongside the graph skeleton."""

    symbol: str
    aromatic: bool = False
    charge: int = 0
    hydrogens: int = 0


@dataclass(frozen=True)
class MolecularGraph:
    """Undirected molecular graph; hydrogens are attributes, not nodes.

    ``edges`` hold (u, v, edge_type) with u < v.  ``atoms`` carry parse
    metadata when known; ``node_features`` is the V x F float matrix once
    featurized.  Either may be absent depending on provenance.
    """

    num_nodes: int
    edges: tuple = ()
    atoms: Optional[tuple] = None
    node_features: Optional[np.ndarray] = None
    smiles: Optional[str] = None
    graph_id: Optional[str] = None

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("a molecular graph needs at least one node")
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        seen = set()
        for u, v, t in self.edges:
            if not (0 <= u < v < self.num_nodes):
                raise ValueError(f"edge ({u}, {v}) violates 0 <= u < v < {self.num_nodes}")
            if (u, v) in seen:
                raise ValueError(f"duplicate edge ({u}, {v})")
            if not (0 <= t < NUM_EDGE_TYPES):
                raise ValueError(f"edge type {t} out of range [0, {NUM_EDGE_TYPES})")
            seen.add((u, v))
        if self.atoms is not None:
            object.__setattr__(self, "atoms", tuple(self.atoms))
            if len(self.atoms) != self.num_nodes:
                raise ValueError(f"{len(self.atoms)} atoms for {self.num_nodes} nodes")
        if self.node_features is not None:
            feats = np.asarray(self.node_features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
                raise ValueError(
                    f"node_features shape {feats.shape} does not match {self.num_nodes} nodes")
            feats.flags.writeable = False
            object.__setattr__(self, "node_features", feats)

    def neighbors(self, v: int) -> list:
        """(neighbor, edge_type) pairs of node v."""
        out = []
        for u, w, t in self.edges:
            if u == v:
                out.append((w, t))
            elif w == v:
                out.append((u, t))
        return out

    def degree(self, v: int) -> int:
        return len(self.neighbors(v))

    def with_features(self, features: np.ndarray) -> "MolecularGraph":
        return MolecularGraph(self.num_nodes, self.edges, self.atoms, features,
                              self.smiles, self.graph_id)


PARTITION_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Task:
    """A binary prediction task: labeled instances plus a fixed partition."""

    task_id: str
    task_type: str
    instances: tuple  # of (MolecularGraph, int)
    partitions: Mapping[str, tuple]

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"task type {self.task_type!r} not in {TASK_TYPES}")
        object.__setattr__(self, "instances",
                           tuple((g, int(label)) for g, label in self.instances))
        labels = {label for _, label in self.instances}
        if not labels <= {0, 1}:
            raise ValueError(f"labels must be 0/1, got {sorted(labels)}")
        if labels != {0, 1}:
            raise ValueError(f"task {self.task_id!r} has a single class")
        parts = {name: tuple(int(i) for i in idx)
                 for name, idx in dict(self.partitions).items()}
        if set(parts) != set(PARTITION_NAMES):
            raise ValueError(f"partitions must be exactly {PARTITION_NAMES}")
        all_idx = [i for name in PARTITION_NAMES for i in parts[name]]
        n = len(self.instances)
        if sorted(all_idx) != list(range(n)):
            raise ValueError("partitions must be disjoint and cover every instance")
        object.__setattr__(self, "partitions", parts)

    def partition_instances(self, name: str) -> list:
        return [self.instances[i] for i in self.partitions[name]]


SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class TaskRegistry:
    """All tasks plus their assignment to meta-train / meta-val / meta-test."""

    tasks: Mapping[str, Task]
    splits: Mapping[str, tuple]

    def __post_init__(self):
        tasks = dict(self.tasks)
        splits = {name: tuple(ids) for name, ids in dict(self.splits).items()}
        if set(splits) != set(SPLIT_NAMES):
            raise ValueError(f"splits must be exactly {SPLIT_NAMES}")
        listed = [tid for name in SPLIT_NAMES for tid in splits[name]]
        if len(listed) != len(set(listed)):
            raise ValueError("split lists overlap")
        for tid in listed:
            if tid not in tasks:
                raise ValueError(f"split references unknown task {tid!r}")
        if set(listed) != set(tasks):
            raise ValueError("every task must appear in exactly one split")
        for tid, task in tasks.items():
            if task.task_id != tid:
                raise ValueError(f"task key {tid!r} does not match id {task.task_id!r}")
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "splits", splits)

    def split_tasks(self, name: str) -> list:
        return [self.tasks[tid] for tid in self.splits[name]]
