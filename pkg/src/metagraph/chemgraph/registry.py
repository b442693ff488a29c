"""Task-registry construction: instance filtering, split assignment, partitions.

Split policy: every A/T/P task goes to the test split; the configured counts
of B and F tasks are sampled (without replacement) into the val and test
splits; all remaining B/F tasks form the training split.  Per-task
train/val/test partitions are drawn by the configured fractions.
"""

from __future__ import annotations

import logging
import math
from typing import Mapping

import numpy as np

from .graphs import Task, TaskRegistry, TASK_TYPES

__all__ = ["build_registry"]

logger = logging.getLogger(__name__)

_SAMPLED_TYPES = ("B", "F")


def _task_type(task_id: str) -> str:
    head = task_id[:1]
    if head not in TASK_TYPES:
        raise ValueError(
            f"cannot infer task type from id {task_id!r}; ids start with one of {TASK_TYPES}")
    return head


def _partition(n: int, fractions, rng: np.random.Generator) -> dict:
    n_train = math.floor(fractions[0] * n)
    n_val = math.floor(fractions[1] * n)
    perm = rng.permutation(n)
    return {
        "train": tuple(int(i) for i in perm[:n_train]),
        "val": tuple(int(i) for i in perm[n_train:n_train + n_val]),
        "test": tuple(int(i) for i in perm[n_train + n_val:]),
    }


def build_registry(datasets: Mapping[str, list], min_instances: int,
                   val_counts: Mapping[str, int], test_counts: Mapping[str, int],
                   rng: np.random.Generator, fractions=(0.6, 0.2, 0.2)) -> TaskRegistry:
    """Filter tasks, assign splits, and draw per-task partitions.

    ``datasets`` maps task id (type-prefixed, e.g. "B0007") to its instance
    list.  Tasks with fewer than ``min_instances`` instances are dropped, as
    are single-class tasks (which cannot form a valid Task).
    """
    if min_instances < 1:
        raise ValueError("min_instances must be >= 1")
    if not (len(fractions) == 3 and all(f > 0 for f in fractions)
            and abs(sum(fractions) - 1.0) < 1e-9):
        raise ValueError(f"fractions must be three positives summing to 1, got {fractions}")
    for counts, which in ((val_counts, "val_counts"), (test_counts, "test_counts")):
        bad = set(counts) - set(_SAMPLED_TYPES)
        if bad:
            raise ValueError(f"{which} may only name types {_SAMPLED_TYPES}, got {sorted(bad)}")

    by_type: dict = {t: [] for t in TASK_TYPES}
    surviving: dict = {}
    for task_id in sorted(datasets):
        instances = datasets[task_id]
        ttype = _task_type(task_id)
        if len(instances) < min_instances:
            continue
        labels = {label for _, label in instances}
        if labels != {0, 1}:
            logger.warning("dropping single-class task %s", task_id)
            continue
        surviving[task_id] = instances
        by_type[ttype].append(task_id)

    split_of: dict = {}
    for ttype in ("A", "T", "P"):
        for task_id in by_type[ttype]:
            split_of[task_id] = "test"
    for ttype in _SAMPLED_TYPES:
        pool = list(by_type[ttype])
        want_val = int(val_counts.get(ttype, 0))
        want_test = int(test_counts.get(ttype, 0))
        if want_val + want_test > len(pool):
            raise ValueError(
                f"need {want_val}+{want_test} {ttype} tasks for val/test "
                f"but only {len(pool)} survive filtering")
        chosen = rng.choice(len(pool), size=want_val + want_test, replace=False)
        chosen_ids = [pool[i] for i in chosen]
        for task_id in chosen_ids[:want_val]:
            split_of[task_id] = "val"
        for task_id in chosen_ids[want_val:]:
            split_of[task_id] = "test"
        for task_id in pool:
            if task_id not in split_of:
                split_of[task_id] = "train"

    tasks = {}
    splits: dict = {"train": [], "val": [], "test": []}
    for task_id in sorted(surviving):
        parts = _partition(len(surviving[task_id]), fractions, rng)
        tasks[task_id] = Task(task_id=task_id, task_type=_task_type(task_id),
                              instances=surviving[task_id], partitions=parts)
        splits[split_of[task_id]].append(task_id)
    return TaskRegistry(tasks=tasks, splits={k: tuple(v) for k, v in splits.items()})
