"""Multi-task pre-training and the transfer baselines built on it.

Pre-training fits one graph network with an N-task head using a masked BCE
loss (each instance carries labels for the tasks that observed it; the rest
are masked out).  The pretrained body is then reused three ways on a new
task: k-NN classification over penultimate features, fine-tuning a freshly
initialized classifier on top of a frozen body, or fine-tuning everything.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .evalbench import FinetuneConfig, finetune
from .ggnn import (ModelConfig, ParamSet, forward_batch, init_params,
                   penultimate_batch)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, grad, mul, reduce_sum, bce_elements

__all__ = [
    "MultitaskBatch",
    "PretrainConfig",
    "build_multitask_instances",
    "pretrain_multitask",
    "knn_predict",
    "finetune_top",
    "finetune_all",
]

logger = logging.getLogger(__name__)

HEAD_NAMES = ("mlp.0.W", "mlp.0.b", "head.W", "head.b")


@dataclass(frozen=True)
class MultitaskBatch:
    """Graphs with a label matrix and an observation mask (1 = observed)."""

    graphs: tuple
    labels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        labels = np.asarray(self.labels, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=np.float64)
        if labels.shape != mask.shape or labels.ndim != 2:
            raise ValueError("labels and mask must be equal-shape 2-D arrays")
        if labels.shape[0] != len(self.graphs):
            raise ValueError(f"{len(self.graphs)} graphs but "
                             f"{labels.shape[0]} label rows")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        observed = labels[mask == 1]
        if not np.all((observed == 0) | (observed == 1)):
            raise ValueError("observed labels must be 0 or 1")
        if np.any(mask.sum(axis=1) == 0):
            raise ValueError("every instance needs at least one observed label")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "mask", mask)

    @property
    def num_tasks(self) -> int:
        return self.labels.shape[1]


def build_multitask_instances(tasks: Sequence) -> tuple:
    """Flatten tasks into (graph, labels row, mask row) triples.

    Returns (instances, task_ids) where task_ids fixes the column order.
    Each instance observes exactly the one task it came from.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("no tasks")
    task_ids = [t.task_id for t in tasks]
    if len(set(task_ids)) != len(task_ids):
        raise ValueError("duplicate task ids")
    width = len(tasks)
    instances = []
    for col, task in enumerate(tasks):
        for graph, label in task.instances:
            labels = np.zeros(width)
            mask = np.zeros(width)
            labels[col] = float(label)
            mask[col] = 1.0
            instances.append((graph, labels, mask))
    return instances, task_ids


@dataclass(frozen=True)
class PretrainConfig:
    """Multi-task training settings: Adam at 10^-3.75, batches of 512,
    early stopping patience 20 on the held-out split."""

    lr: float = 10.0 ** -3.75
    batch_size: int = 512
    patience: int = 20
    max_epochs: int = 500
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


def masked_bce(params, batch: MultitaskBatch, model_config: ModelConfig,
               mode: str = "eval", rng=None):
    """Mean BCE over observed label entries only.

    Unobserved label entries may hold anything; they are zeroed before the
    elementwise BCE so they never reach the loss in any form.
    """
    logits = forward_batch(list(batch.graphs), params, model_config,
                           mode=mode, rng=rng)
    safe_labels = np.where(batch.mask == 1.0, batch.labels, 0.0)
    elements = bce_elements(logits, Tensor(safe_labels))
    masked = mul(elements, Tensor(batch.mask))
    count = float(batch.mask.sum())
    return mul(reduce_sum(masked), 1.0 / count)


def _batches(instances, order, batch_size):
    for start in range(0, len(order), batch_size):
        chunk = [instances[i] for i in order[start:start + batch_size]]
        yield MultitaskBatch(graphs=[g for g, _, _ in chunk],
                             labels=np.stack([l for _, l, _ in chunk]),
                             mask=np.stack([m for _, _, m in chunk]))


def pretrain_multitask(tasks: Sequence, config: PretrainConfig,
                       rng: np.random.Generator,
                       model_config: ModelConfig) -> tuple:
    """Train a multi-task model over all instances of ``tasks``.

    Instances are pooled and split per task into train/validation parts
    (val_fraction held out, seeded); early stopping watches the masked
    validation loss.  Returns (best ParamSet, task_ids, log) where task_ids
    gives the head-column ordering and log has one dict per epoch.
    """
    instances, task_ids = build_multitask_instances(tasks)
    if model_config.output_dim != len(task_ids):
        raise ValueError(f"model output_dim {model_config.output_dim} != "
                         f"number of tasks {len(task_ids)}")
    # held-out validation fraction drawn within each task's instance block
    train_idx = []
    val_idx = []
    start = 0
    for task in tasks:
        n = len(task.instances)
        local = start + rng.permutation(n)
        n_val = max(1, int(np.floor(n * config.val_fraction))) if n > 1 else 0
        val_idx.extend(local[:n_val])
        train_idx.extend(local[n_val:])
        start += n
    if not val_idx:
        raise ValueError("no validation instances; add data or tasks")
    val_batch = MultitaskBatch(
        graphs=[instances[i][0] for i in val_idx],
        labels=np.stack([instances[i][1] for i in val_idx]),
        mask=np.stack([instances[i][2] for i in val_idx]))

    params = init_params(model_config, rng)
    opt = AdamState.initialize(params)
    best_params = params
    best_val = np.inf
    stale = 0
    log = []
    names = params.names()
    for epoch in range(config.max_epochs):
        order = [train_idx[i] for i in rng.permutation(len(train_idx))]
        epoch_losses = []
        for batch in _batches(instances, order, config.batch_size):
            tape = Tape()
            watched = params.watch(tape)
            mode = "train" if model_config.dropout_p > 0.0 else "eval"
            loss = masked_bce(watched, batch, model_config, mode,
                              rng if mode == "train" else None)
            grads = grad(loss, [watched[n] for n in names])
            opt, stepped = adam_step(opt, dict(params.items()),
                                     dict(zip(names, grads)), config.lr)
            params = params.with_entries(stepped)
            epoch_losses.append(float(loss.item()))
        val_loss = float(masked_bce(params, val_batch, model_config).item())
        log.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                    "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_params = params
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("pretraining stopped at epoch %d", epoch)
                break
    return best_params, task_ids, log


def knn_predict(pretrained: ParamSet, task, k_instances: int,
                n_neighbors: int = 3, rng: Optional[np.random.Generator] = None,
                model_config: Optional[ModelConfig] = None,
                instance_indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Nearest-neighbor scores for the task's test partition.

    References are k_instances train instances embedded with the pretrained
    penultimate layer; each test instance scores the mean label of its
    n_neighbors nearest references by Euclidean distance, distance ties
    broken by lower reference index.
    """
    if model_config is None:
        raise ValueError("model_config is required")
    if k_instances < n_neighbors:
        raise ValueError(f"k_instances {k_instances} < n_neighbors {n_neighbors}")
    # embeddings ignore the head, so accept any head width (multitask models)
    head_cols = pretrained["head.W"].shape[1]
    if head_cols != model_config.output_dim:
        model_config = dataclasses.replace(model_config, output_dim=head_cols)
    pool = task.partition_instances("train")
    if instance_indices is None:
        if rng is None:
            raise ValueError("need an rng when instance_indices not given")
        if len(pool) < k_instances:
            raise ValueError(f"task {task.task_id} has {len(pool)} train "
                             f"instances, need {k_instances}")
        instance_indices = rng.choice(len(pool), size=k_instances, replace=False)
    instance_indices = [int(i) for i in instance_indices]
    if len(instance_indices) != k_instances:
        raise ValueError("instance_indices length != k_instances")
    refs = [pool[i] for i in instance_indices]
    ref_labels = np.asarray([float(y) for _, y in refs])
    ref_emb = penultimate_batch([g for g, _ in refs], pretrained, model_config)
    test_items = task.partition_instances("test")
    test_emb = penultimate_batch([g for g, _ in test_items], pretrained,
                                 model_config)
    # squared distances suffice for ranking
    d2 = (np.sum(test_emb ** 2, axis=1)[:, None]
          + np.sum(ref_emb ** 2, axis=1)[None, :]
          - 2.0 * test_emb @ ref_emb.T)
    scores = np.empty(len(test_items))
    for i in range(len(test_items)):
        nearest = np.argsort(d2[i], kind="stable")[:n_neighbors]
        scores[i] = ref_labels[nearest].mean()
    return scores


def _replace_classifier(pretrained: ParamSet, model_config: ModelConfig,
                        rng: np.random.Generator) -> ParamSet:
    """Fresh single-output classifier (hidden layer + head) on the
    pretrained body."""
    fresh = init_params(model_config, rng)
    body_names = [n for n in fresh.names() if n not in HEAD_NAMES]
    missing = sorted(n for n in body_names if n not in pretrained)
    if missing:
        raise ValueError(f"pretrained parameters missing {missing}")
    return fresh.with_entries({n: pretrained[n] for n in body_names})


def finetune_top(pretrained: ParamSet, task, k_instances: int,
                 ft_config: FinetuneConfig, rng: np.random.Generator,
                 model_config: ModelConfig,
                 instance_indices: Optional[Sequence[int]] = None) -> ParamSet:
    """Reinitialize and train only the classifier; the message-passing body
    stays frozen."""
    params = _replace_classifier(pretrained, model_config, rng)
    tuned, _ = finetune(params, task, k_instances, ft_config, rng,
                        model_config, trainable_names=list(HEAD_NAMES),
                        instance_indices=instance_indices)
    return tuned


def finetune_all(pretrained: ParamSet, task, k_instances: int,
                 ft_config: FinetuneConfig, rng: np.random.Generator,
                 model_config: ModelConfig,
                 instance_indices: Optional[Sequence[int]] = None) -> ParamSet:
    """Fresh classifier, then fine-tune every parameter."""
    params = _replace_classifier(pretrained, model_config, rng)
    tuned, _ = finetune(params, task, k_instances, ft_config, rng,
                        model_config, instance_indices=instance_indices)
    return tuned
