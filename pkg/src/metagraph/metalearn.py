"""Episodic meta-learning: MAML, first-order MAML, and ANIL.

Inner loops are plain SGD on a support batch; the meta-loss is the SUM of
post-adaptation query losses over an episode batch.  The algorithm flag only
changes gradient connectivity:

- maml:   inner gradients recorded with create_graph, so the outer gradient
          carries the exact second-order terms.
- fomaml: inner gradients come back as constants; the update chain is still
          recorded, so the outer gradient is the query gradient at the
          adapted parameters (all second-order terms dropped).
- anil:   like maml, but the inner loop updates only a configured subset of
          parameters (the classifier head by default); everything else is
          adapted solely by the outer loop.

All operations are generic over an episode loss function with signature
``loss_fn(params, items, rng) -> scalar Tensor`` so closed-form surrogate
models can exercise the exact code path the graph network uses.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .ggnn import ModelConfig, ParamSet, forward_batch, init_params
from .optim import AdamState, adam_step, sgd_step
from .tensor import Tape, Tensor, add, bce_with_logits, grad, reshape

__all__ = [
    "ALGORITHMS",
    "Episode",
    "MetaConfig",
    "bce_episode_loss",
    "sample_episode",
    "inner_adapt",
    "meta_loss",
    "meta_gradients",
    "meta_step",
    "meta_train",
    "save_training_log",
]

logger = logging.getLogger(__name__)

ALGORITHMS = ("maml", "fomaml", "anil")

# loss_fn(params, items, rng) -> scalar Tensor; rng is None outside dropout mode
LossFn = Callable[[Mapping, Sequence, Optional[np.random.Generator]], Tensor]


@dataclass(frozen=True)
class Episode:
    """One task sample: a support batch to adapt on, a query batch to score."""

    task_id: str
    support: tuple
    query: tuple

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))


@dataclass(frozen=True)
class MetaConfig:
    """Meta-training hyperparameters.

    Defaults are the reference settings: inner lr 0.05, 2 inner steps,
    support/query batches of 32, outer batch 32, Adam outer updates at
    lr 0.003 (0.0015 for fomaml, applied when outer_lr is left None).
    """

    algorithm: str = "maml"
    inner_lr: float = 0.05
    inner_steps: int = 2
    inner_batch: int = 32
    query_size: int = 32
    outer_lr: Optional[float] = None
    meta_batch: int = 32
    max_meta_iterations: int = 1000
    val_every: int = 50
    patience: int = 3
    outer_opt: str = "adam"
    inner_dropout: bool = False
    anil_adapt: str = "head"
    k_val: int = 128

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, "
                             f"got {self.algorithm!r}")
        if self.inner_lr <= 0.0:
            raise ValueError("inner_lr must be positive")
        if self.outer_lr is not None and self.outer_lr < 0.0:
            raise ValueError("outer_lr must be non-negative")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.inner_batch < 1 or self.query_size < 1:
            raise ValueError("inner_batch and query_size must be >= 1")
        if self.max_meta_iterations < 0 or self.val_every < 0:
            raise ValueError("max_meta_iterations and val_every must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.k_val < 1:
            raise ValueError("k_val must be >= 1")
        if self.outer_opt not in ("adam", "sgd"):
            raise ValueError(f"outer_opt must be 'adam' or 'sgd', got {self.outer_opt!r}")
        if self.anil_adapt not in ("head", "mlp"):
            raise ValueError(f"anil_adapt must be 'head' or 'mlp', got {self.anil_adapt!r}")

    @property
    def effective_outer_lr(self) -> float:
        if self.outer_lr is not None:
            return self.outer_lr
        return 0.0015 if self.algorithm == "fomaml" else 0.003

    def adapted_names(self, params: Mapping) -> list:
        """Parameter names the inner loop is allowed to update."""
        if self.algorithm != "anil":
            return list(params)
        prefix = "head." if self.anil_adapt == "head" else "mlp.0."
        names = [n for n in params if n.startswith(prefix)]
        if not names:
            raise ValueError(f"no parameters match the anil prefix {prefix!r}")
        return names


def bce_episode_loss(model_config: ModelConfig) -> LossFn:
    """Episode loss for the graph network: mean BCE over (graph, label) items.

    A None rng means deterministic eval-mode forwards (no dropout); passing a
    generator switches to train mode with the configured dropout.
    """
    if model_config.output_dim != 1:
        raise ValueError("binary episode loss needs output_dim=1")

    def loss_fn(params, items, rng=None):
        graphs = [g for g, _ in items]
        labels = np.asarray([float(y) for _, y in items])
        mode = "train" if rng is not None else "eval"
        logits = forward_batch(graphs, params, model_config, mode=mode, rng=rng)
        return bce_with_logits(reshape(logits, (len(graphs),)), Tensor(labels))

    return loss_fn


def sample_episode(task, inner_batch: int, query_size: int,
                   rng: np.random.Generator) -> Episode:
    """Disjoint support/query samples from the task's train partition."""
    pool = task.partition_instances("train")
    need = inner_batch + query_size
    if len(pool) < need:
        raise ValueError(
            f"task {task.task_id} has {len(pool)} train instances, "
            f"need {need} for an episode")
    picked = rng.choice(len(pool), size=need, replace=False)
    support = tuple(pool[i] for i in picked[:inner_batch])
    query = tuple(pool[i] for i in picked[inner_batch:])
    return Episode(task_id=task.task_id, support=support, query=query)


def inner_adapt(params: ParamSet, support: Sequence, config: MetaConfig,
                loss_fn: LossFn, rng=None) -> ParamSet:
    """N steps of support-batch SGD; connectivity depends on the algorithm."""
    if config.inner_steps == 0:
        return params
    if len(support) == 0:
        raise ValueError("cannot adapt on an empty support set")
    names = config.adapted_names(params)
    create_graph = config.algorithm in ("maml", "anil")
    current = params
    for _ in range(config.inner_steps):
        loss = loss_fn(current, support, rng if config.inner_dropout else None)
        grads = grad(loss, [current[n] for n in names], create_graph=create_graph)
        step = sgd_step({n: current[n] for n in names},
                        dict(zip(names, grads)), config.inner_lr)
        current = current.with_entries(step)
    return current


def _episode_query_losses(params: ParamSet, episodes: Sequence[Episode],
                          config: MetaConfig, loss_fn: LossFn, rng=None) -> list:
    losses = []
    for ep in episodes:
        adapted = inner_adapt(params, ep.support, config, loss_fn, rng)
        losses.append(loss_fn(adapted, ep.query,
                              rng if config.inner_dropout else None))
    return losses


def meta_loss(params: ParamSet, episodes: Sequence[Episode],
              config: MetaConfig, loss_fn: LossFn, rng=None) -> Tensor:
    """Sum of post-adaptation query losses over the episode batch."""
    if len(episodes) == 0:
        raise ValueError("meta_loss needs at least one episode")
    losses = _episode_query_losses(params, episodes, config, loss_fn, rng)
    total = losses[0]
    for part in losses[1:]:
        total = add(total, part)
    return total


def meta_gradients(params: ParamSet, episodes: Sequence[Episode],
                   config: MetaConfig, loss_fn: LossFn, rng=None) -> tuple:
    """Outer gradient of the meta-loss at ``params``.

    Returns (meta_loss value, {name: gradient Tensor}, per-episode query
    losses as (task_id, value) pairs).  ``params`` may be constants; they are
    re-recorded as leaves on a fresh tape internally.
    """
    tape = Tape()
    watched = params.watch(tape) if isinstance(params, ParamSet) \
        else ParamSet(params).watch(tape)
    losses = _episode_query_losses(watched, episodes, config, loss_fn, rng)
    total = losses[0]
    for part in losses[1:]:
        total = add(total, part)
    names = watched.names()
    grads = grad(total, [watched[n] for n in names])
    per_episode = [(ep.task_id, float(l.item()))
                   for ep, l in zip(episodes, losses)]
    return float(total.item()), dict(zip(names, grads)), per_episode


def meta_step(params: ParamSet, opt_state, registry, config: MetaConfig,
              rng: np.random.Generator, loss_fn: LossFn) -> tuple:
    """One outer iteration: sample tasks, build episodes, update params.

    ``registry`` may be a TaskRegistry (its train split is used) or any
    sequence of task-like objects.  Returns (new params, new opt state,
    metrics dict).
    """
    tasks = registry.split_tasks("train") if hasattr(registry, "split_tasks") \
        else list(registry)
    if not tasks:
        raise ValueError("no tasks to sample from")
    picks = rng.integers(0, len(tasks), size=config.meta_batch)
    episodes = [sample_episode(tasks[i], config.inner_batch, config.query_size, rng)
                for i in picks]
    loss_value, grads, per_episode = meta_gradients(
        params, episodes, config, loss_fn, rng)
    lr = config.effective_outer_lr
    if config.outer_opt == "adam":
        if opt_state is None:
            opt_state = AdamState.initialize(params)
        opt_state, new_arrays = adam_step(opt_state, dict(params.items()),
                                          grads, lr)
        new_params = params.with_entries(new_arrays)
    else:
        new_params = params.with_entries(
            {n: Tensor(params[n].data - lr * grads[n].data) for n in params})
    metrics = {"meta_loss": loss_value, "episode_losses": per_episode}
    return new_params, opt_state, metrics


def _meta_validate(params: ParamSet, val_tasks, config: MetaConfig,
                   model_config: ModelConfig, rng: np.random.Generator,
                   ft_config=None) -> float:
    """Mean fine-tuned test AUPRC over the validation tasks."""
    from .evalbench import FinetuneConfig, finetune

    if ft_config is None:
        ft_config = FinetuneConfig()
    scores = []
    for task in val_tasks:
        k = min(config.k_val, len(task.partition_instances("train")))
        child = np.random.default_rng(int(rng.integers(0, 2 ** 63)))
        _, score = finetune(params, task, k, ft_config, child,
                            model_config=model_config)
        scores.append(score)
    return float(np.mean(scores))


def meta_train(registry, config: MetaConfig, model_config: ModelConfig,
               rng: np.random.Generator, loss_fn: Optional[LossFn] = None,
               init: Optional[ParamSet] = None, val_finetune=None) -> tuple:
    """Full meta-training loop with periodic validation and early stopping.

    Every ``val_every`` iterations each validation task is fine-tuned on
    k_val instances (clamped to availability) and scored by test AUPRC; the
    parameters with the best mean score are kept.  Stops after ``patience``
    validations without improvement, or at max_meta_iterations.
    ``val_finetune`` sets the validation fine-tuning protocol (an evalbench
    FinetuneConfig); pass the evaluation-time settings so model selection
    matches the final measurement.

    Returns (best params, log) where log is a list of dicts, one per
    iteration executed, with keys iter, meta_loss, wall_ms and, on
    validation iterations, val_auprc.
    """
    train_tasks = registry.split_tasks("train")
    val_tasks = registry.split_tasks("val")
    if not train_tasks:
        raise ValueError("registry has no training tasks")
    if not val_tasks:
        raise ValueError("registry has no validation tasks")
    if loss_fn is None:
        loss_fn = bce_episode_loss(model_config)
    params = init if init is not None else init_params(model_config, rng)
    params = params.detach()
    opt_state = None
    best_params = params
    best_score = -np.inf
    stale = 0
    log = []
    for it in range(config.max_meta_iterations):
        start = time.perf_counter()
        params, opt_state, metrics = meta_step(
            params, opt_state, train_tasks, config, rng, loss_fn)
        entry = {"iter": it, "meta_loss": metrics["meta_loss"],
                 "wall_ms": (time.perf_counter() - start) * 1000.0}
        if config.val_every > 0 and (it + 1) % config.val_every == 0:
            score = _meta_validate(params, val_tasks, config, model_config, rng,
                                   ft_config=val_finetune)
            entry["val_auprc"] = score
            if score > best_score:
                best_score = score
                best_params = params
                stale = 0
            else:
                stale += 1
            log.append(entry)
            if stale >= config.patience:
                logger.info("stopping at iteration %d after %d stale validations",
                            it, stale)
                break
            continue
        log.append(entry)
    if best_score == -np.inf:
        best_params = params
    return best_params, log


def save_training_log(log: Sequence[Mapping], path) -> None:
    """Write the meta_train log as JSONL, one iteration per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
