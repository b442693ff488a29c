"""Gated graph neural network with explicit, named parameters.

The forward pass is a pure function of (graph, ParamSet, config), which is
what the meta-learners need: adapted "fast weights" are just another ParamSet.
Layers never share parameters; layer t reads the ``layer{t}.*`` names only.

Hidden states are rows (V x F).  The textbook column convention m = A h
appears here as m = h A^T, with A stored square per edge type plus A_self.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .chemgraph.graphs import MolecularGraph, NUM_EDGE_TYPES
from .tensor import (Tape, Tensor, add, broadcast_to, concat, dropout, gather_rows,
                     matmul, mul, reshape, segment_sum, sigmoid, sub, tanh,
                     transpose)

__all__ = [
    "ModelConfig",
    "ParamSet",
    "GraphBatch",
    "param_schema",
    "param_count",
    "init_params",
    "check_params",
    "messages",
    "message_pass",
    "forward",
    "forward_batch",
    "node_states",
    "penultimate_activations",
    "penultimate_batch",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup
    (7 layers, 1024-wide classifier MLP, dropout 0.2)."""

    layers: int = 7
    feature_dim: int = 75
    hidden_dim: int = 1024
    num_edge_types: int = NUM_EDGE_TYPES
    dropout_p: float = 0.2
    output_dim: int = 1

    def __post_init__(self):
        for name in ("layers", "feature_dim", "hidden_dim", "num_edge_types", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


class ParamSet(Mapping):
    """Ordered, immutable name -> Tensor map."""

    __slots__ = ("_entries",)

    def __init__(self, entries):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries = {}
        for name, value in items:
            if not isinstance(value, Tensor):
                raise TypeError(f"parameter {name!r} must be a Tensor")
            self._entries[str(name)] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list:
        return list(self._entries)

    def detach(self) -> "ParamSet":
        """Constant snapshot of every entry (off any tape)."""
        return ParamSet((n, t.detach()) for n, t in self._entries.items())

    def watch(self, tape: Tape) -> "ParamSet":
        """Record every entry as a leaf on ``tape``."""
        return ParamSet((n, tape.tensor(t.data)) for n, t in self._entries.items())

    def with_entries(self, updates: Mapping) -> "ParamSet":
        """Replace some entries by name, preserving order; unknown names error."""
        unknown = set(updates) - set(self._entries)
        if unknown:
            raise KeyError(f"unknown parameter names {sorted(unknown)}")
        return ParamSet((n, updates.get(n, t)) for n, t in self._entries.items())

    def to_arrays(self) -> dict:
        return {n: t.data for n, t in self._entries.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping) -> "ParamSet":
        return cls((n, Tensor(a)) for n, a in arrays.items())


_GATES = ("z", "r", "h")


def param_schema(config: ModelConfig) -> list:
    """The full (name, shape) list the config implies, in canonical order."""
    F, H = config.feature_dim, config.hidden_dim
    schema = []
    for t in range(config.layers):
        for e in range(config.num_edge_types):
            schema.append((f"layer{t}.A{e}", (F, F)))
        schema.append((f"layer{t}.A_self", (F, F)))
        for gate in _GATES:
            schema.append((f"layer{t}.gru.W_{gate}", (F, F)))
        for gate in _GATES:
            schema.append((f"layer{t}.gru.U_{gate}", (F, F)))
        for gate in _GATES:
            schema.append((f"layer{t}.gru.b_{gate}", (F,)))
    schema.append(("mlp.0.W", (F, H)))
    schema.append(("mlp.0.b", (H,)))
    schema.append(("head.W", (H, config.output_dim)))
    schema.append(("head.b", (config.output_dim,)))
    return schema


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_schema(config))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic per generator state."""
    entries = []
    for name, shape in param_schema(config):
        if len(shape) == 1:
            entries.append((name, Tensor(np.zeros(shape))))
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            entries.append((name, Tensor(rng.uniform(-limit, limit, size=shape))))
    return ParamSet(entries)


def check_params(params: Mapping, config: ModelConfig):
    """Validate completeness and shapes against the schema."""
    schema = param_schema(config)
    missing = [name for name, _ in schema if name not in params]
    if missing:
        raise ValueError(f"ParamSet incomplete, missing {missing}")
    for name, shape in schema:
        if params[name].shape != shape:
            raise ValueError(
                f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


class GraphBatch:
    """Disjoint union of graphs: concatenated node rows plus per-edge-type
    directed endpoint arrays (each undirected edge contributes both ways)."""

    __slots__ = ("features", "graph_ids", "num_nodes", "num_graphs",
                 "edge_src", "edge_dst")

    def __init__(self, features, graph_ids, num_graphs, edge_src, edge_dst):
        self.features = features
        self.graph_ids = graph_ids
        self.num_nodes = features.shape[0]
        self.num_graphs = num_graphs
        self.edge_src = edge_src
        self.edge_dst = edge_dst

    @classmethod
    def from_graphs(cls, graphs: Iterable[MolecularGraph],
                    num_edge_types: int = NUM_EDGE_TYPES) -> "GraphBatch":
        graphs = list(graphs)
        if not graphs:
            raise ValueError("empty graph batch")
        feats = []
        graph_ids = []
        src: list = [[] for _ in range(num_edge_types)]
        dst: list = [[] for _ in range(num_edge_types)]
        offset = 0
        for gi, g in enumerate(graphs):
            if g.node_features is None:
                raise ValueError("graph is not featurized")
            feats.append(g.node_features)
            graph_ids.extend([gi] * g.num_nodes)
            for u, v, t in g.edges:
                if t >= num_edge_types:
                    raise ValueError(
                        f"edge type {t} >= num_edge_types {num_edge_types}")
                # both directions, same edge-type matrix
                src[t].append(v + offset)
                dst[t].append(u + offset)
                src[t].append(u + offset)
                dst[t].append(v + offset)
            offset += g.num_nodes
        features = np.ascontiguousarray(np.concatenate(feats, axis=0))
        return cls(features=features,
                   graph_ids=np.asarray(graph_ids, dtype=np.int64),
                   num_graphs=len(graphs),
                   edge_src=[np.asarray(s, dtype=np.int64) for s in src],
                   edge_dst=[np.asarray(d, dtype=np.int64) for d in dst])


def _as_batch(graph, num_edge_types: int) -> GraphBatch:
    if isinstance(graph, GraphBatch):
        return graph
    if isinstance(graph, MolecularGraph):
        return GraphBatch.from_graphs([graph], num_edge_types)
    return GraphBatch.from_graphs(graph, num_edge_types)


def _bias_rows(b: Tensor, rows: int) -> Tensor:
    width = b.shape[0]
    return broadcast_to(reshape(b, (1, width)), (rows, width))


def messages(graph, h: Tensor, params: Mapping, layer_index: int,
             num_edge_types: int = NUM_EDGE_TYPES) -> Tensor:
    """Pre-GRU messages: m = h A_self^T + sum over incoming edges of h_src A_e^T."""
    batch = _as_batch(graph, num_edge_types)
    prefix = f"layer{layer_index}."
    m = matmul(h, transpose(params[prefix + "A_self"]))
    pieces = []
    dsts = []
    for e in range(len(batch.edge_src)):
        if batch.edge_src[e].size == 0:
            continue
        contrib = matmul(gather_rows(h, batch.edge_src[e]),
                         transpose(params[f"{prefix}A{e}"]))
        pieces.append(contrib)
        dsts.append(batch.edge_dst[e])
    if pieces:
        gathered = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
        ids = dsts[0] if len(dsts) == 1 else np.concatenate(dsts)
        m = add(m, segment_sum(gathered, ids, batch.num_nodes))
    return m


def message_pass(graph, h: Tensor, params: Mapping, layer_index: int,
                 num_edge_types: int = NUM_EDGE_TYPES) -> Tensor:
    """One layer: messages followed by the layer's own GRU update."""
    batch = _as_batch(graph, num_edge_types)
    if h.shape[0] != batch.num_nodes:
        raise ValueError(f"h has {h.shape[0]} rows for {batch.num_nodes} nodes")
    prefix = f"layer{layer_index}.gru."
    expect = params[prefix + "W_z"].shape[0]
    if h.shape[1] != expect:
        raise ValueError(f"h width {h.shape[1]} does not match parameters ({expect})")
    m = messages(batch, h, params, layer_index, num_edge_types)
    rows = batch.num_nodes

    def gate(name, m_in, h_in, activation):
        pre = add(add(matmul(m_in, params[prefix + f"W_{name}"]),
                      matmul(h_in, params[prefix + f"U_{name}"])),
                  _bias_rows(params[prefix + f"b_{name}"], rows))
        return activation(pre)

    z = gate("z", m, h, sigmoid)
    r = gate("r", m, h, sigmoid)
    h_cand = gate("h", m, mul(r, h), tanh)
    return add(mul(sub(1.0, z), h), mul(z, h_cand))


def _embed(batch: GraphBatch, params: Mapping, config: ModelConfig,
           mode: str, rng) -> tuple:
    """Shared forward core; returns (logits B x out, hidden B x H, node states V x F)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and config.dropout_p > 0.0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    check_params(params, config)
    if batch.features.shape[1] != config.feature_dim:
        raise ValueError(
            f"graph feature width {batch.features.shape[1]} != config "
            f"feature_dim {config.feature_dim}")
    h = Tensor(batch.features)
    for t in range(config.layers):
        h = message_pass(batch, h, params, t, config.num_edge_types)
        if training:
            h = dropout(h, config.dropout_p, True, rng)
    pooled = segment_sum(h, batch.graph_ids, batch.num_graphs)
    hidden = tanh(add(matmul(pooled, params["mlp.0.W"]),
                      _bias_rows(params["mlp.0.b"], batch.num_graphs)))
    if training:
        hidden = dropout(hidden, config.dropout_p, True, rng)
    logits = add(matmul(hidden, params["head.W"]),
                 _bias_rows(params["head.b"], batch.num_graphs))
    return logits, hidden, h


def forward_batch(graphs, params: Mapping, config: ModelConfig,
                  mode: str = "eval", rng=None) -> Tensor:
    """Logits for a batch of graphs, shape (num_graphs, output_dim)."""
    batch = _as_batch(graphs, config.num_edge_types)
    logits, _, _ = _embed(batch, params, config, mode, rng)
    return logits


def forward(g: MolecularGraph, params: Mapping, config: ModelConfig,
            mode: str = "eval", rng=None) -> Tensor:
    """Logits for one graph, shape (output_dim,)."""
    logits = forward_batch([g], params, config, mode, rng)
    return reshape(logits, (config.output_dim,))


def node_states(g, params: Mapping, config: ModelConfig) -> Tensor:
    """Final per-node representations after all layers, eval mode."""
    batch = _as_batch(g, config.num_edge_types)
    _, _, h = _embed(batch, params, config, "eval", None)
    return h


def penultimate_activations(g: MolecularGraph, params: Mapping,
                            config: ModelConfig) -> Tensor:
    """MLP hidden activations right before the head, eval mode, shape (H,)."""
    batch = GraphBatch.from_graphs([g], config.num_edge_types)
    _, hidden, _ = _embed(batch, params, config, "eval", None)
    return reshape(hidden, (config.hidden_dim,))


def penultimate_batch(graphs, params: Mapping, config: ModelConfig) -> np.ndarray:
    """Penultimate activations for many graphs at once, as a (B, H) array."""
    batch = _as_batch(graphs, config.num_edge_types)
    _, hidden, _ = _embed(batch, params, config, "eval", None)
    return hidden.data
