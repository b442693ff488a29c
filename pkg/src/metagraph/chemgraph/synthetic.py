"""Synthetic motif-presence tasks: a desk-scale stand-in for assay data.

Each task is assigned a subgraph motif; positives are built around a planted
copy of the motif, negatives are random valence-respecting molecules
rejection-sampled until they do not contain it (checked by subgraph
monomorphism on element/aromaticity/bond-type).  Positives and negatives draw
node counts from the same range, so size alone carries no signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import networkx as nx
import numpy as np
from networkx.algorithms import isomorphism

from .featurize import featurize
from .graphs import Atom, MolecularGraph, TASK_TYPES, BOND_SINGLE, BOND_DOUBLE, BOND_TRIPLE
from .smiles import parse_smiles

__all__ = ["SynthSpec", "DEFAULT_MOTIFS", "contains_motif", "synthesize_tasks"]

DEFAULT_MOTIFS = (
    "c1ccccc1",      # benzene
    "C(=O)O",        # carboxyl
    "C#N",           # nitrile
    "c1ccncc1",      # pyridine
    "C(=O)N",        # amide
    "CS(=O)=O",      # methanesulfonyl (plain sulfonyl has no free valence to grow on)
    "C(F)(F)F",      # trifluoromethyl
    "c1ccoc1",       # furan
    "C(=O)OC",       # ester
    "c1ccsc1",       # thiophene
    "N=N",           # azo
    "C1CCOC1",       # oxolane
    "c1cc[nH]c1",    # pyrrole
    "C#C",           # alkyne
    "NC(=O)N",       # urea
    "C1CCNC1",       # pyrrolidine
)


@dataclass(frozen=True)
class SynthSpec:
    """Generation parameters; together with a seed this fixes the datasets."""

    task_counts: Mapping[str, int]
    instances_per_task: int = 128
    min_nodes: int = 3
    max_nodes: int = 30
    motifs: tuple = DEFAULT_MOTIFS
    balance: tuple = (0.3, 0.7)

    def __post_init__(self):
        counts = dict(self.task_counts)
        bad = set(counts) - set(TASK_TYPES)
        if bad:
            raise ValueError(f"unknown task types {sorted(bad)}")
        if any(v < 0 for v in counts.values()) or sum(counts.values()) == 0:
            raise ValueError("task counts must be non-negative with at least one task")
        if self.instances_per_task < 2:
            raise ValueError("need at least 2 instances per task")
        if not 1 <= self.min_nodes <= self.max_nodes:
            raise ValueError(f"bad node range [{self.min_nodes}, {self.max_nodes}]")
        lo, hi = self.balance
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"bad balance bounds {self.balance}")
        if not self.motifs:
            raise ValueError("motif library is empty")
        object.__setattr__(self, "task_counts", counts)
        object.__setattr__(self, "motifs", tuple(self.motifs))


_GEN_SYMBOLS = ("C", "N", "O", "S", "F")
_GEN_WEIGHTS = (0.62, 0.14, 0.14, 0.06, 0.04)
_GEN_VALENCE = {"C": 4, "N": 3, "O": 2, "S": 2, "F": 1}
_ORDER_TO_BOND = {1: BOND_SINGLE, 2: BOND_DOUBLE, 3: BOND_TRIPLE}


def _to_nx(g: MolecularGraph) -> nx.Graph:
    if g.atoms is None:
        raise ValueError("motif matching needs atom metadata")
    out = nx.Graph()
    for i, atom in enumerate(g.atoms):
        out.add_node(i, symbol=atom.symbol, aromatic=atom.aromatic)
    for u, v, t in g.edges:
        out.add_edge(u, v, bond=t)
    return out


def contains_motif(graph: MolecularGraph, motif: MolecularGraph) -> bool:
    """True when ``motif`` maps into ``graph`` as a subgraph (monomorphism),
    matching element symbol, aromaticity, and bond type."""
    matcher = isomorphism.GraphMatcher(
        _to_nx(graph), _to_nx(motif),
        node_match=lambda a, b: a["symbol"] == b["symbol"] and a["aromatic"] == b["aromatic"],
        edge_match=lambda a, b: a["bond"] == b["bond"])
    return matcher.subgraph_is_monomorphic()


def _pick_symbol(rng: np.random.Generator) -> str:
    return _GEN_SYMBOLS[rng.choice(len(_GEN_SYMBOLS), p=_GEN_WEIGHTS)]


def _choose_order(rng, cap_a: int, cap_b: int) -> int:
    if cap_a >= 2 and cap_b >= 2:
        roll = rng.random()
        if roll < 0.04 and cap_a >= 3 and cap_b >= 3:
            return 3
        if roll < 0.18:
            return 2
    return 1


def _grow(rng, symbols, remaining, edges, start: int, total: int,
          single_bond_into: int):
    """Attach atoms ``start``..``total``-1 to the partial molecule in place.

    Bonds into nodes below ``single_bond_into`` are forced single so a planted
    motif's own bond pattern stays intact.  Returns False when the molecule
    has no free valence left to grow on.
    """
    for i in range(start, total):
        parents = [j for j in range(i) if remaining[j] >= 1]
        if not parents:
            return False
        parent = parents[rng.choice(len(parents))]
        symbol = _pick_symbol(rng)
        symbols.append(symbol)
        remaining.append(_GEN_VALENCE[symbol])
        if parent < single_bond_into:
            order = 1
        else:
            order = _choose_order(rng, remaining[parent], remaining[i])
        edges[(parent, i)] = _ORDER_TO_BOND[order]
        remaining[parent] -= order
        remaining[i] -= order
    return True


def _add_ring_edges(rng, remaining, edges, lowest: int, total: int):
    """Occasionally close a ring among nodes >= ``lowest``."""
    if total - lowest < 4 or rng.random() >= 0.4:
        return
    for _ in range(8):
        u, v = rng.choice(np.arange(lowest, total), size=2, replace=False)
        u, v = (int(u), int(v)) if u < v else (int(v), int(u))
        if (u, v) not in edges and remaining[u] >= 1 and remaining[v] >= 1:
            edges[(u, v)] = BOND_SINGLE
            remaining[u] -= 1
            remaining[v] -= 1
            return


def _finish(symbols, aromatic, charges, remaining, edges) -> MolecularGraph:
    atoms = [Atom(sym, bool(aro), int(chg), int(rem))
             for sym, aro, chg, rem in zip(symbols, aromatic, charges, remaining)]
    edge_list = sorted((u, v, t) for (u, v), t in edges.items())
    return featurize(MolecularGraph(num_nodes=len(atoms), edges=edge_list, atoms=atoms))


def _random_molecule(rng: np.random.Generator, n_nodes: int) -> MolecularGraph:
    for _ in range(200):
        first = _pick_symbol(rng)
        if n_nodes > 1 and _GEN_VALENCE[first] < 2:
            first = "C"
        symbols = [first]
        remaining = [_GEN_VALENCE[first]]
        edges: dict = {}
        if _grow(rng, symbols, remaining, edges, 1, n_nodes, single_bond_into=0):
            _add_ring_edges(rng, remaining, edges, 0, n_nodes)
            return _finish(symbols, [False] * n_nodes, [0] * n_nodes, remaining, edges)
    raise RuntimeError(f"could not grow a {n_nodes}-node molecule")


def _planted_molecule(rng: np.random.Generator, motif: MolecularGraph,
                      n_nodes: int) -> MolecularGraph:
    n_m = motif.num_nodes
    for _ in range(200):
        symbols = [a.symbol for a in motif.atoms]
        aromatic = [a.aromatic for a in motif.atoms]
        charges = [a.charge for a in motif.atoms]
        # implicit hydrogens on motif atoms are the attachment capacity
        remaining = [a.hydrogens for a in motif.atoms]
        edges = {(u, v): t for u, v, t in motif.edges}
        if _grow(rng, symbols, remaining, edges, n_m, n_nodes, single_bond_into=n_m):
            _add_ring_edges(rng, remaining, edges, n_m, n_nodes)
            aromatic += [False] * (n_nodes - n_m)
            charges += [0] * (n_nodes - n_m)
            return _finish(symbols, aromatic, charges, remaining, edges)
    raise RuntimeError(f"could not decorate motif to {n_nodes} nodes")


def synthesize_tasks(spec: SynthSpec, rng: np.random.Generator) -> dict:
    """Generate per-task labeled instance lists, keyed by type-prefixed id."""
    motif_graphs = [parse_smiles(m) for m in spec.motifs]
    n_tasks = sum(spec.task_counts.values())
    for idx in range(min(n_tasks, len(motif_graphs))):
        if motif_graphs[idx].num_nodes > spec.max_nodes:
            raise ValueError(
                f"motif {spec.motifs[idx]!r} has {motif_graphs[idx].num_nodes} nodes, "
                f"larger than max_nodes={spec.max_nodes}")

    lo_balance, hi_balance = spec.balance
    margin = min(0.05, (hi_balance - lo_balance) / 4.0)
    datasets: dict = {}
    assigned = 0
    for ttype in TASK_TYPES:
        for i in range(spec.task_counts.get(ttype, 0)):
            task_id = f"{ttype}{i:04d}"
            motif = motif_graphs[assigned % len(motif_graphs)]
            assigned += 1
            n = spec.instances_per_task
            prevalence = rng.uniform(lo_balance + margin, hi_balance - margin)
            n_pos = min(max(int(round(n * prevalence)), 1), n - 1)
            labels = np.zeros(n, dtype=np.int64)
            labels[:n_pos] = 1
            labels = labels[rng.permutation(n)]
            low = max(spec.min_nodes, motif.num_nodes)
            instances = []
            for j, label in enumerate(labels):
                n_nodes = int(rng.integers(low, spec.max_nodes + 1))
                if label:
                    graph = _planted_molecule(rng, motif, n_nodes)
                else:
                    for _ in range(500):
                        graph = _random_molecule(rng, n_nodes)
                        if not contains_motif(graph, motif):
                            break
                    else:
                        raise RuntimeError(
                            f"could not sample a motif-free negative for {task_id}")
                graph = MolecularGraph(graph.num_nodes, graph.edges, graph.atoms,
                                       graph.node_features, graph.smiles,
                                       graph_id=f"{task_id}:{j:05d}")
                instances.append((graph, int(label)))
            datasets[task_id] = instances
    return datasets
