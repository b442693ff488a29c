"""Deterministic 75-wide node featurization.

Layout (75 columns):
  [0:45)   element one-hot over ELEMENTS (44 symbols) + "other"
  [45:56)  degree one-hot 0-10
  [56:63)  implicit hydrogen count one-hot 0-6
  [63]     formal charge (scalar)
  [64:69)  hybridization estimate one-hot {sp, sp2, sp3, aromatic, other}
  [69]     aromatic flag
  [70:75)  explicit valence one-hot 0-4

Counts past a one-hot range are clipped to the top bucket.  The scheme is a
fixed function of the parsed skeleton, so featurizing twice is identical.
"""

from __future__ import annotations

import math

import numpy as np

from .graphs import MolecularGraph, BOND_ORDER, BOND_DOUBLE, BOND_TRIPLE

__all__ = ["ELEMENTS", "FEATURE_DIM", "featurize"]

ELEMENTS = (
    "C", "N", "O", "S", "F", "Si", "P", "Cl", "Br", "Mg", "Na", "Ca", "Fe",
    "As", "Al", "I", "B", "V", "K", "Tl", "Yb", "Sb", "Sn", "Ag", "Pd", "Co",
    "Se", "Ti", "Zn", "H", "Li", "Ge", "Cu", "Au", "Ni", "Cd", "In", "Mn",
    "Zr", "Cr", "Pt", "Hg", "Pb", "Te",
)
assert len(ELEMENTS) == 44

_ELEMENT_INDEX = {sym: i for i, sym in enumerate(ELEMENTS)}

FEATURE_DIM = 75

_ELEMENT_OFF = 0          # 45 wide
_DEGREE_OFF = 45          # 11 wide
_HYDROGEN_OFF = 56        # 7 wide
_CHARGE_COL = 63          # scalar
_HYBRID_OFF = 64          # 5 wide: sp, sp2, sp3, aromatic, other
_AROMATIC_COL = 69        # flag
_VALENCE_OFF = 70         # 5 wide

_HYBRID_SP, _HYBRID_SP2, _HYBRID_SP3, _HYBRID_AROMATIC, _HYBRID_OTHER = range(5)


def _hybridization(aromatic: bool, bond_types: list) -> int:
    if aromatic:
        return _HYBRID_AROMATIC
    doubles = sum(1 for t in bond_types if t == BOND_DOUBLE)
    triples = sum(1 for t in bond_types if t == BOND_TRIPLE)
    if triples >= 1 or doubles >= 2:
        return _HYBRID_SP
    if doubles == 1:
        return _HYBRID_SP2
    if bond_types:
        return _HYBRID_SP3
    return _HYBRID_OTHER


def featurize(g: MolecularGraph) -> MolecularGraph:
    """Attach the 75-wide feature matrix to a parsed skeleton."""
    if g.atoms is None:
        raise ValueError("featurize needs a parsed skeleton with atom metadata")
    feats = np.zeros((g.num_nodes, FEATURE_DIM), dtype=np.float64)
    incident: list[list] = [[] for _ in range(g.num_nodes)]
    for u, v, t in g.edges:
        incident[u].append(t)
        incident[v].append(t)
    for i, atom in enumerate(g.atoms):
        row = feats[i]
        row[_ELEMENT_OFF + _ELEMENT_INDEX.get(atom.symbol, 44)] = 1.0
        row[_DEGREE_OFF + min(len(incident[i]), 10)] = 1.0
        row[_HYDROGEN_OFF + min(atom.hydrogens, 6)] = 1.0
        row[_CHARGE_COL] = float(atom.charge)
        row[_HYBRID_OFF + _hybridization(atom.aromatic, incident[i])] = 1.0
        if atom.aromatic:
            row[_AROMATIC_COL] = 1.0
        explicit = math.ceil(sum(BOND_ORDER[t] for t in incident[i]))
        row[_VALENCE_OFF + min(explicit, 4)] = 1.0
    return g.with_features(feats)
