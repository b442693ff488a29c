"""A minimal SMILES-subset parser producing graph skeletons.

Supported: the organic subset B C N O P S F Cl Br I (aromatic lowercase
b c n o p s), bracket atoms with explicit hydrogen counts and charges,
bonds ``- = # :``, branches, and ring closures including ``%nn``.  Not
supported: stereo markers, isotopes, wildcards, dots, atom maps.

Implicit hydrogens for organic-subset atoms are computed from standard
valences: aromatic bonds count 1.5 toward used valence with the total rounded
up, except on aromatic O/S where they count 1 (the Kekule convention, so
furan and thiophene heteroatoms get zero hydrogens).  Bracket atoms state
their hydrogen count explicitly and are taken at face value.
"""

from __future__ import annotations

import math

from .graphs import (Atom, MolecularGraph, BOND_SINGLE, BOND_DOUBLE, BOND_TRIPLE,
                     BOND_AROMATIC, BOND_ORDER)

__all__ = ["SmilesParseError", "parse_smiles"]


class SmilesParseError(ValueError):
    """Malformed or unsupported SMILES input; carries the offending position."""

    def __init__(self, message: str, position: int = None):
        if position is not None:
            message = f"{message} (position {position})"
        super().__init__(message)
        self.position = position


# default valences used for implicit hydrogen counts, smallest first
_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

_ORGANIC_TWO = ("Cl", "Br")
_ORGANIC_ONE = ("B", "C", "N", "O", "P", "S", "F", "I")
_AROMATIC = ("b", "c", "n", "o", "p", "s")

_BOND_SYMBOLS = {"-": BOND_SINGLE, "=": BOND_DOUBLE, "#": BOND_TRIPLE, ":": BOND_AROMATIC}


class _AtomDraft:
    __slots__ = ("symbol", "aromatic", "charge", "explicit_h", "bracket", "position")

    def __init__(self, symbol, aromatic, charge, explicit_h, bracket, position):
        self.symbol = symbol
        self.aromatic = aromatic
        self.charge = charge
        self.explicit_h = explicit_h
        self.bracket = bracket
        self.position = position


def _parse_bracket(s: str, start: int):
    """Parse a [...] atom starting at '['; returns (_AtomDraft, next index)."""
    i = start + 1
    end = s.find("]", i)
    if end < 0:
        raise SmilesParseError("unclosed bracket atom", start)
    body = s[i:end]
    pos = i

    symbol = None
    aromatic = False
    for two in _ORGANIC_TWO:
        if body.startswith(two):
            symbol = two
            break
    if symbol is None and body and body[0] in _ORGANIC_ONE:
        symbol = body[0]
    if symbol is None and body and body[0] in _AROMATIC:
        symbol = body[0].upper()
        aromatic = True
    if symbol is None:
        raise SmilesParseError(f"unsupported bracket atom {body!r}", start)
    rest = body[len(symbol) if not aromatic else 1:]
    j = 0
    explicit_h = 0
    charge = 0
    while j < len(rest):
        c = rest[j]
        if c == "H":
            j += 1
            count = 0
            ndigits = 0
            while j < len(rest) and rest[j].isdigit():
                count = count * 10 + int(rest[j])
                j += 1
                ndigits += 1
            explicit_h = count if ndigits else 1
        elif c in "+-":
            sign = 1 if c == "+" else -1
            j += 1
            if j < len(rest) and rest[j].isdigit():
                mag = 0
                while j < len(rest) and rest[j].isdigit():
                    mag = mag * 10 + int(rest[j])
                    j += 1
            else:
                mag = 1
                while j < len(rest) and rest[j] == c:
                    mag += 1
                    j += 1
            charge = sign * mag
        else:
            raise SmilesParseError(f"unsupported token {c!r} in bracket atom", pos + j)
    return _AtomDraft(symbol, aromatic, charge, explicit_h, True, start), end + 1


def parse_smiles(s: str) -> MolecularGraph:
    """Parse a SMILES string into an unfeaturized :class:`MolecularGraph`."""
    if not isinstance(s, str) or not s:
        raise SmilesParseError("empty SMILES string")

    atoms: list[_AtomDraft] = []
    bonds: dict[tuple, int] = {}
    branch_stack: list[int] = []
    rings: dict[int, tuple] = {}  # number -> (atom index, explicit bond or None, position)
    prev = None
    pending_bond = None
    pending_pos = None

    def add_bond(a: int, b: int, bond, position):
        if a == b:
            raise SmilesParseError("ring bond closes on the same atom", position)
        if bond is None:
            bond = BOND_AROMATIC if atoms[a].aromatic and atoms[b].aromatic else BOND_SINGLE
        key = (min(a, b), max(a, b))
        if key in bonds:
            raise SmilesParseError(f"duplicate bond between atoms {key[0]} and {key[1]}",
                                   position)
        bonds[key] = bond

    def add_atom(draft: _AtomDraft):
        nonlocal prev, pending_bond, pending_pos
        atoms.append(draft)
        idx = len(atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending_bond, draft.position)
        elif pending_bond is not None:
            raise SmilesParseError("bond symbol with no preceding atom", pending_pos)
        pending_bond = None
        prev = idx

    def close_ring(number: int, position: int):
        nonlocal pending_bond
        if prev is None:
            raise SmilesParseError("ring bond before any atom", position)
        if number in rings:
            open_atom, open_bond, open_pos = rings.pop(number)
            bond = pending_bond if pending_bond is not None else open_bond
            if (pending_bond is not None and open_bond is not None
                    and pending_bond != open_bond):
                raise SmilesParseError(
                    f"conflicting bond orders for ring closure {number}", position)
            add_bond(open_atom, prev, bond, position)
            pending_bond = None
        else:
            rings[number] = (prev, pending_bond, position)
            pending_bond = None

    i = 0
    n = len(s)
    while i < n:
        c = s[i]
        if c == "(":
            if prev is None:
                raise SmilesParseError("branch before any atom", i)
            branch_stack.append(prev)
            i += 1
        elif c == ")":
            if not branch_stack:
                raise SmilesParseError("unbalanced parenthesis", i)
            prev = branch_stack.pop()
            i += 1
        elif c in _BOND_SYMBOLS:
            if pending_bond is not None:
                raise SmilesParseError("two bond symbols in a row", i)
            pending_bond = _BOND_SYMBOLS[c]
            pending_pos = i
            i += 1
        elif c == "%":
            if i + 2 >= n or not (s[i + 1].isdigit() and s[i + 2].isdigit()):
                raise SmilesParseError("%% must be followed by two digits", i)
            close_ring(int(s[i + 1:i + 3]), i)
            i += 3
        elif c.isdigit():
            close_ring(int(c), i)
            i += 1
        elif c == "[":
            draft, i = _parse_bracket(s, i)
            add_atom(draft)
        elif s[i:i + 2] in _ORGANIC_TWO:
            add_atom(_AtomDraft(s[i:i + 2], False, 0, None, False, i))
            i += 2
        elif c in _ORGANIC_ONE:
            add_atom(_AtomDraft(c, False, 0, None, False, i))
            i += 1
        elif c in _AROMATIC:
            add_atom(_AtomDraft(c.upper(), True, 0, None, False, i))
            i += 1
        else:
            raise SmilesParseError(f"unsupported token {c!r}", i)

    if branch_stack:
        raise SmilesParseError("unbalanced parenthesis", n - 1)
    if rings:
        number, (_, _, position) = sorted(rings.items())[0]
        raise SmilesParseError(f"unclosed ring bond {number}", position)
    if pending_bond is not None:
        raise SmilesParseError("dangling bond symbol", pending_pos)
    if not atoms:
        raise SmilesParseError("no atoms in SMILES string")

    # implicit hydrogens and valence checks; aromatic bonds count 1.5 toward
    # used valence (rounded up), except on aromatic O/S where they count 1 so
    # furan/thiophene heteroatoms come out with zero hydrogens (Kekule rule)
    incident: list[list] = [[] for _ in atoms]
    for (u, v), bond in bonds.items():
        incident[u].append(bond)
        incident[v].append(bond)

    final_atoms = []
    for idx, draft in enumerate(atoms):
        lone_pair_aromatic = draft.aromatic and draft.symbol in ("O", "S")
        total = sum(1.0 if (bond == BOND_AROMATIC and lone_pair_aromatic)
                    else BOND_ORDER[bond] for bond in incident[idx])
        used = math.ceil(total)
        if draft.bracket:
            hydrogens = draft.explicit_h
        else:
            slots = [v for v in _VALENCES[draft.symbol] if v >= used]
            if not slots:
                raise SmilesParseError(
                    f"valence violation: atom {idx} ({draft.symbol}) has bond order "
                    f"total {used}, exceeding {max(_VALENCES[draft.symbol])}",
                    draft.position)
            hydrogens = slots[0] - used
        final_atoms.append(Atom(draft.symbol, draft.aromatic, draft.charge, hydrogens))

    edges = sorted((u, v, bond) for (u, v), bond in bonds.items())
    return MolecularGraph(num_nodes=len(final_atoms), edges=edges,
                          atoms=final_atoms, smiles=s)
