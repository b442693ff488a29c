"""Molecular graph data model, SMILES-subset parsing, featurization,
dataset/registry files, and synthetic motif tasks."""

from .featurize import ELEMENTS, FEATURE_DIM, featurize  # noqa: F401
from .graphs import (  # noqa: F401
    Atom,
    MolecularGraph,
    Task,
    TaskRegistry,
    BOND_SINGLE,
    BOND_DOUBLE,
    BOND_TRIPLE,
    BOND_AROMATIC,
    NUM_EDGE_TYPES,
    TASK_TYPES,
    IN_DISTRIBUTION_TYPES,
)
from .io import (  # noqa: F401
    DatasetFormatError,
    group_by_task,
    load_dataset,
    load_registry,
    save_dataset,
    save_registry,
)
from .registry import build_registry  # noqa: F401
from .smiles import SmilesParseError, parse_smiles  # noqa: F401
from .synthetic import DEFAULT_MOTIFS, SynthSpec, contains_motif, synthesize_tasks  # noqa: F401
