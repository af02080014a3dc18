"""Forest-of-octrees adaptive meshes on simulated ranks."""
from .balance import BalanceReport, balanced_marking, check_balanced, monolithic_balance
from .comm import CollectiveError, Transport
from .connectivity import (Connectivity, MeshError, build_brick, build_from_mesh, build_unit_cube,
                           canonicalize, load_mesh)
from .forest import Forest, Leaves, adapt, fix_family_splits, new_uniform, partition, validate
from .ghost import build_ghost, ghost_exchange
from .indices import entity_id, leaf_index_set, rebuild_persistent
from .meshiter import build_intersections, iterate_faces
from .quadrant import MAX_LEVEL, ROOT_LEN, Quadrant

__all__ = [
    "BalanceReport", "balanced_marking", "check_balanced", "monolithic_balance",
    "CollectiveError", "Transport",
    "Connectivity", "MeshError", "build_brick", "build_from_mesh", "build_unit_cube", "canonicalize", "load_mesh",
    "Forest", "Leaves", "adapt", "fix_family_splits", "new_uniform", "partition", "validate",
    "build_ghost", "ghost_exchange",
    "entity_id", "leaf_index_set", "rebuild_persistent",
    "build_intersections", "iterate_faces",
    "MAX_LEVEL", "ROOT_LEN", "Quadrant",
]
