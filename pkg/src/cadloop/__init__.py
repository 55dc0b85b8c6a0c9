"""Closed-loop parametric design optimization with in-repo CAD and FEM tools.

An agent proposes a part design (category, parameters, material); the
environment builds a hex mesh, solves linear elasticity, reduces the result
to (max displacement, max von Mises stress, cost) and checks it against the
task's thresholds. Trajectory logs from those episodes are scored into
rewards and aggregated into evaluation metrics.
"""

from .environment import DesignState, TaskInstance, ToolEvent, TrajectoryLog, check_feasibility, run_episode
from .fem import SimSetting, solve_linear_static
from .geometry import CATEGORIES, MeshModel, build_part, match_faces
from .materials import Material, MaterialLibrary, default_library, lookup_material
from .postproc import FeedbackTuple, compute_cost, max_displacement, max_von_mises, von_mises

__version__ = "0.1.0"

__all__ = [
    "CATEGORIES",
    "DesignState",
    "FeedbackTuple",
    "Material",
    "MaterialLibrary",
    "MeshModel",
    "SimSetting",
    "TaskInstance",
    "ToolEvent",
    "TrajectoryLog",
    "build_part",
    "check_feasibility",
    "compute_cost",
    "default_library",
    "lookup_material",
    "match_faces",
    "max_displacement",
    "max_von_mises",
    "run_episode",
    "solve_linear_static",
    "von_mises",
]
