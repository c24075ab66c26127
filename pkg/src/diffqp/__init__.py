"""Differentiable quadratic programs and gradient-based design tuning."""
from .csc import SparseCSC
from .family import FamilyBuilder, FamilyLayer, FamilyMaps, backward, canonicalize, retrieve
from .kkt_diff import ActiveSet, DiffWorkspace, QPGradients, detect_active, qp_gradients, refine_solve, update_factors
from .ldl import LDLFactors, ldl_factorize, ldl_solve, rank1_modify, rowcol_add, rowcol_delete
from .qp_solver import QPData, QPSolution, Settings, SolverCache, Status, qp_solve
from .tuner import DesignSpace, Termination, TuneConfig, TuneTrace, pgd, project_box

__version__ = "0.1.0"

__all__ = [
    "ActiveSet",
    "DesignSpace",
    "DiffWorkspace",
    "FamilyBuilder",
    "FamilyLayer",
    "FamilyMaps",
    "LDLFactors",
    "QPData",
    "QPGradients",
    "QPSolution",
    "Settings",
    "SolverCache",
    "SparseCSC",
    "Status",
    "Termination",
    "TuneConfig",
    "TuneTrace",
    "backward",
    "canonicalize",
    "detect_active",
    "ldl_factorize",
    "ldl_solve",
    "pgd",
    "project_box",
    "qp_gradients",
    "qp_solve",
    "rank1_modify",
    "refine_solve",
    "retrieve",
    "rowcol_add",
    "rowcol_delete",
    "update_factors",
]
