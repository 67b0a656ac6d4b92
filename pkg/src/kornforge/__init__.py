"""Numerical laboratory for Korn inequalities on cracked displacement fields."""

from .field import (
    CrackSet,
    DisplacementField,
    FieldError,
    GeometryError,
    Grid,
    RegionMask,
    Segment,
    StrainField,
    build_field,
    gradient,
    lp_norm,
    perimeter,
    strain,
    total_ed_variation,
)
from .rigid import RigidMotion, affine_compare_constant, project_rigid, rigid_distance
from .modification import RectangleSet, jump_control_check, modify
from .multiscale import SquareHierarchy, build_pou, classify, heal, structure_check
from .local import LocalConfig, local_estimate
from .boundary import BoundaryConfig, LipschitzGraphDomain, boundary_estimate, john_verify
from .assembly import GlobalConfig, build_atlas, global_estimate, sbv_recovery
from .scenarios import ScenarioSpec, generate, run

__version__ = "0.1.0"
