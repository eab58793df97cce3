"""Canonical tensor decompositions reduced by standard and randomized ALS."""
from .als import AlsConfig, DegenerateSolveError, SweepReport, als_sweep, build_normal_system, max_condition, reduce
from .ctd import (
    Ctd,
    DenseTensor,
    OracleCapError,
    SeparatedOperator,
    ShapeError,
    add,
    apply_operator,
    dense_expand,
    inner,
    negate,
    norm,
    relative_error,
    scale,
)
from .diagnostics import (
    BoundWitness,
    CondReport,
    NormEstimate,
    RankDeficientError,
    check_hadamard_gram_bound,
    check_product_cond_bound,
    condition_number,
    power_method_norm,
)
from .rals import (
    RandAlsConfig,
    RandomProjection,
    accepted_residuals,
    build_sketched_system,
    draw_projection,
    randomized_sweep,
    reduce_randomized,
)

__version__ = "0.1.0"

__all__ = [
    "AlsConfig",
    "BoundWitness",
    "CondReport",
    "Ctd",
    "DegenerateSolveError",
    "DenseTensor",
    "NormEstimate",
    "OracleCapError",
    "RandAlsConfig",
    "RandomProjection",
    "RankDeficientError",
    "SeparatedOperator",
    "ShapeError",
    "SweepReport",
    "accepted_residuals",
    "add",
    "als_sweep",
    "apply_operator",
    "build_normal_system",
    "build_sketched_system",
    "check_hadamard_gram_bound",
    "check_product_cond_bound",
    "condition_number",
    "dense_expand",
    "draw_projection",
    "inner",
    "max_condition",
    "negate",
    "norm",
    "randomized_sweep",
    "reduce",
    "reduce_randomized",
    "relative_error",
    "scale",
]
