"""Composite factor models: latent factors explained by observed covariates.

The modules split the work as follows:

``core_ops``
    block operators, tangent spaces and the Phi/Gamma norms
``population``
    ground-truth models, sampling and parameter recovery
``solver``
    ADMM for the composite and factor programs
``interpret``
    the parameter sweep and model selection against a factor model
``fisher``
    Fisher-information gains, irrepresentability and explicit constants
``harness``
    data ingestion, cross-validation and the recovery experiment
"""
from .core_ops import (
    BlockPrecision,
    BlockTuple,
    DimensionError,
    NormParams,
    RankError,
    TangentSpace,
    ValidationError,
    norm_gamma,
    norm_phi,
    rho_distance,
    tangent_of,
)
from .fisher import (
    AssumptionReport,
    CapacityError,
    FisherOperator,
    sample_family,
    theorem_bounds,
    verify_assumptions,
)
from .harness import cross_validate_factor, run_recovery_experiment
from .interpret import SweepGrid, interpret, select_models, sweep_grid
from .population import (
    Dataset,
    FactorModelParams,
    PopulationModel,
    build_population,
    generate_synthetic,
    marginalize_factor,
    recover_parameters,
    sample_observations,
)
from .solver import SolverOptions, SolveReport, solve_composite, solve_factor

__version__ = "0.1.0"

__all__ = [
    "AssumptionReport",
    "BlockPrecision",
    "BlockTuple",
    "CapacityError",
    "Dataset",
    "DimensionError",
    "FactorModelParams",
    "FisherOperator",
    "NormParams",
    "PopulationModel",
    "RankError",
    "SolveReport",
    "SolverOptions",
    "SweepGrid",
    "TangentSpace",
    "ValidationError",
    "build_population",
    "cross_validate_factor",
    "generate_synthetic",
    "interpret",
    "marginalize_factor",
    "norm_gamma",
    "norm_phi",
    "recover_parameters",
    "rho_distance",
    "run_recovery_experiment",
    "sample_family",
    "sample_observations",
    "select_models",
    "solve_composite",
    "solve_factor",
    "sweep_grid",
    "tangent_of",
    "theorem_bounds",
    "verify_assumptions",
]
