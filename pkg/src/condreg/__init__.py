"""Conditional linear regression via sum-of-squares relaxation."""

from .cover import LossTable, ScoreReport, best_pair, compute_losses, greedy_cover
from .errors import (
    CondregError,
    ConsistencyError,
    CoverFailure,
    DegenerateResponseError,
    DegreeError,
    InputError,
    NonIdentifiableError,
    SizeError,
    SolverFailure,
)
from .estimator import ConditionalLinearRegressor
from .harness import (
    ExperimentConfig,
    OracleResult,
    Report,
    brute_force_oracle,
    frobenius_error,
    read_dataset_csv,
    run_end_to_end,
    write_dataset_csv,
)
from .model import (
    Dataset,
    ExtendedSample,
    KDnf,
    OutlierModel,
    PlantedSpec,
    ProblemParams,
    Sample,
    Term,
    evaluate_dnf,
    evaluate_term,
)
from .pipeline import (
    ProjectionCandidate,
    RegressionModel,
    extract_candidates,
    project_to_projector,
    recover_predictor,
    round_candidates,
    solve_relaxation,
)
from .preprocess import PreparedDataset, prepare
from .program import CompiledProgram, build_program, default_q_family
from .sdp import SdpProblem, SdpSolution, SolveOptions, certify, solve
from .synth import GroundTruth, default_planted_spec, generate

__version__ = "0.1.0"

__all__ = [
    "CompiledProgram",
    "ConditionalLinearRegressor",
    "CondregError",
    "ConsistencyError",
    "CoverFailure",
    "Dataset",
    "DegenerateResponseError",
    "DegreeError",
    "ExperimentConfig",
    "ExtendedSample",
    "GroundTruth",
    "InputError",
    "KDnf",
    "LossTable",
    "NonIdentifiableError",
    "OracleResult",
    "OutlierModel",
    "PlantedSpec",
    "PreparedDataset",
    "ProblemParams",
    "ProjectionCandidate",
    "RegressionModel",
    "Report",
    "Sample",
    "ScoreReport",
    "SdpProblem",
    "SdpSolution",
    "SizeError",
    "SolveOptions",
    "SolverFailure",
    "Term",
    "best_pair",
    "brute_force_oracle",
    "build_program",
    "certify",
    "compute_losses",
    "default_planted_spec",
    "default_q_family",
    "evaluate_dnf",
    "evaluate_term",
    "extract_candidates",
    "frobenius_error",
    "generate",
    "greedy_cover",
    "prepare",
    "project_to_projector",
    "read_dataset_csv",
    "recover_predictor",
    "round_candidates",
    "run_end_to_end",
    "solve",
    "solve_relaxation",
    "write_dataset_csv",
]
