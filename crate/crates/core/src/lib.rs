//! Constraint-qualification diagnostics for AC optimal power flow.
//!
//! Builds the power-flow and operational constraint system of a network,
//! tests LICQ at feasible points by numerical rank, computes and classifies
//! KKT multiplier sets, and runs parameter-perturbation experiments.

pub mod cases;
pub mod constraints;
pub mod cqkit;
pub mod error;
pub mod linalg;
pub mod netmodel;
pub mod perturb;
pub mod powerflow;
pub mod tolerance;

pub use constraints::{
    active_set, evaluate, fixed_licq_check, ActiveSet, ConstraintKind, ConstraintSystem, Evaluation,
    FaceLabel, FixedLicqReport, OperationalConstraint,
};
pub use cqkit::{
    build_active_stack, kkt_residual, kkt_solve, licq_check, ActiveStack, CQReport, Classification, CostSpec,
    MultiplierSet,
};
pub use error::{CqaError, Result};
pub use netmodel::{build_ybus, load_case, AdmittanceMatrix, Bus, BusType, Case, Generator, Line, Network};
pub use powerflow::{newton_pf, pf_jacobian, pf_residual, NewtonOptions, PfSolution, SystemState};
pub use perturb::{
    check_rank_hypothesis, param_jacobian, run_genericity_experiment, tangency_escape_probe, GenericityReport,
    ModelKind, PerturbationModel, RankHypothesis,
};
pub use tolerance::Tolerances;
