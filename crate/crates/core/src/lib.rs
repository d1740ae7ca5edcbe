//! Federated bilevel optimization: oracles, hypergradient estimators,
//! solvers and verification helpers.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod hypergrad;
pub mod linalg;
pub mod lower;
pub mod problem;
pub mod rng;
pub mod runtime;
pub mod solver;
pub mod verify;
pub mod synthetic;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use problem::{Batch, BilevelProblem, Dims, Level, Point, ProblemConstants, Reference};
pub use rng::{Lane, Purpose, RngStream, Streams, DRIVER};
pub use runtime::{aggregate_mean, aggregate_piggybacked, select_participants, CommLedger, Participation};
pub use lower::{lower_gap, lower_loop, lower_step, one_round_lower, LowerStepConfig, LowerVariant};
pub use hypergrad::{aggitd, aid_fhe, dense_hessiv, expected_aggitd_indirect, local_fhe, AggItdConfig, AidConfig, EstimatorTrace};
pub use solver::{
    default_stepsizes, one_round_upper, run, run_fbo_aggitd, run_fednest_baseline, run_local_baseline, EstimatorKind,
    MetricsRecord, RunConfig, RunReport, Stepsizes,
};
pub use verify::{estimator_bias_mc, fd_hypergradient, measure_constants, ConstantsReport, McScalar, McStats, TestRegion};
