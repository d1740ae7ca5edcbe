//! Federated hypergradient estimators.
//!
//! All three estimators return `h = h_direct - h_indirect`, where the direct
//! part averages `grad_x F_i` and the indirect part averages the mixed partial
//! `grad_x grad_y G_i` applied to a Hessian-inverse-vector estimate `p`.

mod aggitd;
mod aid;
mod expect;
mod local;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean_of, Vector};
use crate::lower::LowerStepConfig;
use crate::problem::{Batch, BilevelProblem, Level, Point, ProblemConstants};
use crate::rng::{Purpose, Streams};
use crate::runtime::Participation;

pub use aggitd::{aggitd, aggitd_fixed_q, draw_q, AggItdOutput, EstimatorTrace};
pub use aid::{aid_fhe, aid_fhe_fixed_truncation, draw_truncation, AidOutput};
pub use expect::{
    dense_hessiv, expected_aggitd_indirect, expected_aid_hessiv, expected_local_fhe, local_bias, local_limit_hypergradient,
};
pub use local::{local_fhe, LocalOutput};

/// Parameters of the AggITD estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggItdConfig {
    pub lambda: f64,
    pub n: usize,
    pub lower: LowerStepConfig,
}

/// Parameters of the AID/Neumann estimator (and of the fully local one,
/// which uses only `lambda` and `t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AidConfig {
    pub lambda: f64,
    pub n: usize,
    pub t: usize,
    pub lower: LowerStepConfig,
    /// Fresh client subset per HessIV round; `None` reuses the outer participants.
    pub hessiv_participation: Option<Participation>,
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 10.0) {
        return Err(Error::param("lambda", format!("must lie in (0, 10], got {lambda}")));
    }
    Ok(())
}

/// Check `lambda <= min(10, 1/L_g)`.
pub fn check_lambda_cap(lambda: f64, constants: &ProblemConstants) -> Result<()> {
    validate_lambda(lambda)?;
    let cap = 10f64.min(1.0 / constants.l_g);
    if lambda > cap * (1.0 + 1e-12) {
        return Err(Error::param(
            "lambda",
            format!("{lambda} exceeds the cap min(10, 1/L_g) = {cap}"),
        ));
    }
    Ok(())
}

impl AggItdConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        validate_lambda(self.lambda)?;
        self.lower.validate(m)
    }
}

impl AidConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        validate_lambda(self.lambda)?;
        if self.t < 1 {
            return Err(Error::param("T", "the Neumann budget must be at least 1"));
        }
        self.lower.validate(m)
    }
}

pub(crate) fn draw_client_batch<P: BilevelProblem + ?Sized>(
    problem: &P,
    client: usize,
    level: Level,
    streams: &Streams,
    purpose: Purpose,
    inner: u64,
) -> Result<Batch> {
    let mut s = streams.stream(client as u64, purpose, inner);
    Batch::draw(problem, client, level, &mut s)
}

/// Direct parts `grad_x F_i(x, y; xi_i)` and indirect parts
/// `grad_x grad_y G_i(x, y; chi_i) p_i` for each participant.
pub(crate) fn client_parts<P, F>(
    problem: &P,
    p: &Point,
    ids: &[usize],
    streams: &Streams,
    mut hessiv: F,
) -> Result<(Vec<Vector>, Vec<Vector>)>
where
    P: BilevelProblem + ?Sized,
    F: FnMut(usize) -> Vector,
{
    let mut direct = Vec::with_capacity(ids.len());
    let mut indirect = Vec::with_capacity(ids.len());
    for &i in ids {
        let xi = draw_client_batch(problem, i, Level::Upper, streams, Purpose::Direct, 0)?;
        let chi = draw_client_batch(problem, i, Level::Lower, streams, Purpose::Mixed, 0)?;
        direct.push(problem.grad_upper_x(i, p, &xi)?);
        indirect.push(problem.jvp_lower_xy(i, p, &hessiv(i), &chi)?);
    }
    Ok((direct, indirect))
}

/// Noise-free client average of `f(i)` over every client.
pub(crate) fn exact_mean<P, F>(problem: &P, f: F) -> Result<Vector>
where
    P: BilevelProblem + ?Sized,
    F: Fn(usize) -> Result<Vector>,
{
    let parts = (0..problem.num_clients()).map(f).collect::<Result<Vec<_>>>()?;
    Ok(mean_of(&parts).expect("at least one client"))
}
