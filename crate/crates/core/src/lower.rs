//! One-Round-Lower: local SVRG-corrected (or plain SGD) steps on the lower
//! objective followed by one iterate aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, Vector};
use crate::problem::{Batch, BilevelProblem, Level, Point, Reference};
use crate::rng::{Purpose, Streams};
use crate::runtime::{aggregate_mean, CommLedger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LowerVariant {
    #[default]
    Svrg,
    Sgd,
}

/// Stepsize and local-step schedule of the lower solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerStepConfig {
    pub beta: f64,
    /// Local step counts: a single entry applies to every client, otherwise
    /// one entry per client.
    pub tau: Vec<usize>,
    pub variant: LowerVariant,
}

impl LowerStepConfig {
    pub fn new(beta: f64, tau: usize, variant: LowerVariant) -> Self {
        Self {
            beta,
            tau: vec![tau],
            variant,
        }
    }

    pub fn tau_for(&self, client: usize) -> usize {
        if self.tau.len() == 1 {
            self.tau[0]
        } else {
            self.tau[client]
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::param("beta", format!("must be positive and finite, got {}", self.beta)));
        }
        validate_tau(&self.tau, m)
    }
}

pub(crate) fn validate_tau(tau: &[usize], m: usize) -> Result<()> {
    if tau.len() != 1 && tau.len() != m {
        return Err(Error::param(
            "tau",
            format!("expected 1 or {m} entries, got {}", tau.len()),
        ));
    }
    if let Some(bad) = tau.iter().find(|&&t| t < 1) {
        return Err(Error::param("tau", format!("local step counts must be >= 1, got {bad}")));
    }
    Ok(())
}

/// Sorted, deduplicated participant list; errors on unknown ids or an empty set.
pub(crate) fn normalize_participants<P: BilevelProblem + ?Sized>(
    problem: &P,
    participants: &[usize],
) -> Result<Vec<usize>> {
    let mut ids = participants.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Protocol("empty participant set".into()));
    }
    for &i in &ids {
        problem.check_client(i)?;
    }
    Ok(ids)
}

/// Local lower gradients `q_i^t = grad_y G_i(x, y; zeta_{i,t})` of the participants.
pub fn local_lower_gradients<P: BilevelProblem + ?Sized>(
    problem: &P,
    p: &Point,
    participants: &[usize],
    streams: &Streams,
    step: u64,
) -> Result<Vec<Vector>> {
    participants
        .iter()
        .map(|&i| {
            let mut s = streams.stream(i as u64, Purpose::LowerGrad, step);
            let batch = Batch::draw(problem, i, Level::Lower, &mut s)?;
            problem.grad_lower_y(i, p, &batch)
        })
        .collect()
}

/// Run the local lower steps from `y` on every participant and aggregate the
/// final local iterates (one round).
///
/// `q` is the aggregated lower gradient at `(x, y)`; `step` indexes the lower
/// step inside the current outer iteration and keys the sample streams.
#[allow(clippy::too_many_arguments)]
pub fn one_round_lower<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y: &Vector,
    q: &Vector,
    cfg: &LowerStepConfig,
    participants: &[usize],
    streams: &Streams,
    step: u64,
    ledger: &mut CommLedger,
) -> Result<Vector> {
    cfg.validate(problem.num_clients())?;
    let dims = problem.dims();
    check_len("x", x, dims.d1)?;
    check_len("y", y, dims.d2)?;
    check_len("q", q, dims.d2)?;
    let ids = normalize_participants(problem, participants)?;
    let anchor = Point::new(x.clone(), y.clone());
    let mut finals = Vec::with_capacity(ids.len());
    for &i in &ids {
        let tau = cfg.tau_for(i);
        let beta_i = cfg.beta / tau as f64;
        let mut s = streams.stream(i as u64, Purpose::LowerLocal, step);
        let mut local = Point::new(x.clone(), y.clone());
        for _ in 0..tau {
            let batch = Batch::draw(problem, i, Level::Lower, &mut s)?;
            let dir = match cfg.variant {
                LowerVariant::Svrg => {
                    problem.grad_lower_y(i, &local, &batch)? - problem.grad_lower_y(i, &anchor, &batch)? + q
                }
                LowerVariant::Sgd => problem.grad_lower_y(i, &local, &batch)?,
            };
            local.y.axpy(-beta_i, &dir, 1.0);
        }
        finals.push(local.y);
    }
    aggregate_mean(&finals, ledger)
}

/// One full lower step: aggregate the participants' gradients (one round),
/// then run [`one_round_lower`] (one round).
#[allow(clippy::too_many_arguments)]
pub fn lower_step<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y: &Vector,
    cfg: &LowerStepConfig,
    participants: &[usize],
    streams: &Streams,
    step: u64,
    ledger: &mut CommLedger,
) -> Result<Vector> {
    let ids = normalize_participants(problem, participants)?;
    let grads = local_lower_gradients(problem, &Point::new(x.clone(), y.clone()), &ids, streams, step)?;
    let q = aggregate_mean(&grads, ledger)?;
    one_round_lower(problem, x, y, &q, cfg, &ids, streams, step, ledger)
}

/// `n` lower steps from `y0` as one communication loop; returns `y^0..y^n`.
#[allow(clippy::too_many_arguments)]
pub fn lower_loop<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y0: &Vector,
    cfg: &LowerStepConfig,
    n: usize,
    participants: &[usize],
    streams: &Streams,
    ledger: &mut CommLedger,
) -> Result<Vec<Vector>> {
    ledger.open_loop();
    let mut path = Vec::with_capacity(n + 1);
    path.push(y0.clone());
    for t in 0..n {
        let next = lower_step(problem, x, &path[t], cfg, participants, streams, t as u64, ledger)?;
        path.push(next);
    }
    Ok(path)
}

/// `|y - y*(x)|^2`.
pub fn lower_gap<R: Reference + ?Sized>(reference: &R, x: &Vector, y: &Vector) -> Result<f64> {
    let y_star = reference.lower_opt(x, Some(y))?;
    check_len("y", y, y_star.len())?;
    Ok((y - y_star).norm_squared())
}
