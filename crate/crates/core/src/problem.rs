//! The client oracle contract.
//!
//! Estimators and solvers only see a problem through [`BilevelProblem`]:
//! stochastic first-order oracles for the per-client upper objective `F_i`
//! and lower objective `G_i`, plus Hessian-vector and mixed-partial products
//! of `G_i`. Ground-truth quantities needed for metrics live behind the
//! separate [`Reference`] trait.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, Vector};
use crate::rng::RngStream;

/// Upper variable `x` (dimension `d1`) and lower variable `y` (dimension `d2`).
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: Vector,
    pub y: Vector,
}

impl Point {
    pub fn new(x: Vector, y: Vector) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d1: usize,
    pub d2: usize,
}

/// Which objective a mini-batch is drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Lower,
    Upper,
}

/// A realized sample `zeta` / `xi`: re-evaluating an oracle with the same
/// batch at another point uses the same per-sample objective.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// Noise-off evaluation of the client objective itself.
    Exact,
    /// Finite-sum mini-batch (indices into the client's sample list) and a
    /// key for any additive noise.
    Sample { indices: Vec<usize>, noise_key: u64 },
}

impl Batch {
    /// Draw a batch for `client` from `stream`, recording it in the sample audit.
    pub fn draw<P: BilevelProblem + ?Sized>(
        problem: &P,
        client: usize,
        level: Level,
        stream: &mut RngStream,
    ) -> Result<Batch> {
        problem.check_client(client)?;
        let batch = problem.draw_batch(client, level, stream);
        stream.record_samples(match &batch {
            Batch::Exact => 0,
            Batch::Sample { indices, .. } => indices.len().max(1) as u64,
        });
        Ok(batch)
    }
}

/// Regularity constants of a problem instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub mu: f64,
    pub l_g: f64,
    pub l_f: f64,
    /// Bound on the upper gradient over the declared test region.
    pub m: f64,
    /// Lipschitz modulus of the lower second derivatives.
    pub rho: f64,
    pub sigma_f: f64,
    pub sigma_g: f64,
    pub kappa_g: f64,
}

impl ProblemConstants {
    pub fn new(
        mu: f64,
        l_g: f64,
        l_f: f64,
        m: f64,
        rho: f64,
        sigma_f: f64,
        sigma_g: f64,
    ) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::param("mu", format!("must be positive, got {mu}")));
        }
        if !(l_g >= mu) {
            return Err(Error::param(
                "L_g",
                format!("must be at least mu = {mu}, got {l_g}"),
            ));
        }
        Ok(Self {
            mu,
            l_g,
            l_f,
            m,
            rho,
            sigma_f,
            sigma_g,
            kappa_g: l_g / mu,
        })
    }
}

/// Per-client stochastic oracles for a federated bilevel problem
/// `min_x f(x, y*(x))`, `y*(x) = argmin_y g(x, y)`, with `f`, `g` the client
/// averages of `f_i`, `g_i`.
///
/// Implementations validate client ids and dimensions and must be pure:
/// identical `(client, point, batch)` gives bit-identical output.
pub trait BilevelProblem: Send + Sync {
    fn dims(&self) -> Dims;
    fn num_clients(&self) -> usize;

    /// Realize one mini-batch for `client` at `level`.
    fn draw_batch(&self, client: usize, level: Level, stream: &mut RngStream) -> Batch;

    /// `grad_y G_i(x, y; batch)`.
    fn grad_lower_y(&self, client: usize, p: &Point, batch: &Batch) -> Result<Vector>;
    /// `grad_x F_i(x, y; batch)`.
    fn grad_upper_x(&self, client: usize, p: &Point, batch: &Batch) -> Result<Vector>;
    /// `grad_y F_i(x, y; batch)`.
    fn grad_upper_y(&self, client: usize, p: &Point, batch: &Batch) -> Result<Vector>;
    /// `grad_yy^2 G_i(x, y; batch) v`.
    fn hvp_lower_yy(&self, client: usize, p: &Point, v: &Vector, batch: &Batch)
        -> Result<Vector>;
    /// `grad_x grad_y G_i(x, y; batch) v`, a vector of dimension `d1`.
    fn jvp_lower_xy(&self, client: usize, p: &Point, v: &Vector, batch: &Batch)
        -> Result<Vector>;

    /// Noise-off value of `f_i(x, y)`.
    fn upper_value(&self, client: usize, p: &Point) -> Result<f64>;
    /// Noise-off value of `g_i(x, y)`.
    fn lower_value(&self, client: usize, p: &Point) -> Result<f64>;

    fn check_client(&self, client: usize) -> Result<()> {
        let m = self.num_clients();
        if client >= m {
            return Err(Error::UnknownClient { client, clients: m });
        }
        Ok(())
    }

    fn check_point(&self, client: usize, p: &Point) -> Result<()> {
        self.check_client(client)?;
        let d = self.dims();
        check_len("x", &p.x, d.d1)?;
        check_len("y", &p.y, d.d2)
    }
}

/// Ground truth used for diagnostics and metrics.
pub trait Reference {
    /// `y*(x)`; `warm` may be used as a starting point by iterative solvers.
    fn lower_opt(&self, x: &Vector, warm: Option<&Vector>) -> Result<Vector>;
    /// `grad f(x)` through the lower solution map.
    fn hypergradient(&self, x: &Vector, warm: Option<&Vector>) -> Result<Vector>;
    /// `f(x, y*(x))`.
    fn objective(&self, x: &Vector, warm: Option<&Vector>) -> Result<f64>;
    /// Task metric (e.g. held-out accuracy) at `(x, y)`, when the problem has one.
    fn test_metric(&self, _x: &Vector, _y: &Vector) -> Option<f64> {
        None
    }
}
