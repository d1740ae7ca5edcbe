//! Ground-truth machinery for tests and acceptance runs: finite differences,
//! constant measurement on a bounded region and Monte-Carlo statistics with
//! standard errors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, spectral_norm, sym_eig_range, Vector};
use crate::lower::{lower_loop, LowerStepConfig};
use crate::problem::{Batch, BilevelProblem, Level, Point, ProblemConstants, Reference};
use crate::rng::{Lane, Purpose, RngStream, Streams, DRIVER};
use crate::runtime::CommLedger;
use crate::synthetic::{closed_form_lower_opt, NoiseSpec, QuadraticInstance};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Ball of radius `radius` around `center` in the joint `(x, y)` space.
#[derive(Debug, Clone, PartialEq)]
pub struct TestRegion {
    pub center: Point,
    pub radius: f64,
}

impl TestRegion {
    pub fn new(center: Point, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::param("radius", format!("must be positive, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    /// Ball centred at `(x, y*(x))`.
    pub fn around_optimum(inst: &QuadraticInstance, x: &Vector, radius: f64) -> Result<Self> {
        let y = closed_form_lower_opt(inst, x)?;
        Self::new(Point::new(x.clone(), y), radius)
    }

    /// Uniform point on the boundary sphere.
    pub fn sample_boundary(&self, stream: &mut RngStream) -> Point {
        let (d1, d2) = (self.center.x.len(), self.center.y.len());
        let mut dir = Vector::from_fn(d1 + d2, |_, _| stream.gaussian());
        let n = dir.norm();
        if n > 0.0 {
            dir *= self.radius / n;
        }
        Point::new(
            &self.center.x + dir.rows(0, d1),
            &self.center.y + dir.rows(d1, d2),
        )
    }
}

/// Coordinate-wise central differences of a scalar function.
pub fn central_difference<F>(f: F, x: &Vector, step: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::param("step", format!("must be positive, got {step}")));
    }
    let mut g = Vector::zeros(x.len());
    let mut probe = x.clone();
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let plus = f(&probe)?;
        probe[k] = x[k] - step;
        let minus = f(&probe)?;
        probe[k] = x[k];
        g[k] = (plus - minus) / (2.0 * step);
    }
    Ok(g)
}

/// Central difference of a vector-valued function along direction `v`.
pub fn directional_difference<F>(f: F, x: &Vector, v: &Vector, step: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    if !(step > 0.0) {
        return Err(Error::param("step", format!("must be positive, got {step}")));
    }
    check_len("direction", v, x.len())?;
    let plus = f(&(x + v * step))?;
    let minus = f(&(x - v * step))?;
    Ok((plus - minus) / (2.0 * step))
}

/// Error of the central difference at `step` over its error at `step / 2`;
/// close to 4 while truncation error dominates rounding error.
pub fn richardson_ratio<F>(f: F, x: &Vector, exact: &Vector, step: f64) -> Result<f64>
where
    F: Fn(&Vector) -> Result<f64>,
{
    let coarse = (central_difference(&f, x, step)? - exact).norm();
    let fine = (central_difference(&f, x, step / 2.0)? - exact).norm();
    Ok(coarse / fine)
}

/// Finite-difference hypergradient of `x -> f(x, y*(x))` using the problem's
/// reference lower solver.
pub fn fd_hypergradient<R: Reference + ?Sized>(problem: &R, x: &Vector, step: f64) -> Result<Vector> {
    central_difference(|z| problem.objective(z, None), x, step)
}

/// Measured constants and the components behind `sigma_f`, `sigma_g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub constants: ProblemConstants,
    /// Largest per-client mean squared deviation of a stochastic lower gradient.
    pub sigma_g_noise: f64,
    /// Largest `1/m sum_i |grad g_i - grad g|^2` over the sampled points, square-rooted.
    pub sigma_g_dissimilarity: f64,
    pub sigma_f_noise: f64,
    pub sigma_f_dissimilarity: f64,
    pub samples: usize,
}

fn upper_full_grad(inst: &QuadraticInstance, i: usize, p: &Point, batch: &Batch) -> Result<Vector> {
    let gx = inst.grad_upper_x(i, p, batch)?;
    let gy = inst.grad_upper_y(i, p, batch)?;
    let mut g = Vector::zeros(gx.len() + gy.len());
    g.rows_mut(0, gx.len()).copy_from(&gx);
    g.rows_mut(gx.len(), gy.len()).copy_from(&gy);
    Ok(g)
}

/// Empirical constants of a quadratic instance.
///
/// `mu` and `L_g` come from eigenvalue extremes over every lower Hessian the
/// oracles can return (`L_g` also covers the couplings' norms). `M` is the
/// largest upper gradient norm seen over the region's centre and `samples`
/// boundary points, taken per client objective and, for finite-sum noise,
/// per stored sample. The noise components average squared deviations of
/// oracle draws at those points; dissimilarities are the largest client
/// spread seen.
pub fn measure_constants(
    inst: &QuadraticInstance,
    region: &TestRegion,
    samples: usize,
    seed: u64,
) -> Result<ConstantsReport> {
    if samples < 100 {
        return Err(Error::param("samples", format!("need at least 100, got {samples}")));
    }
    let dims = inst.dims();
    check_len("center.x", &region.center.x, dims.d1)?;
    check_len("center.y", &region.center.y, dims.d2)?;
    let m = inst.num_clients();

    let (mut mu, mut l_g) = (f64::INFINITY, 0f64);
    for a in inst.all_lower_hessians() {
        let (lo, hi) = sym_eig_range(a);
        mu = mu.min(lo);
        l_g = l_g.max(hi);
    }
    for b in inst.all_couplings() {
        l_g = l_g.max(spectral_norm(b));
    }
    let l_f = inst.rho_x().max(1.0);

    let mut point_stream = RngStream::new(seed, Lane::new(DRIVER, Purpose::Auxiliary, 0, 0));
    let points: Vec<Point> = std::iter::once(region.center.clone())
        .chain((0..samples).map(|_| region.sample_boundary(&mut point_stream)))
        .collect();

    let per_sample: Vec<Batch> = match inst.noise() {
        NoiseSpec::FiniteSum { .. } => (0..inst.clients()[0].upper_samples.len())
            .map(|j| Batch::Sample {
                indices: vec![j],
                noise_key: 0,
            })
            .collect(),
        _ => Vec::new(),
    };

    let mut m_hat = 0f64;
    let (mut dis_g, mut dis_f) = (0f64, 0f64);
    let mut noise_g = vec![(0.0, 0usize); m];
    let mut noise_f = vec![(0.0, 0usize); m];
    for (s, p) in points.iter().enumerate() {
        let mut lower = Vec::with_capacity(m);
        let mut upper = Vec::with_capacity(m);
        for i in 0..m {
            let gu = upper_full_grad(inst, i, p, &Batch::Exact)?;
            m_hat = m_hat.max(gu.norm());
            for b in &per_sample {
                m_hat = m_hat.max(upper_full_grad(inst, i, p, b)?.norm());
            }
            lower.push(inst.grad_lower_y(i, p, &Batch::Exact)?);
            upper.push(gu);
        }
        let spread = |vs: &[Vector]| {
            let mean = &vs[0] + vs.iter().fold(Vector::zeros(vs[0].len()), |a, v| a + (v - &vs[0])) / vs.len() as f64;
            vs.iter().map(|v| (v - &mean).norm_squared()).sum::<f64>() / vs.len() as f64
        };
        dis_g = dis_g.max(spread(&lower));
        dis_f = dis_f.max(spread(&upper));

        let i = s % m;
        let mut stream = RngStream::new(seed, Lane::new(i as u64, Purpose::Auxiliary, 1, s as u64));
        let zeta = inst.draw_batch(i, Level::Lower, &mut stream);
        let xi = inst.draw_batch(i, Level::Upper, &mut stream);
        let dg = (inst.grad_lower_y(i, p, &zeta)? - &lower[i]).norm_squared();
        let df = (upper_full_grad(inst, i, p, &xi)? - &upper[i]).norm_squared();
        noise_g[i].0 += dg;
        noise_g[i].1 += 1;
        noise_f[i].0 += df;
        noise_f[i].1 += 1;
    }
    let worst = |acc: &[(f64, usize)]| {
        acc.iter()
            .filter(|(_, n)| *n > 0)
            .map(|(s, n)| s / *n as f64)
            .fold(0.0, f64::max)
            .sqrt()
    };
    let (sg_noise, sf_noise) = (worst(&noise_g), worst(&noise_f));
    let (sg_dis, sf_dis) = (dis_g.sqrt(), dis_f.sqrt());
    let constants = ProblemConstants::new(mu, l_g, l_f, m_hat, 0.0, sf_noise.max(sf_dis), sg_noise.max(sg_dis))?;
    Ok(ConstantsReport {
        constants,
        sigma_g_noise: sg_noise,
        sigma_g_dissimilarity: sg_dis,
        sigma_f_noise: sf_noise,
        sigma_f_dissimilarity: sf_dis,
        samples,
    })
}

/// Mean of a scalar Monte-Carlo sample and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McScalar {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl McScalar {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        // Shifted by the first sample so identical samples average exactly.
        let mean = xs[0] + xs.iter().map(|v| v - xs[0]).sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// Bias and spread of a vector estimator over independent trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub trials: usize,
    pub mean: Vec<f64>,
    /// `|mean - truth|`.
    pub bias_norm: f64,
    /// `sqrt(var / trials)`, the standard error of the mean in norm.
    pub bias_se: f64,
    /// `mean |h - mean|^2`.
    pub var: f64,
    pub var_se: f64,
}

impl McStats {
    pub fn from_samples(samples: &[Vector], truth: &Vector) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("trials", "need at least one sample"));
        }
        for s in samples {
            check_len("estimate", s, truth.len())?;
        }
        let n = samples.len();
        let first = &samples[0];
        let mean = first + samples.iter().fold(Vector::zeros(truth.len()), |a, v| a + (v - first)) / n as f64;
        let sq: Vec<f64> = samples.iter().map(|s| (s - &mean).norm_squared()).collect();
        let spread = McScalar::from_samples(&sq);
        Ok(Self {
            trials: n,
            bias_norm: (&mean - truth).norm(),
            bias_se: (spread.mean / n as f64).sqrt(),
            var: spread.mean,
            var_se: spread.se,
            mean: mean.as_slice().to_vec(),
        })
    }
}

/// Evaluate `estimator(trial)` for `trial in 0..trials` (in parallel, results
/// kept in trial order) and summarize against `truth`.
pub fn estimator_bias_mc<F>(estimator: F, truth: &Vector, trials: usize) -> Result<McStats>
where
    F: Fn(u64) -> Result<Vector> + Sync,
{
    if trials < 1000 {
        return Err(Error::param("trials", format!("need at least 1000, got {trials}")));
    }
    let samples = (0..trials as u64).into_par_iter().map(&estimator).collect::<Result<Vec<_>>>()?;
    McStats::from_samples(&samples, truth)
}

/// One step of the lower-solver contraction check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionStep {
    pub t: usize,
    /// Mean of `|y^t - y*|^2` over repetitions.
    pub before: McScalar,
    pub after: McScalar,
    /// `(1 - beta mu / 2) before + slack * 25 beta^2 sigma_g^2`.
    pub bound: f64,
}

impl ContractionStep {
    pub fn holds(&self) -> bool {
        self.after.mean <= self.bound
    }
}

/// Run `reps` independent lower loops of `steps` composed rounds and compare
/// consecutive mean squared distances to `y*` with the one-step recursion.
#[allow(clippy::too_many_arguments)]
pub fn lower_contraction<P>(
    problem: &P,
    x: &Vector,
    y0: &Vector,
    cfg: &LowerStepConfig,
    steps: usize,
    reps: usize,
    mu: f64,
    sigma_g: f64,
    slack: f64,
    seed: u64,
) -> Result<Vec<ContractionStep>>
where
    P: BilevelProblem + Reference + ?Sized,
{
    let y_star = problem.lower_opt(x, Some(y0))?;
    let everyone: Vec<usize> = (0..problem.num_clients()).collect();
    let dists = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let streams = Streams::new(seed.wrapping_add(r));
            let path = lower_loop(problem, x, y0, cfg, steps, &everyone, &streams, &mut CommLedger::new())?;
            Ok(path.iter().map(|y| (y - &y_star).norm_squared()).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let at = |t: usize| McScalar::from_samples(&dists.iter().map(|d| d[t]).collect::<Vec<_>>());
    let beta = cfg.beta;
    Ok((0..steps)
        .map(|t| {
            let before = at(t);
            ContractionStep {
                t,
                before,
                after: at(t + 1),
                bound: (1.0 - beta * mu / 2.0) * before.mean + slack * 25.0 * beta * beta * sigma_g * sigma_g,
            }
        })
        .collect())
}
