//! Outer loops: FBO-AggITD, the FedNest-style baseline and a fully local
//! baseline, all sharing One-Round-Upper.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrad::{aggitd, aid_fhe, local_fhe, AggItdConfig, AidConfig};
use crate::linalg::{check_len, is_finite, serde_vector, Vector};
use crate::lower::{lower_gap, lower_loop, normalize_participants, validate_tau, LowerStepConfig};
use crate::problem::{Batch, BilevelProblem, Level, Point, ProblemConstants, Reference};
use crate::rng::{Purpose, Streams};
use crate::runtime::{aggregate_mean, select_participants, CommLedger, Participation};

/// Iterates with a norm above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    #[default]
    Aggitd,
    Aid,
    Local,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Aggitd => "aggitd",
            EstimatorKind::Aid => "aid",
            EstimatorKind::Local => "local",
        }
    }
}

/// Hyperparameters of one run. The lower config carries `beta` and `tau`;
/// the upper local steps reuse the same `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub estimator: EstimatorKind,
    pub k: usize,
    pub n: usize,
    /// Neumann budget of the AID and local estimators.
    pub t: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub lower: LowerStepConfig,
    pub participation: Participation,
    pub hessiv_participation: Option<Participation>,
    pub seed: u64,
    pub eval_every: usize,
}

impl RunConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("alpha", format!("must be positive and finite, got {}", self.alpha)));
        }
        if self.eval_every == 0 {
            return Err(Error::param("eval_every", "must be at least 1"));
        }
        self.lower.validate(m)?;
        match self.estimator {
            EstimatorKind::Aggitd => self.aggitd_config().validate(m),
            EstimatorKind::Aid | EstimatorKind::Local => self.aid_config().validate(m),
        }
    }

    pub fn aggitd_config(&self) -> AggItdConfig {
        AggItdConfig {
            lambda: self.lambda,
            n: self.n,
            lower: self.lower.clone(),
        }
    }

    pub fn aid_config(&self) -> AidConfig {
        AidConfig {
            lambda: self.lambda,
            n: self.n,
            t: self.t,
            lower: self.lower.clone(),
            hessiv_participation: self.hessiv_participation,
        }
    }

    /// Rounds per outer iteration implied by the configuration.
    pub fn rounds_per_outer(&self) -> u64 {
        let n = self.n as u64;
        match self.estimator {
            EstimatorKind::Aggitd => 2 * n + 3,
            EstimatorKind::Aid => 2 * n + self.t as u64 + 3,
            EstimatorKind::Local => 2 * n + 2,
        }
    }
}

/// Metrics of the outer iterate `x_k` (and of the lower iterate `y_k` it was
/// paired with when iteration `k` started).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub k: usize,
    /// Communication rounds spent before `x_k` was available.
    pub rounds_cum: u64,
    pub grad_norm_sq: f64,
    pub lower_gap: f64,
    /// `|h_k - grad f(x_k)|`; absent for the final row.
    pub est_err: Option<f64>,
    pub objective: f64,
    pub test_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub estimator: EstimatorKind,
    pub rows: Vec<MetricsRecord>,
    #[serde(with = "serde_vector")]
    pub x_final: Vector,
    #[serde(with = "serde_vector")]
    pub y_final: Vector,
    pub ledger: CommLedger,
    pub rounds_per_outer: Vec<u64>,
    pub loops_per_outer: Vec<u64>,
    /// Oracle samples drawn over the whole run.
    pub samples_drawn: u64,
}

/// `(lambda, alpha, beta, N)` derived from problem constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stepsizes {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n: usize,
}

/// Defaults: `lambda = min(10, 1/L_g)`, `beta = min(1, lambda, 1/(6 L_g))`,
/// `alpha = alpha_scale / sqrt(K)` with `alpha_scale` defaulting to
/// `kappa^-4`, and `N = ceil(kappa)` unless given.
pub fn default_stepsizes(
    constants: &ProblemConstants,
    k: usize,
    n: Option<usize>,
    alpha_scale: Option<f64>,
) -> Stepsizes {
    let lambda = 10f64.min(1.0 / constants.l_g);
    let beta = 1f64.min(lambda).min(1.0 / (6.0 * constants.l_g));
    let scale = alpha_scale.unwrap_or_else(|| constants.kappa_g.powi(-4));
    let alpha = scale / (k.max(1) as f64).sqrt();
    Stepsizes {
        lambda,
        alpha,
        beta,
        n: n.unwrap_or_else(|| constants.kappa_g.ceil() as usize),
    }
}

/// Local SVRG-corrected upper steps from `x` with the aggregated estimate `h`
/// held fixed, then one aggregation round.
#[allow(clippy::too_many_arguments)]
pub fn one_round_upper<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y_plus: &Vector,
    h: &Vector,
    alpha: f64,
    tau: &[usize],
    participants: &[usize],
    streams: &Streams,
    ledger: &mut CommLedger,
) -> Result<Vector> {
    validate_tau(tau, problem.num_clients())?;
    let dims = problem.dims();
    check_len("x", x, dims.d1)?;
    check_len("y", y_plus, dims.d2)?;
    check_len("h", h, dims.d1)?;
    let ids = normalize_participants(problem, participants)?;
    let anchor = Point::new(x.clone(), y_plus.clone());
    let mut finals = Vec::with_capacity(ids.len());
    for &i in &ids {
        let tau_i = if tau.len() == 1 { tau[0] } else { tau[i] };
        let alpha_i = alpha / tau_i as f64;
        let mut s = streams.stream(i as u64, Purpose::UpperLocal, 0);
        let mut local = anchor.clone();
        for _ in 0..tau_i {
            let xi = Batch::draw(problem, i, Level::Upper, &mut s)?;
            let dir = h - problem.grad_upper_x(i, &anchor, &xi)? + problem.grad_upper_x(i, &local, &xi)?;
            local.x.axpy(-alpha_i, &dir, 1.0);
        }
        finals.push(local.x);
    }
    aggregate_mean(&finals, ledger)
}

fn metrics<P: BilevelProblem + Reference + ?Sized>(
    problem: &P,
    k: usize,
    rounds_cum: u64,
    x: &Vector,
    y: &Vector,
) -> Result<(MetricsRecord, Vector)> {
    let grad = problem.hypergradient(x, Some(y))?;
    let record = MetricsRecord {
        k,
        rounds_cum,
        grad_norm_sq: grad.norm_squared(),
        lower_gap: lower_gap(problem, x, y)?,
        est_err: None,
        objective: problem.objective(x, Some(y))?,
        test_metric: problem.test_metric(x, y),
    };
    Ok((record, grad))
}

fn guard(k: usize, x: &Vector, y: &Vector) -> Result<()> {
    for (name, v) in [("x", x), ("y", y)] {
        if !is_finite(v) {
            return Err(Error::Divergence {
                iteration: k,
                detail: format!("{name} has a non-finite entry"),
            });
        }
        let norm = v.norm();
        if norm > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                iteration: k,
                detail: format!("|{name}| = {norm:e} exceeds {DIVERGENCE_LIMIT:e}"),
            });
        }
    }
    Ok(())
}

/// Run `cfg.k` outer iterations from `(x0, y0)` with the configured estimator.
///
/// Metrics rows are recorded for `k = 0, eval_every, 2 eval_every, ...` and
/// for the final iterate, using noise-free reference quantities.
pub fn run<P: BilevelProblem + Reference + ?Sized>(
    problem: &P,
    cfg: &RunConfig,
    x0: &Vector,
    y0: &Vector,
) -> Result<RunReport> {
    let m = problem.num_clients();
    cfg.validate(m)?;
    let dims = problem.dims();
    check_len("x0", x0, dims.d1)?;
    check_len("y0", y0, dims.d2)?;
    guard(0, x0, y0)?;

    let streams = Streams::new(cfg.seed);
    let mut ledger = CommLedger::new();
    let mut x = x0.clone();
    let mut y = y0.clone();
    let mut rows = Vec::new();
    let mut rounds_per_outer = Vec::with_capacity(cfg.k);
    let mut loops_per_outer = Vec::with_capacity(cfg.k);

    for k in 0..cfg.k {
        let sk = streams.at_outer(k as u64);
        ledger.begin_outer();
        let pending = if k % cfg.eval_every == 0 {
            Some(metrics(problem, k, ledger.rounds_total, &x, &y)?)
        } else {
            None
        };
        let ids = select_participants(cfg.participation, m, &sk, 0);
        let (h, y_n) = match cfg.estimator {
            EstimatorKind::Aggitd => {
                let out = aggitd(problem, &x, &y, &cfg.aggitd_config(), &ids, &sk, &mut ledger)?;
                (out.h, out.y_n)
            }
            EstimatorKind::Aid => {
                let path = lower_loop(problem, &x, &y, &cfg.lower, cfg.n, &ids, &sk, &mut ledger)?;
                let y_n = path.last().expect("nonempty path").clone();
                (aid_fhe(problem, &x, &y_n, &cfg.aid_config(), &ids, &sk, &mut ledger)?.h, y_n)
            }
            EstimatorKind::Local => {
                let path = lower_loop(problem, &x, &y, &cfg.lower, cfg.n, &ids, &sk, &mut ledger)?;
                let y_n = path.last().expect("nonempty path").clone();
                (local_fhe(problem, &x, &y_n, cfg.lambda, cfg.t, &ids, &sk, &mut ledger)?.h, y_n)
            }
        };
        if let Some((mut record, grad)) = pending {
            record.est_err = Some((&h - grad).norm());
            rows.push(record);
        }
        let x_next = one_round_upper(problem, &x, &y_n, &h, cfg.alpha, &cfg.lower.tau, &ids, &sk, &mut ledger)?;
        guard(k, &x_next, &y_n)?;
        rounds_per_outer.push(ledger.rounds_this_outer);
        loops_per_outer.push(ledger.loops_this_outer);
        x = x_next;
        y = y_n;
    }
    let (last, _) = metrics(problem, cfg.k, ledger.rounds_total, &x, &y)?;
    rows.push(last);
    for r in &rows {
        let finite = [r.grad_norm_sq, r.lower_gap, r.objective]
            .into_iter()
            .chain(r.est_err)
            .chain(r.test_metric)
            .all(f64::is_finite);
        if !finite {
            return Err(Error::Divergence {
                iteration: r.k,
                detail: "non-finite metric".into(),
            });
        }
    }
    Ok(RunReport {
        estimator: cfg.estimator,
        rows,
        x_final: x,
        y_final: y,
        ledger,
        rounds_per_outer,
        loops_per_outer,
        samples_drawn: streams.samples_drawn(),
    })
}

pub fn run_fbo_aggitd<P: BilevelProblem + Reference + ?Sized>(
    problem: &P,
    cfg: &RunConfig,
    x0: &Vector,
    y0: &Vector,
) -> Result<RunReport> {
    let cfg = RunConfig {
        estimator: EstimatorKind::Aggitd,
        ..cfg.clone()
    };
    run(problem, &cfg, x0, y0)
}

pub fn run_fednest_baseline<P: BilevelProblem + Reference + ?Sized>(
    problem: &P,
    cfg: &RunConfig,
    x0: &Vector,
    y0: &Vector,
) -> Result<RunReport> {
    let cfg = RunConfig {
        estimator: EstimatorKind::Aid,
        ..cfg.clone()
    };
    run(problem, &cfg, x0, y0)
}

pub fn run_local_baseline<P: BilevelProblem + Reference + ?Sized>(
    problem: &P,
    cfg: &RunConfig,
    x0: &Vector,
    y0: &Vector,
) -> Result<RunReport> {
    let cfg = RunConfig {
        estimator: EstimatorKind::Local,
        ..cfg.clone()
    };
    run(problem, &cfg, x0, y0)
}

/// First cumulative round count at which `grad_norm_sq <= eps`, if any.
pub fn rounds_to_reach(report: &RunReport, eps: f64) -> Option<u64> {
    report.rows.iter().find(|r| r.grad_norm_sq <= eps).map(|r| r.rounds_cum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lower::LowerVariant;
    use crate::synthetic::{closed_form_lower_opt, make_quadratic, NoiseSpec, QuadraticInstance, QuadraticSpec};

    fn inst(hetero: f64, noise: NoiseSpec) -> QuadraticInstance {
        make_quadratic(&QuadraticSpec {
            d1: 4,
            d2: 5,
            m: 4,
            l_g: 4.0,
            hetero,
            noise,
            seed: 31,
            ..QuadraticSpec::default()
        })
        .unwrap()
    }

    fn cfg(estimator: EstimatorKind, k: usize, n: usize) -> RunConfig {
        RunConfig {
            estimator,
            k,
            n,
            t: n.max(1),
            lambda: 0.25,
            alpha: 0.1,
            lower: LowerStepConfig::new(1.0 / 24.0, 2, LowerVariant::Svrg),
            participation: Participation::default(),
            hessiv_participation: None,
            seed: 4,
            eval_every: 1,
        }
    }

    #[test]
    fn default_stepsize_examples() {
        let c = ProblemConstants::new(1.0, 10.0, 1.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        let s = default_stepsizes(&c, 100, None, None);
        assert!((s.lambda - 0.1).abs() < 1e-15);
        assert!((s.beta - 1.0 / 60.0).abs() < 1e-15);
        assert_eq!(s.n, 10);
        assert!((s.alpha - 1e-4 / 10.0).abs() < 1e-18);
        let s4 = default_stepsizes(&c, 400, None, None);
        assert!((s4.alpha - s.alpha / 2.0).abs() < 1e-18);

        let small = ProblemConstants::new(0.01, 0.05, 1.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        let s = default_stepsizes(&small, 1, Some(3), Some(0.5));
        assert_eq!(s.lambda, 10.0);
        assert_eq!(s.beta, 1.0);
        assert_eq!(s.n, 3);
        assert_eq!(s.alpha, 0.5);
    }

    #[test]
    fn single_upper_step_is_a_global_step() {
        let q = inst(0.5, NoiseSpec::default());
        let x = Vector::from_element(4, 0.5);
        let y = Vector::from_element(5, -0.5);
        let h = Vector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
        let out = one_round_upper(&q, &x, &y, &h, 0.1, &[1], &[0, 1, 2, 3], &Streams::new(0), &mut CommLedger::new()).unwrap();
        assert!((out - (&x - &h * 0.1)).amax() < 1e-15);
    }

    #[test]
    fn upper_fixed_point() {
        // rho_x x + e_i = 0 for every client: pick x with e_i = -rho_x x.
        let mut clients = inst(0.0, NoiseSpec::Exact).clients().to_vec();
        let x = Vector::from_vec(vec![0.3, -0.1, 0.2, 0.0]);
        for c in clients.iter_mut() {
            c.e = -&x;
        }
        let q = QuadraticInstance::new(clients, 1.0, NoiseSpec::Exact, 0).unwrap();
        let out = one_round_upper(&q, &x, &Vector::zeros(5), &Vector::zeros(4), 0.3, &[5], &[0, 1, 2, 3], &Streams::new(0), &mut CommLedger::new())
            .unwrap();
        assert!((out - x).amax() < 1e-16);
    }

    #[test]
    fn homogeneous_upper_round_matches_sequential_svrg_epoch() {
        let q = inst(0.0, NoiseSpec::Exact);
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let y = Vector::from_element(5, 0.2);
        let h = Vector::from_element(4, 0.7);
        let (alpha, tau) = (0.2, 6);
        let out = one_round_upper(&q, &x, &y, &h, alpha, &[tau], &[0, 1, 2, 3], &Streams::new(0), &mut CommLedger::new()).unwrap();
        // Direct part grad_x f = rho_x x + e, so the correction is rho_x (x_v - x).
        let c = &q.clients()[0];
        let mut xs = x.clone();
        for _ in 0..tau {
            let g = &h - (&x * q.rho_x() + &c.e) + (&xs * q.rho_x() + &c.e);
            xs -= g * (alpha / tau as f64);
        }
        assert!((out - xs).amax() < 1e-14);
    }

    #[test]
    fn zero_iterations_report_only_the_start() {
        let q = inst(0.5, NoiseSpec::default());
        let x0 = Vector::from_element(4, 1.0);
        let r = run(&q, &cfg(EstimatorKind::Aggitd, 0, 3), &x0, &Vector::zeros(5)).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].rounds_cum, 0);
        assert_eq!(r.rows[0].est_err, None);
        assert_eq!(r.x_final, x0);
    }

    #[test]
    fn ledger_per_outer_iteration() {
        let q = inst(0.5, NoiseSpec::default());
        for (kind, loops) in [(EstimatorKind::Aggitd, 1), (EstimatorKind::Aid, 2), (EstimatorKind::Local, 1)] {
            for n in [1usize, 5] {
                let c = cfg(kind, 4, n);
                let r = run(&q, &c, &Vector::zeros(4), &Vector::zeros(5)).unwrap();
                assert!(r.rounds_per_outer.iter().all(|&v| v == c.rounds_per_outer()), "{kind:?}");
                assert!(r.loops_per_outer.iter().all(|&v| v == loops));
                let cum: Vec<u64> = r.rows.iter().map(|row| row.rounds_cum).collect();
                assert_eq!(cum, (0..=4).map(|k| k * c.rounds_per_outer()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn warm_start_carries_the_lower_iterate() {
        let q = inst(0.5, NoiseSpec::Exact);
        let c = cfg(EstimatorKind::Aggitd, 3, 2);
        let x0 = Vector::from_element(4, 1.0);
        let y0 = Vector::from_element(5, 3.0);
        let r1 = run(&q, &RunConfig { k: 1, ..c.clone() }, &x0, &y0).unwrap();
        let r3 = run(&q, &c, &x0, &y0).unwrap();
        // Row 1 of the longer run measures y_1 = y_0^N against x_1, the
        // endpoint of the one-step run.
        let gap = (&r1.y_final - closed_form_lower_opt(&q, &r1.x_final).unwrap()).norm_squared();
        assert_eq!(r3.rows[1].lower_gap, gap);
        assert_eq!(r3.rows[1], MetricsRecord { est_err: r3.rows[1].est_err, ..r1.rows[1].clone() });
    }

    #[test]
    fn shared_lower_solver_trajectories() {
        let q = inst(0.5, NoiseSpec::default());
        let c = cfg(EstimatorKind::Aggitd, 1, 6);
        let x = Vector::from_element(4, 0.4);
        let y = Vector::from_element(5, -1.0);
        let sk = Streams::new(9);
        let ids = [0, 1, 2, 3];
        let out = aggitd(&q, &x, &y, &c.aggitd_config(), &ids, &sk, &mut CommLedger::new()).unwrap();
        let path = lower_loop(&q, &x, &y, &c.lower, 6, &ids, &sk, &mut CommLedger::new()).unwrap();
        assert_eq!(out.trace.y_iterates, path);
    }

    #[test]
    fn noise_free_run_descends() {
        // Q is still random, so only the overall decrease is checked.
        let q = inst(0.0, NoiseSpec::Exact);
        let r = run(&q, &cfg(EstimatorKind::Aggitd, 40, 4), &Vector::from_element(4, 2.0), &Vector::zeros(5)).unwrap();
        let g: Vec<f64> = r.rows.iter().map(|row| row.grad_norm_sq).collect();
        assert!(g[40] < 1e-2 * g[0], "{g:?}");
    }

    #[test]
    fn default_stepsizes_descend_monotonically_after_burn_in() {
        let q = make_quadratic(&QuadraticSpec {
            hetero: 0.0,
            noise: NoiseSpec::Exact,
            ..QuadraticSpec::default()
        })
        .unwrap();
        let (mu, hi) = crate::linalg::sym_eig_range(q.a_bar());
        let l_g = hi.max(crate::linalg::spectral_norm(q.b_bar()));
        let constants = ProblemConstants::new(mu, l_g, 1.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        let k = 200;
        let s = default_stepsizes(&constants, k, None, None);
        let c = RunConfig {
            estimator: EstimatorKind::Aggitd,
            k,
            n: s.n,
            t: s.n,
            lambda: s.lambda,
            alpha: s.alpha,
            lower: LowerStepConfig::new(s.beta, 1, LowerVariant::Svrg),
            participation: Participation::default(),
            hessiv_participation: None,
            seed: 0,
            eval_every: 1,
        };
        let r = run(&q, &c, &Vector::from_element(10, 1.0), &Vector::zeros(10)).unwrap();
        let g: Vec<f64> = r.rows.iter().map(|row| row.grad_norm_sq).collect();
        assert!(g[5..].windows(2).all(|w| w[1] <= w[0]), "{:?}", &g[..20]);
        assert!(g[k] < g[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let q = inst(0.5, NoiseSpec::Exact);
        let mut c = cfg(EstimatorKind::Aggitd, 200, 2);
        c.alpha = 50.0;
        let err = run(&q, &c, &Vector::from_element(4, 1.0), &Vector::zeros(5)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn sample_audit_is_linear_in_iterations() {
        let q = inst(0.5, NoiseSpec::default());
        let mut c = cfg(EstimatorKind::Aid, 10, 3);
        c.lower.tau = vec![1, 2, 3, 4];
        let samples = |c: &RunConfig, k: usize| {
            run(&q, &RunConfig { k, ..c.clone() }, &Vector::zeros(4), &Vector::zeros(5)).unwrap().samples_drawn
        };
        // AID draws a fixed number of batches per iteration.
        assert_eq!(samples(&c, 20), 2 * samples(&c, 10));
        assert_eq!(samples(&c, 7) - samples(&c, 6), samples(&c, 1));

        c.estimator = EstimatorKind::Aggitd;
        let a = samples(&c, 10);
        // Per client and iteration: N gradient batches, N * tau_i lower local
        // batches, one r batch, N - Q HVP batches, direct and mixed batches,
        // and tau_i upper local batches. Q varies, so bound the count.
        let (m, n, tau_sum) = (4u64, 3u64, 10u64);
        let fixed = m * n + n * tau_sum + m + 2 * m + tau_sum;
        assert!(a >= 10 * fixed && a <= 10 * (fixed + m * n));
    }

    #[test]
    fn same_config_same_report() {
        let q = inst(0.5, NoiseSpec::default());
        let c = cfg(EstimatorKind::Aid, 5, 2);
        let a = run(&q, &c, &Vector::zeros(4), &Vector::zeros(5)).unwrap();
        let b = run(&q, &c, &Vector::zeros(4), &Vector::zeros(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partial_participation_runs() {
        let q = inst(0.5, NoiseSpec::default());
        let mut c = cfg(EstimatorKind::Aggitd, 5, 2);
        c.participation = Participation::new(0.5).unwrap();
        let r = run(&q, &c, &Vector::zeros(4), &Vector::zeros(5)).unwrap();
        assert_eq!(r.ledger.rounds_total, 5 * 7);
    }
}
