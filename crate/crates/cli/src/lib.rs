//! Command-line front end: configuration, runs, single estimates, the oracle
//! suite, metrics CSV, SVG plots and sweeps.

pub mod config;
pub mod csv;
pub mod error;
pub mod svg;
pub mod sweep;

use fbo_core::hypergrad::{
    aggitd, aggitd_fixed_q, aid_fhe, dense_hessiv, expected_aggitd_indirect, local_fhe, EstimatorTrace,
};
use fbo_core::linalg::{serde_vector, spectral_norm, sym_eig_range};
use fbo_core::synthetic::{closed_form_hypergradient, NoiseSpec, QuadraticInstance};
use fbo_core::verify::{central_difference, directional_difference, fd_hypergradient, measure_constants, TestRegion, FD_STEP};
use fbo_core::{
    lower_loop, run, select_participants, Batch, BilevelProblem, CommLedger, EstimatorKind, Lane, LowerStepConfig,
    LowerVariant, Point, Purpose, RngStream, RunReport, Streams, Vector, DRIVER,
};
use serde::Serialize;

pub use config::{parse_config, parse_config_str, Config, Experiment, Override, ProblemInstance};
pub use error::{CliError, CliResult};

/// Run the configured solver from the experiment's starting point.
pub fn execute(exp: &Experiment) -> CliResult<RunReport> {
    Ok(run(exp.problem.as_dyn(), &exp.config.run, &exp.x0, &exp.y0)?)
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "estimator", rename_all = "kebab-case")]
pub enum EstimateTrace {
    Aggitd(EstimatorTrace),
    Aid {
        #[serde(with = "serde_vector")]
        y_n: Vector,
        #[serde(with = "serde_vector")]
        p: Vector,
        t_prime: usize,
    },
    Local {
        #[serde(with = "serde_vector")]
        y_n: Vector,
        p_per_client: Vec<Vec<f64>>,
    },
}

/// One hypergradient estimate at the starting point, with its trace.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    #[serde(with = "serde_vector")]
    pub h: Vector,
    /// Reference hypergradient at `x0`.
    #[serde(with = "serde_vector")]
    pub truth: Vector,
    pub error: f64,
    pub rounds: u64,
    pub loops: u64,
    pub participants: Vec<usize>,
    pub trace: EstimateTrace,
}

pub fn estimate(exp: &Experiment) -> CliResult<EstimateReport> {
    let problem = exp.problem.as_dyn();
    let cfg = &exp.config.run;
    let streams = Streams::new(cfg.seed).at_outer(0);
    let mut ledger = CommLedger::new();
    ledger.begin_outer();
    let ids = select_participants(cfg.participation, problem.num_clients(), &streams, 0);
    let (h, trace) = match cfg.estimator {
        EstimatorKind::Aggitd => {
            let out = aggitd(problem, &exp.x0, &exp.y0, &cfg.aggitd_config(), &ids, &streams, &mut ledger)?;
            (out.h, EstimateTrace::Aggitd(out.trace))
        }
        EstimatorKind::Aid | EstimatorKind::Local => {
            let path = lower_loop(problem, &exp.x0, &exp.y0, &cfg.lower, cfg.n, &ids, &streams, &mut ledger)?;
            let y_n = path.last().expect("nonempty path").clone();
            if cfg.estimator == EstimatorKind::Aid {
                let out = aid_fhe(problem, &exp.x0, &y_n, &cfg.aid_config(), &ids, &streams, &mut ledger)?;
                (
                    out.h,
                    EstimateTrace::Aid {
                        y_n,
                        p: out.p,
                        t_prime: out.t_prime,
                    },
                )
            } else {
                let out = local_fhe(problem, &exp.x0, &y_n, cfg.lambda, cfg.t, &ids, &streams, &mut ledger)?;
                let p_per_client = out.p_per_client.iter().map(|p| p.as_slice().to_vec()).collect();
                (out.h, EstimateTrace::Local { y_n, p_per_client })
            }
        }
    };
    let truth = problem.hypergradient(&exp.x0, Some(&exp.y0))?;
    Ok(EstimateReport {
        error: (&h - &truth).norm(),
        h,
        truth,
        rounds: ledger.rounds_total,
        loops: ledger.loops_this_outer,
        participants: ids,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

/// Cross-check the quadratic instance's closed forms against independent
/// methods (noise switched off).
pub fn oracle_suite(inst: &QuadraticInstance, seed: u64) -> CliResult<Vec<Check>> {
    let q = inst.with_noise(NoiseSpec::Exact)?;
    let dims = q.dims();
    let mut rng = RngStream::new(seed, Lane::new(DRIVER, Purpose::Auxiliary, 0, 0));
    let mut gaussian = |n: usize| Vector::from_fn(n, |_, _| rng.gaussian());
    let mut checks = Vec::new();

    let mut worst = 0f64;
    for _ in 0..5 {
        let x = gaussian(dims.d1);
        worst = worst.max(rel_err(&fd_hypergradient(&q, &x, FD_STEP)?, &closed_form_hypergradient(&q, &x)?));
    }
    checks.push(check("fd-hypergradient", worst < 1e-5, format!("max relative error {worst:.3e} over 5 points")));

    let p = Point::new(gaussian(dims.d1), gaussian(dims.d2));
    let v = gaussian(dims.d2);
    let (mut hvp_err, mut jvp_err) = (0f64, 0f64);
    for i in 0..q.num_clients() {
        let hvp = q.hvp_lower_yy(i, &p, &v, &Batch::Exact)?;
        let fd = directional_difference(
            |y| q.grad_lower_y(i, &Point::new(p.x.clone(), y.clone()), &Batch::Exact),
            &p.y,
            &v,
            FD_STEP,
        )?;
        hvp_err = hvp_err.max(rel_err(&fd, &hvp));
        let jvp = q.jvp_lower_xy(i, &p, &v, &Batch::Exact)?;
        let fd = central_difference(
            |x| Ok(q.grad_lower_y(i, &Point::new(x.clone(), p.y.clone()), &Batch::Exact)?.dot(&v)),
            &p.x,
            FD_STEP,
        )?;
        jvp_err = jvp_err.max(rel_err(&fd, &jvp));
    }
    checks.push(check("fd-hvp", hvp_err < 1e-6, format!("max relative error {hvp_err:.3e}")));
    checks.push(check("fd-jvp", jvp_err < 1e-6, format!("max relative error {jvp_err:.3e}")));

    let (mu, hi) = sym_eig_range(q.a_bar());
    let lambda = 1.0 / hi;
    let terms = ((1e-12f64).ln() / (1.0 - lambda * mu).ln()).ceil().clamp(1.0, 1e6) as usize;
    let mut term = v.clone();
    let mut series = Vector::zeros(dims.d2);
    for _ in 0..terms {
        series += &term;
        term -= q.a_bar() * &term * lambda;
    }
    series *= lambda;
    let dense = dense_hessiv(&q, &p.x, &p.y, &v)?;
    let err = rel_err(&series, &dense);
    checks.push(check("neumann-vs-dense", err < 1e-8, format!("{terms} terms, relative error {err:.3e}")));

    let l_g = hi.max(spectral_norm(q.b_bar()));
    let cfg = fbo_core::hypergrad::AggItdConfig {
        lambda: 1.0 / l_g,
        n: 5,
        lower: LowerStepConfig::new(1.0 / (6.0 * l_g), 2, LowerVariant::Svrg),
    };
    let everyone: Vec<usize> = (0..q.num_clients()).collect();
    let mut mean = Vector::zeros(dims.d1);
    let mut path = Vec::new();
    for qi in 0..=cfg.n {
        let out = aggitd_fixed_q(&q, &p.x, &p.y, &cfg, qi, &everyone, &Streams::new(seed), &mut CommLedger::new())?;
        mean += &out.trace.h_indirect;
        path = out.trace.y_iterates;
    }
    mean /= (cfg.n + 1) as f64;
    let expected = expected_aggitd_indirect(&q, &p.x, &path, cfg.lambda)?;
    let err = (&mean - &expected).amax();
    checks.push(check(
        "aggitd-conditional-expectation",
        err <= 1e-12 * expected.amax().max(1.0),
        format!("max abs deviation {err:.3e}"),
    ));

    let region = TestRegion::around_optimum(inst, &Vector::zeros(dims.d1), 1.0)?;
    let r = measure_constants(inst, &region, 1000, seed)?;
    let c = r.constants;
    checks.push(check(
        "constants",
        c.mu > 0.0 && c.l_g >= c.mu,
        format!(
            "mu {:.4} L_g {:.4} M {:.4} sigma_g {:.4} (noise {:.4}, dissimilarity {:.4})",
            c.mu, c.l_g, c.m, c.sigma_g, r.sigma_g_noise, r.sigma_g_dissimilarity
        ),
    ));
    Ok(checks)
}
