//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed; exits non-zero if any fails.

use std::process::Command;
use std::time::{Duration, Instant};

use fbo_cli::csv::format_csv;
use fbo_cli::{execute, parse_config_str};
use fbo_core::hypergrad::{aggitd, aggitd_fixed_q, expected_aggitd_indirect, local_bias, local_fhe, AggItdConfig};
use fbo_core::solver::rounds_to_reach;
use fbo_core::synthetic::{
    closed_form_hypergradient, closed_form_lower_opt, make_quadratic, NoiseSpec, QuadraticInstance, QuadraticSpec,
};
use fbo_core::verify::{lower_contraction, measure_constants, McStats, TestRegion};
use fbo_core::{
    run, CommLedger, EstimatorKind, Lane, LowerStepConfig, LowerVariant, Participation, Purpose, RngStream, RunConfig,
    Streams, Vector, DRIVER,
};

type Criterion = (&'static str, fn() -> Outcome, Duration);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn random_vector(n: usize, seed: u64) -> Vector {
    let mut s = RngStream::new(seed, Lane::new(DRIVER, Purpose::Auxiliary, 7, 0));
    Vector::from_fn(n, |_, _| s.gaussian())
}

fn everyone(q: &QuadraticInstance) -> Vec<usize> {
    (0..q.clients().len()).collect()
}

fn quadratic(spec: QuadraticSpec) -> QuadraticInstance {
    make_quadratic(&spec).expect("valid instance")
}

#[allow(clippy::too_many_arguments)]
fn run_config(estimator: EstimatorKind, k: usize, n: usize, t: usize, lambda: f64, alpha: f64, beta: f64, tau: usize, seed: u64) -> RunConfig {
    RunConfig {
        estimator,
        k,
        n,
        t,
        lambda,
        alpha,
        lower: LowerStepConfig::new(beta, tau, LowerVariant::Svrg),
        participation: Participation::default(),
        hessiv_participation: None,
        seed,
        eval_every: 1,
    }
}

fn communication_accounting() -> Outcome {
    let q = quadratic(QuadraticSpec::default());
    let (x0, y0) = (Vector::zeros(10), Vector::zeros(10));
    let mut bad = Vec::new();
    for n in [1usize, 5, 20] {
        for t in [1usize, 5] {
            let agg = run(&q, &run_config(EstimatorKind::Aggitd, 3, n, t, 0.1, 0.01, 0.01, 3, 1), &x0, &y0).unwrap();
            let aid = run(&q, &run_config(EstimatorKind::Aid, 3, n, t, 0.1, 0.01, 0.01, 3, 1), &x0, &y0).unwrap();
            let agg_ok = agg.rounds_per_outer.iter().all(|&r| r == 2 * n as u64 + 3) && agg.loops_per_outer.iter().all(|&l| l == 1);
            let aid_ok = aid.rounds_per_outer.iter().all(|&r| r == (2 * n + t) as u64 + 3) && aid.loops_per_outer.iter().all(|&l| l == 2);
            if !(agg_ok && aid_ok) {
                bad.push(format!("N={n} T={t}: aggitd {:?}/{:?} aid {:?}/{:?}", agg.rounds_per_outer, agg.loops_per_outer, aid.rounds_per_outer, aid.loops_per_outer));
            }
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "2N+3 (1 loop) and 2N+T+3 (2 loops) for N in {1,5,20}, T in {1,5}".into() } else { bad.join("; ") })
}

fn conditional_expectation() -> Outcome {
    let q = quadratic(QuadraticSpec {
        d1: 5,
        d2: 5,
        m: 4,
        hetero: 0.5,
        noise: NoiseSpec::Exact,
        seed: 11,
        ..QuadraticSpec::default()
    });
    let x = random_vector(5, 1);
    let y0 = random_vector(5, 2);
    let l_g = 10.0;
    let cfg = AggItdConfig {
        lambda: 1.0 / l_g,
        n: 8,
        lower: LowerStepConfig::new(1.0 / (6.0 * l_g), 3, LowerVariant::Svrg),
    };
    let ids = everyone(&q);
    let mut mean = Vector::zeros(5);
    let mut path = Vec::new();
    for qi in 0..=cfg.n {
        let out = aggitd_fixed_q(&q, &x, &y0, &cfg, qi, &ids, &Streams::new(3), &mut CommLedger::new()).unwrap();
        mean += out.trace.h_indirect;
        path = out.trace.y_iterates;
    }
    mean /= (cfg.n + 1) as f64;
    let expected = expected_aggitd_indirect(&q, &x, &path, cfg.lambda).unwrap();
    let dev = (&mean - &expected).amax();
    outcome(dev <= 1e-12, format!("max |enumerated - expected| = {dev:.2e} over {} chain starts", cfg.n + 1))
}

fn hypergradient_fidelity() -> Outcome {
    let q = quadratic(QuadraticSpec {
        mu: 1.0,
        l_g: 20.0,
        hetero: 0.0,
        noise: NoiseSpec::Exact,
        seed: 4,
        ..QuadraticSpec::default()
    });
    let x = random_vector(10, 5);
    let y_star = closed_form_lower_opt(&q, &x).unwrap();
    let region = TestRegion::around_optimum(&q, &x, 1.0).unwrap();
    let c = measure_constants(&q, &region, 100, 0).unwrap().constants;
    let lambda = 1.0 / c.l_g;
    let truth = closed_form_hypergradient(&q, &x).unwrap();
    let grad_y = (&y_star - q.d_bar()).norm();
    let ids = everyone(&q);
    let mut points = Vec::new();
    let mut bound_ok = true;
    let mut parts = Vec::new();
    for n in [10usize, 30, 60] {
        let cfg = AggItdConfig {
            lambda,
            n,
            lower: LowerStepConfig::new(1.0 / (6.0 * c.l_g), 1, LowerVariant::Svrg),
        };
        let mut mean = Vector::zeros(10);
        for qi in 0..=n {
            mean += aggitd_fixed_q(&q, &x, &y_star, &cfg, qi, &ids, &Streams::new(0), &mut CommLedger::new()).unwrap().h;
        }
        mean /= (n + 1) as f64;
        let err = (mean - &truth).norm();
        let bound = (1.0 - lambda * c.mu).powi(n as i32 + 1) * c.l_g * grad_y / c.mu;
        bound_ok &= err <= bound;
        parts.push(format!("N={n}: {err:.3e} <= {bound:.3e}"));
        points.push((n as f64, err.ln()));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = points.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let predicted = (1.0 - lambda * c.mu).ln();
    let slope_ok = ((slope - predicted) / predicted).abs() <= 0.1;
    outcome(
        bound_ok && slope_ok,
        format!("{}; slope {slope:.4} vs log(1 - lambda mu) = {predicted:.4}", parts.join(", ")),
    )
}

fn variance_bound() -> Outcome {
    let q = quadratic(QuadraticSpec {
        hetero: 0.5,
        seed: 6,
        ..QuadraticSpec::default()
    });
    let x = random_vector(10, 8);
    let y_star = closed_form_lower_opt(&q, &x).unwrap();
    let region = TestRegion::around_optimum(&q, &x, 1.0).unwrap();
    let c = measure_constants(&q, &region, 1000, 1).unwrap().constants;
    let n = 10;
    let cfg = AggItdConfig {
        lambda: 1.0 / c.l_g,
        n,
        lower: LowerStepConfig::new(1.0 / (6.0 * c.l_g), 2, LowerVariant::Svrg),
    };
    let y0 = &y_star + random_vector(10, 9).normalize() * 0.3;
    let ids = everyone(&q);
    let trials = 10_000;
    let mut per_client: Vec<Vec<Vector>> = vec![Vec::with_capacity(trials); ids.len()];
    for trial in 0..trials as u64 {
        let out = aggitd(&q, &x, &y0, &cfg, &ids, &Streams::new(1000 + trial), &mut CommLedger::new()).unwrap();
        for (i, h) in out.trace.indirect_per_client.into_iter().enumerate() {
            per_client[i].push(h);
        }
    }
    let bound = cfg.lambda * (n + 1) as f64 * c.l_g * c.l_g * c.m * c.m / c.mu;
    let mut worst = (0.0, 0.0);
    for samples in &per_client {
        let s = McStats::from_samples(samples, &Vector::zeros(10)).unwrap();
        if s.var + 4.0 * s.var_se > worst.0 + 4.0 * worst.1 {
            worst = (s.var, s.var_se);
        }
    }
    let ok = worst.0 + 4.0 * worst.1 <= bound;
    outcome(
        ok,
        format!(
            "max client variance {:.4e} (+4 SE {:.2e}) <= lambda (N+1) L_g^2 M^2 / mu = {bound:.4e}",
            worst.0,
            4.0 * worst.1
        ),
    )
}

fn lower_solver_contraction() -> Outcome {
    let q = quadratic(QuadraticSpec {
        hetero: 0.5,
        seed: 12,
        ..QuadraticSpec::default()
    });
    let x = random_vector(10, 13);
    let y_star = closed_form_lower_opt(&q, &x).unwrap();
    let y0 = &y_star + random_vector(10, 14).normalize() * 3.0;
    let region = TestRegion::new(fbo_core::Point::new(x.clone(), y_star.clone()), 3.0).unwrap();
    let report = measure_constants(&q, &region, 1000, 2).unwrap();
    let c = report.constants;
    let lambda = 10f64.min(1.0 / c.l_g);
    let beta = 1f64.min(lambda).min(1.0 / (6.0 * c.l_g));
    let cfg = LowerStepConfig::new(beta, 3, LowerVariant::Svrg);
    let steps = lower_contraction(&q, &x, &y0, &cfg, 20, 50, c.mu, c.sigma_g, 1.2, 77).unwrap();
    let failing: Vec<String> = steps
        .iter()
        .filter(|s| !s.holds())
        .map(|s| format!("t={}: {:.4e} > {:.4e}", s.t, s.after.mean, s.bound))
        .collect();
    let tightest = steps.iter().map(|s| s.after.mean / s.bound).fold(0.0, f64::max);
    outcome(
        failing.is_empty(),
        if failing.is_empty() {
            format!(
                "20 steps x 50 reps, sigma_g = {:.3} (noise {:.3}, dissimilarity {:.3}), worst ratio to bound {tightest:.3}",
                c.sigma_g, report.sigma_g_noise, report.sigma_g_dissimilarity
            )
        } else {
            failing.join("; ")
        },
    )
}

const WELL_CONDITIONED: &str = r#"{"problem": {"kind": "quadratic", "d1": 10, "d2": 10, "m": 8, "mu": 1.0, "l_g": 1.5, "seed": 3},
  "hetero": 0.5, "noise": {"mode": "finite-sum", "spread": 0.1, "batch": 1}, "seed": 21}"#;

fn end_to_end_convergence() -> Outcome {
    let set = |k: usize| vec![format!("K={k}").parse().unwrap()];
    let exp = parse_config_str(WELL_CONDITIONED, "acceptance", &set(2000)).unwrap();
    let report = execute(&exp).unwrap();
    let best = report.rows.iter().map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min);
    let tail = report.rows[1500..].iter().map(|r| r.grad_norm_sq).sum::<f64>() / (report.rows.len() - 1500) as f64;
    let mut pts = Vec::new();
    for k in [64usize, 256, 1024] {
        let exp = parse_config_str(WELL_CONDITIONED, "acceptance", &set(k)).unwrap();
        let r = execute(&exp).unwrap();
        let avg = r.rows[..k].iter().map(|row| row.grad_norm_sq).sum::<f64>() / k as f64;
        pts.push(((k as f64).ln(), avg.ln()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let run = &exp.config.run;
    outcome(
        best <= 1e-4 && slope <= -0.35,
        format!(
            "min grad_norm_sq {best:.3e} over K=2000, mean over the last 500 {tail:.2e} (N={}, lambda={:.3}, beta={:.4}, alpha_scale={:.4}); running-average slope {slope:.3}",
            run.n,
            run.lambda,
            run.lower.beta,
            exp.constants.kappa_g.powi(-4)
        ),
    )
}

fn communication_efficiency() -> Outcome {
    let q = quadratic(QuadraticSpec {
        mu: 1.0,
        l_g: 1.5,
        hetero: 0.5,
        noise: NoiseSpec::FiniteSum { spread: 0.1, batch: 1 },
        seed: 3,
        ..QuadraticSpec::default()
    });
    let region = TestRegion::around_optimum(&q, &Vector::zeros(10), 1.0).unwrap();
    let c = measure_constants(&q, &region, 100, 0).unwrap().constants;
    let lambda = 1.0 / c.l_g;
    let beta = 1f64.min(lambda).min(1.0 / (6.0 * c.l_g));
    let (n, t, alpha, tau) = (3, 3, 0.01, 2);
    let (x0, y0) = (Vector::zeros(10), Vector::zeros(10));
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let agg = run(&q, &run_config(EstimatorKind::Aggitd, 1500, n, t, lambda, alpha, beta, tau, seed), &x0, &y0).unwrap();
        let aid = run(&q, &run_config(EstimatorKind::Aid, 1500, n, t, lambda, alpha, beta, tau, seed), &x0, &y0).unwrap();
        let (a, b) = (rounds_to_reach(&agg, 1e-3), rounds_to_reach(&aid, 1e-3));
        if let (Some(a), Some(b)) = (a, b) {
            if a < b {
                wins += 1;
            }
        }
        rows.push(format!("{}/{}", a.map_or("-".into(), |v| v.to_string()), b.map_or("-".into(), |v| v.to_string())));
    }
    outcome(wins >= 8, format!("AggITD fewer rounds on {wins}/10 seeds (aggitd/aid rounds: {})", rows.join(" ")))
}

fn heterogeneity_necessity() -> Outcome {
    let spec = QuadraticSpec {
        mu: 1.0,
        l_g: 4.0,
        hetero: 0.5,
        noise: NoiseSpec::Gaussian {
            sigma_f: 0.1,
            sigma_g: 0.1,
        },
        seed: 17,
        ..QuadraticSpec::default()
    };
    let noisy = quadratic(spec);
    let exact = noisy.with_noise(NoiseSpec::Exact).unwrap();
    let x = random_vector(10, 18);
    let y_star = closed_form_lower_opt(&exact, &x).unwrap();
    let truth = closed_form_hypergradient(&exact, &x).unwrap();
    let region = TestRegion::around_optimum(&exact, &x, 1.0).unwrap();
    let c = measure_constants(&exact, &region, 100, 0).unwrap().constants;
    let lambda = 1.0 / c.l_g;
    let (n, t) = (50, 50);
    let ids = everyone(&exact);

    let cfg = AggItdConfig {
        lambda,
        n,
        lower: LowerStepConfig::new(1.0 / (6.0 * c.l_g), 1, LowerVariant::Svrg),
    };
    let mut mean = Vector::zeros(10);
    for qi in 0..=n {
        mean += aggitd_fixed_q(&exact, &x, &y_star, &cfg, qi, &ids, &Streams::new(0), &mut CommLedger::new()).unwrap().h;
    }
    mean /= (n + 1) as f64;
    let agg_bias = (mean - &truth).norm();

    let trials = 4000;
    let samples: Vec<Vector> = (0..trials as u64)
        .map(|s| local_fhe(&noisy, &x, &y_star, lambda, t, &ids, &Streams::new(s), &mut CommLedger::new()).unwrap().h)
        .collect();
    let stats = McStats::from_samples(&samples, &truth).unwrap();
    let oracle = local_bias(&exact, &x).unwrap();
    let mc_bias = Vector::from_vec(stats.mean.clone()) - &truth;
    let oracle_gap = (&mc_bias - &oracle).norm();
    let ratio = stats.bias_norm / agg_bias;
    outcome(
        ratio >= 5.0 && oracle_gap <= 4.0 * stats.bias_se,
        format!(
            "local bias {:.4e} vs AggITD {agg_bias:.3e} (ratio {ratio:.2e}); |MC - closed form| = {oracle_gap:.2e} <= 4 SE = {:.2e}",
            stats.bias_norm,
            4.0 * stats.bias_se
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"{"problem": "quadratic", "K": 150, "N": 3, "participation": 0.5, "out_dir": "out"}"#;
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let cwd = dir.path().join(name);
        std::fs::create_dir_all(&cwd).unwrap();
        std::fs::write(cwd.join("config.json"), config).unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_fbo"))
            .args(["run", "--config", "config.json"])
            .current_dir(&cwd)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("fbo run failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        outputs.push(std::fs::read(cwd.join("out/metrics.csv")).unwrap());
    }
    // The library path must agree with the binary.
    let exp = parse_config_str(config, "config.json", &[]).unwrap();
    let lib = format_csv(&execute(&exp).unwrap()).unwrap();
    let same = outputs[0] == outputs[1] && outputs[0] == lib.as_bytes();
    outcome(same, format!("two CLI runs and the library produced {} identical bytes", outputs[0].len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("communication accounting", communication_accounting, Duration::from_secs(1)),
        ("conditional-expectation identity", conditional_expectation, Duration::from_secs(1)),
        ("hypergradient fidelity", hypergradient_fidelity, Duration::from_secs(5)),
        ("variance bound", variance_bound, Duration::from_secs(30)),
        ("lower-solver contraction", lower_solver_contraction, Duration::from_secs(10)),
        ("end-to-end convergence", end_to_end_convergence, Duration::from_secs(60)),
        ("communication-efficiency ordering", communication_efficiency, Duration::from_secs(60)),
        ("heterogeneity necessity", heterogeneity_necessity, Duration::from_secs(60)),
        ("determinism", determinism, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (idx, (name, f, budget)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|w| name.contains(w.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let passed = out.passed && in_time;
        if !passed {
            failed += 1;
        }
        println!(
            "{} criterion {}: {name}: {} [{:.2}s, budget {}s{}]",
            if passed { "PASS" } else { "FAIL" },
            idx + 1,
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criterion(s) failed");
        std::process::exit(1);
    }
}
