use super::{client_parts, draw_client_batch, AidConfig};
use crate::error::{Error, Result};
use crate::linalg::{check_len, Vector};
use crate::lower::normalize_participants;
use crate::problem::{BilevelProblem, Level, Point};
use crate::rng::{Purpose, Streams, DRIVER};
use crate::runtime::{aggregate_mean, aggregate_piggybacked, select_participants, CommLedger};

#[derive(Debug, Clone, PartialEq)]
pub struct AidOutput {
    pub h: Vector,
    pub h_direct: Vector,
    pub h_indirect: Vector,
    /// The HessIV estimate `p_{T'}`.
    pub p: Vector,
    pub t_prime: usize,
}

/// Uniform draw of the truncation `T'` from `0..t`.
pub fn draw_truncation(streams: &Streams, t: usize) -> usize {
    streams.stream(DRIVER, Purpose::TruncationDraw, 0).index(t)
}

/// AID-based federated hypergradient at a lower-loop output `y_n`.
///
/// Costs `T + 2` rounds in its own loop: `p_0`, then `T` HessIV rounds
/// (always run, so the count does not depend on `T'`), then the final
/// aggregation of `h_i`.
#[allow(clippy::too_many_arguments)]
pub fn aid_fhe<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y_n: &Vector,
    cfg: &AidConfig,
    participants: &[usize],
    streams: &Streams,
    ledger: &mut CommLedger,
) -> Result<AidOutput> {
    cfg.validate(problem.num_clients())?;
    let t_prime = draw_truncation(streams, cfg.t);
    aid_fhe_fixed_truncation(problem, x, y_n, cfg, t_prime, participants, streams, ledger)
}

#[allow(clippy::too_many_arguments)]
pub fn aid_fhe_fixed_truncation<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y_n: &Vector,
    cfg: &AidConfig,
    t_prime: usize,
    participants: &[usize],
    streams: &Streams,
    ledger: &mut CommLedger,
) -> Result<AidOutput> {
    cfg.validate(problem.num_clients())?;
    let dims = problem.dims();
    check_len("x", x, dims.d1)?;
    check_len("y", y_n, dims.d2)?;
    if t_prime >= cfg.t {
        return Err(Error::param("T'", format!("must lie in 0..{}, got {t_prime}", cfg.t)));
    }
    let ids = normalize_participants(problem, participants)?;
    let point = Point::new(x.clone(), y_n.clone());
    ledger.open_loop();

    let mut r = Vec::with_capacity(ids.len());
    for &i in &ids {
        let xi = draw_client_batch(problem, i, Level::Upper, streams, Purpose::UpperGradY, 0)?;
        r.push(problem.grad_upper_y(i, &point, &xi)?);
    }
    let mut p = aggregate_mean(&r, ledger)? * (cfg.lambda * cfg.t as f64);
    let mut kept = (t_prime == 0).then(|| p.clone());
    for t in 1..=cfg.t {
        let round_ids = match cfg.hessiv_participation {
            Some(part) => select_participants(part, problem.num_clients(), streams, 1 + t as u64),
            None => ids.clone(),
        };
        let mut hvps = Vec::with_capacity(round_ids.len());
        for &i in &round_ids {
            let zeta = draw_client_batch(problem, i, Level::Lower, streams, Purpose::Hvp, t as u64)?;
            hvps.push(problem.hvp_lower_yy(i, &point, &p, &zeta)?);
        }
        let agg = aggregate_mean(&hvps, ledger)?;
        p.axpy(-cfg.lambda, &agg, 1.0);
        if t == t_prime {
            kept = Some(p.clone());
        }
    }
    let p = kept.expect("t_prime < T");

    let (direct, indirect) = client_parts(problem, &point, &ids, streams, |_| p.clone())?;
    let means = aggregate_piggybacked(&[&direct, &indirect], ledger)?;
    Ok(AidOutput {
        h: &means[0] - &means[1],
        h_direct: means[0].clone(),
        h_indirect: means[1].clone(),
        p,
        t_prime,
    })
}
