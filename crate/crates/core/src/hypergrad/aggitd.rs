use serde::{Deserialize, Serialize};

use super::{client_parts, draw_client_batch, AggItdConfig};
use crate::error::{Error, Result};
use crate::linalg::{check_len, serde_vector, serde_vectors, Vector};
use crate::lower::{local_lower_gradients, normalize_participants, one_round_lower};
use crate::problem::{BilevelProblem, Level, Point};
use crate::rng::{Purpose, Streams, DRIVER};
use crate::runtime::{aggregate_piggybacked, CommLedger};

/// Everything AggITD computed in one call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorTrace {
    pub q_index: usize,
    pub participants: Vec<usize>,
    #[serde(with = "serde_vectors")]
    pub y_iterates: Vec<Vector>,
    #[serde(with = "serde_vector")]
    pub z_final: Vector,
    #[serde(with = "serde_vector")]
    pub p: Vector,
    #[serde(with = "serde_vector")]
    pub h_direct: Vector,
    #[serde(with = "serde_vector")]
    pub h_indirect: Vector,
    /// Client indirect parts `grad_x grad_y G_i p`, in participant order.
    #[serde(with = "serde_vectors")]
    pub indirect_per_client: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggItdOutput {
    pub h: Vector,
    pub y_n: Vector,
    pub trace: EstimatorTrace,
}

/// Uniform draw of the chain start `Q` from `0..=n`.
pub fn draw_q(streams: &Streams, n: usize) -> usize {
    streams.stream(DRIVER, Purpose::QDraw, 0).index(n + 1)
}

/// AggITD with a random chain start.
///
/// The lower loop and the Hessian-inverse-vector chain share one loop of
/// `2N + 2` rounds: for `t = 0..=N` a gradient round (carrying `r_i^Q` or the
/// client HVPs along), a One-Round-Lower round for `t < N`, and the final
/// aggregation of `h_i`.
#[allow(clippy::too_many_arguments)]
pub fn aggitd<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y0: &Vector,
    cfg: &AggItdConfig,
    participants: &[usize],
    streams: &Streams,
    ledger: &mut CommLedger,
) -> Result<AggItdOutput> {
    let q = draw_q(streams, cfg.n);
    aggitd_fixed_q(problem, x, y0, cfg, q, participants, streams, ledger)
}

/// AggITD with the chain start fixed to `q_index`.
#[allow(clippy::too_many_arguments)]
pub fn aggitd_fixed_q<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y0: &Vector,
    cfg: &AggItdConfig,
    q_index: usize,
    participants: &[usize],
    streams: &Streams,
    ledger: &mut CommLedger,
) -> Result<AggItdOutput> {
    cfg.validate(problem.num_clients())?;
    let dims = problem.dims();
    check_len("x", x, dims.d1)?;
    check_len("y", y0, dims.d2)?;
    let n = cfg.n;
    if q_index > n {
        return Err(Error::param("Q", format!("must lie in 0..={n}, got {q_index}")));
    }
    let ids = normalize_participants(problem, participants)?;
    let lambda = cfg.lambda;
    ledger.open_loop();

    let mut ys = Vec::with_capacity(n + 1);
    ys.push(y0.clone());
    let mut z = Vector::zeros(dims.d2);
    for t in 0..=n {
        let point = Point::new(x.clone(), ys[t].clone());
        let grads = if t < n {
            Some(local_lower_gradients(problem, &point, &ids, streams, t as u64)?)
        } else {
            None
        };
        let chain = if t >= q_index {
            let mut payload = Vec::with_capacity(ids.len());
            for &i in &ids {
                payload.push(if t == q_index {
                    let xi = draw_client_batch(problem, i, Level::Upper, streams, Purpose::UpperGradY, t as u64)?;
                    problem.grad_upper_y(i, &point, &xi)?
                } else {
                    let u = draw_client_batch(problem, i, Level::Lower, streams, Purpose::Hvp, t as u64)?;
                    problem.hvp_lower_yy(i, &point, &z, &u)?
                });
            }
            Some(payload)
        } else {
            None
        };

        let mut groups: Vec<&[crate::linalg::Vector]> = Vec::with_capacity(2);
        if let Some(g) = &grads {
            groups.push(g);
        }
        if let Some(c) = &chain {
            groups.push(c);
        }
        let mut means = aggregate_piggybacked(&groups, ledger)?.into_iter();
        let q = grads.as_ref().map(|_| means.next().expect("gradient mean"));
        if chain.is_some() {
            let agg = means.next().expect("chain mean");
            if t == q_index {
                z = agg;
            } else {
                z.axpy(-lambda, &agg, 1.0);
            }
        }
        if let Some(q) = q {
            let next = one_round_lower(problem, x, &ys[t], &q, &cfg.lower, &ids, streams, t as u64, ledger)?;
            ys.push(next);
        }
    }

    let p = &z * (lambda * (n as f64 + 1.0));
    let y_n = ys[n].clone();
    let point = Point::new(x.clone(), y_n.clone());
    let (direct, indirect) = client_parts(problem, &point, &ids, streams, |_| p.clone())?;
    let means = aggregate_piggybacked(&[&direct, &indirect], ledger)?;
    let (h_direct, h_indirect) = (means[0].clone(), means[1].clone());
    Ok(AggItdOutput {
        h: &h_direct - &h_indirect,
        y_n,
        trace: EstimatorTrace {
            q_index,
            participants: ids,
            y_iterates: ys,
            z_final: z,
            p,
            h_direct,
            h_indirect,
            indirect_per_client: indirect,
        },
    })
}
