use super::{client_parts, draw_client_batch};
use crate::error::{Error, Result};
use crate::linalg::{check_len, Vector};
use crate::lower::normalize_participants;
use crate::problem::{BilevelProblem, Level, Point};
use crate::rng::{Purpose, Streams};
use crate::runtime::{aggregate_piggybacked, CommLedger};

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutput {
    pub h: Vector,
    pub h_direct: Vector,
    pub h_indirect: Vector,
    /// Each participant's local HessIV estimate, in participant order.
    pub p_per_client: Vec<Vector>,
}

/// Fully local hypergradient estimate: every client builds
/// `lambda * sum_{j<T} (I - lambda H_i)^j grad_y F_i` from its own samples,
/// and only the resulting `h_i` are averaged (one round).
///
/// The Neumann sum is accumulated in Horner form with an independent Hessian
/// sample per factor, so it is unbiased for the client's truncated series.
#[allow(clippy::too_many_arguments)]
pub fn local_fhe<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y_n: &Vector,
    lambda: f64,
    t: usize,
    participants: &[usize],
    streams: &Streams,
    ledger: &mut CommLedger,
) -> Result<LocalOutput> {
    super::validate_lambda(lambda)?;
    if t < 1 {
        return Err(Error::param("T", "the Neumann budget must be at least 1"));
    }
    let dims = problem.dims();
    check_len("x", x, dims.d1)?;
    check_len("y", y_n, dims.d2)?;
    let ids = normalize_participants(problem, participants)?;
    let point = Point::new(x.clone(), y_n.clone());

    let mut ps = Vec::with_capacity(ids.len());
    for &i in &ids {
        let xi = draw_client_batch(problem, i, Level::Upper, streams, Purpose::UpperGradY, 0)?;
        let v = problem.grad_upper_y(i, &point, &xi)?;
        let mut s = v.clone();
        for j in 1..t {
            let zeta = draw_client_batch(problem, i, Level::Lower, streams, Purpose::Hvp, j as u64)?;
            let hs = problem.hvp_lower_yy(i, &point, &s, &zeta)?;
            s.axpy(-lambda, &hs, 1.0);
            s += &v;
        }
        ps.push(s * lambda);
    }
    let (direct, indirect) = client_parts(problem, &point, &ids, streams, |i| {
        let k = ids.binary_search(&i).expect("participant");
        ps[k].clone()
    })?;
    let means = aggregate_piggybacked(&[&direct, &indirect], ledger)?;
    Ok(LocalOutput {
        h: &means[0] - &means[1],
        h_direct: means[0].clone(),
        h_indirect: means[1].clone(),
        p_per_client: ps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergrad::{expected_local_fhe, local_bias, local_limit_hypergradient};
    use crate::synthetic::{closed_form_hypergradient, closed_form_lower_opt, make_quadratic, NoiseSpec, QuadraticSpec};

    fn inst(hetero: f64, noise: NoiseSpec) -> crate::synthetic::QuadraticInstance {
        make_quadratic(&QuadraticSpec {
            d1: 3,
            d2: 4,
            m: 4,
            l_g: 4.0,
            hetero,
            noise,
            seed: 21,
            ..QuadraticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn one_round_only() {
        let q = inst(0.5, NoiseSpec::default());
        let mut ledger = CommLedger::new();
        local_fhe(&q, &Vector::zeros(3), &Vector::zeros(4), 0.2, 10, &[0, 1, 2, 3], &Streams::new(0), &mut ledger).unwrap();
        assert_eq!(ledger.rounds_total, 1);
    }

    #[test]
    fn noise_free_matches_truncated_series() {
        let q = inst(0.5, NoiseSpec::Exact);
        let x = Vector::from_vec(vec![0.5, 0.0, -1.0]);
        let y = Vector::from_element(4, 0.3);
        for t in [1usize, 4, 25] {
            let out = local_fhe(&q, &x, &y, 0.2, t, &[0, 1, 2, 3], &Streams::new(0), &mut CommLedger::new()).unwrap();
            let expected = expected_local_fhe(&q, &x, &y, 0.2, t).unwrap();
            assert!((out.h - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_clients_have_no_local_bias() {
        let q = inst(0.0, NoiseSpec::Exact);
        let x = Vector::from_vec(vec![1.0, 1.0, -2.0]);
        let y_star = closed_form_lower_opt(&q, &x).unwrap();
        let out = local_fhe(&q, &x, &y_star, 0.25, 200, &[0, 1, 2, 3], &Streams::new(0), &mut CommLedger::new()).unwrap();
        let truth = closed_form_hypergradient(&q, &x).unwrap();
        assert!((out.h - truth).norm() < 1e-10);
        assert!(local_bias(&q, &x).unwrap().norm() < 1e-12);
    }

    #[test]
    fn heterogeneous_limit_is_biased_by_the_oracle_amount() {
        let q = inst(0.5, NoiseSpec::Exact);
        let x = Vector::from_vec(vec![1.0, 1.0, -2.0]);
        let y_star = closed_form_lower_opt(&q, &x).unwrap();
        let out = local_fhe(&q, &x, &y_star, 0.25, 300, &[0, 1, 2, 3], &Streams::new(0), &mut CommLedger::new()).unwrap();
        let limit = local_limit_hypergradient(&q, &x, &y_star).unwrap();
        assert!((&out.h - &limit).norm() < 1e-10);
        let bias = local_bias(&q, &x).unwrap();
        assert!(bias.norm() > 1e-3);
        let truth = closed_form_hypergradient(&q, &x).unwrap();
        assert!((out.h - truth - bias).norm() < 1e-10);
    }

    #[test]
    fn zero_upper_gradient_gives_zero_indirect_part() {
        let q = inst(0.5, NoiseSpec::Exact);
        // With every d_i equal to y the upper y-gradients vanish.
        let mut clients = q.clients().to_vec();
        let y = Vector::from_element(4, 0.5);
        for c in clients.iter_mut() {
            c.d = y.clone();
        }
        let q = crate::synthetic::QuadraticInstance::new(clients, 1.0, NoiseSpec::Exact, 0).unwrap();
        let out = local_fhe(&q, &Vector::zeros(3), &y, 0.25, 10, &[0, 1, 2, 3], &Streams::new(0), &mut CommLedger::new()).unwrap();
        assert_eq!(out.h_indirect, Vector::zeros(3));
    }
}
