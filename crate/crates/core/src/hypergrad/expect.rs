//! Exact (noise-free, full client set) expectations of the estimators and a
//! dense reference solve.

use super::exact_mean;
use crate::error::{Error, Result};
use crate::linalg::{check_len, Vector};
use crate::problem::{Batch, BilevelProblem, Point};
use crate::synthetic::{closed_form_hypergradient, closed_form_lower_opt, QuadraticInstance};

fn mean_hvp<P: BilevelProblem + ?Sized>(problem: &P, p: &Point, v: &Vector) -> Result<Vector> {
    exact_mean(problem, |i| problem.hvp_lower_yy(i, p, v, &Batch::Exact))
}

fn mean_grad_upper_y<P: BilevelProblem + ?Sized>(problem: &P, p: &Point) -> Result<Vector> {
    exact_mean(problem, |i| problem.grad_upper_y(i, p, &Batch::Exact))
}

fn mean_jvp<P: BilevelProblem + ?Sized>(problem: &P, p: &Point, v: &Vector) -> Result<Vector> {
    exact_mean(problem, |i| problem.jvp_lower_xy(i, p, v, &Batch::Exact))
}

/// Conditional expectation over `Q` of the AggITD indirect part given the
/// lower trajectory `y^0..y^N`:
/// `lambda J(y^N) sum_Q prod_{t=N}^{Q+1} (I - lambda H(y^t)) grad_y f(y^Q)`.
pub fn expected_aggitd_indirect<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y_iterates: &[Vector],
    lambda: f64,
) -> Result<Vector> {
    let n = y_iterates
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::param("y_iterates", "need at least y^0"))?;
    let mut acc: Option<Vector> = None;
    for y in y_iterates {
        let p = Point::new(x.clone(), y.clone());
        let r = mean_grad_upper_y(problem, &p)?;
        acc = Some(match acc {
            None => r,
            Some(mut s) => {
                let hs = mean_hvp(problem, &p, &s)?;
                s.axpy(-lambda, &hs, 1.0);
                s + r
            }
        });
    }
    let sum = acc.expect("nonempty trajectory") * lambda;
    mean_jvp(problem, &Point::new(x.clone(), y_iterates[n].clone()), &sum)
}

/// `lambda sum_{j<T} (I - lambda H(x, y))^j grad_y f(x, y)` with exact aggregates.
pub fn expected_aid_hessiv<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y: &Vector,
    lambda: f64,
    t: usize,
) -> Result<Vector> {
    if t < 1 {
        return Err(Error::param("T", "must be at least 1"));
    }
    let p = Point::new(x.clone(), y.clone());
    let v = mean_grad_upper_y(problem, &p)?;
    let mut s = v.clone();
    for _ in 1..t {
        let hs = mean_hvp(problem, &p, &s)?;
        s.axpy(-lambda, &hs, 1.0);
        s += &v;
    }
    Ok(s * lambda)
}

/// Noise-free value of the fully local estimator with budget `t`.
pub fn expected_local_fhe<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    y: &Vector,
    lambda: f64,
    t: usize,
) -> Result<Vector> {
    if t < 1 {
        return Err(Error::param("T", "must be at least 1"));
    }
    let p = Point::new(x.clone(), y.clone());
    exact_mean(problem, |i| {
        let v = problem.grad_upper_y(i, &p, &Batch::Exact)?;
        let mut s = v.clone();
        for _ in 1..t {
            let hs = problem.hvp_lower_yy(i, &p, &s, &Batch::Exact)?;
            s.axpy(-lambda, &hs, 1.0);
            s += &v;
        }
        let indirect = problem.jvp_lower_xy(i, &p, &(s * lambda), &Batch::Exact)?;
        Ok(problem.grad_upper_x(i, &p, &Batch::Exact)? - indirect)
    })
}

/// Infinite-budget limit of the local estimator at `(x, y)`:
/// `1/m sum_i [grad_x f_i - B_i' A_i^{-1} grad_y f_i]`.
pub fn local_limit_hypergradient(inst: &QuadraticInstance, x: &Vector, y: &Vector) -> Result<Vector> {
    let p = Point::new(x.clone(), y.clone());
    exact_mean(inst, |i| {
        let c = &inst.clients()[i];
        let w = crate::linalg::spd_solve(&c.a, &(y - &c.d))?;
        Ok(inst.grad_upper_x(i, &p, &Batch::Exact)? - c.b.tr_mul(&w))
    })
}

/// Stationary bias of the local estimator at the exact lower solution:
/// `B' A^{-1} grad_y f - 1/m sum_i B_i' A_i^{-1} grad_y f_i`.
pub fn local_bias(inst: &QuadraticInstance, x: &Vector) -> Result<Vector> {
    let y_star = closed_form_lower_opt(inst, x)?;
    Ok(local_limit_hypergradient(inst, x, &y_star)? - closed_form_hypergradient(inst, x)?)
}

/// Reference solve `Abar w = v` by Cholesky factorization.
///
/// The aggregate lower Hessian of a quadratic instance does not depend on
/// `(x, y)`; the arguments are validated and kept for signature parity with
/// general problems.
pub fn dense_hessiv(inst: &QuadraticInstance, x: &Vector, y: &Vector, v: &Vector) -> Result<Vector> {
    let dims = inst.dims();
    check_len("x", x, dims.d1)?;
    check_len("y", y, dims.d2)?;
    let w = inst.solve_a_bar(v)?;
    let residual = (inst.a_bar() * &w - v).norm();
    if residual > 1e-10 * v.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical(format!("dense solve residual {residual:e} too large")));
    }
    Ok(w)
}
