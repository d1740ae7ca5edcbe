//! Heterogeneous quadratic bilevel instances with closed-form ground truth.
//!
//! Client `i` holds
//!
//! ```text
//! g_i(x, y) = 1/2 y'A_i y + y'B_i x + c_i'y
//! f_i(x, y) = 1/2 |y - d_i|^2 + rho_x/2 |x|^2 + e_i'x
//! ```
//!
//! so `y*(x) = -Abar^{-1}(Bbar x + cbar)` and the hypergradient is
//! `rho_x x + ebar - Bbar' Abar^{-1}(y*(x) - dbar)`.

use nalgebra::linalg::Cholesky;
use nalgebra::Dyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, mean_matrix, mean_of, spectral_norm, sym_eig_range, Matrix, Vector};
use crate::problem::{Batch, BilevelProblem, Dims, Level, Point, Reference};
use crate::rng::RngStream;

/// How client oracles are randomized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// Every oracle call evaluates the client objective exactly.
    Exact,
    /// Mini-batches (with replacement) over per-client sample lists whose
    /// members deviate from the client objective by `spread` (in `[0, 1]`).
    FiniteSum {
        spread: f64,
        batch: usize,
    },
    /// Additive Gaussian noise on gradients with total standard deviations
    /// `sigma_f` (upper) and `sigma_g` (lower).
    Gaussian {
        sigma_f: f64,
        sigma_g: f64,
    },
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::FiniteSum {
            spread: 0.5,
            batch: 1,
        }
    }
}

/// Generator parameters for [`make_quadratic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub d1: usize,
    pub d2: usize,
    pub m: usize,
    pub n_per_client: usize,
    pub mu: f64,
    pub l_g: f64,
    /// Client heterogeneity in `[0, 1]`; zero gives identical clients.
    pub hetero: f64,
    pub noise: NoiseSpec,
    pub rho_x: f64,
    pub seed: u64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        Self {
            d1: 10,
            d2: 10,
            m: 8,
            n_per_client: 16,
            mu: 1.0,
            l_g: 10.0,
            hetero: 0.5,
            noise: NoiseSpec::default(),
            rho_x: 1.0,
            seed: 0,
        }
    }
}

/// One per-sample lower objective `1/2 y'A y + y'B x + c'y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerSample {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vector,
}

/// One per-sample upper objective; `rho_x` is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperSample {
    pub d: Vector,
    pub e: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticClient {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vector,
    pub d: Vector,
    pub e: Vector,
    pub lower_samples: Vec<LowerSample>,
    pub upper_samples: Vec<UpperSample>,
}

impl QuadraticClient {
    /// A client without sample lists (usable with exact or Gaussian noise).
    pub fn new(a: Matrix, b: Matrix, c: Vector, d: Vector, e: Vector) -> Self {
        Self {
            a,
            b,
            c,
            d,
            e,
            lower_samples: Vec::new(),
            upper_samples: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticInstance {
    dims: Dims,
    rho_x: f64,
    noise: NoiseSpec,
    seed: u64,
    clients: Vec<QuadraticClient>,
    a_bar: Matrix,
    b_bar: Matrix,
    c_bar: Vector,
    d_bar: Vector,
    e_bar: Vector,
    a_bar_chol: Cholesky<f64, Dyn>,
}

// Per-coordinate noise streams are derived from the batch key and a tag.
const LOWER_NOISE_TAG: u64 = 0x6C_6F77_6572;
const UPPER_NOISE_TAG: u64 = 0x75_7070_6572;

fn noise_vector(key: u64, tag: u64, len: usize, sigma: f64) -> Vector {
    if sigma == 0.0 || len == 0 {
        return Vector::zeros(len);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let scale = sigma / (len as f64).sqrt();
    Vector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    })
}

impl QuadraticInstance {
    /// Assemble an instance and precompute the client averages.
    pub fn new(
        clients: Vec<QuadraticClient>,
        rho_x: f64,
        noise: NoiseSpec,
        seed: u64,
    ) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::param("m", "at least one client is required"))?;
        let d2 = first.a.nrows();
        let d1 = first.b.ncols();
        for cl in &clients {
            if cl.a.shape() != (d2, d2) {
                return Err(Error::Dimension {
                    what: "A_i",
                    expected: d2,
                    got: cl.a.nrows(),
                });
            }
            if cl.b.shape() != (d2, d1) {
                return Err(Error::Dimension {
                    what: "B_i",
                    expected: d1,
                    got: cl.b.ncols(),
                });
            }
            check_len("c_i", &cl.c, d2)?;
            check_len("d_i", &cl.d, d2)?;
            check_len("e_i", &cl.e, d1)?;
            if let NoiseSpec::FiniteSum { batch, .. } = noise {
                if batch == 0 {
                    return Err(Error::param("batch", "must be at least 1"));
                }
                if cl.lower_samples.is_empty() || cl.upper_samples.is_empty() {
                    return Err(Error::param(
                        "n_per_client",
                        "finite-sum noise needs non-empty sample lists",
                    ));
                }
            }
            for s in &cl.lower_samples {
                if s.a.shape() != (d2, d2) || s.b.shape() != (d2, d1) || s.c.len() != d2 {
                    return Err(Error::param("lower_samples", "sample shape mismatch"));
                }
            }
            for s in &cl.upper_samples {
                if s.d.len() != d2 || s.e.len() != d1 {
                    return Err(Error::param("upper_samples", "sample shape mismatch"));
                }
            }
        }
        if let NoiseSpec::Gaussian { sigma_f, sigma_g } = noise {
            if !(sigma_f >= 0.0 && sigma_g >= 0.0) {
                return Err(Error::param("noise", "standard deviations must be >= 0"));
            }
        }
        let a_bar = mean_matrix(&clients.iter().map(|c| c.a.clone()).collect::<Vec<_>>()).unwrap();
        let b_bar = mean_matrix(&clients.iter().map(|c| c.b.clone()).collect::<Vec<_>>()).unwrap();
        let c_bar = mean_of(&clients.iter().map(|c| c.c.clone()).collect::<Vec<_>>()).unwrap();
        let d_bar = mean_of(&clients.iter().map(|c| c.d.clone()).collect::<Vec<_>>()).unwrap();
        let e_bar = mean_of(&clients.iter().map(|c| c.e.clone()).collect::<Vec<_>>()).unwrap();
        let a_bar_chol = a_bar
            .clone()
            .cholesky()
            .ok_or_else(|| Error::param("A", "aggregate lower Hessian is not positive definite"))?;
        Ok(Self {
            dims: Dims { d1, d2 },
            rho_x,
            noise,
            seed,
            clients,
            a_bar,
            b_bar,
            c_bar,
            d_bar,
            e_bar,
            a_bar_chol,
        })
    }

    pub fn clients(&self) -> &[QuadraticClient] {
        &self.clients
    }
    pub fn rho_x(&self) -> f64 {
        self.rho_x
    }
    pub fn noise(&self) -> NoiseSpec {
        self.noise
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn a_bar(&self) -> &Matrix {
        &self.a_bar
    }
    pub fn b_bar(&self) -> &Matrix {
        &self.b_bar
    }
    pub fn c_bar(&self) -> &Vector {
        &self.c_bar
    }
    pub fn d_bar(&self) -> &Vector {
        &self.d_bar
    }
    pub fn e_bar(&self) -> &Vector {
        &self.e_bar
    }

    /// Same clients with a different noise model.
    pub fn with_noise(&self, noise: NoiseSpec) -> Result<Self> {
        Self::new(self.clients.clone(), self.rho_x, noise, self.seed)
    }

    /// Solve `Abar w = v`.
    pub fn solve_a_bar(&self, v: &Vector) -> Result<Vector> {
        check_len("v", v, self.dims.d2)?;
        Ok(self.a_bar_chol.solve(v))
    }

    /// `max_i |A_i - Abar|` in spectral norm.
    pub fn hessian_heterogeneity(&self) -> f64 {
        self.clients
            .iter()
            .map(|c| spectral_norm(&(&c.a - &self.a_bar)))
            .fold(0.0, f64::max)
    }

    /// Every lower Hessian the oracles can return: the aggregate, each client
    /// objective and each per-sample objective.
    pub fn all_lower_hessians(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.a_bar];
        for c in &self.clients {
            out.push(&c.a);
            if matches!(self.noise, NoiseSpec::FiniteSum { .. }) {
                out.extend(c.lower_samples.iter().map(|s| &s.a));
            }
        }
        out
    }

    /// Every mixed-partial block `B` the oracles can return.
    pub fn all_couplings(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.b_bar];
        for c in &self.clients {
            out.push(&c.b);
            if matches!(self.noise, NoiseSpec::FiniteSum { .. }) {
                out.extend(c.lower_samples.iter().map(|s| &s.b));
            }
        }
        out
    }

    fn client(&self, i: usize) -> Result<&QuadraticClient> {
        self.clients.get(i).ok_or(Error::UnknownClient {
            client: i,
            clients: self.clients.len(),
        })
    }

    fn lower_terms<'a>(
        &'a self,
        client: &'a QuadraticClient,
        batch: &'a Batch,
    ) -> Vec<(&'a Matrix, &'a Matrix, &'a Vector)> {
        match (batch, &self.noise) {
            (Batch::Sample { indices, .. }, NoiseSpec::FiniteSum { .. }) if !indices.is_empty() => {
                indices
                    .iter()
                    .map(|&j| {
                        let s = &client.lower_samples[j % client.lower_samples.len()];
                        (&s.a, &s.b, &s.c)
                    })
                    .collect()
            }
            _ => vec![(&client.a, &client.b, &client.c)],
        }
    }

    fn upper_terms<'a>(
        &'a self,
        client: &'a QuadraticClient,
        batch: &'a Batch,
    ) -> Vec<(&'a Vector, &'a Vector)> {
        match (batch, &self.noise) {
            (Batch::Sample { indices, .. }, NoiseSpec::FiniteSum { .. }) if !indices.is_empty() => {
                indices
                    .iter()
                    .map(|&j| {
                        let s = &client.upper_samples[j % client.upper_samples.len()];
                        (&s.d, &s.e)
                    })
                    .collect()
            }
            _ => vec![(&client.d, &client.e)],
        }
    }

    fn lower_noise(&self, batch: &Batch) -> Option<Vector> {
        match (batch, &self.noise) {
            (Batch::Sample { noise_key, .. }, NoiseSpec::Gaussian { sigma_g, .. }) => Some(
                noise_vector(*noise_key, LOWER_NOISE_TAG, self.dims.d2, *sigma_g),
            ),
            _ => None,
        }
    }

    fn upper_noise(&self, batch: &Batch) -> Option<Vector> {
        match (batch, &self.noise) {
            (Batch::Sample { noise_key, .. }, NoiseSpec::Gaussian { sigma_f, .. }) => Some(
                noise_vector(
                    *noise_key,
                    UPPER_NOISE_TAG,
                    self.dims.d1 + self.dims.d2,
                    *sigma_f,
                ),
            ),
            _ => None,
        }
    }

    /// Serialize to the replay document (dense matrices row-major).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&QuadraticDoc::from(self)).expect("instance serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: QuadraticDoc = serde_json::from_str(text)
            .map_err(|e| Error::param("instance", e.to_string()))?;
        doc.into_instance()
    }
}

impl BilevelProblem for QuadraticInstance {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn num_clients(&self) -> usize {
        self.clients.len()
    }

    fn draw_batch(&self, client: usize, level: Level, stream: &mut RngStream) -> Batch {
        match self.noise {
            NoiseSpec::Exact => Batch::Exact,
            NoiseSpec::FiniteSum { batch, .. } => {
                let cl = &self.clients[client];
                let n = match level {
                    Level::Lower => cl.lower_samples.len(),
                    Level::Upper => cl.upper_samples.len(),
                };
                Batch::Sample {
                    indices: (0..batch).map(|_| stream.index(n)).collect(),
                    noise_key: 0,
                }
            }
            NoiseSpec::Gaussian { .. } => Batch::Sample {
                indices: Vec::new(),
                noise_key: stream.next_u64(),
            },
        }
    }

    fn grad_lower_y(&self, client: usize, p: &Point, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        let cl = self.client(client)?;
        let terms = self.lower_terms(cl, batch);
        let mut g = Vector::zeros(self.dims.d2);
        for (a, b, c) in &terms {
            g += *a * &p.y + *b * &p.x + *c;
        }
        g /= terms.len() as f64;
        if let Some(noise) = self.lower_noise(batch) {
            g += noise;
        }
        Ok(g)
    }

    fn grad_upper_x(&self, client: usize, p: &Point, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        let cl = self.client(client)?;
        let terms = self.upper_terms(cl, batch);
        let mut g = Vector::zeros(self.dims.d1);
        for (_, e) in &terms {
            g += &p.x * self.rho_x + *e;
        }
        g /= terms.len() as f64;
        if let Some(noise) = self.upper_noise(batch) {
            g += noise.rows(0, self.dims.d1);
        }
        Ok(g)
    }

    fn grad_upper_y(&self, client: usize, p: &Point, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        let cl = self.client(client)?;
        let terms = self.upper_terms(cl, batch);
        let mut g = Vector::zeros(self.dims.d2);
        for (d, _) in &terms {
            g += &p.y - *d;
        }
        g /= terms.len() as f64;
        if let Some(noise) = self.upper_noise(batch) {
            g += noise.rows(self.dims.d1, self.dims.d2);
        }
        Ok(g)
    }

    fn hvp_lower_yy(&self, client: usize, p: &Point, v: &Vector, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        check_len("v", v, self.dims.d2)?;
        let cl = self.client(client)?;
        let terms = self.lower_terms(cl, batch);
        let mut out = Vector::zeros(self.dims.d2);
        for (a, _, _) in &terms {
            out += *a * v;
        }
        Ok(out / terms.len() as f64)
    }

    fn jvp_lower_xy(&self, client: usize, p: &Point, v: &Vector, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        check_len("v", v, self.dims.d2)?;
        let cl = self.client(client)?;
        let terms = self.lower_terms(cl, batch);
        let mut out = Vector::zeros(self.dims.d1);
        for (_, b, _) in &terms {
            out += b.tr_mul(v);
        }
        Ok(out / terms.len() as f64)
    }

    fn upper_value(&self, client: usize, p: &Point) -> Result<f64> {
        self.check_point(client, p)?;
        let cl = self.client(client)?;
        Ok(0.5 * (&p.y - &cl.d).norm_squared()
            + 0.5 * self.rho_x * p.x.norm_squared()
            + cl.e.dot(&p.x))
    }

    fn lower_value(&self, client: usize, p: &Point) -> Result<f64> {
        self.check_point(client, p)?;
        let cl = self.client(client)?;
        Ok(0.5 * p.y.dot(&(&cl.a * &p.y)) + p.y.dot(&(&cl.b * &p.x)) + cl.c.dot(&p.y))
    }
}

/// `y*(x) = -Abar^{-1}(Bbar x + cbar)`.
pub fn closed_form_lower_opt(inst: &QuadraticInstance, x: &Vector) -> Result<Vector> {
    check_len("x", x, inst.dims.d1)?;
    let rhs = &inst.b_bar * x + &inst.c_bar;
    Ok(-inst.a_bar_chol.solve(&rhs))
}

/// Implicit hypergradient `rho_x x + ebar - Bbar' Abar^{-1}(y*(x) - dbar)`.
pub fn closed_form_hypergradient(inst: &QuadraticInstance, x: &Vector) -> Result<Vector> {
    let y_star = closed_form_lower_opt(inst, x)?;
    let w = inst.a_bar_chol.solve(&(&y_star - &inst.d_bar));
    Ok(x * inst.rho_x + &inst.e_bar - inst.b_bar.tr_mul(&w))
}

/// `f(x, y)` averaged over clients, noise off.
pub fn upper_objective(inst: &QuadraticInstance, x: &Vector, y: &Vector) -> Result<f64> {
    let p = Point::new(x.clone(), y.clone());
    let mut total = 0.0;
    for i in 0..inst.clients.len() {
        total += inst.upper_value(i, &p)?;
    }
    Ok(total / inst.clients.len() as f64)
}

impl Reference for QuadraticInstance {
    fn lower_opt(&self, x: &Vector, _warm: Option<&Vector>) -> Result<Vector> {
        closed_form_lower_opt(self, x)
    }

    fn hypergradient(&self, x: &Vector, _warm: Option<&Vector>) -> Result<Vector> {
        closed_form_hypergradient(self, x)
    }

    fn objective(&self, x: &Vector, _warm: Option<&Vector>) -> Result<f64> {
        let y = closed_form_lower_opt(self, x)?;
        upper_objective(self, x, &y)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn unit_symmetric(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let g = gaussian_matrix(rng, d, d);
    let s = (&g + g.transpose()) * 0.5;
    let n = spectral_norm(&s);
    if n > 0.0 {
        s / n
    } else {
        s
    }
}

fn unit_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    let g = gaussian_matrix(rng, r, c);
    let n = spectral_norm(&g);
    if n > 0.0 {
        g / n
    } else {
        g
    }
}

/// Subtract the mean and rescale so the largest member has spectral norm `target`.
fn center_matrices(mut ms: Vec<Matrix>, target: f64) -> Vec<Matrix> {
    let mean = mean_matrix(&ms).unwrap();
    for m in ms.iter_mut() {
        *m -= &mean;
    }
    let largest = ms.iter().map(spectral_norm).fold(0.0, f64::max);
    let scale = if largest > 1e-300 { target / largest } else { 0.0 };
    for m in ms.iter_mut() {
        *m *= scale;
    }
    ms
}

fn center_vectors(mut vs: Vec<Vector>, scale: f64) -> Vec<Vector> {
    let mean = mean_of(&vs).unwrap();
    for v in vs.iter_mut() {
        *v -= &mean;
        *v *= scale;
    }
    vs
}

/// Generate a heterogeneous quadratic instance.
///
/// Eigenvalue budget: with `w = min(mu/4, (L_g - mu)/8)` the shared base
/// Hessian has spectrum in `[mu + 2w, L_g - 2w]`, client deviations have
/// norm at most `hetero * w` and sample deviations at most `spread * w`, so
/// every Hessian an oracle can return lies in `[mu, L_g]`. Sample deviations
/// come in antithetic pairs, so sample means equal the client objective.
pub fn make_quadratic(spec: &QuadraticSpec) -> Result<QuadraticInstance> {
    if !(spec.mu > 0.0) {
        return Err(Error::param("mu", format!("must be positive, got {}", spec.mu)));
    }
    if !(spec.l_g >= spec.mu) {
        return Err(Error::param(
            "L_g",
            format!("infeasible eigenvalue range [{}, {}]", spec.mu, spec.l_g),
        ));
    }
    if !(0.0..=1.0).contains(&spec.hetero) {
        return Err(Error::param("hetero", "must lie in [0, 1]"));
    }
    if spec.d1 == 0 || spec.d2 == 0 || spec.m == 0 {
        return Err(Error::param("dims", "d1, d2 and m must be positive"));
    }
    let spread = match spec.noise {
        NoiseSpec::FiniteSum { spread, batch } => {
            if !(0.0..=1.0).contains(&spread) {
                return Err(Error::param("spread", "must lie in [0, 1]"));
            }
            if batch == 0 {
                return Err(Error::param("batch", "must be at least 1"));
            }
            if spec.n_per_client == 0 {
                return Err(Error::param("n_per_client", "must be at least 1"));
            }
            spread
        }
        _ => 0.0,
    };
    let (d1, d2, m) = (spec.d1, spec.d2, spec.m);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let w = (spec.mu / 4.0).min((spec.l_g - spec.mu) / 8.0);
    let (lo, hi) = (spec.mu + 2.0 * w, spec.l_g - 2.0 * w);
    let eigs = Vector::from_fn(d2, |k, _| {
        if d2 == 1 {
            lo
        } else {
            lo + (hi - lo) * k as f64 / (d2 - 1) as f64
        }
    });
    let q = gaussian_matrix(&mut rng, d2, d2).qr().q();
    let a_base = {
        let a = &q * Matrix::from_diagonal(&eigs) * q.transpose();
        (&a + a.transpose()) * 0.5
    };
    let coupling = 0.5 * spec.mu;
    let b_base = unit_matrix(&mut rng, d2, d1) * coupling;
    let c_base = gaussian_vector(&mut rng, d2);
    let d_base = gaussian_vector(&mut rng, d2);
    let e_base = gaussian_vector(&mut rng, d1);

    let da = center_matrices((0..m).map(|_| unit_symmetric(&mut rng, d2)).collect(), spec.hetero * w);
    let db = center_matrices(
        (0..m).map(|_| unit_matrix(&mut rng, d2, d1)).collect(),
        spec.hetero * coupling / 2.0,
    );
    let dc = center_vectors((0..m).map(|_| gaussian_vector(&mut rng, d2)).collect(), spec.hetero);
    let dd = center_vectors((0..m).map(|_| gaussian_vector(&mut rng, d2)).collect(), spec.hetero);
    let de = center_vectors((0..m).map(|_| gaussian_vector(&mut rng, d1)).collect(), spec.hetero);

    let mut clients = Vec::with_capacity(m);
    for i in 0..m {
        let a = {
            let a = &a_base + &da[i];
            (&a + a.transpose()) * 0.5
        };
        let b = &b_base + &db[i];
        let c = &c_base + &dc[i];
        let d = &d_base + &dd[i];
        let e = &e_base + &de[i];
        let mut client = QuadraticClient::new(a, b, c, d, e);
        if matches!(spec.noise, NoiseSpec::FiniteSum { .. }) {
            let n = spec.n_per_client;
            let mut k = 0;
            while k < n {
                let paired = k + 1 < n;
                let (sa, sb, sc, sd, se) = if paired {
                    (
                        unit_symmetric(&mut rng, d2) * (spread * w),
                        unit_matrix(&mut rng, d2, d1) * (spread * coupling / 2.0),
                        gaussian_vector(&mut rng, d2) * spread,
                        gaussian_vector(&mut rng, d2) * spread,
                        gaussian_vector(&mut rng, d1) * spread,
                    )
                } else {
                    (
                        Matrix::zeros(d2, d2),
                        Matrix::zeros(d2, d1),
                        Vector::zeros(d2),
                        Vector::zeros(d2),
                        Vector::zeros(d1),
                    )
                };
                let signs: &[f64] = if paired { &[1.0, -1.0] } else { &[1.0] };
                for &s in signs {
                    let sa_s = &client.a + &sa * s;
                    client.lower_samples.push(LowerSample {
                        a: (&sa_s + sa_s.transpose()) * 0.5,
                        b: &client.b + &sb * s,
                        c: &client.c + &sc * s,
                    });
                    client.upper_samples.push(UpperSample {
                        d: &client.d + &sd * s,
                        e: &client.e + &se * s,
                    });
                }
                k += signs.len();
            }
        }
        clients.push(client);
    }
    QuadraticInstance::new(clients, spec.rho_x, spec.noise, spec.seed)
}

/// Check that every Hessian the oracles can produce has spectrum in `[lo, hi]`.
pub fn hessian_spectrum(inst: &QuadraticInstance) -> (f64, f64) {
    inst.all_lower_hessians()
        .into_iter()
        .map(sym_eig_range)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (a, b)| {
            (l.min(a), h.max(b))
        })
}

// ---------------------------------------------------------------------------
// Replay document

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Matrix> for MatrixDoc {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixDoc {
    fn into_matrix(self) -> Result<Matrix> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::param("instance", "matrix data length mismatch"));
        }
        Ok(Matrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LowerSampleDoc {
    a: MatrixDoc,
    b: MatrixDoc,
    c: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpperSampleDoc {
    d: Vec<f64>,
    e: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClientDoc {
    a: MatrixDoc,
    b: MatrixDoc,
    c: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    lower_samples: Vec<LowerSampleDoc>,
    upper_samples: Vec<UpperSampleDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadraticDoc {
    d1: usize,
    d2: usize,
    m: usize,
    seed: u64,
    rho_x: f64,
    noise: NoiseSpec,
    clients: Vec<ClientDoc>,
}

fn vec_doc(v: &Vector) -> Vec<f64> {
    v.iter().cloned().collect()
}

impl From<&QuadraticInstance> for QuadraticDoc {
    fn from(inst: &QuadraticInstance) -> Self {
        Self {
            d1: inst.dims.d1,
            d2: inst.dims.d2,
            m: inst.clients.len(),
            seed: inst.seed,
            rho_x: inst.rho_x,
            noise: inst.noise,
            clients: inst
                .clients
                .iter()
                .map(|c| ClientDoc {
                    a: (&c.a).into(),
                    b: (&c.b).into(),
                    c: vec_doc(&c.c),
                    d: vec_doc(&c.d),
                    e: vec_doc(&c.e),
                    lower_samples: c
                        .lower_samples
                        .iter()
                        .map(|s| LowerSampleDoc {
                            a: (&s.a).into(),
                            b: (&s.b).into(),
                            c: vec_doc(&s.c),
                        })
                        .collect(),
                    upper_samples: c
                        .upper_samples
                        .iter()
                        .map(|s| UpperSampleDoc {
                            d: vec_doc(&s.d),
                            e: vec_doc(&s.e),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl QuadraticDoc {
    fn into_instance(self) -> Result<QuadraticInstance> {
        if self.clients.len() != self.m {
            return Err(Error::param("m", "client count does not match document"));
        }
        let mut clients = Vec::with_capacity(self.m);
        for c in self.clients {
            let mut client = QuadraticClient::new(
                c.a.into_matrix()?,
                c.b.into_matrix()?,
                Vector::from_vec(c.c),
                Vector::from_vec(c.d),
                Vector::from_vec(c.e),
            );
            for s in c.lower_samples {
                client.lower_samples.push(LowerSample {
                    a: s.a.into_matrix()?,
                    b: s.b.into_matrix()?,
                    c: Vector::from_vec(s.c),
                });
            }
            for s in c.upper_samples {
                client.upper_samples.push(UpperSample {
                    d: Vector::from_vec(s.d),
                    e: Vector::from_vec(s.e),
                });
            }
            clients.push(client);
        }
        let inst = QuadraticInstance::new(clients, self.rho_x, self.noise, self.seed)?;
        if inst.dims != (Dims { d1: self.d1, d2: self.d2 }) {
            return Err(Error::param("dims", "document dims do not match matrices"));
        }
        Ok(inst)
    }
}
