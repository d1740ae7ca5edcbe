//! Toy hyper-representation task.
//!
//! The upper variable is a linear embedding `E` (`embed_dim x feature_dim`),
//! the lower variable a multinomial logistic head `W` (`classes x embed_dim`)
//! trained with ridge penalty on each client's training split. The upper
//! objective is the head's cross-entropy on the client's validation split.
//! Both matrices are flattened row-major into `x` and `y`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, conjugate_gradient, Matrix, Vector};
use crate::problem::{Batch, BilevelProblem, Dims, Level, Point, ProblemConstants, Reference};
use crate::rng::RngStream;
use crate::synthetic::partition::{partition, PartitionMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperRepSpec {
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    /// Ridge penalty on the head; the lower strong-convexity modulus.
    pub ridge: f64,
    pub partition: PartitionMode,
    pub clients: usize,
    /// Points in the federated pool (split into train/validation per client).
    pub points: usize,
    pub test_points: usize,
    /// Distance scale between class means.
    pub separation: f64,
    pub batch: usize,
}

impl Default for HyperRepSpec {
    fn default() -> Self {
        Self {
            embed_dim: 4,
            feature_dim: 8,
            classes: 3,
            ridge: 0.1,
            partition: PartitionMode::Iid,
            clients: 4,
            points: 400,
            test_points: 300,
            separation: 2.0,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone)]
struct Sample {
    features: Vector,
    label: usize,
}

#[derive(Debug, Clone)]
struct HyperRepClient {
    train: Vec<Sample>,
    validation: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct HyperRepProblem {
    spec: HyperRepSpec,
    clients: Vec<HyperRepClient>,
    test: Vec<Sample>,
    /// Point-to-client assignment of the pool, for inspection.
    assignment: Vec<Vec<usize>>,
    pool_labels: Vec<usize>,
}

fn softmax(s: &Vector) -> Vector {
    let mx = s.max();
    let e = s.map(|v| (v - mx).exp());
    let z = e.sum();
    e / z
}

impl HyperRepProblem {
    fn embed(&self, x: &Vector) -> Matrix {
        Matrix::from_row_slice(self.spec.embed_dim, self.spec.feature_dim, x.as_slice())
    }

    fn head(&self, y: &Vector) -> Matrix {
        Matrix::from_row_slice(self.spec.classes, self.spec.embed_dim, y.as_slice())
    }

    fn flat(m: &Matrix) -> Vector {
        Vector::from_iterator(m.len(), m.transpose().iter().cloned())
    }

    fn client(&self, i: usize) -> Result<&HyperRepClient> {
        self.clients.get(i).ok_or(Error::UnknownClient {
            client: i,
            clients: self.clients.len(),
        })
    }

    fn select<'a>(&self, pool: &'a [Sample], batch: &Batch) -> Vec<&'a Sample> {
        match batch {
            Batch::Sample { indices, .. } if !indices.is_empty() => {
                indices.iter().map(|&j| &pool[j % pool.len()]).collect()
            }
            _ => pool.iter().collect(),
        }
    }

    /// Index lists of the pool assigned to each client.
    pub fn assignment(&self) -> &[Vec<usize>] {
        &self.assignment
    }

    pub fn pool_labels(&self) -> &[usize] {
        &self.pool_labels
    }

    /// Labels of every point a client holds.
    pub fn client_labels(&self, i: usize) -> Vec<usize> {
        self.clients[i].train.iter().chain(&self.clients[i].validation).map(|s| s.label).collect()
    }

    /// A small random embedding to start from.
    pub fn initial_embedding(&self, seed: u64) -> Vector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (self.spec.feature_dim as f64).sqrt();
        Vector::from_fn(self.dims().d1, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
    }

    /// Constants at a given embedding: `mu = ridge` and
    /// `L_g <= ridge + max |E a|^2 / 2` (softmax Hessians have norm <= 1/2).
    pub fn constants_at(&self, x: &Vector) -> Result<ProblemConstants> {
        check_len("x", x, self.dims().d1)?;
        let e = self.embed(x);
        let max_z = self
            .clients
            .iter()
            .flat_map(|c| c.train.iter())
            .map(|s| (&e * &s.features).norm_squared())
            .fold(0.0, f64::max);
        let l_g = self.spec.ridge + 0.5 * max_z;
        ProblemConstants::new(self.spec.ridge, l_g, l_g, 0.0, 0.0, 0.0, 0.0)
    }

    fn aggregate<F>(&self, f: F) -> Result<Vector>
    where
        F: Fn(usize) -> Result<Vector>,
    {
        let mut acc: Option<Vector> = None;
        for i in 0..self.clients.len() {
            let v = f(i)?;
            acc = Some(match acc {
                None => v,
                Some(a) => a + v,
            });
        }
        Ok(acc.unwrap() / self.clients.len() as f64)
    }

    /// Newton-CG on the aggregate lower objective.
    fn solve_lower(&self, x: &Vector, warm: Option<&Vector>) -> Result<Vector> {
        let d2 = self.dims().d2;
        let mut y = warm.cloned().unwrap_or_else(|| Vector::zeros(d2));
        for _ in 0..50 {
            let p = Point::new(x.clone(), y.clone());
            let g = self.aggregate(|i| self.grad_lower_y(i, &p, &Batch::Exact))?;
            if g.norm() <= 1e-12 {
                break;
            }
            let step = conjugate_gradient(
                |v| self.aggregate(|i| self.hvp_lower_yy(i, &p, v, &Batch::Exact)),
                &g,
                1e-12,
                10 * d2,
            )?;
            y -= step;
        }
        Ok(y)
    }
}

/// Gaussian-mixture data, partitioned across clients.
pub fn make_hyperrep(spec: &HyperRepSpec, seed: u64) -> Result<HyperRepProblem> {
    if !(spec.ridge > 0.0) {
        return Err(Error::param("ridge", "must be positive"));
    }
    if spec.embed_dim == 0 || spec.feature_dim == 0 || spec.classes < 2 {
        return Err(Error::param("dims", "need positive dims and at least two classes"));
    }
    if spec.batch == 0 {
        return Err(Error::param("batch", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vector> = (0..spec.classes)
        .map(|_| {
            Vector::from_fn(spec.feature_dim, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                spec.separation * z
            })
        })
        .collect();
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        (0..n)
            .map(|j| {
                let label = j % spec.classes;
                let noise = Vector::from_fn(spec.feature_dim, |_, _| StandardNormal.sample(rng));
                Sample {
                    features: &means[label] + noise,
                    label,
                }
            })
            .collect()
    };
    let pool = draw(spec.points, &mut rng);
    let test = draw(spec.test_points, &mut rng);
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    let assignment = partition(&labels, spec.partition, spec.clients, seed)?;
    let mut clients = Vec::with_capacity(assignment.len());
    for owned in &assignment {
        if owned.len() < 2 {
            return Err(Error::param("partition", "every client needs at least two points"));
        }
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for (k, &j) in owned.iter().enumerate() {
            if k % 2 == 0 {
                train.push(pool[j].clone());
            } else {
                validation.push(pool[j].clone());
            }
        }
        clients.push(HyperRepClient { train, validation });
    }
    Ok(HyperRepProblem {
        spec: spec.clone(),
        clients,
        test,
        assignment,
        pool_labels: labels,
    })
}

struct Forward {
    z: Vector,
    r: Vector,
    probs: Vector,
}

impl HyperRepProblem {
    fn forward(e: &Matrix, w: &Matrix, s: &Sample) -> Forward {
        let z = e * &s.features;
        let probs = softmax(&(w * &z));
        let mut r = probs.clone();
        r[s.label] -= 1.0;
        Forward { z, r, probs }
    }

    /// `(diag(p) - p p') u`
    fn softmax_hess(probs: &Vector, u: &Vector) -> Vector {
        let pu = probs.dot(u);
        probs.component_mul(u) - probs * pu
    }

    fn cross_entropy(e: &Matrix, w: &Matrix, s: &Sample) -> f64 {
        let logits = w * (e * &s.features);
        let mx = logits.max();
        let lse = mx + logits.map(|v| (v - mx).exp()).sum().ln();
        lse - logits[s.label]
    }
}

impl BilevelProblem for HyperRepProblem {
    fn dims(&self) -> Dims {
        Dims {
            d1: self.spec.embed_dim * self.spec.feature_dim,
            d2: self.spec.classes * self.spec.embed_dim,
        }
    }

    fn num_clients(&self) -> usize {
        self.clients.len()
    }

    fn draw_batch(&self, client: usize, level: Level, stream: &mut RngStream) -> Batch {
        let cl = &self.clients[client];
        let n = match level {
            Level::Lower => cl.train.len(),
            Level::Upper => cl.validation.len(),
        };
        Batch::Sample {
            indices: (0..self.spec.batch).map(|_| stream.index(n)).collect(),
            noise_key: 0,
        }
    }

    fn grad_lower_y(&self, client: usize, p: &Point, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        let (e, w) = (self.embed(&p.x), self.head(&p.y));
        let items = self.select(&self.client(client)?.train, batch);
        let mut g = Matrix::zeros(w.nrows(), w.ncols());
        for s in &items {
            let f = Self::forward(&e, &w, s);
            g += &f.r * f.z.transpose();
        }
        g /= items.len() as f64;
        g += &w * self.spec.ridge;
        Ok(Self::flat(&g))
    }

    fn grad_upper_x(&self, client: usize, p: &Point, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        let (e, w) = (self.embed(&p.x), self.head(&p.y));
        let items = self.select(&self.client(client)?.validation, batch);
        let mut g = Matrix::zeros(e.nrows(), e.ncols());
        for s in &items {
            let f = Self::forward(&e, &w, s);
            g += (w.tr_mul(&f.r)) * s.features.transpose();
        }
        g /= items.len() as f64;
        Ok(Self::flat(&g))
    }

    fn grad_upper_y(&self, client: usize, p: &Point, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        let (e, w) = (self.embed(&p.x), self.head(&p.y));
        let items = self.select(&self.client(client)?.validation, batch);
        let mut g = Matrix::zeros(w.nrows(), w.ncols());
        for s in &items {
            let f = Self::forward(&e, &w, s);
            g += &f.r * f.z.transpose();
        }
        g /= items.len() as f64;
        Ok(Self::flat(&g))
    }

    fn hvp_lower_yy(&self, client: usize, p: &Point, v: &Vector, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        check_len("v", v, self.dims().d2)?;
        let (e, w) = (self.embed(&p.x), self.head(&p.y));
        let dir = self.head(v);
        let items = self.select(&self.client(client)?.train, batch);
        let mut out = Matrix::zeros(w.nrows(), w.ncols());
        for s in &items {
            let f = Self::forward(&e, &w, s);
            let dr = Self::softmax_hess(&f.probs, &(&dir * &f.z));
            out += dr * f.z.transpose();
        }
        out /= items.len() as f64;
        out += &dir * self.spec.ridge;
        Ok(Self::flat(&out))
    }

    fn jvp_lower_xy(&self, client: usize, p: &Point, v: &Vector, batch: &Batch) -> Result<Vector> {
        self.check_point(client, p)?;
        check_len("v", v, self.dims().d2)?;
        let (e, w) = (self.embed(&p.x), self.head(&p.y));
        let dir = self.head(v);
        let items = self.select(&self.client(client)?.train, batch);
        let mut out = Matrix::zeros(e.nrows(), e.ncols());
        for s in &items {
            let f = Self::forward(&e, &w, s);
            // d/dE <r z', V> = W' S V z a' + V' r a'
            let sv = Self::softmax_hess(&f.probs, &(&dir * &f.z));
            out += (w.tr_mul(&sv) + dir.tr_mul(&f.r)) * s.features.transpose();
        }
        out /= items.len() as f64;
        Ok(Self::flat(&out))
    }

    fn upper_value(&self, client: usize, p: &Point) -> Result<f64> {
        self.check_point(client, p)?;
        let (e, w) = (self.embed(&p.x), self.head(&p.y));
        let items = &self.client(client)?.validation;
        Ok(items.iter().map(|s| Self::cross_entropy(&e, &w, s)).sum::<f64>() / items.len() as f64)
    }

    fn lower_value(&self, client: usize, p: &Point) -> Result<f64> {
        self.check_point(client, p)?;
        let (e, w) = (self.embed(&p.x), self.head(&p.y));
        let items = &self.client(client)?.train;
        let ce = items.iter().map(|s| Self::cross_entropy(&e, &w, s)).sum::<f64>() / items.len() as f64;
        Ok(ce + 0.5 * self.spec.ridge * w.norm_squared())
    }
}

impl Reference for HyperRepProblem {
    fn lower_opt(&self, x: &Vector, warm: Option<&Vector>) -> Result<Vector> {
        self.solve_lower(x, warm)
    }

    fn hypergradient(&self, x: &Vector, warm: Option<&Vector>) -> Result<Vector> {
        let y = self.solve_lower(x, warm)?;
        let p = Point::new(x.clone(), y);
        let direct = self.aggregate(|i| self.grad_upper_x(i, &p, &Batch::Exact))?;
        let fy = self.aggregate(|i| self.grad_upper_y(i, &p, &Batch::Exact))?;
        let w = conjugate_gradient(
            |v| self.aggregate(|i| self.hvp_lower_yy(i, &p, v, &Batch::Exact)),
            &fy,
            1e-12,
            10 * self.dims().d2,
        )?;
        let indirect = self.aggregate(|i| self.jvp_lower_xy(i, &p, &w, &Batch::Exact))?;
        Ok(direct - indirect)
    }

    fn objective(&self, x: &Vector, warm: Option<&Vector>) -> Result<f64> {
        let y = self.solve_lower(x, warm)?;
        let p = Point::new(x.clone(), y);
        let mut total = 0.0;
        for i in 0..self.clients.len() {
            total += self.upper_value(i, &p)?;
        }
        Ok(total / self.clients.len() as f64)
    }

    fn test_metric(&self, x: &Vector, y: &Vector) -> Option<f64> {
        if x.len() != self.dims().d1 || y.len() != self.dims().d2 || self.test.is_empty() {
            return None;
        }
        let (e, w) = (self.embed(x), self.head(y));
        let correct = self
            .test
            .iter()
            .filter(|s| (&w * (&e * &s.features)).imax() == s.label)
            .count();
        Some(correct as f64 / self.test.len() as f64)
    }
}
