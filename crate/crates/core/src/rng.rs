//! Keyed random streams.
//!
//! Every random draw in a run comes from a stream identified by a seed and a
//! lane `(client, purpose, outer, inner)`. Streams for distinct lanes are
//! seeded from a SplitMix64 hash of the lane, so client work can be evaluated
//! in any order (or in parallel) and still reproduce bit-identical results.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. Distinct purposes never share samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    /// Client selection for an outer iteration or a HessIV round.
    Participation = 1,
    /// Draw of the AggITD start index `Q`.
    QDraw = 2,
    /// Draw of the Neumann truncation `T'`.
    TruncationDraw = 3,
    /// Mini-batch for the aggregated lower gradient `q_i^t`.
    LowerGrad = 4,
    /// Mini-batches of the local lower steps inside One-Round-Lower.
    LowerLocal = 5,
    /// Mini-batch for the upper y-gradient (`r_i^Q`, `p_0`).
    UpperGradY = 6,
    /// Mini-batch for lower Hessian-vector products.
    Hvp = 7,
    /// Fresh samples `xi_i` for the direct hypergradient part.
    Direct = 8,
    /// Samples `chi_i` for the mixed partial product.
    Mixed = 9,
    /// Mini-batches of the local upper steps inside One-Round-Upper.
    UpperLocal = 10,
    /// Anything test or verification code needs.
    Auxiliary = 11,
}

/// Position of a stream inside a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Lane {
    pub client: u64,
    pub purpose: Purpose,
    pub outer: u64,
    pub inner: u64,
}

impl Lane {
    pub fn new(client: u64, purpose: Purpose, outer: u64, inner: u64) -> Self {
        Self {
            client,
            purpose,
            outer,
            inner,
        }
    }
}

/// Client id used for driver-side draws (Q, participation).
pub const DRIVER: u64 = u64::MAX;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lane_key(seed: u64, lane: &Lane) -> [u8; 32] {
    let mut state = seed;
    let mut acc = splitmix(&mut state);
    for word in [lane.client, lane.purpose as u64, lane.outer, lane.inner] {
        state ^= word.wrapping_add(acc);
        acc = splitmix(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    key
}

/// A deterministic random stream for one lane.
pub struct RngStream {
    rng: ChaCha8Rng,
    draws: Option<Arc<AtomicU64>>,
}

impl RngStream {
    pub fn new(seed: u64, lane: Lane) -> Self {
        Self {
            rng: ChaCha8Rng::from_seed(lane_key(seed, &lane)),
            draws: None,
        }
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Count `n` consumed oracle samples against the run's audit counter.
    pub fn record_samples(&self, n: u64) {
        if let Some(c) = &self.draws {
            c.fetch_add(n, Ordering::Relaxed);
        }
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Factory for the streams of one run at one outer iteration.
///
/// Clones share the sample audit counter.
#[derive(Clone, Debug)]
pub struct Streams {
    seed: u64,
    outer: u64,
    draws: Arc<AtomicU64>,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            outer: 0,
            draws: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn outer(&self) -> u64 {
        self.outer
    }

    /// Same seed and audit counter, positioned at outer iteration `k`.
    pub fn at_outer(&self, k: u64) -> Self {
        Self {
            seed: self.seed,
            outer: k,
            draws: Arc::clone(&self.draws),
        }
    }

    pub fn stream(&self, client: u64, purpose: Purpose, inner: u64) -> RngStream {
        let mut s = RngStream::new(
            self.seed,
            Lane {
                client,
                purpose,
                outer: self.outer,
                inner,
            },
        );
        s.draws = Some(Arc::clone(&self.draws));
        s
    }

    /// Total oracle samples drawn through streams created by this factory.
    pub fn samples_drawn(&self) -> u64 {
        self.draws.load(Ordering::Relaxed)
    }
}
