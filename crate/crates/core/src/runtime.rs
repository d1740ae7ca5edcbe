//! Simulated server/client exchanges and the communication ledger.
//!
//! A communication round is one aggregate-and-broadcast exchange: the
//! participating clients upload payloads, the server averages them and
//! broadcasts the result. Several vectors uploaded in the same exchange
//! (piggybacking) still cost one round.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean_of, Vector};
use crate::rng::{Purpose, Streams, DRIVER};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds_total: u64,
    pub rounds_this_outer: u64,
    pub loops_this_outer: u64,
    /// Uploaded plus broadcast scalars, summed over all rounds.
    pub scalars_sent: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reset the per-outer counters.
    pub fn begin_outer(&mut self) {
        self.rounds_this_outer = 0;
        self.loops_this_outer = 0;
    }

    /// Mark the start of a communication loop (a sequence of dependent rounds).
    pub fn open_loop(&mut self) {
        self.loops_this_outer += 1;
    }

    fn charge(&mut self, uploaded: u64, broadcast: u64) {
        self.rounds_total += 1;
        self.rounds_this_outer += 1;
        self.scalars_sent += uploaded + broadcast;
    }
}

/// Average one payload per participating client in a single round.
pub fn aggregate_mean(payloads: &[Vector], ledger: &mut CommLedger) -> Result<Vector> {
    let mut out = aggregate_piggybacked(&[payloads], ledger)?;
    Ok(out.remove(0))
}

/// Average several payload groups uploaded together; costs one round.
///
/// Every group holds one vector per participating client; all groups must
/// come from the same (nonempty) participant set.
pub fn aggregate_piggybacked(groups: &[&[Vector]], ledger: &mut CommLedger) -> Result<Vec<Vector>> {
    let participants = groups.first().map(|g| g.len()).unwrap_or(0);
    if participants == 0 {
        return Err(Error::Protocol("aggregation over an empty participant set".into()));
    }
    let mut uploaded = 0u64;
    let mut broadcast = 0u64;
    let mut means = Vec::with_capacity(groups.len());
    for group in groups {
        if group.len() != participants {
            return Err(Error::Protocol(format!(
                "piggybacked payload groups disagree on participants ({} vs {participants})",
                group.len()
            )));
        }
        let dim = group[0].len();
        if let Some(bad) = group.iter().find(|v| v.len() != dim) {
            return Err(Error::Dimension {
                what: "payload",
                expected: dim,
                got: bad.len(),
            });
        }
        uploaded += (dim * participants) as u64;
        broadcast += (dim * participants) as u64;
        means.push(mean_of(group).expect("nonempty group"));
    }
    ledger.charge(uploaded, broadcast);
    Ok(means)
}

/// Client participation ratio `C` in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Participation {
    pub ratio: f64,
}

impl Default for Participation {
    fn default() -> Self {
        Self { ratio: 1.0 }
    }
}

impl Participation {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::param("participation", format!("ratio must lie in (0, 1], got {ratio}")));
        }
        Ok(Self { ratio })
    }

    /// `max(1, round(C m))`.
    pub fn count(&self, m: usize) -> usize {
        ((self.ratio * m as f64).round() as usize).clamp(1, m.max(1))
    }
}

/// Uniform selection without replacement, returned in ascending id order.
///
/// `inner` distinguishes several selections within one outer iteration.
pub fn select_participants(participation: Participation, m: usize, streams: &Streams, inner: u64) -> Vec<usize> {
    let k = participation.count(m);
    if k >= m {
        return (0..m).collect();
    }
    let mut stream = streams.stream(DRIVER, Purpose::Participation, inner);
    let mut ids = sample(stream.rng_mut(), m, k).into_vec();
    ids.sort_unstable();
    ids
}
