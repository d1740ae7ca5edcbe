//! Client data partitioners.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream, DRIVER, Lane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionMode {
    /// Uniformly shuffled, near-equal split.
    Iid,
    /// Sort by label, cut into `shards_per_client * m` shards and deal
    /// `shards_per_client` random shards to every client.
    LabelSkew { shards_per_client: usize },
}

/// Split the dataset with the given `labels` across `m` clients.
///
/// The returned index lists are disjoint and together cover `0..labels.len()`.
pub fn partition(labels: &[usize], mode: PartitionMode, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if m == 0 || m > n {
        return Err(Error::param(
            "m",
            format!("need 1 <= m <= dataset size ({n}), got {m}"),
        ));
    }
    let mut stream = RngStream::new(
        seed,
        Lane {
            client: DRIVER,
            purpose: Purpose::Auxiliary,
            outer: 0,
            inner: 0,
        },
    );
    match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(stream.rng_mut());
            Ok(split_even(&idx, m))
        }
        PartitionMode::LabelSkew { shards_per_client } => {
            let shards = shards_per_client * m;
            if shards_per_client == 0 || shards > n {
                return Err(Error::param(
                    "shards_per_client",
                    format!("{shards_per_client} shards x {m} clients exceeds the {n} available points"),
                ));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| (labels[i], i));
            let pieces = split_even(&idx, shards);
            let mut order: Vec<usize> = (0..shards).collect();
            order.shuffle(stream.rng_mut());
            Ok(order
                .chunks(shards_per_client)
                .map(|owned| {
                    let mut v: Vec<usize> = owned.iter().flat_map(|&s| pieces[s].iter().copied()).collect();
                    v.sort_unstable();
                    v
                })
                .collect())
        }
    }
}

fn split_even(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    (0..parts)
        .map(|p| items[p * n / parts..(p + 1) * n / parts].to_vec())
        .collect()
}
