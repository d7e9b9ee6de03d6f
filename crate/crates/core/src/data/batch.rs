use super::Domain;
use crate::seed::rng_for;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Seeded per-epoch shuffle of `ids` cut into batches of `batch_size`. A
/// trailing batch with fewer than 2 samples is dropped.
pub fn batch_iter(ids: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(2);
    let mut order = ids.to_vec();
    order.shuffle(&mut rng_for(seed, "batch-order", epoch));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Fraction of ordered off-diagonal pairs in a batch sharing a scenario,
/// a location, or both.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub same_scenario: f64,
    pub same_location: f64,
    pub same_both: f64,
}

pub fn batch_composition(domains: &[Domain]) -> BatchComposition {
    let b = domains.len();
    if b < 2 {
        return BatchComposition::default();
    }
    let (mut ss, mut sl, mut sb) = (0usize, 0usize, 0usize);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let s = domains[i].scenario == domains[j].scenario;
            let l = domains[i].location == domains[j].location;
            ss += s as usize;
            sl += l as usize;
            sb += (s && l) as usize;
        }
    }
    let pairs = (b * (b - 1)) as f64;
    BatchComposition {
        same_scenario: ss as f64 / pairs,
        same_location: sl as f64 / pairs,
        same_both: sb as f64 / pairs,
    }
}
