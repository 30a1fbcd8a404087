use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Test-only, validation-only, shared test+validation, unrestricted.
pub const PAPER_PROPORTIONS: [f64; 4] = [0.2, 0.2, 0.1, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LabelSet {
    TestOnly,
    ValidationOnly,
    Shared,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPartition {
    pub set1: BTreeSet<String>,
    pub set2: BTreeSet<String>,
    pub set3: BTreeSet<String>,
    pub set4: BTreeSet<String>,
    pub seed: u64,
}

impl LabelPartition {
    pub fn set_of(&self, property: &str) -> Option<LabelSet> {
        if self.set1.contains(property) {
            Some(LabelSet::TestOnly)
        } else if self.set2.contains(property) {
            Some(LabelSet::ValidationOnly)
        } else if self.set3.contains(property) {
            Some(LabelSet::Shared)
        } else if self.set4.contains(property) {
            Some(LabelSet::Free)
        } else {
            None
        }
    }

    pub fn sizes(&self) -> [usize; 4] {
        [self.set1.len(), self.set2.len(), self.set3.len(), self.set4.len()]
    }
}

/// Splits the property universe into four disjoint label sets.
///
/// Sets 1–3 get `round(p·N)` properties each and set 4 takes the remainder.
/// The assignment is a seeded shuffle of the sorted universe.
pub fn partition_labels(properties: &BTreeSet<String>, proportions: [f64; 4], seed: u64) -> Result<LabelPartition> {
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config(format!(
            "label proportions {proportions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = properties.len();
    if n < 4 {
        return Err(Error::Data(format!("need at least 4 properties to partition, got {n}")));
    }
    let sizes: Vec<usize> = proportions[..3]
        .iter()
        .map(|p| (p * n as f64).round() as usize)
        .collect();
    let fixed: usize = sizes.iter().sum();
    if fixed > n {
        return Err(Error::Config(format!(
            "rounded label-set sizes {sizes:?} exceed the {n} available properties"
        )));
    }
    let mut order: Vec<String> = properties.iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = order.into_iter();
    let mut take = |k: usize| it.by_ref().take(k).collect::<BTreeSet<_>>();
    let set1 = take(sizes[0]);
    let set2 = take(sizes[1]);
    let set3 = take(sizes[2]);
    let set4 = take(n - fixed);
    Ok(LabelPartition {
        set1,
        set2,
        set3,
        set4,
        seed,
    })
}
