//! Patient-level dataset splitting: every scan of a patient lands in the
//! same split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("cannot split an empty record set")]
    Empty,
    #[error("split ratios must sum to 1, got {0}")]
    BadRatios(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Patient → split map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub by_patient: HashMap<String, Split>,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
}

impl SplitAssignment {
    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        self.by_patient.get(patient_id).copied()
    }
}

/// Shuffle the unique patient ids with `seed` and cut at the cumulative
/// ratios (over patient counts). Records inherit their patient's split.
pub fn split_by_patient(
    patient_ids: impl IntoIterator<Item = String>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadRatios(sum));
    }
    let mut unique: Vec<String> = patient_ids.into_iter().collect();
    unique.sort();
    unique.dedup();
    if unique.is_empty() {
        return Err(SplitError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let n = unique.len();
    let n_train = (ratios.0 * n as f64).floor() as usize;
    let n_val = ((ratios.0 + ratios.1) * n as f64).floor() as usize - n_train;
    let mut by_patient = HashMap::with_capacity(n);
    for (i, pid) in unique.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        by_patient.insert(pid, split);
    }
    Ok(SplitAssignment {
        by_patient,
        seed,
        ratios,
    })
}
