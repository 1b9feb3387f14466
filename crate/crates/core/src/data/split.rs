use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ClassId;
use crate::error::{Error, Result};

/// Disjoint train / validation / test class sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaSplit {
    pub train: Vec<ClassId>,
    pub val: Vec<ClassId>,
    pub test: Vec<ClassId>,
}

#[derive(Clone, Debug)]
pub enum SplitRule {
    /// Relative sizes; `Ratios(64, 16, 20)` is the default.
    Ratios(u32, u32, u32),
    Explicit {
        train: Vec<ClassId>,
        val: Vec<ClassId>,
        test: Vec<ClassId>,
    },
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::Ratios(64, 16, 20)
    }
}

pub fn make_splits(classes: &[ClassId], rule: &SplitRule, seed: u64) -> Result<MetaSplit> {
    let all: BTreeSet<ClassId> = classes.iter().copied().collect();
    match rule {
        SplitRule::Ratios(a, b, c) => {
            let total = (a + b + c) as usize;
            let n = all.len();
            let n_train = n * *a as usize / total;
            let n_val = n * *b as usize / total;
            let n_test = n - n_train - n_val;
            if n_train == 0 || n_val == 0 || n_test == 0 {
                return Err(Error::InvalidParam(format!(
                    "{n} classes cannot fill a {a}/{b}/{c} split"
                )));
            }
            let mut shuffled: Vec<ClassId> = all.into_iter().collect();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let part = |range: std::ops::Range<usize>| {
                let mut v = shuffled[range].to_vec();
                v.sort();
                v
            };
            Ok(MetaSplit {
                train: part(0..n_train),
                val: part(n_train..n_train + n_val),
                test: part(n_train + n_val..n),
            })
        }
        SplitRule::Explicit { train, val, test } => {
            let mut seen = BTreeSet::new();
            for c in train.iter().chain(val).chain(test) {
                if !seen.insert(*c) {
                    return Err(Error::OverlappingSplit(c.0));
                }
            }
            if let Some(missing) = all.difference(&seen).next() {
                return Err(Error::InvalidParam(format!(
                    "split does not cover class {}",
                    missing.0
                )));
            }
            if let Some(extra) = seen.difference(&all).next() {
                return Err(Error::InvalidParam(format!("unknown class {}", extra.0)));
            }
            Ok(MetaSplit {
                train: train.clone(),
                val: val.clone(),
                test: test.clone(),
            })
        }
    }
}
