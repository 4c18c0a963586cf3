use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Sample;
use crate::error::{Error, Result};

pub const MIN_SPLIT_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("split fractions must lie in [0, 1], got {fracs:?}")));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {fracs:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded shuffle, then floor-sized validation and test parts; the remainder
/// goes to training. Each part is returned sorted by id.
pub fn split_corpus(samples: &[Sample], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n = samples.len();
    if n < MIN_SPLIT_SAMPLES {
        return Err(Error::Data(format!(
            "need at least {MIN_SPLIT_SAMPLES} samples to split, got {n}"
        )));
    }
    // the small offset keeps products like 0.1 · 30 from flooring one short
    let n_val = (n as f64 * spec.val_frac + 1e-9).floor() as usize;
    let n_test = (n as f64 * spec.test_frac + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let pick = |idx: &[usize]| {
        let mut v: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    };
    Ok(Split {
        val: pick(&order[..n_val]),
        test: pick(&order[n_val..n_val + n_test]),
        train: pick(&order[n_val + n_test..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn corpus(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("{i:05}"),
                image_path: format!("images/{i:05}.png").into(),
                mask_path: format!("masks/{i:05}.png").into(),
            })
            .collect()
    }

    fn sizes(s: &Split) -> (usize, usize, usize) {
        (s.train.len(), s.val.len(), s.test.len())
    }

    #[test]
    fn reference_sizes() {
        let spec = SplitSpec::default();
        assert_eq!(sizes(&split_corpus(&corpus(100), &spec).unwrap()), (80, 10, 10));
        assert_eq!(sizes(&split_corpus(&corpus(103), &spec).unwrap()), (83, 10, 10));
        assert_eq!(sizes(&split_corpus(&corpus(160), &spec).unwrap()), (128, 16, 16));
    }

    #[test]
    fn same_seed_same_membership() {
        let spec = SplitSpec { seed: 42, ..Default::default() };
        let c = corpus(57);
        assert_eq!(split_corpus(&c, &spec).unwrap(), split_corpus(&c, &spec).unwrap());
        let other = SplitSpec { seed: 43, ..Default::default() };
        assert_ne!(split_corpus(&c, &spec).unwrap(), split_corpus(&c, &other).unwrap());
    }

    #[test]
    fn rejects_small_corpora_and_bad_fractions() {
        assert!(matches!(split_corpus(&corpus(9), &SplitSpec::default()), Err(Error::Data(_))));
        let bad = SplitSpec { train_frac: 0.7, ..Default::default() };
        assert!(matches!(split_corpus(&corpus(20), &bad), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn disjoint_and_covering(n in 10usize..400, seed in any::<u64>()) {
            let c = corpus(n);
            let s = split_corpus(&c, &SplitSpec { seed, ..Default::default() }).unwrap();
            let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<BTreeSet<_>>();
            let (tr, va, te) = (ids(&s.train), ids(&s.val), ids(&s.test));
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            prop_assert_eq!(va.len(), n / 10);
            prop_assert_eq!(te.len(), n / 10);
        }
    }
}
