use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Patient-level train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl SplitAssignment {
    pub fn partition_of(&self, patient: &str) -> Option<Partition> {
        let has = |v: &[String]| v.iter().any(|p| p == patient);
        if has(&self.train) {
            Some(Partition::Train)
        } else if has(&self.valid) {
            Some(Partition::Valid)
        } else if has(&self.test) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    pub fn patients(&self, part: Partition) -> &[String] {
        match part {
            Partition::Train => &self.train,
            Partition::Valid => &self.valid,
            Partition::Test => &self.test,
        }
    }
}

/// Partition sizes for `n` items under `ratios`.
///
/// Floors of the proportional shares first; the remainder is handed out one at a time,
/// cycling over partitions in order of decreasing fractional share. A partition with a
/// non-zero ratio that still ends up empty takes one item from the largest partition.
pub fn partition_sizes(n: usize, ratios: &[f64]) -> Result<Vec<usize>, PipelineError> {
    if ratios.is_empty() || ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(PipelineError::Argument(format!("invalid split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let nonzero = ratios.iter().filter(|&&r| r > 0.0).count();
    if total <= 0.0 {
        return Err(PipelineError::Argument("split ratios sum to zero".into()));
    }
    if n < nonzero {
        return Err(PipelineError::Argument(format!(
            "{n} patient(s) cannot fill {nonzero} non-empty partition(s)"
        )));
    }
    let shares: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut sizes: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).filter(|&i| ratios[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remainder = n - sizes.iter().sum::<usize>();
    let mut k = 0;
    while remainder > 0 {
        sizes[order[k % order.len()]] += 1;
        remainder -= 1;
        k += 1;
    }
    for i in 0..sizes.len() {
        if ratios[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..sizes.len()).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap_or(0);
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    Ok(sizes)
}

/// Seeded shuffle of the distinct patient ids, then contiguous train/valid/test blocks.
pub fn split_patients(patient_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment, PipelineError> {
    let mut ids: Vec<String> = patient_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let sizes = partition_sizes(ids.len(), &ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let valid_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    Ok(SplitAssignment {
        seed,
        train: ids[..valid_start].to_vec(),
        valid: ids[valid_start..test_start].to_vec(),
        test: ids[test_start..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn paper_ratios() {
        let s = split_patients(&ids(10), [8.0, 1.0, 1.0], 7).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        let s = split_patients(&ids(5), [3.0, 1.0, 1.0], 7).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (3, 1, 1));
    }

    #[test]
    fn deterministic_and_order_independent() {
        let a = split_patients(&ids(40), [8.0, 1.0, 1.0], 42).unwrap();
        let mut rev = ids(40);
        rev.reverse();
        let b = split_patients(&rev, [8.0, 1.0, 1.0], 42).unwrap();
        assert_eq!(a, b);
        let c = split_patients(&ids(40), [8.0, 1.0, 1.0], 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn remainder_keeps_small_partitions_alive() {
        assert_eq!(partition_sizes(7, &[8.0, 1.0, 1.0]).unwrap(), vec![5, 1, 1]);
        assert_eq!(partition_sizes(3, &[8.0, 1.0, 1.0]).unwrap(), vec![1, 1, 1]);
        assert_eq!(partition_sizes(11, &[8.0, 1.0, 1.0]).unwrap(), vec![9, 1, 1]);
        assert_eq!(partition_sizes(4, &[1.0, 0.0, 1.0]).unwrap(), vec![2, 0, 2]);
    }

    #[test]
    fn too_few_patients() {
        assert!(split_patients(&ids(2), [8.0, 1.0, 1.0], 0).is_err());
        assert!(partition_sizes(5, &[0.0, 0.0, 0.0]).is_err());
        assert!(partition_sizes(5, &[-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn membership_lookup() {
        let s = split_patients(&ids(10), [8.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(s.partition_of(&s.valid[0]), Some(Partition::Valid));
        assert_eq!(s.partition_of("nobody"), None);
    }
}
