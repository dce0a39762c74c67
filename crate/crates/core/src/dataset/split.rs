use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub test_fraction: f64,
}

impl DatasetSplit {
    pub fn is_test(&self, id: &str) -> bool {
        self.test.iter().any(|t| t == id)
    }
}

/// Seeded shuffle, then the first `round(n · test_fraction)` ids (at least
/// one, at most `n - 1`) become the test split. Both lists keep the dataset's original order.
pub fn split(trajs: &[Trajectory], test_fraction: f64, seed: u64) -> Result<DatasetSplit, DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::BadFraction(test_fraction));
    }
    let n = trajs.len();
    if n < 2 {
        return Err(DatasetError::TooFewToSplit(n));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (t, &held_out) in trajs.iter().zip(&is_test) {
        if held_out {
            test.push(t.id.clone());
        } else {
            train.push(t.id.clone());
        }
    }
    Ok(DatasetSplit { train, test, seed, test_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, HashSet};

    fn dummy(n: usize) -> Vec<Trajectory> {
        (0..n).map(|i| Trajectory { id: format!("t{i:03}"), frames: Vec::new(), metadata: BTreeMap::new() }).collect()
    }

    #[test]
    fn hundred_at_twenty_percent() {
        let s = split(&dummy(100), 0.2, 5).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
        let train: HashSet<_> = s.train.iter().collect();
        assert!(s.test.iter().all(|id| !train.contains(id)));
        assert_eq!(train.len() + s.test.len(), 100);
    }

    #[test]
    fn deterministic_per_seed() {
        let trajs = dummy(30);
        assert_eq!(split(&trajs, 0.3, 1).unwrap(), split(&trajs, 0.3, 1).unwrap());
        assert_ne!(split(&trajs, 0.3, 1).unwrap().test, split(&trajs, 0.3, 2).unwrap().test);
    }

    #[test]
    fn fraction_bounds() {
        let trajs = dummy(10);
        assert!(matches!(split(&trajs, 0.0, 0), Err(DatasetError::BadFraction(_))));
        assert!(matches!(split(&trajs, 1.0, 0), Err(DatasetError::BadFraction(_))));
        assert!(split(&trajs, f64::NAN, 0).is_err());
        assert!(matches!(split(&dummy(1), 0.5, 0), Err(DatasetError::TooFewToSplit(1))));
        assert_eq!(split(&trajs, 0.01, 0).unwrap().test.len(), 1);
    }
}
