use rand::seq::SliceRandom;

use super::{DatasetError, Manifest, Split};
use crate::rng::{streams, SeededRng};

/// Target share for each split label. Labels not listed get zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFractions {
    shares: [f64; 4],
}

impl SplitFractions {
    pub fn new(pairs: &[(Split, f64)]) -> Result<Self, DatasetError> {
        let mut shares = [0.0; 4];
        for &(split, f) in pairs {
            if !f.is_finite() || !(0.0..=1.0).contains(&f) {
                return Err(DatasetError::Fractions(format!("{split} fraction {f} outside [0, 1]")));
            }
            shares[split_slot(split)] += f;
        }
        let sum: f64 = shares.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Fractions(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(Self { shares })
    }

    pub fn train_val(train: f64, val: f64) -> Result<Self, DatasetError> {
        Self::new(&[(Split::Train, train), (Split::Validation, val)])
    }

    pub fn get(&self, split: Split) -> f64 {
        self.shares[split_slot(split)]
    }
}

fn split_slot(split: Split) -> usize {
    Split::ALL.iter().position(|&s| s == split).unwrap()
}

/// Largest-remainder apportionment of `n` items over the four split labels,
/// in [`Split::ALL`] order. Equal remainders go to the earlier label.
pub fn apportion(n: usize, fractions: &SplitFractions) -> [usize; 4] {
    let mut counts = [0usize; 4];
    let mut remainders = [0.0f64; 4];
    for (i, &f) in fractions.shares.iter().enumerate() {
        let quota = n as f64 * f;
        let base = (quota + 1e-9).floor().max(0.0);
        counts[i] = base as usize;
        remainders[i] = (quota - base).max(0.0);
    }
    let assigned: usize = counts.iter().sum();
    let mut left = n.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..4).filter(|&i| fractions.shares[i] > 0.0).collect();
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assigns split labels to every `unassigned` entry, class by class.
///
/// Each class's pool is shuffled with a stream keyed by `(seed, class id)` and
/// cut into consecutive runs whose lengths come from [`apportion`]. Entries
/// that already carry a split keep it.
pub fn stratified_split(m: &Manifest, fractions: &SplitFractions, seed: u64) -> Result<Manifest, DatasetError> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); m.num_classes()];
    for (i, e) in m.in_split(Split::Unassigned) {
        pools[e.class_id].push(i);
    }
    if let Some(c) = pools.iter().position(Vec::is_empty) {
        return Err(DatasetError::EmptyClass(m.class_names()[c].clone()));
    }
    let base = SeededRng::new(seed, streams::SPLIT);
    let mut out = m.clone();
    for (class_id, mut pool) in pools.into_iter().enumerate() {
        let mut rng = base.child(class_id as u64);
        pool.shuffle(&mut rng);
        let counts = apportion(pool.len(), fractions);
        let mut members = pool.into_iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for idx in members.by_ref().take(count) {
                out.entries_mut()[idx].split = split;
            }
        }
    }
    out.stamp(format!(
        "stratified_split seed={seed} train={} validation={} test={} unassigned={}",
        fractions.get(Split::Train),
        fractions.get(Split::Validation),
        fractions.get(Split::Test),
        fractions.get(Split::Unassigned)
    ));
    Ok(out)
}
