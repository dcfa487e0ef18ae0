use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Domain, Label, VideoRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(CorpusError::BadRatios(format!(
                "every ratio must be positive, got {:?}",
                r
            )));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::BadRatios(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Largest-remainder apportionment of `n` by `ratios`.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for j in 0..3 {
        counts[j] = exact[j].floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for j in order {
        if left == 0 {
            break;
        }
        counts[j] += 1;
        left -= 1;
    }
    counts
}

/// Per-cell counts: floors of the exact shares, with the leftover units
/// handed out so that global totals hit the apportioned targets.
fn cell_counts(cells: &[usize], ratios: &[f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = cells.iter().sum();
    let targets = apportion(total, ratios);
    let mut counts: Vec<[usize; 3]> = Vec::with_capacity(cells.len());
    let mut fracs: Vec<[f64; 3]> = Vec::with_capacity(cells.len());
    let mut demand = targets;
    for &n in cells {
        let mut c = [0usize; 3];
        let mut f = [0.0; 3];
        for j in 0..3 {
            let e = ratios[j] * n as f64;
            c[j] = e.floor() as usize;
            f[j] = e - e.floor();
            demand[j] -= c[j].min(demand[j]);
        }
        counts.push(c);
        fracs.push(f);
    }
    // Cells with the most leftover units go first; each takes the splits with
    // the largest outstanding demand, at most one extra unit per split.
    let mut order: Vec<usize> = (0..cells.len()).collect();
    let extra = |i: usize, counts: &[[usize; 3]]| cells[i] - counts[i].iter().sum::<usize>();
    order.sort_by_key(|&i| (std::cmp::Reverse(extra(i, &counts)), i));
    for i in order {
        let mut k = extra(i, &counts);
        let mut js: Vec<usize> = (0..3).collect();
        js.sort_by(|&a, &b| {
            demand[b]
                .cmp(&demand[a])
                .then(fracs[i][b].partial_cmp(&fracs[i][a]).unwrap())
                .then(a.cmp(&b))
        });
        for j in js {
            if k == 0 {
                break;
            }
            counts[i][j] += 1;
            demand[j] = demand[j].saturating_sub(1);
            k -= 1;
        }
    }
    counts
}

/// Stratified train/val/test split over (label, domain) cells.
///
/// Output keeps corpus order within each part.
pub fn split(
    corpus: &[VideoRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<VideoRecord>, Vec<VideoRecord>, Vec<VideoRecord>), CorpusError> {
    ratios.validate()?;
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut cells: BTreeMap<(Label, Domain), Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.iter().enumerate() {
        cells.entry((r.label, r.domain)).or_default().push(i);
    }
    let sizes: Vec<usize> = cells.values().map(Vec::len).collect();
    let counts = cell_counts(&sizes, &ratios.as_array());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part = vec![0u8; corpus.len()];
    for (members, c) in cells.values_mut().zip(&counts) {
        members.shuffle(&mut rng);
        for (pos, &idx) in members.iter().enumerate() {
            part[idx] = if pos < c[0] {
                0
            } else if pos < c[0] + c[1] {
                1
            } else {
                2
            };
        }
    }
    let pick = |p: u8| -> Vec<VideoRecord> {
        corpus
            .iter()
            .zip(&part)
            .filter(|(_, &q)| q == p)
            .map(|(r, _)| r.clone())
            .collect()
    };
    Ok((pick(0), pick(1), pick(2)))
}

/// Train on every domain except `target`, test on `target`.
pub fn lodo_split(
    corpus: &[VideoRecord],
    target: Domain,
) -> Result<(Vec<VideoRecord>, Vec<VideoRecord>), CorpusError> {
    let (test, train): (Vec<_>, Vec<_>) = corpus.iter().cloned().partition(|r| r.domain == target);
    if test.is_empty() {
        return Err(CorpusError::DomainAbsent(target));
    }
    if train.is_empty() {
        return Err(CorpusError::NoSourceDomain(target));
    }
    assert!(train.iter().all(|r| r.domain != target));
    Ok((train, test))
}
