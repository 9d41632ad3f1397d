use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledImageSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.70, 0.15, 0.15],
            seed: 0,
            stratify: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be in [0, 1] and sum to 1",
                self.ratios
            )));
        }
        Ok(())
    }

    /// Train and validation sizes for `n` rows; test takes the remainder.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let train = (self.ratios[0] * n as f64 + 1e-9).floor() as usize;
        let val = ((self.ratios[1] * n as f64 + 1e-9).floor() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

/// Splits `total` items across groups of sizes `groups` by largest remainder.
fn apportion(total: usize, groups: &[usize]) -> Vec<usize> {
    let n: usize = groups.iter().sum();
    if n == 0 {
        return vec![0; groups.len()];
    }
    let quotas: Vec<f64> = groups.iter().map(|&g| total as f64 * g as f64 / n as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[i] < groups[i] {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Index sets for train, validation and test, each sorted ascending.
pub fn split_indices(labels: &[u8], spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    let n = labels.len();
    if spec.stratify && n < 10 {
        return Err(Error::Config(format!("stratified split needs at least 10 rows, got {n}")));
    }
    let sizes = spec.sizes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratify {
        let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        (0..classes)
            .map(|c| (0..n).filter(|&i| labels[i] as usize == c).collect())
            .collect()
    } else {
        vec![(0..n).collect()]
    };
    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let train = apportion(sizes[0], &counts);
    let rest: Vec<usize> = counts.iter().zip(&train).map(|(c, t)| c - t).collect();
    let val = apportion(sizes[1], &rest);

    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (g, mut idx) in groups.into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let (a, b) = (train[g], train[g] + val[g]);
        out[0].extend_from_slice(&idx[..a]);
        out[1].extend_from_slice(&idx[a..b]);
        out[2].extend_from_slice(&idx[b..]);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Deterministic train / validation / test split of `set`.
pub fn split(set: &LabeledImageSet, spec: &SplitSpec) -> Result<(LabeledImageSet, LabeledImageSet, LabeledImageSet)> {
    let [a, b, c] = split_indices(set.labels(), spec)?;
    let part = |idx: &[usize]| -> Result<LabeledImageSet> {
        if idx.is_empty() {
            return Err(Error::EmptyDataset(format!("{} split part is empty", set.domain_id)));
        }
        set.subset(idx)
    };
    Ok((part(&a)?, part(&b)?, part(&c)?))
}
