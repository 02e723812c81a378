//! Datasets: synthetic covariate-shift generators, IDX ingestion, seeded
//! splits, stratified label subsampling and the CSV interchange format.

mod csvio;
mod idx;
mod synthetic;

pub use csvio::{read_labeled_csv, read_unlabeled_csv, write_labeled_csv, write_unlabeled_csv};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IdxData, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{corrupt, generate_shifted, Generator, ShiftSpec, ShiftedData};

use rand::seq::SliceRandom;

use crate::assigner::apportion;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Labeled examples `(x_i, y_i)`. `x` is `None` when the set is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Option<Tensor>,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

/// Unlabeled examples `x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub x: Option<Tensor>,
}

impl LabeledSet {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = x.dims2()?;
        if n != y.len() {
            return Err(Error::Dimension {
                op: "labeled set",
                left: x.shape().to_vec(),
                right: vec![y.len()],
            });
        }
        if let Some(bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range 0..{num_classes}"
            )));
        }
        Ok(Self {
            x: Some(x),
            y,
            num_classes,
        })
    }

    pub fn empty(num_classes: usize) -> Self {
        Self {
            x: None,
            y: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.x.as_ref().map(|x| x.shape()[1])
    }

    /// Inputs of a nonempty set.
    pub fn inputs(&self) -> Result<&Tensor> {
        self.x.as_ref().ok_or_else(|| Error::contract("empty labeled set"))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Ok(Self::empty(self.num_classes));
        }
        let x = self.inputs()?.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Self::new(x, y, self.num_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet { x: self.x.clone() }
    }
}

impl UnlabeledSet {
    pub fn new(x: Tensor) -> Result<Self> {
        x.dims2()?;
        Ok(Self { x: Some(x) })
    }

    pub fn empty() -> Self {
        Self { x: None }
    }

    pub fn len(&self) -> usize {
        self.x.as_ref().map_or(0, |x| x.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> Result<&Tensor> {
        self.x.as_ref().ok_or_else(|| Error::contract("empty unlabeled set"))
    }
}

/// Keeps `floor(n·fraction)` examples, stratified by class with per-class
/// largest-remainder rounding, sampled without replacement. Survivors keep
/// their original relative order.
pub fn subsample_labels(set: &LabeledSet, fraction: f64, seed: u64) -> Result<LabeledSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let n = set.len();
    // 1e-9 guards exact products such as 0.95·20 against rounding below.
    let keep = (n as f64 * fraction + 1e-9).floor() as usize;
    if keep == 0 {
        return Err(Error::contract(format!(
            "fraction {fraction} of {n} examples keeps nothing"
        )));
    }
    let counts = set.class_counts();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let quotas = apportion(&weights, keep);

    let mut rng = rng::seeded(seed);
    let mut chosen = Vec::with_capacity(keep);
    for (class, &quota) in quotas.iter().enumerate() {
        let mut members: Vec<usize> = (0..n).filter(|&i| set.y[i] == class).collect();
        members.shuffle(&mut rng);
        chosen.extend(members.into_iter().take(quota));
    }
    chosen.sort_unstable();
    set.subset(&chosen)
}

/// Seeded three-way partition (e.g. train/dev/test), sized by largest remainder.
pub fn split(
    set: &LabeledSet,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledSet, LabeledSet, LabeledSet)> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split ratios must sum to 1, got {r:?}")));
    }
    let sizes = apportion(&r, set.len());
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let (a, rest) = order.split_at(sizes[0]);
    let (b, c) = rest.split_at(sizes[1]);
    Ok((set.subset(a)?, set.subset(b)?, set.subset(c)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, ones: usize) -> LabeledSet {
        let rows: Vec<[f64; 1]> = (0..n).map(|i| [i as f64]).collect();
        let y = (0..n).map(|i| usize::from(i < ones)).collect();
        LabeledSet::new(Tensor::from_rows(&rows).unwrap(), y, 2).unwrap()
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let set = toy(100, 50);
        let (a, b, c) = split(&set, (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (70, 10, 20));
        let mut all: Vec<f64> = [a, b, c]
            .iter()
            .flat_map(|s| s.x.as_ref().unwrap().data().to_vec())
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..100).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(split(&set, (0.7, 0.1, 0.2), 1).unwrap(), split(&set, (0.7, 0.1, 0.2), 1).unwrap());
        assert!(split(&set, (0.7, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn subsample_keeps_floor_and_stratifies() {
        let set = toy(100, 30);
        let s = subsample_labels(&set, 0.8, 4).unwrap();
        assert_eq!(s.len(), 80);
        assert_eq!(s.class_counts(), vec![56, 24]);
        let full = subsample_labels(&set, 1.0, 4).unwrap();
        assert_eq!(full, set);
        assert!(subsample_labels(&set, 0.0, 4).is_err());
        assert!(subsample_labels(&set, 1.5, 4).is_err());
        assert!(subsample_labels(&toy(3, 1), 0.2, 4).is_err());
        let twenty = subsample_labels(&toy(20, 10), 0.95, 0).unwrap();
        assert_eq!(twenty.len(), 19);
    }

    #[test]
    fn subsample_never_duplicates() {
        let set = toy(57, 20);
        let s = subsample_labels(&set, 0.37, 9).unwrap();
        let mut xs: Vec<f64> = s.x.unwrap().data().to_vec();
        let before = xs.len();
        xs.dedup();
        assert_eq!(xs.len(), before);
    }
}
