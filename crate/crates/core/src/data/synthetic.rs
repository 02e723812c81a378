use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledSet, UnlabeledSet};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Two interleaved half circles.
    TwoMoons,
    /// Two isotropic Gaussian blobs at `(-1, 0)` and `(1, 0)`.
    GaussianPair,
}

impl Generator {
    /// Point the target rotation is applied about.
    fn center(self) -> [f64; 2] {
        match self {
            Generator::TwoMoons => [0.5, 0.25],
            Generator::GaussianPair => [0.0, 0.0],
        }
    }
}

/// Recipe for a source/target pair under a rigid covariate shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub generator: Generator,
    pub rotation_deg: f64,
    #[serde(default = "zero2")]
    pub translation: Vec<f64>,
    pub noise_sigma: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_val: usize,
    #[serde(default)]
    pub n_test: usize,
    pub seed: u64,
}

fn zero2() -> Vec<f64> {
    vec![0.0, 0.0]
}

impl ShiftSpec {
    pub fn two_moons(rotation_deg: f64, seed: u64) -> Self {
        Self {
            generator: Generator::TwoMoons,
            rotation_deg,
            translation: zero2(),
            noise_sigma: 0.1,
            n_source: 200,
            n_target: 200,
            n_val: 50,
            n_test: 1000,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.translation.len() != 2 {
            return Err(Error::contract(format!(
                "translation must have 2 components, got {}",
                self.translation.len()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::contract("noise_sigma must be finite and >= 0"));
        }
        if !self.rotation_deg.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::contract("shift parameters must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedData {
    pub source: LabeledSet,
    /// Unlabeled target pool (true labels discarded).
    pub target: UnlabeledSet,
    /// Small labeled target set for model selection.
    pub target_val: LabeledSet,
    /// Labeled target set for final evaluation.
    pub target_test: LabeledSet,
}

/// Source from the base distribution; every target split is a fresh base draw
/// pushed through the same rotation + translation, labels preserved.
pub fn generate_shifted(spec: &ShiftSpec) -> Result<ShiftedData> {
    spec.validate()?;
    let draw = |n: usize, stream: u64, shifted: bool| -> Result<LabeledSet> {
        let mut rng = rng::seeded(derive_seed(spec.seed, stream));
        let (mut rows, labels) = base_sample(spec.generator, n, spec.noise_sigma, &mut rng)?;
        if shifted {
            transform(&mut rows, spec);
        }
        if n == 0 {
            return Ok(LabeledSet::empty(2));
        }
        LabeledSet::new(Tensor::from_rows(&rows)?, labels, 2)
    };
    Ok(ShiftedData {
        source: draw(spec.n_source, 1, false)?,
        target: draw(spec.n_target, 2, true)?.unlabeled(),
        target_val: draw(spec.n_val, 3, true)?,
        target_test: draw(spec.n_test, 4, true)?,
    })
}

/// Exactly balanced classes (class 0 takes the odd one), shuffled.
fn base_sample(
    generator: Generator,
    n: usize,
    sigma: f64,
    rng: &mut rng::Rng,
) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::contract(e.to_string()))?;
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n.div_ceil(2))).collect();
    labels.shuffle(rng);
    let rows = labels
        .iter()
        .map(|&y| {
            let [cx, cy] = match generator {
                Generator::TwoMoons => {
                    let t = rng.random_range(0.0..std::f64::consts::PI);
                    if y == 0 {
                        [t.cos(), t.sin()]
                    } else {
                        [1.0 - t.cos(), 0.5 - t.sin()]
                    }
                }
                Generator::GaussianPair => [if y == 0 { -1.0 } else { 1.0 }, 0.0],
            };
            [cx + noise.sample(rng), cy + noise.sample(rng)]
        })
        .collect();
    Ok((rows, labels))
}

fn transform(rows: &mut [[f64; 2]], spec: &ShiftSpec) {
    let (s, c) = spec.rotation_deg.to_radians().sin_cos();
    let [ox, oy] = spec.generator.center();
    for p in rows {
        let (dx, dy) = (p[0] - ox, p[1] - oy);
        p[0] = ox + c * dx - s * dy + spec.translation[0];
        p[1] = oy + s * dx + c * dy + spec.translation[1];
    }
}

/// Harder image-style shift stand-in: `clamp(1 − x + N(0, σ²), 0, 1)`.
pub fn corrupt(x: &Tensor, noise_sigma: f64, seed: u64) -> Result<Tensor> {
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::contract(e.to_string()))?;
    let mut rng = rng::seeded(seed);
    let data = x
        .data()
        .iter()
        .map(|v| (1.0 - v + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
