//! Synthetic two-modality graphs from a stochastic block model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphprep::{FeatureMatrix, Modality};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Expected distance between two class means, text modality.
    pub mu_text: f64,
    pub mu_visual: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 200,
            classes: 4,
            d_t: 32,
            d_v: 32,
            p_in: 0.1,
            p_out: 0.01,
            mu_text: 3.0,
            mu_visual: 3.0,
            sigma: 1.0,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::input("classes", format!("need at least 2, got {}", self.classes)));
        }
        if self.n < self.classes {
            return Err(Error::input("n", format!("{} nodes for {} classes", self.n, self.classes)));
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return Err(Error::input(
                "p_in",
                format!("need 0 <= p_out <= p_in <= 1, got p_out={} p_in={}", self.p_out, self.p_in),
            ));
        }
        if self.d_t == 0 || self.d_v == 0 {
            return Err(Error::input("d_t", "feature widths must be positive"));
        }
        for (field, v) in [("sigma", self.sigma), ("mu_text", self.mu_text), ("mu_visual", self.mu_visual)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::input(field, format!("{v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub edges: Vec<(usize, usize)>,
    pub x_t: FeatureMatrix,
    pub x_v: FeatureMatrix,
    pub labels: Vec<i64>,
}

/// Balanced labels in random order.
fn balanced_labels<R: Rng>(rng: &mut R, n: usize, c: usize) -> Vec<i64> {
    let mut labels: Vec<i64> = (0..n).map(|i| (i % c) as i64).collect();
    labels.shuffle(rng);
    labels
}

fn class_means<R: Rng>(rng: &mut R, c: usize, d: usize, sep: f64) -> Vec<Vec<f64>> {
    // independent N(0, s²I) means sit sep apart on average when s = sep/√(2d)
    let s = sep / (2.0 * d as f64).sqrt();
    (0..c)
        .map(|_| (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn features<R: Rng>(
    rng: &mut R,
    labels: &[i64],
    means: &[Vec<f64>],
    sigma: f64,
    modality: Modality,
) -> Result<FeatureMatrix> {
    let d = means[0].len();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::input("sigma", e.to_string()))?;
    let mut data = Vec::with_capacity(labels.len() * d);
    for &y in labels {
        for &m in &means[y as usize] {
            data.push((m + noise.sample(rng)) as f32);
        }
    }
    FeatureMatrix::new(labels.len(), d, modality, data)
}

/// Draws a graph and both feature matrices. Same spec, same bytes.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = balanced_labels(&mut rng, spec.n, spec.classes);
    let mut edges = Vec::new();
    for i in 0..spec.n {
        for j in i + 1..spec.n {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let means_t = class_means(&mut rng, spec.classes, spec.d_t, spec.mu_text);
    let means_v = class_means(&mut rng, spec.classes, spec.d_v, spec.mu_visual);
    let x_t = features(&mut rng, &labels, &means_t, spec.sigma, Modality::Text)?;
    let x_v = features(&mut rng, &labels, &means_v, spec.sigma, Modality::Visual)?;
    Ok(SynthData {
        edges,
        x_t,
        x_v,
        labels,
    })
}
