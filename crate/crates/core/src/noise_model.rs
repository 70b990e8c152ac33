//! Label-noise transition kernels and seeded noise injection.
//!
//! A kernel is a global C x C row-stochastic matrix together with the set of
//! classes it may emit. Globalized noise uses one kernel over all classes;
//! localized noise builds a per-client kernel restricted to the client's
//! label support, so a corrupted label never leaves the classes the client
//! actually holds. Rows outside the support are identity so every row stays
//! a probability vector.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFlavor {
    Symmetric,
    Pairflip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePattern {
    /// One kernel over all classes, shared by every client.
    Globalized,
    /// Per-client kernels restricted to the client's label support.
    Localized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub flavor: NoiseFlavor,
    pub pattern: NoisePattern,
    pub rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            flavor: NoiseFlavor::Symmetric,
            pattern: NoisePattern::Globalized,
            rate: 0.4,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.rate.is_finite() || self.rate < 0.0 || self.rate >= 1.0 {
            return Err(Error::validation(
                "noise.rate",
                format!("must be in [0, 1), got {}", self.rate),
            ));
        }
        if self.flavor == NoiseFlavor::Pairflip && self.rate >= 0.5 {
            return Err(Error::validation(
                "noise.rate",
                format!(
                    "pairflip rate must stay below 0.5 so the true class remains the row mode, got {}",
                    self.rate
                ),
            ));
        }
        Ok(())
    }

    pub fn build_kernel(&self, num_classes: usize, support: &[usize]) -> Result<TransitionKernel> {
        match self.flavor {
            NoiseFlavor::Symmetric => build_symmetric_kernel(num_classes, support, self.rate),
            NoiseFlavor::Pairflip => build_pairflip_kernel(num_classes, support, self.rate),
        }
    }
}

/// Row-stochastic C x C matrix of flip probabilities plus the classes it may
/// emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionKernel {
    matrix: Vec<Vec<f64>>,
    support: Vec<usize>,
}

impl TransitionKernel {
    pub fn num_classes(&self) -> usize {
        self.matrix.len()
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.matrix[class]
    }

    pub fn probability(&self, from: usize, to: usize) -> f64 {
        self.matrix[from][to]
    }
}

fn validate_kernel_args(num_classes: usize, classes: &[usize], rate: f64) -> Result<Vec<usize>> {
    if !rate.is_finite() || rate < 0.0 || rate >= 1.0 {
        return Err(Error::invalid_parameter(
            "rate",
            format!("must be in [0, 1), got {rate}"),
        ));
    }
    let mut support: Vec<usize> = classes.to_vec();
    support.sort_unstable();
    support.dedup();
    if support.len() != classes.len() {
        return Err(Error::invalid_parameter(
            "classes",
            "admissible class set contains duplicates",
        ));
    }
    if support.is_empty() {
        return Err(Error::invalid_parameter("classes", "admissible class set is empty"));
    }
    if support.len() < 2 && rate > 0.0 {
        return Err(Error::invalid_parameter(
            "classes",
            "a singleton class set leaves no admissible flip target",
        ));
    }
    if let Some(&max) = support.last() {
        if max >= num_classes {
            return Err(Error::invalid_parameter(
                "classes",
                format!("class {max} out of range for {num_classes} classes"),
            ));
        }
    }
    Ok(support)
}

/// Keep mass 1 - rate on the diagonal and spread `rate` evenly over the other
/// admissible classes. Rows outside the support are identity.
pub fn build_symmetric_kernel(
    num_classes: usize,
    classes: &[usize],
    rate: f64,
) -> Result<TransitionKernel> {
    let support = validate_kernel_args(num_classes, classes, rate)?;
    let mut matrix = identity_matrix(num_classes);
    if rate > 0.0 {
        let off = rate / (support.len() - 1) as f64;
        for &from in &support {
            for &to in &support {
                matrix[from][to] = if from == to { 1.0 - rate } else { off };
            }
        }
    }
    Ok(TransitionKernel { matrix, support })
}

/// Keep mass 1 - rate on the diagonal and put `rate` on the cyclic successor
/// within the sorted admissible class set.
pub fn build_pairflip_kernel(
    num_classes: usize,
    classes: &[usize],
    rate: f64,
) -> Result<TransitionKernel> {
    if rate >= 0.5 {
        return Err(Error::invalid_parameter(
            "rate",
            format!("pairflip rate must be below 0.5, got {rate}"),
        ));
    }
    let support = validate_kernel_args(num_classes, classes, rate)?;
    let mut matrix = identity_matrix(num_classes);
    if rate > 0.0 {
        for (i, &from) in support.iter().enumerate() {
            let partner = support[(i + 1) % support.len()];
            matrix[from][from] = 1.0 - rate;
            matrix[from][partner] = rate;
        }
    }
    Ok(TransitionKernel { matrix, support })
}

fn identity_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            row
        })
        .collect()
}

/// Ground-truth record of one shard's corruption. Only evaluation code may
/// consult `is_noisy_true`; the training path sees observed labels alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub true_labels: Vec<usize>,
    pub observed_labels: Vec<usize>,
    pub is_noisy_true: Vec<bool>,
}

impl CorruptionRecord {
    pub fn noisy_fraction(&self) -> f64 {
        if self.is_noisy_true.is_empty() {
            return 0.0;
        }
        self.is_noisy_true.iter().filter(|n| **n).count() as f64 / self.is_noisy_true.len() as f64
    }

    pub fn clean_mask(&self) -> Vec<bool> {
        self.is_noisy_true.iter().map(|n| !n).collect()
    }
}

/// Draw each observed label independently from its kernel row via inverse-CDF
/// sampling; deterministic given the seed.
pub fn inject_noise(
    labels: &[usize],
    kernel: &TransitionKernel,
    rng_seed: u64,
) -> Result<CorruptionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut observed = Vec::with_capacity(labels.len());
    for &label in labels {
        if label >= kernel.num_classes() || !kernel.support.contains(&label) {
            return Err(Error::invalid_parameter(
                "labels",
                format!("label {label} outside the kernel's row support"),
            ));
        }
        let row = kernel.row(label);
        let draw: f64 = rng.gen();
        let mut cumulative = 0.0;
        let mut picked = label;
        for (class, p) in row.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                picked = class;
                break;
            }
        }
        observed.push(picked);
    }
    let is_noisy_true: Vec<bool> = labels
        .iter()
        .zip(&observed)
        .map(|(t, o)| t != o)
        .collect();
    Ok(CorruptionRecord {
        true_labels: labels.to_vec(),
        observed_labels: observed,
        is_noisy_true,
    })
}

/// Corruption export: sample_id, y_true, y_obs, is_noisy.
pub fn write_corruption_csv<W: std::io::Write>(
    writer: &mut W,
    sample_ids: &[u64],
    record: &CorruptionRecord,
) -> Result<()> {
    writeln!(writer, "sample_id,y_true,y_obs,is_noisy")?;
    for i in 0..sample_ids.len() {
        writeln!(
            writer,
            "{},{},{},{}",
            sample_ids[i], record.true_labels[i], record.observed_labels[i], record.is_noisy_true[i]
        )?;
    }
    Ok(())
}
