//! Synthetic data generation, Dirichlet non-IID partitioning, and the
//! two-view stochastic augmentation used by contrastive pretraining.
//!
//! Features for class c are drawn from an isotropic unit-variance Gaussian
//! around a class anchor; anchors are rejection-sampled until every pair is
//! at least `class_separation` apart. A held-out test set reuses the same
//! anchors through [`Dataset::resample`].

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: u64,
    pub features: Vec<f64>,
    pub true_label: usize,
    /// Equals `true_label` until noise injection rewrites it.
    pub observed_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Class anchors the features were sampled around; kept for evaluation
    /// oracles and for resampling a matching test set.
    pub anchors: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fresh samples around the same anchors (held-out split). Ids start at
    /// `id_offset` so train and test ids never collide.
    pub fn resample(&self, n_per_class: usize, id_offset: u64, rng_seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let samples = sample_around_anchors(&self.anchors, n_per_class, id_offset, &mut rng);
        Dataset {
            samples,
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            anchors: self.anchors.clone(),
        }
    }
}

const ANCHOR_ATTEMPTS: usize = 1000;

/// Deterministic synthetic classification data: `num_classes` anchors with
/// pairwise distance >= `class_separation`, unit-variance Gaussian features.
pub fn generate_synthetic(
    num_classes: usize,
    n_per_class: usize,
    input_dim: usize,
    class_separation: f64,
    rng_seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid_parameter(
            "num_classes",
            format!("need at least 2 classes, got {num_classes}"),
        ));
    }
    if n_per_class == 0 {
        return Err(Error::invalid_parameter("n_per_class", "must be at least 1"));
    }
    if input_dim < 2 {
        return Err(Error::InvalidDimension(input_dim));
    }
    if !class_separation.is_finite() || class_separation < 0.0 {
        return Err(Error::invalid_parameter(
            "class_separation",
            format!("must be non-negative, got {class_separation}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let anchor_scale = class_separation.max(1.0);
    let mut anchors: Option<Vec<Vec<f64>>> = None;
    for _ in 0..ANCHOR_ATTEMPTS {
        let candidate: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| {
                (0..input_dim)
                    .map(|_| anchor_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        if min_pairwise_distance(&candidate) >= class_separation {
            anchors = Some(candidate);
            break;
        }
    }
    let anchors = anchors.ok_or_else(|| {
        Error::invalid_parameter(
            "class_separation",
            format!("could not place {num_classes} anchors at separation {class_separation} in dimension {input_dim} after {ANCHOR_ATTEMPTS} attempts"),
        )
    })?;
    let samples = sample_around_anchors(&anchors, n_per_class, 0, &mut rng);
    Ok(Dataset {
        samples,
        num_classes,
        input_dim,
        anchors,
    })
}

fn sample_around_anchors(
    anchors: &[Vec<f64>],
    n_per_class: usize,
    id_offset: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let mut samples = Vec::with_capacity(anchors.len() * n_per_class);
    let mut next_id = id_offset;
    for (label, anchor) in anchors.iter().enumerate() {
        for _ in 0..n_per_class {
            let features: Vec<f64> = anchor
                .iter()
                .map(|a| a + rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample {
                sample_id: next_id,
                features,
                true_label: label,
                observed_label: label,
            });
            next_id += 1;
        }
    }
    samples
}

fn min_pairwise_distance(anchors: &[Vec<f64>]) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..anchors.len() {
        for j in (i + 1)..anchors.len() {
            let d2: f64 = anchors[i]
                .iter()
                .zip(&anchors[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            min = min.min(d2.sqrt());
        }
    }
    min
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    /// Classes present in the shard before corruption; localized noise may
    /// only emit labels from this set.
    pub label_support: BTreeSet<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn observed_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.observed_label).collect()
    }

    pub fn sample_ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.sample_id).collect()
    }
}

/// Split a dataset over `num_clients` shards with per-class client
/// proportions drawn from Dirichlet(alpha). Counts are realized by largest-
/// remainder rounding, so the partition is exhaustive and disjoint; clients
/// that end up empty take one sample from the currently largest shard.
pub fn dirichlet_partition(
    dataset: &Dataset,
    num_clients: usize,
    alpha: f64,
    rng_seed: u64,
) -> Result<Vec<ClientShard>> {
    if num_clients == 0 {
        return Err(Error::invalid_parameter("num_clients", "must be at least 1"));
    }
    if num_clients > dataset.len() {
        return Err(Error::TooFewPoints {
            needed: num_clients,
            got: dataset.len(),
        });
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::invalid_parameter(
            "alpha",
            format!("Dirichlet concentration must be positive, got {alpha}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| {
        Error::invalid_parameter("alpha", format!("invalid Dirichlet concentration: {e}"))
    })?;

    let mut assignments: Vec<Vec<&Sample>> = vec![Vec::new(); num_clients];
    for class in 0..dataset.num_classes {
        let mut members: Vec<&Sample> = dataset
            .samples
            .iter()
            .filter(|s| s.true_label == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let mut proportions: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = proportions.iter().sum();
        if total <= 0.0 {
            proportions = vec![1.0 / num_clients as f64; num_clients];
        } else {
            for p in &mut proportions {
                *p /= total;
            }
        }
        let counts = largest_remainder_counts(members.len(), &proportions);
        let mut cursor = 0;
        for (client, count) in counts.into_iter().enumerate() {
            assignments[client].extend(&members[cursor..cursor + count]);
            cursor += count;
        }
    }

    rebalance_empty_clients(&mut assignments);

    Ok(assignments
        .into_iter()
        .enumerate()
        .map(|(client_id, samples)| {
            let mut samples: Vec<Sample> = samples.into_iter().cloned().collect();
            samples.sort_by_key(|s| s.sample_id);
            let label_support = samples.iter().map(|s| s.true_label).collect();
            ClientShard {
                client_id,
                samples,
                label_support,
            }
        })
        .collect())
}

/// Integer counts summing to n, proportional to `proportions`; ties broken by
/// lower index for determinism.
fn largest_remainder_counts(n: usize, proportions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &idx in order.iter().take(n - assigned) {
        counts[idx] += 1;
    }
    counts
}

fn rebalance_empty_clients(assignments: &mut [Vec<&Sample>]) {
    loop {
        let Some(empty) = assignments.iter().position(|a| a.is_empty()) else {
            return;
        };
        let donor = assignments
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("at least one client");
        if assignments[donor].len() <= 1 {
            // nothing left to move; caller guaranteed n >= num_clients
            return;
        }
        let moved = assignments[donor].pop().expect("donor not empty");
        assignments[empty].push(moved);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub jitter_sigma: f64,
    pub mask_fraction: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            jitter_sigma: 0.1,
            mask_fraction: 0.2,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.jitter_sigma.is_finite() || self.jitter_sigma < 0.0 {
            return Err(Error::validation(
                "data.augment.jitter_sigma",
                format!("must be non-negative, got {}", self.jitter_sigma),
            ));
        }
        if !self.mask_fraction.is_finite() || !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::validation(
                "data.augment.mask_fraction",
                format!("must be in [0, 1), got {}", self.mask_fraction),
            ));
        }
        Ok(())
    }
}

/// Two stochastic views of one sample: Gaussian jitter plus zeroing of a
/// random coordinate subset. The views share the seed but consume the stream
/// sequentially, so they differ in their draws.
pub fn augment_two_views(
    x: &[f64],
    cfg: &AugmentationConfig,
    rng_seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let a = one_view(x, cfg, &mut rng);
    let b = one_view(x, cfg, &mut rng);
    (a, b)
}

fn one_view(x: &[f64], cfg: &AugmentationConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut view: Vec<f64> = if cfg.jitter_sigma > 0.0 {
        x.iter()
            .map(|v| v + cfg.jitter_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        x.to_vec()
    };
    let n_mask = (cfg.mask_fraction * x.len() as f64).round() as usize;
    if n_mask > 0 {
        let mut indices: Vec<usize> = (0..x.len()).collect();
        for i in 0..n_mask {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
            view[indices[i]] = 0.0;
        }
    }
    view
}

/// Partitioned-dataset export: sample_id, client_id, y_true, y_obs, features.
pub fn write_shards_csv<W: std::io::Write>(
    writer: &mut W,
    shards: &[ClientShard],
    input_dim: usize,
) -> Result<()> {
    write!(writer, "sample_id,client_id,y_true,y_obs")?;
    for d in 0..input_dim {
        write!(writer, ",f{d}")?;
    }
    writeln!(writer)?;
    for shard in shards {
        for s in &shard.samples {
            write!(
                writer,
                "{},{},{},{}",
                s.sample_id, shard.client_id, s.true_label, s.observed_label
            )?;
            for f in &s.features {
                write!(writer, ",{f}")?;
            }
            writeln!(writer)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn minimal_two_class_dataset() {
        let ds = generate_synthetic(2, 1, 4, 1.0, 3).unwrap();
        assert_eq!(ds.len(), 2);
        let labels: BTreeSet<usize> = ds.samples.iter().map(|s| s.true_label).collect();
        assert_eq!(labels.len(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(4, 10, 8, 5.0, 42).unwrap();
        let b = generate_synthetic(4, 10, 8, 5.0, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(4, 10, 8, 5.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn anchors_respect_separation() {
        let ds = generate_synthetic(4, 1, 16, 10.0, 7).unwrap();
        assert!(min_pairwise_distance(&ds.anchors) >= 10.0);
    }

    #[test]
    fn nearest_anchor_classifies_separated_data() {
        let ds = generate_synthetic(4, 100, 16, 10.0, 11).unwrap();
        let correct = ds
            .samples
            .iter()
            .filter(|s| {
                let nearest = ds
                    .anchors
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = a.iter().zip(&s.features).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = b.iter().zip(&s.features).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                nearest == s.true_label
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn resample_shares_anchors_but_not_samples() {
        let train = generate_synthetic(3, 20, 8, 6.0, 5).unwrap();
        let test = train.resample(10, 1000, 99);
        assert_eq!(test.anchors, train.anchors);
        assert_eq!(test.len(), 30);
        assert!(test.samples.iter().all(|s| s.sample_id >= 1000));
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = generate_synthetic(3, 10, 4, 2.0, 1).unwrap();
        let shards = dirichlet_partition(&ds, 1, 0.1, 2).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].len(), 30);
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let ds = generate_synthetic(4, 25, 6, 3.0, 9).unwrap();
        let shards = dirichlet_partition(&ds, 5, 0.1, 17).unwrap();
        let mut seen = BTreeSet::new();
        for shard in &shards {
            assert!(!shard.is_empty());
            for s in &shard.samples {
                assert!(seen.insert(s.sample_id), "duplicate {}", s.sample_id);
            }
        }
        assert_eq!(seen.len(), ds.len());
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        for seed in 0..5 {
            let ds = generate_synthetic(4, 200, 4, 2.0, seed).unwrap();
            let shards = dirichlet_partition(&ds, 4, 1e6, seed + 100).unwrap();
            for shard in &shards {
                let mut hist = BTreeMap::new();
                for s in &shard.samples {
                    *hist.entry(s.true_label).or_insert(0usize) += 1;
                }
                for class in 0..4 {
                    let count = *hist.get(&class).unwrap_or(&0) as f64;
                    let expected = 200.0 / 4.0;
                    assert!(
                        (count - expected).abs() / expected <= 0.10,
                        "seed {seed}: class {class} count {count}"
                    );
                }
            }
        }
    }

    #[test]
    fn small_alpha_is_more_skewed_than_large() {
        let global = |shards: &[ClientShard], c: usize| -> Vec<f64> {
            let mut hist = vec![0.0; c];
            let mut n = 0.0;
            for shard in shards {
                for s in &shard.samples {
                    hist[s.true_label] += 1.0;
                    n += 1.0;
                }
            }
            hist.iter().map(|h| h / n).collect()
        };
        let l1_skew = |shards: &[ClientShard], c: usize| -> f64 {
            let g = global(shards, c);
            let mut total = 0.0;
            for shard in shards {
                let mut hist = vec![0.0; c];
                for s in &shard.samples {
                    hist[s.true_label] += 1.0;
                }
                let n = shard.len() as f64;
                total += hist
                    .iter()
                    .zip(&g)
                    .map(|(h, gv)| (h / n - gv).abs())
                    .sum::<f64>();
            }
            total / shards.len() as f64
        };
        for seed in 0..5 {
            let ds = generate_synthetic(4, 100, 4, 2.0, seed).unwrap();
            let skewed = dirichlet_partition(&ds, 5, 0.1, seed + 50).unwrap();
            let uniform = dirichlet_partition(&ds, 5, 100.0, seed + 50).unwrap();
            assert!(
                l1_skew(&skewed, 4) > l1_skew(&uniform, 4),
                "seed {seed}: alpha=0.1 not more skewed than alpha=100"
            );
        }
    }

    #[test]
    fn partition_rejects_more_clients_than_samples() {
        let ds = generate_synthetic(2, 1, 4, 1.0, 0).unwrap();
        assert!(dirichlet_partition(&ds, 3, 0.1, 0).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let cfg = AugmentationConfig {
            jitter_sigma: 0.0,
            mask_fraction: 0.0,
        };
        let x = vec![1.0, -2.0, 3.0, 0.5];
        let (a, b) = augment_two_views(&x, &cfg, 5);
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn full_masking_rejected_by_validation() {
        let cfg = AugmentationConfig {
            jitter_sigma: 0.1,
            mask_fraction: 1.0,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn jitter_variance_matches_sigma() {
        let cfg = AugmentationConfig {
            jitter_sigma: 0.1,
            mask_fraction: 0.0,
        };
        let x = vec![0.0; 16];
        let mut total = 0.0;
        for seed in 0..1000 {
            let (a, _) = augment_two_views(&x, &cfg, seed);
            total += a.iter().map(|v| v * v).sum::<f64>();
        }
        let mean_sq = total / 1000.0;
        assert!(
            (mean_sq - 0.16).abs() / 0.16 < 0.2,
            "E||view - x||^2 = {mean_sq}, expected ~0.16"
        );
    }

    #[test]
    fn views_differ_under_jitter() {
        let cfg = AugmentationConfig::default();
        let x = vec![1.0; 16];
        let (a, b) = augment_two_views(&x, &cfg, 0);
        assert_ne!(a, b);
        let (a2, b2) = augment_two_views(&x, &cfg, 0);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn mask_zeroes_expected_count() {
        let cfg = AugmentationConfig {
            jitter_sigma: 0.0,
            mask_fraction: 0.25,
        };
        let x = vec![1.0; 16];
        let (a, _) = augment_two_views(&x, &cfg, 9);
        assert_eq!(a.iter().filter(|v| **v == 0.0).count(), 4);
    }
}
