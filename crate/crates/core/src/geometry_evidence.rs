//! Label-dependent geometric evidence and the clean/noisy split.
//!
//! The class-to-geometry matrix B holds, per observed class, a Dirichlet-
//! smoothed distribution over semantic clusters built from tempered
//! responsibilities; the background column is excluded so geometry-level
//! outliers cannot contaminate the template. The cleanliness score of a
//! sample is the inner product of its class's template with its own
//! non-background responsibilities, and a two-component 1-D Gaussian mixture
//! on (1 - score) partitions the shard into likely-clean and likely-noisy.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::directional_stats::ResponsibilityVector;
use crate::error::{Error, Result};

/// Per-client C x G row-stochastic matrix mapping observed classes to
/// semantic clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGeometryMatrix {
    rows: Vec<Vec<f64>>,
    smoothing: f64,
}

impl ClassGeometryMatrix {
    /// Uniform bootstrap: every class spread evenly over clusters.
    pub fn uniform(num_classes: usize, num_clusters: usize, smoothing: f64) -> Result<Self> {
        check_eta(smoothing)?;
        if num_classes == 0 || num_clusters == 0 {
            return Err(Error::invalid_parameter(
                "class geometry shape",
                format!("need positive dimensions, got {num_classes}x{num_clusters}"),
            ));
        }
        Ok(ClassGeometryMatrix {
            rows: vec![vec![1.0 / num_clusters as f64; num_clusters]; num_classes],
            smoothing,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class]
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !eta.is_finite() || eta <= 0.0 {
        return Err(Error::invalid_parameter(
            "eta",
            format!("Dirichlet smoothing must be positive, got {eta}"),
        ));
    }
    Ok(())
}

/// Build B from the (clean-designated) samples' tempered responsibilities:
/// beta_{c,g} = (sum_{i: label=c} gamma_{i,g} + eta) / sum_{g'} (...), with
/// the background column g = 0 excluded from both sums. Classes with no
/// samples fall back to the smoothing-only uniform row.
pub fn update_class_geometry(
    resp: &[ResponsibilityVector],
    labels: &[usize],
    num_classes: usize,
    num_clusters: usize,
    eta: f64,
) -> Result<ClassGeometryMatrix> {
    check_eta(eta)?;
    if resp.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: resp.len(),
            got: labels.len(),
        });
    }
    if num_classes == 0 || num_clusters == 0 {
        return Err(Error::invalid_parameter(
            "class geometry shape",
            "need positive class and cluster counts",
        ));
    }
    let mut sums = vec![vec![0.0_f64; num_clusters]; num_classes];
    for (gamma, &label) in resp.iter().zip(labels) {
        if label >= num_classes {
            return Err(Error::invalid_parameter(
                "labels",
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        if gamma.num_clusters() != num_clusters {
            return Err(Error::DimensionMismatch {
                expected: num_clusters,
                got: gamma.num_clusters(),
            });
        }
        for (acc, value) in sums[label].iter_mut().zip(gamma.semantic()) {
            *acc += value;
        }
    }
    let rows = sums
        .into_iter()
        .map(|class_sums| {
            let total: f64 = class_sums.iter().map(|s| s + eta).sum();
            class_sums.into_iter().map(|s| (s + eta) / total).collect()
        })
        .collect();
    Ok(ClassGeometryMatrix {
        rows,
        smoothing: eta,
    })
}

/// Geometry-label agreement per sample, in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanlinessScores(Vec<f64>);

impl CleanlinessScores {
    pub fn new(values: Vec<f64>) -> Self {
        CleanlinessScores(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// P_i = sum_{g=1..G} beta_{label_i, g} * gamma_{i,g}. The background mass
/// gamma_{i,0} is deliberately left out, so samples explained mostly by the
/// background score low regardless of label.
pub fn cleanliness_scores(
    resp: &[ResponsibilityVector],
    labels: &[usize],
    b: &ClassGeometryMatrix,
) -> Result<CleanlinessScores> {
    if resp.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: resp.len(),
            got: labels.len(),
        });
    }
    let mut scores = Vec::with_capacity(resp.len());
    for (gamma, &label) in resp.iter().zip(labels) {
        if label >= b.num_classes() {
            return Err(Error::invalid_parameter(
                "labels",
                format!("label {label} out of range for {} classes", b.num_classes()),
            ));
        }
        if gamma.num_clusters() != b.num_clusters() {
            return Err(Error::DimensionMismatch {
                expected: b.num_clusters(),
                got: gamma.num_clusters(),
            });
        }
        let score: f64 = b
            .row(label)
            .iter()
            .zip(gamma.semantic())
            .map(|(beta, g)| beta * g)
            .sum();
        scores.push(score);
    }
    Ok(CleanlinessScores(scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            max_iters: 100,
            tol: 1e-7,
            variance_floor: 1e-6,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::validation("gmm.max_iters", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::validation("gmm.tol", "must be positive"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::validation("gmm.variance_floor", "must be positive"));
        }
        Ok(())
    }
}

/// Scores with sample variance below this are treated as carrying no noise
/// evidence at all.
const DEGENERATE_VARIANCE: f64 = 1e-10;

/// Outcome of the two-component GMM split. Component 0 is always the clean
/// one (smaller mean on 1 - P), so the labeling does not depend on the
/// initialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub clean_mask: Vec<bool>,
    pub gmm_means: [f64; 2],
    pub gmm_vars: [f64; 2],
    pub gmm_weights: [f64; 2],
    /// Set when the scores were (numerically) constant and the split fell
    /// back to all-clean.
    pub degenerate: bool,
    /// EM log-likelihood trace of the fit (empty for degenerate splits).
    #[serde(skip)]
    pub log_likelihood: Vec<f64>,
}

impl PartitionResult {
    pub(crate) fn all_clean(n: usize, mean: f64) -> PartitionResult {
        PartitionResult {
            clean_mask: vec![true; n],
            gmm_means: [mean, mean],
            gmm_vars: [DEGENERATE_VARIANCE, DEGENERATE_VARIANCE],
            gmm_weights: [1.0, 0.0],
            degenerate: true,
            log_likelihood: Vec::new(),
        }
    }

    pub fn num_clean(&self) -> usize {
        self.clean_mask.iter().filter(|c| **c).count()
    }
}

/// Fit a two-component 1-D GMM on x_i = 1 - P_i and mark sample i clean iff
/// its posterior under the smaller-mean component is at least 0.5. Constant
/// scores yield an all-clean degenerate result: with no spread there is no
/// evidence of noise.
pub fn gmm_partition(
    scores: &CleanlinessScores,
    cfg: &GmmConfig,
    rng_seed: u64,
) -> Result<PartitionResult> {
    cfg.validate()?;
    let n = scores.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let xs: Vec<f64> = scores.values().iter().map(|p| 1.0 - p).collect();
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cleanliness scores"));
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if var < DEGENERATE_VARIANCE {
        return Ok(PartitionResult::all_clean(n, mean));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (mut means, mut vars, mut weights) = kmeans2_init(&xs, cfg, &mut rng);

    let mut resp = vec![[0.0f64; 2]; n];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iters {
        // E-step
        let mut ll = 0.0;
        for (x, gamma) in xs.iter().zip(resp.iter_mut()) {
            let l0 = weights[0].ln() + log_normal(*x, means[0], vars[0]);
            let l1 = weights[1].ln() + log_normal(*x, means[1], vars[1]);
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            let total = e0 + e1;
            gamma[0] = e0 / total;
            gamma[1] = e1 / total;
            ll += m + total.ln();
        }
        trace.push(ll);
        // M-step
        for c in 0..2 {
            let mass: f64 = resp.iter().map(|g| g[c]).sum();
            if mass <= 0.0 {
                continue;
            }
            let mu = xs.iter().zip(&resp).map(|(x, g)| g[c] * x).sum::<f64>() / mass;
            let sigma2 = xs
                .iter()
                .zip(&resp)
                .map(|(x, g)| g[c] * (x - mu).powi(2))
                .sum::<f64>()
                / mass;
            means[c] = mu;
            vars[c] = sigma2.max(cfg.variance_floor);
            weights[c] = mass / n as f64;
        }
        let w_total = weights[0] + weights[1];
        weights[0] /= w_total;
        weights[1] /= w_total;

        if prev_ll.is_finite() && (ll - prev_ll).abs() / prev_ll.abs().max(1.0) < cfg.tol {
            break;
        }
        prev_ll = ll;
    }

    // component 0 = clean = smaller mean of (1 - P)
    let clean = usize::from(means[0] > means[1]);
    let noisy = 1 - clean;
    let clean_mask: Vec<bool> = xs
        .iter()
        .map(|x| {
            let l0 = weights[clean].ln() + log_normal(*x, means[clean], vars[clean]);
            let l1 = weights[noisy].ln() + log_normal(*x, means[noisy], vars[noisy]);
            let m = l0.max(l1);
            let p_clean = (l0 - m).exp() / ((l0 - m).exp() + (l1 - m).exp());
            p_clean >= 0.5
        })
        .collect();

    Ok(PartitionResult {
        clean_mask,
        gmm_means: [means[clean], means[noisy]],
        gmm_vars: [vars[clean], vars[noisy]],
        gmm_weights: [weights[clean], weights[noisy]],
        degenerate: false,
        log_likelihood: trace,
    })
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

/// Lloyd's algorithm with two centers on scalars, k-means++ seeded.
fn kmeans2_init(
    xs: &[f64],
    cfg: &GmmConfig,
    rng: &mut ChaCha8Rng,
) -> ([f64; 2], [f64; 2], [f64; 2]) {
    let n = xs.len();
    let first = xs[rng.gen_range(0..n)];
    let sq_dist: Vec<f64> = xs.iter().map(|x| (x - first).powi(2)).collect();
    let total: f64 = sq_dist.iter().sum();
    let second = if total > 0.0 {
        let mut target = rng.gen::<f64>() * total;
        let mut pick = xs[n - 1];
        for (x, w) in xs.iter().zip(&sq_dist) {
            target -= w;
            if target <= 0.0 {
                pick = *x;
                break;
            }
        }
        pick
    } else {
        first
    };
    let mut centers = [first.min(second), first.max(second)];
    let mut assign = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, x) in xs.iter().enumerate() {
            let c = usize::from((x - centers[0]).abs() > (x - centers[1]).abs());
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        for c in 0..2 {
            let members: Vec<f64> = xs
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == c)
                .map(|(x, _)| *x)
                .collect();
            if !members.is_empty() {
                centers[c] = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    // empty cluster: restart from the extremes
    if assign.iter().all(|a| *a == 0) || assign.iter().all(|a| *a == 1) {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        centers = [lo, hi];
        for (i, x) in xs.iter().enumerate() {
            assign[i] = usize::from((x - lo).abs() > (x - hi).abs());
        }
    }
    let mut means = [0.0f64; 2];
    let mut vars = [cfg.variance_floor; 2];
    let mut weights = [0.5f64; 2];
    for c in 0..2 {
        let members: Vec<f64> = xs
            .iter()
            .zip(&assign)
            .filter(|(_, a)| **a == c)
            .map(|(x, _)| *x)
            .collect();
        if members.is_empty() {
            means[c] = centers[c];
            continue;
        }
        means[c] = members.iter().sum::<f64>() / members.len() as f64;
        let v = members.iter().map(|x| (x - means[c]).powi(2)).sum::<f64>() / members.len() as f64;
        vars[c] = v.max(cfg.variance_floor);
        weights[c] = members.len() as f64 / xs.len() as f64;
    }
    let w_total = weights[0] + weights[1];
    (means, vars, [weights[0] / w_total, weights[1] / w_total])
}

/// Per-round partition export: sample_id, p_clean, is_clean_pred, is_clean_true.
pub fn write_partition_csv<W: std::io::Write>(
    writer: &mut W,
    sample_ids: &[u64],
    scores: &CleanlinessScores,
    partition: &PartitionResult,
    is_clean_true: &[bool],
) -> Result<()> {
    writeln!(writer, "sample_id,p_clean,is_clean_pred,is_clean_true")?;
    for i in 0..sample_ids.len() {
        writeln!(
            writer,
            "{},{:.6},{},{}",
            sample_ids[i],
            scores.values()[i],
            partition.clean_mask[i],
            is_clean_true[i]
        )?;
    }
    Ok(())
}
