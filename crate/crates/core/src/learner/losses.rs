//! Training losses with analytic gradients.
//!
//! Gradients are taken with respect to the quantities each loss actually
//! receives (embeddings or probability vectors), in the ambient space, so
//! they can be checked directly against central finite differences and then
//! chained through the network by the caller.

use crate::error::{Error, Result};

/// Symmetric NT-Xent over 2b embeddings laid out as [view1..., view2...];
/// the positive of anchor i is (i + b) mod 2b.
///
/// Returns the loss and its gradient with respect to every embedding.
pub fn nt_xent_loss(embeddings: &[Vec<f64>], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::invalid_parameter(
            "tau",
            format!("temperature must be positive, got {tau}"),
        ));
    }
    let n = embeddings.len();
    if n < 2 || n % 2 != 0 {
        return Err(Error::invalid_parameter(
            "embeddings",
            format!("need an even number (two views per sample) of at least 2, got {n}"),
        ));
    }
    let b = n / 2;
    let dim = embeddings[0].len();
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.len(),
            });
        }
    }

    let mut sims = vec![vec![0.0_f64; n]; n];
    for i in 0..n {
        for a in (i + 1)..n {
            let s: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[a])
                .map(|(x, y)| x * y)
                .sum();
            sims[i][a] = s;
            sims[a][i] = s;
        }
    }

    let mut loss = 0.0;
    let mut grads = vec![vec![0.0_f64; dim]; n];
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let positive = (i + b) % n;
        let logits: Vec<f64> = (0..n)
            .filter(|a| *a != i)
            .map(|a| sims[i][a] / tau)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += scale * (-(sims[i][positive] / tau) + max + denom.ln());

        for (slot, a) in (0..n).filter(|a| *a != i).enumerate() {
            let softmax = (logits[slot] - max).exp() / denom;
            let coeff = scale / tau * (softmax - f64::from(u8::from(a == positive)));
            // s_{i,a} = <z_i, z_a> contributes to both endpoints
            for d in 0..dim {
                grads[i][d] += coeff * embeddings[a][d];
                grads[a][d] += coeff * embeddings[i][d];
            }
        }
    }
    Ok((loss, grads))
}

/// Symmetric cross-entropy: alpha * CE(q, p) + beta * RCE(q, p), with the
/// reverse term's log(0) clamped to `rce_clamp` (A < 0). For a one-hot target
/// this reduces to alpha * (-log p_y) + beta * (-A) * (1 - p_y).
///
/// The gradient is with respect to the prediction vector in the ambient
/// space; the simplex constraint is the caller's concern (it vanishes after
/// chaining through a softmax).
pub fn sce_loss(
    pred_dist: &[f64],
    label: usize,
    alpha: f64,
    beta: f64,
    rce_clamp: f64,
) -> Result<(f64, Vec<f64>)> {
    if label >= pred_dist.len() {
        return Err(Error::invalid_parameter(
            "label",
            format!("label {label} out of range for {} classes", pred_dist.len()),
        ));
    }
    let ce = -pred_dist[label].ln();
    let off_mass: f64 = pred_dist
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != label)
        .map(|(_, p)| p)
        .sum();
    let rce = -rce_clamp * off_mass;
    let loss = alpha * ce + beta * rce;
    let grad: Vec<f64> = pred_dist
        .iter()
        .enumerate()
        .map(|(c, p)| {
            if c == label {
                -alpha / p
            } else {
                -beta * rce_clamp
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Forward-corrected likelihood of the observed labels of noisy-masked
/// samples: L = -1/(sum m_i + eps) * sum m_i log[(p_i T)_{y_i} + eps].
///
/// Returns the loss, the gradient w.r.t. each prediction vector, and the
/// gradient w.r.t. the effective (row-stochastic) absorption matrix.
pub fn forward_corrected_loss(
    pred_dists: &[Vec<f64>],
    t_effective: &[Vec<f64>],
    labels: &[usize],
    noisy_mask: &[bool],
    epsilon: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = pred_dists.len();
    if labels.len() != n || noisy_mask.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len().min(noisy_mask.len()),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid_parameter("epsilon", "guard must be positive"));
    }
    let c = t_effective.len();
    let mass = noisy_mask.iter().filter(|m| **m).count() as f64;
    let norm = 1.0 / (mass + epsilon);

    let mut loss = 0.0;
    let mut dp = vec![Vec::new(); n];
    let mut dt = vec![vec![0.0_f64; c]; c];
    for i in 0..n {
        dp[i] = vec![0.0; pred_dists[i].len()];
        if !noisy_mask[i] {
            continue;
        }
        let label = labels[i];
        if label >= c {
            return Err(Error::invalid_parameter(
                "labels",
                format!("label {label} out of range for {c} classes"),
            ));
        }
        let corrected: f64 = pred_dists[i]
            .iter()
            .enumerate()
            .map(|(cls, p)| p * t_effective[cls][label])
            .sum();
        loss -= norm * (corrected + epsilon).ln();
        let coeff = -norm / (corrected + epsilon);
        for (cls, p) in pred_dists[i].iter().enumerate() {
            dp[i][cls] = coeff * t_effective[cls][label];
            dt[cls][label] += coeff * p;
        }
    }
    Ok((loss, dp, dt))
}

/// softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Chain rule through softmax: dL/dlogit_j = p_j (dL/dp_j - sum_c dL/dp_c p_c).
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, d)| p * (d - inner))
        .collect()
}
