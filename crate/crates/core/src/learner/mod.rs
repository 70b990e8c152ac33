//! The trainable model: a two-layer tanh encoder projected onto the unit
//! sphere, a linear classifier on the embedding, and a per-client noise
//! absorption matrix parameterized as row-softmax of free logits.
//!
//! Gradients are reverse-mode, written out for this fixed architecture; the
//! finite-difference test suite is the correctness gate.

mod losses;

pub use losses::{forward_corrected_loss, nt_xent_loss, sce_loss, softmax, softmax_backward};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::directional_stats::UnitVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::validation("model.input_dim", "must be at least 2"));
        }
        if self.hidden_dim == 0 || self.embed_dim < 2 || self.num_classes < 2 {
            return Err(Error::validation(
                "model dims",
                "hidden_dim >= 1, embed_dim >= 2, num_classes >= 2 required",
            ));
        }
        Ok(())
    }
}

/// Encoder and classifier weights, stored as shape-tagged flat row-major
/// arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// hidden_dim x input_dim
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// embed_dim x hidden_dim
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// num_classes x embed_dim
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
}

impl ModelParams {
    /// Gaussian init scaled by 1/sqrt(fan_in); biases start at zero.
    pub fn init(dims: ModelDims, rng_seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut layer = |rows: usize, cols: usize| -> Vec<f64> {
            let scale = 1.0 / (cols as f64).sqrt();
            (0..rows * cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let w1 = layer(dims.hidden_dim, dims.input_dim);
        let w2 = layer(dims.embed_dim, dims.hidden_dim);
        let wc = layer(dims.num_classes, dims.embed_dim);
        Ok(ModelParams {
            dims,
            w1,
            b1: vec![0.0; dims.hidden_dim],
            w2,
            b2: vec![0.0; dims.embed_dim],
            wc,
            bc: vec![0.0; dims.num_classes],
        })
    }

    pub fn fields(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.wc, &self.bc]
    }

    pub fn fields_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wc,
            &mut self.bc,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.fields().iter().map(|f| f.len()).sum()
    }
}

/// Per-client noise absorption matrix T, row-softmax of free logits so rows
/// are probability vectors by construction. Logits start diagonal-dominant
/// (diagonal +2, off-diagonal 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAbsorptionMatrix {
    num_classes: usize,
    logits: Vec<f64>,
}

impl NoiseAbsorptionMatrix {
    pub fn new_diagonal(num_classes: usize) -> Self {
        let mut logits = vec![0.0; num_classes * num_classes];
        for c in 0..num_classes {
            logits[c * num_classes + c] = 2.0;
        }
        NoiseAbsorptionMatrix {
            num_classes,
            logits,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Row-stochastic effective matrix, entry [c][c'] ~ P(observed c' | true c).
    pub fn effective(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes)
            .map(|c| softmax(&self.logits[c * self.num_classes..(c + 1) * self.num_classes]))
            .collect()
    }
}

/// Everything the backward pass needs from one sample's forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub norm: f64,
    /// Set when the embedding norm fell below the epsilon guard.
    pub guarded: bool,
    pub z: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Full forward pass: x -> tanh(W1 x + b1) -> W2 h1 + b2 -> z = h2/|h2| ->
/// softmax(Wc z + bc).
pub fn forward(params: &ModelParams, x: &[f64], epsilon_guard: f64) -> Result<Forward> {
    let d = params.dims;
    if x.len() != d.input_dim {
        return Err(Error::DimensionMismatch {
            expected: d.input_dim,
            got: x.len(),
        });
    }
    let mut h1 = matvec(&params.w1, d.hidden_dim, d.input_dim, x);
    for (h, b) in h1.iter_mut().zip(&params.b1) {
        *h = (*h + b).tanh();
    }
    let mut h2 = matvec(&params.w2, d.embed_dim, d.hidden_dim, &h1);
    for (h, b) in h2.iter_mut().zip(&params.b2) {
        *h += b;
    }
    let raw_norm: f64 = h2.iter().map(|v| v * v).sum::<f64>().sqrt();
    let guarded = raw_norm < epsilon_guard;
    let norm = if guarded { raw_norm + epsilon_guard } else { raw_norm };
    let z: Vec<f64> = h2.iter().map(|v| v / norm).collect();
    let mut logits = matvec(&params.wc, d.num_classes, d.embed_dim, &z);
    for (l, b) in logits.iter_mut().zip(&params.bc) {
        *l += b;
    }
    let probs = softmax(&logits);
    Ok(Forward {
        h1,
        h2,
        norm,
        guarded,
        z,
        probs,
    })
}

/// L2-normalized embedding of `x` on the unit sphere.
pub fn encode(params: &ModelParams, x: &[f64], epsilon_guard: f64) -> Result<UnitVector> {
    let fwd = forward(params, x, epsilon_guard)?;
    if fwd.guarded {
        UnitVector::normalized(fwd.z)
    } else {
        UnitVector::new(fwd.z)
    }
}

/// Class prediction = argmax of the classifier distribution.
pub fn predict(params: &ModelParams, x: &[f64], epsilon_guard: f64) -> Result<usize> {
    let fwd = forward(params, x, epsilon_guard)?;
    Ok(fwd
        .probs
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0))
}

/// Gradient accumulator shaped like the model plus the absorption logits.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
    pub t_logits: Vec<f64>,
}

impl Gradients {
    pub fn zeros(dims: ModelDims) -> Self {
        Gradients {
            w1: vec![0.0; dims.hidden_dim * dims.input_dim],
            b1: vec![0.0; dims.hidden_dim],
            w2: vec![0.0; dims.embed_dim * dims.hidden_dim],
            b2: vec![0.0; dims.embed_dim],
            wc: vec![0.0; dims.num_classes * dims.embed_dim],
            bc: vec![0.0; dims.num_classes],
            t_logits: vec![0.0; dims.num_classes * dims.num_classes],
        }
    }

    pub fn model_fields(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.wc, &self.bc]
    }

    pub fn is_finite(&self) -> bool {
        self.model_fields()
            .iter()
            .flat_map(|f| f.iter())
            .chain(self.t_logits.iter())
            .all(|g| g.is_finite())
    }
}

/// Backpropagate a gradient on the normalized embedding z into the encoder
/// weights.
pub fn backward_from_embedding(
    params: &ModelParams,
    x: &[f64],
    fwd: &Forward,
    dz: &[f64],
    grads: &mut Gradients,
) {
    let d = params.dims;
    // z = h2 / |h2|: dh2 = (dz - z <z, dz>) / |h2|
    let inner: f64 = fwd.z.iter().zip(dz).map(|(z, g)| z * g).sum();
    let dh2: Vec<f64> = dz
        .iter()
        .zip(&fwd.z)
        .map(|(g, z)| (g - z * inner) / fwd.norm)
        .collect();
    outer_acc(&mut grads.w2, &dh2, &fwd.h1);
    acc(&mut grads.b2, &dh2);
    let dh1 = matvec_t(&params.w2, d.embed_dim, d.hidden_dim, &dh2);
    let dpre1: Vec<f64> = dh1
        .iter()
        .zip(&fwd.h1)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    outer_acc(&mut grads.w1, &dpre1, x);
    acc(&mut grads.b1, &dpre1);
}

/// Backpropagate a gradient on the classifier distribution into classifier
/// and encoder weights.
pub fn backward_from_probs(
    params: &ModelParams,
    x: &[f64],
    fwd: &Forward,
    dprobs: &[f64],
    grads: &mut Gradients,
) {
    let d = params.dims;
    let dlogits = softmax_backward(&fwd.probs, dprobs);
    outer_acc(&mut grads.wc, &dlogits, &fwd.z);
    acc(&mut grads.bc, &dlogits);
    let dz = matvec_t(&params.wc, d.num_classes, d.embed_dim, &dlogits);
    backward_from_embedding(params, x, fwd, &dz, grads);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// NT-Xent temperature.
    pub tau: f64,
    pub sce_alpha: f64,
    pub sce_beta: f64,
    pub lambda_s: f64,
    pub lambda_n: f64,
    pub epsilon_guard: f64,
    /// Clamp value used for log(0) inside the reverse cross-entropy term.
    pub rce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.5,
            sce_alpha: 0.1,
            sce_beta: 1.0,
            lambda_s: 1.0,
            lambda_n: 1.0,
            epsilon_guard: 1e-8,
            rce_clamp: -4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::validation("loss.tau", "temperature must be positive"));
        }
        if !(self.sce_alpha > 0.0) {
            return Err(Error::validation("loss.sce_alpha", "must be positive"));
        }
        // beta = 0 is allowed so the CE ablation can run through the same path
        if !(self.sce_beta >= 0.0) {
            return Err(Error::validation("loss.sce_beta", "must be non-negative"));
        }
        if !(self.lambda_s >= 0.0) || !(self.lambda_n >= 0.0) {
            return Err(Error::validation(
                "loss.lambda_s/lambda_n",
                "trade-off weights must be non-negative",
            ));
        }
        if !(self.epsilon_guard > 0.0) {
            return Err(Error::validation("loss.epsilon_guard", "must be positive"));
        }
        if !(self.rce_clamp < 0.0) {
            return Err(Error::validation("loss.rce_clamp", "must be negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub sce: f64,
    pub noisy: f64,
}

/// Combined objective over one batch: lambda_s * mean SCE over all samples
/// plus lambda_n * forward-corrected loss over the noisy-masked ones.
/// Gradients cover the model weights and the absorption logits.
pub fn total_loss_and_grads(
    features: &[&[f64]],
    labels: &[usize],
    noisy_mask: &[bool],
    params: &ModelParams,
    absorption: &NoiseAbsorptionMatrix,
    cfg: &LossConfig,
) -> Result<(BatchLoss, Gradients)> {
    let n = features.len();
    if labels.len() != n || noisy_mask.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len().min(noisy_mask.len()),
        });
    }
    if n == 0 {
        return Ok((
            BatchLoss {
                total: 0.0,
                sce: 0.0,
                noisy: 0.0,
            },
            Gradients::zeros(params.dims),
        ));
    }
    let mut grads = Gradients::zeros(params.dims);
    let forwards: Vec<Forward> = features
        .iter()
        .map(|x| forward(params, x, cfg.epsilon_guard))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<Vec<f64>> = forwards.iter().map(|f| f.probs.clone()).collect();

    let mut sce_total = 0.0;
    let mut dprobs: Vec<Vec<f64>> = vec![vec![0.0; params.dims.num_classes]; n];
    let batch_scale = 1.0 / n as f64;
    for i in 0..n {
        let (value, grad) = sce_loss(&probs[i], labels[i], cfg.sce_alpha, cfg.sce_beta, cfg.rce_clamp)?;
        sce_total += batch_scale * value;
        for (acc, g) in dprobs[i].iter_mut().zip(&grad) {
            *acc += cfg.lambda_s * batch_scale * g;
        }
    }

    let t_eff = absorption.effective();
    let (noisy_value, dp_noisy, dt_eff) =
        forward_corrected_loss(&probs, &t_eff, labels, noisy_mask, cfg.epsilon_guard)?;
    for i in 0..n {
        for (acc, g) in dprobs[i].iter_mut().zip(&dp_noisy[i]) {
            *acc += cfg.lambda_n * g;
        }
    }
    // chain dL/dT_eff through each row's softmax into the free logits
    let c = params.dims.num_classes;
    for row in 0..c {
        let drow: Vec<f64> = dt_eff[row].iter().map(|g| cfg.lambda_n * g).collect();
        let dlogits = softmax_backward(&t_eff[row], &drow);
        for (j, g) in dlogits.into_iter().enumerate() {
            grads.t_logits[row * c + j] += g;
        }
    }

    for i in 0..n {
        backward_from_probs(params, features[i], &forwards[i], &dprobs[i], &mut grads);
    }

    Ok((
        BatchLoss {
            total: cfg.lambda_s * sce_total + cfg.lambda_n * noisy_value,
            sce: sce_total,
            noisy: noisy_value,
        },
        grads,
    ))
}

/// Contrastive batch: encode 2b augmented views, NT-Xent on the embeddings,
/// backprop into the encoder only (classifier and absorption untouched).
pub fn contrastive_loss_and_grads(
    views: &[Vec<f64>],
    params: &ModelParams,
    cfg: &LossConfig,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros(params.dims);
    let forwards: Vec<Forward> = views
        .iter()
        .map(|x| forward(params, x, cfg.epsilon_guard))
        .collect::<Result<Vec<_>>>()?;
    let embeddings: Vec<Vec<f64>> = forwards.iter().map(|f| f.z.clone()).collect();
    let (loss, dz) = nt_xent_loss(&embeddings, cfg.tau)?;
    for i in 0..views.len() {
        backward_from_embedding(params, &views[i], &forwards[i], &dz[i], &mut grads);
    }
    Ok((loss, grads))
}

/// Vanilla SGD on the model and absorption logits. A non-finite gradient
/// rejects the whole step without mutating anything.
pub fn sgd_step(
    params: &mut ModelParams,
    absorption: &mut NoiseAbsorptionMatrix,
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid_parameter(
            "lr",
            format!("learning rate must be non-negative, got {lr}"),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    let grad_fields = grads.model_fields();
    for (field, grad) in params.fields_mut().into_iter().zip(grad_fields) {
        for (p, g) in field.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
    for (p, g) in absorption.logits_mut().iter_mut().zip(&grads.t_logits) {
        *p -= lr * g;
    }
    Ok(())
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(wv, xv)| wv * xv)
                .sum()
        })
        .collect()
}

fn matvec_t(w: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += wv * y[r];
        }
    }
    out
}

fn outer_acc(grad_w: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, d) in dy.iter().enumerate() {
        for (c, xv) in x.iter().enumerate() {
            grad_w[r * cols + c] += d * xv;
        }
    }
}

fn acc(grad: &mut [f64], delta: &[f64]) {
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 4,
            hidden_dim: 5,
            embed_dim: 3,
            num_classes: 3,
        }
    }

    #[test]
    fn encode_is_unit_norm_and_pure() {
        let params = ModelParams::init(dims(), 1).unwrap();
        let x = [0.3, -1.2, 0.7, 2.0];
        let z1 = encode(&params, &x, 1e-8).unwrap();
        let z2 = encode(&params, &x, 1e-8).unwrap();
        assert_eq!(z1, z2);
        let norm: f64 = z1.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn encode_invariant_to_final_layer_scale() {
        let params = ModelParams::init(dims(), 2).unwrap();
        let mut scaled = params.clone();
        for w in scaled.w2.iter_mut().chain(scaled.b2.iter_mut()) {
            *w *= 3.0;
        }
        let x = [1.0, 0.0, -0.5, 0.25];
        let a = encode(&params, &x, 1e-8).unwrap();
        let b = encode(&scaled, &x, 1e-8).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert_relative_eq!(u, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn absorption_rows_are_distributions() {
        let t = NoiseAbsorptionMatrix::new_diagonal(4);
        for row in t.effective() {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
        // diagonal dominance from the +2 logit
        let eff = t.effective();
        for c in 0..4 {
            for j in 0..4 {
                if j != c {
                    assert!(eff[c][c] > eff[c][j]);
                }
            }
        }
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut params = ModelParams::init(dims(), 3).unwrap();
        let snapshot = params.clone();
        let mut t = NoiseAbsorptionMatrix::new_diagonal(3);
        let mut grads = Gradients::zeros(dims());
        for g in grads.w1.iter_mut() {
            *g = 1.0;
        }
        sgd_step(&mut params, &mut t, &grads, 0.0).unwrap();
        assert_eq!(params, snapshot);
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let d = dims();
        let mut params = ModelParams::init(d, 4).unwrap();
        params.w1[0] = 1.0;
        let mut t = NoiseAbsorptionMatrix::new_diagonal(3);
        let mut grads = Gradients::zeros(d);
        grads.w1[0] = 2.0;
        sgd_step(&mut params, &mut t, &grads, 0.1).unwrap();
        assert_relative_eq!(params.w1[0], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn sgd_rejects_nan_gradients_without_mutation() {
        let mut params = ModelParams::init(dims(), 5).unwrap();
        let snapshot = params.clone();
        let mut t = NoiseAbsorptionMatrix::new_diagonal(3);
        let mut grads = Gradients::zeros(dims());
        grads.b2[1] = f64::NAN;
        assert!(sgd_step(&mut params, &mut t, &grads, 0.1).is_err());
        assert_eq!(params, snapshot);
    }

    #[test]
    fn absorption_rows_survive_random_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ModelParams::init(dims(), 6).unwrap();
        let mut t = NoiseAbsorptionMatrix::new_diagonal(3);
        for _ in 0..100 {
            let mut grads = Gradients::zeros(dims());
            for g in grads.t_logits.iter_mut() {
                *g = rng.sample::<f64, _>(StandardNormal);
            }
            sgd_step(&mut params, &mut t, &grads, 0.05).unwrap();
        }
        for row in t.effective() {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn total_loss_lambda_switches() {
        let d = dims();
        let params = ModelParams::init(d, 7).unwrap();
        let t = NoiseAbsorptionMatrix::new_diagonal(3);
        let xs: Vec<Vec<f64>> = vec![vec![0.5, -0.2, 1.0, 0.1], vec![-1.0, 0.3, 0.2, 0.9]];
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let labels = [0usize, 2];
        let mask = [true, false];

        let mut cfg = LossConfig::default();
        cfg.lambda_n = 0.0;
        let (loss, _) = total_loss_and_grads(&refs, &labels, &mask, &params, &t, &cfg).unwrap();
        assert_relative_eq!(loss.total, cfg.lambda_s * loss.sce, epsilon = 1e-12);

        let mut cfg = LossConfig::default();
        cfg.lambda_s = 0.0;
        let no_noisy = [false, false];
        let (loss, _) = total_loss_and_grads(&refs, &labels, &no_noisy, &params, &t, &cfg).unwrap();
        assert_relative_eq!(loss.total, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum_of_hand_values() {
        // Feed the frozen SCE and forward-corrected hand examples through the
        // combination formula: 0.41053605 + 0.5 * 1.34707365 = 1.0840728755.
        let sce = 0.41053605156578263;
        let fc = 1.3470736479666093;
        assert_relative_eq!(sce + 0.5 * fc, 1.0840728755490873, epsilon = 1e-12);
    }
}
