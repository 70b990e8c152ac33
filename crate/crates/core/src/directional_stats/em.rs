//! Weighted EM for the vMF mixture with uniform background.
//!
//! The M-step is exact up to the box constraints (background floor, kappa
//! clamp), so the weighted log-likelihood trace is non-decreasing. Component
//! concentrations start from the closed-form approximation of
//! [`estimate_kappa`](super::estimate_kappa) and are refined by a few Newton
//! steps on A_d(kappa) = rbar; without the refinement an approximate M-step
//! can lose a hair of likelihood and break the monotonicity contract.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    estimate_kappa, mean_resultant_ratio, norm, MixtureDensity, UnitVector, VmfComponent,
    VmfMixture, KAPPA_MAX,
};
use crate::error::{Error, Result};

/// Fraction of total point mass below which a component counts as starved.
const STARVATION_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
    pub pi0_init: f64,
    pub pi0_floor: f64,
    pub kappa_init: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 50,
            tol: 1e-5,
            pi0_init: 0.05,
            pi0_floor: 0.01,
            kappa_init: 10.0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::validation("em.max_iters", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::validation("em.tol", "must be positive"));
        }
        for (name, v) in [("em.pi0_init", self.pi0_init), ("em.pi0_floor", self.pi0_floor)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::validation(name, format!("must be in [0, 1), got {v}")));
            }
        }
        if self.pi0_floor > self.pi0_init {
            return Err(Error::validation(
                "em.pi0_floor",
                "floor above the initial background weight",
            ));
        }
        if !(self.kappa_init > 0.0 && self.kappa_init <= KAPPA_MAX) {
            return Err(Error::validation(
                "em.kappa_init",
                format!("must be in (0, {KAPPA_MAX}], got {}", self.kappa_init),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub mixture: VmfMixture,
    /// Weighted log-likelihood trace; entry 0 is the initial mixture, one
    /// entry per completed iteration after that.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// Components re-seeded after starving (see module docs).
    pub reseed_events: usize,
    /// True if any concentration was clamped at [`KAPPA_MAX`].
    pub saturated: bool,
}

/// Fit a `g`-component mixture from a spherical k-means++ start.
pub fn em_fit(
    points: &[UnitVector],
    point_weights: &[f64],
    g: usize,
    cfg: &EmConfig,
    rng_seed: u64,
) -> Result<EmOutcome> {
    let dim = validate_inputs(points, point_weights, g)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seeds = kmeanspp_seeds(points, point_weights, g, &mut rng);
    let component_weight = (1.0 - cfg.pi0_init) / g as f64;
    let components = seeds
        .into_iter()
        .map(|idx| {
            Ok((
                component_weight,
                VmfComponent::new(points[idx].clone(), cfg.kappa_init)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let init = VmfMixture::new(cfg.pi0_init, components, dim)?;
    run_em(points, point_weights, init, cfg)
}

/// Continue EM from an existing mixture (per-round warm start).
pub fn em_fit_warm(
    points: &[UnitVector],
    point_weights: &[f64],
    init: &VmfMixture,
    cfg: &EmConfig,
) -> Result<EmOutcome> {
    let dim = validate_inputs(points, point_weights, init.num_components())?;
    cfg.validate()?;
    if init.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: init.dim(),
        });
    }
    run_em(points, point_weights, init.clone(), cfg)
}

fn validate_inputs(points: &[UnitVector], point_weights: &[f64], g: usize) -> Result<usize> {
    if g == 0 {
        return Err(Error::invalid_parameter("G", "need at least one component"));
    }
    if points.len() < g {
        return Err(Error::TooFewPoints {
            needed: g,
            got: points.len(),
        });
    }
    if point_weights.len() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: point_weights.len(),
        });
    }
    if point_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::NonFinite("point weights"));
    }
    if point_weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid_parameter(
            "point_weights",
            "total weight must be positive",
        ));
    }
    let dim = points[0].dim();
    for p in points {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
    }
    Ok(dim)
}

/// Spherical k-means++: first seed drawn by point weight, later seeds by
/// weight times cosine distance to the closest chosen seed.
fn kmeanspp_seeds(
    points: &[UnitVector],
    weights: &[f64],
    g: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(g);
    chosen.push(weighted_index(weights, rng));
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| 1.0 - p.dot(&points[chosen[0]]))
        .collect();
    while chosen.len() < g {
        let scores: Vec<f64> = dist
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (d, w))| if chosen.contains(&i) { 0.0 } else { d.max(0.0) * w })
            .collect();
        let next = if scores.iter().sum::<f64>() > 0.0 {
            weighted_index(&scores, rng)
        } else {
            // all remaining points coincide with a seed; take the first free one
            (0..points.len())
                .find(|i| !chosen.contains(i))
                .expect("g <= points.len() guarantees a free point")
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(1.0 - points[i].dot(&points[next]));
        }
    }
    chosen
}

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        target -= w;
        if target <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

struct Params {
    pi: Vec<f64>, // index 0 = background
    means: Vec<Vec<f64>>,
    kappas: Vec<f64>,
}

impl Params {
    fn from_mixture(m: &VmfMixture) -> Self {
        let mut pi = vec![m.background_weight()];
        let mut means = Vec::new();
        let mut kappas = Vec::new();
        for (w, comp) in m.components() {
            pi.push(*w);
            means.push(comp.mean_direction().as_slice().to_vec());
            kappas.push(comp.concentration());
        }
        Params { pi, means, kappas }
    }

    fn to_mixture(&self, dim: usize) -> Result<VmfMixture> {
        let components = self
            .means
            .iter()
            .zip(&self.kappas)
            .zip(self.pi.iter().skip(1))
            .map(|((mu, kappa), w)| {
                Ok((*w, VmfComponent::new(UnitVector::normalized(mu.clone())?, *kappa)?))
            })
            .collect::<Result<Vec<_>>>()?;
        VmfMixture::new(self.pi[0], components, dim)
    }
}

fn run_em(
    points: &[UnitVector],
    weights: &[f64],
    init: VmfMixture,
    cfg: &EmConfig,
) -> Result<EmOutcome> {
    let dim = init.dim();
    let g = init.num_components();
    let total_weight: f64 = weights.iter().sum();
    let mut params = Params::from_mixture(&init);
    let mut mixture = init;

    let (mut resp, mut ll) = e_step(&mixture, points, weights)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut reseed_events = 0usize;
    let mut saturated = false;

    for _ in 0..cfg.max_iters {
        let prev_params_snapshot = (params.means.clone(), params.kappas.clone());
        let reseeded = m_step(&mut params, &resp, points, weights, total_weight, cfg, g, dim);
        saturated |= params.kappas.iter().any(|k| *k >= KAPPA_MAX);

        let mut candidate = params.to_mixture(dim)?;
        let (mut resp_new, mut ll_new) = e_step(&candidate, points, weights)?;

        if !reseeded.is_empty() {
            reseed_events += reseeded.len();
            if ll_new < ll - 1e-12 {
                // a re-seed lost likelihood; fall back to keeping the starved
                // components where they were (still a valid M-step argmax)
                for &gi in &reseeded {
                    params.means[gi] = prev_params_snapshot.0[gi].clone();
                    params.kappas[gi] = prev_params_snapshot.1[gi];
                }
                reseed_events -= reseeded.len();
                candidate = params.to_mixture(dim)?;
                let redo = e_step(&candidate, points, weights)?;
                resp_new = redo.0;
                ll_new = redo.1;
            }
        }

        mixture = candidate;
        trace.push(ll_new);
        let improvement = (ll_new - ll).abs() / ll.abs().max(1.0);
        resp = resp_new;
        ll = ll_new;
        if improvement < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(EmOutcome {
        mixture,
        log_likelihood: trace,
        converged,
        reseed_events,
        saturated,
    })
}

/// Responsibilities for every point plus the weighted log-likelihood.
fn e_step(
    mixture: &VmfMixture,
    points: &[UnitVector],
    weights: &[f64],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let cache = MixtureDensity::new(mixture)?;
    let mut resp = Vec::with_capacity(points.len());
    let mut ll = 0.0;
    for (p, w) in points.iter().zip(weights) {
        ll += w * cache.log_mixture_density(p.as_slice());
        resp.push(cache.posterior(p.as_slice(), 1.0)?);
    }
    Ok((resp, ll))
}

/// Exact M-step under the background floor and kappa clamp. Returns indices
/// of components that were re-seeded after starving.
#[allow(clippy::too_many_arguments)]
fn m_step(
    params: &mut Params,
    resp: &[Vec<f64>],
    points: &[UnitVector],
    weights: &[f64],
    total_weight: f64,
    cfg: &EmConfig,
    g: usize,
    dim: usize,
) -> Vec<usize> {
    let mut mass = vec![0.0; g + 1];
    let mut resultants = vec![vec![0.0; dim]; g];
    for ((gamma, point), w) in resp.iter().zip(points).zip(weights) {
        for (gi, r) in gamma.iter().enumerate() {
            let contribution = w * r;
            mass[gi] += contribution;
            if gi >= 1 {
                for (acc, coord) in resultants[gi - 1].iter_mut().zip(point.as_slice()) {
                    *acc += contribution * coord;
                }
            }
        }
    }

    // weights: unconstrained maximizer, projected onto {pi0 >= floor}
    let pi0_hat = mass[0] / total_weight;
    if pi0_hat < cfg.pi0_floor {
        params.pi[0] = cfg.pi0_floor;
        let semantic_mass: f64 = mass[1..].iter().sum();
        if semantic_mass > 0.0 {
            for gi in 1..=g {
                params.pi[gi] = (1.0 - cfg.pi0_floor) * mass[gi] / semantic_mass;
            }
        } else {
            for gi in 1..=g {
                params.pi[gi] = (1.0 - cfg.pi0_floor) / g as f64;
            }
        }
    } else {
        for gi in 0..=g {
            params.pi[gi] = mass[gi] / total_weight;
        }
    }

    // directions and concentrations
    let mut starved = Vec::new();
    for gi in 0..g {
        let component_mass = mass[gi + 1];
        if component_mass < STARVATION_FRACTION * total_weight {
            starved.push(gi);
            continue;
        }
        let resultant_norm = norm(&resultants[gi]);
        if resultant_norm <= 1e-300 {
            // any direction maximizes a zero resultant; keep the old one
            continue;
        }
        for (m, r) in params.means[gi].iter_mut().zip(&resultants[gi]) {
            *m = r / resultant_norm;
        }
        let rbar = (resultant_norm / component_mass).min(1.0);
        let start = estimate_kappa(rbar, dim).map(|e| e.kappa).unwrap_or(KAPPA_MAX);
        params.kappas[gi] = refine_kappa(dim, rbar, start);
    }

    if starved.is_empty() {
        return starved;
    }

    // Re-seed each starved component at the point the mixture explains worst
    // (lowest max-responsibility), one point per component.
    let mut worst: Vec<(usize, f64)> = resp
        .iter()
        .enumerate()
        .map(|(i, gamma)| (i, gamma.iter().cloned().fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    worst.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    for (slot, &gi) in starved.iter().enumerate() {
        let point_idx = worst[slot.min(worst.len() - 1)].0;
        params.means[gi] = points[point_idx].as_slice().to_vec();
        params.kappas[gi] = cfg.kappa_init;
    }
    starved
}

/// Newton refinement of the concentration MLE A_d(kappa) = rbar, starting
/// from the closed-form approximation.
fn refine_kappa(d: usize, rbar: f64, start: f64) -> f64 {
    if rbar <= 1e-10 {
        return 0.0;
    }
    let mut kappa = start.clamp(0.0, KAPPA_MAX);
    if rbar >= 1.0 - 1e-12 || kappa >= KAPPA_MAX {
        return KAPPA_MAX;
    }
    if kappa < 1e-4 {
        return kappa;
    }
    for _ in 0..4 {
        let a = mean_resultant_ratio(d, kappa);
        let derivative = 1.0 - a * a - (d as f64 - 1.0) / kappa * a;
        if !derivative.is_finite() || derivative.abs() < 1e-300 {
            break;
        }
        let next = kappa - (a - rbar) / derivative;
        if !next.is_finite() {
            break;
        }
        kappa = next.clamp(1e-8, KAPPA_MAX);
        if kappa >= KAPPA_MAX {
            return KAPPA_MAX;
        }
    }
    kappa
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(coords: &[f64]) -> UnitVector {
        UnitVector::normalized(coords.to_vec()).unwrap()
    }

    #[test]
    fn rejects_fewer_points_than_components() {
        let points = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let err = em_fit(&points, &[1.0, 1.0], 3, &EmConfig::default(), 0);
        assert!(matches!(err, Err(Error::TooFewPoints { needed: 3, got: 2 })));
    }

    #[test]
    fn rejects_bad_weights() {
        let points = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        assert!(em_fit(&points, &[1.0, f64::NAN], 1, &EmConfig::default(), 0).is_err());
        assert!(em_fit(&points, &[0.0, 0.0], 1, &EmConfig::default(), 0).is_err());
        assert!(em_fit(&points, &[1.0], 1, &EmConfig::default(), 0).is_err());
    }

    #[test]
    fn degenerate_single_direction() {
        let u = unit(&[0.6, -0.8, 0.0]);
        let points = vec![u.clone(); 20];
        let weights = vec![1.0; 20];
        let cfg = EmConfig::default();
        let out = em_fit(&points, &weights, 1, &cfg, 7).unwrap();
        let (_, comp) = &out.mixture.components()[0];
        assert!(comp.mean_direction().dot(&u) > 1.0 - 1e-9);
        assert_eq!(comp.concentration(), KAPPA_MAX);
        assert!(out.saturated);
        assert!((out.mixture.background_weight() - cfg.pi0_floor).abs() < 1e-12);
    }

    #[test]
    fn refine_kappa_hits_mle_root() {
        // mpmath: A_3(kappa) = 0.5 at kappa = 1.796755984723713,
        //         A_3(kappa) = 0.9 at kappa = 9.999999587768954
        for (rbar, root) in [(0.5, 1.796755984723713), (0.9, 9.999999587768954)] {
            let start = estimate_kappa(rbar, 3).unwrap().kappa;
            let refined = refine_kappa(3, rbar, start);
            assert!(
                ((refined - root) / root).abs() < 1e-10,
                "rbar={rbar}: {refined} vs {root}"
            );
        }
    }

    #[test]
    fn trace_monotone_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..5u64 {
            let points: Vec<UnitVector> = (0..120)
                .map(|_| {
                    unit(&[
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                    ])
                })
                .collect();
            let weights = vec![1.0; points.len()];
            let out = em_fit(&points, &weights, 3, &EmConfig::default(), seed).unwrap();
            for pair in out.log_likelihood.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-9,
                    "seed {seed}: LL dropped {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn warm_start_continues_from_given_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<UnitVector> = (0..60)
            .map(|_| {
                unit(&[
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() + 2.0,
                ])
            })
            .collect();
        let weights = vec![1.0; points.len()];
        let first = em_fit(&points, &weights, 2, &EmConfig::default(), 3).unwrap();
        let second = em_fit_warm(&points, &weights, &first.mixture, &EmConfig::default()).unwrap();
        // warm start begins at (or above) where the cold fit ended
        assert!(second.log_likelihood[0] >= first.log_likelihood.last().unwrap() - 1e-9);
        for pair in second.log_likelihood.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9);
        }
    }
}
