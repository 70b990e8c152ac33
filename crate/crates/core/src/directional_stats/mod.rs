//! Directional statistics on the unit hypersphere: von Mises-Fisher mixture
//! densities with a uniform background, posterior responsibilities (plain and
//! tempered), and weighted EM fitting.
//!
//! All densities are exposed in log space only; concentrations up to
//! [`KAPPA_MAX`] stay finite.

mod bessel;
mod em;

pub use bessel::{log_bessel_i, mean_resultant_ratio};
pub use em::{em_fit, em_fit_warm, EmConfig, EmOutcome};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Upper clamp for estimated concentrations.
pub const KAPPA_MAX: f64 = 1e4;

/// Tolerance for the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// A point on S^{d-1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wrap coordinates that are already unit-norm (within [`UNIT_NORM_TOL`]).
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidDimension(coords.len()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("unit vector coordinates"));
        }
        let norm = norm(&coords);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { norm });
        }
        Ok(UnitVector(coords))
    }

    /// Normalize arbitrary coordinates onto the sphere.
    pub fn normalized(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidDimension(coords.len()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("unit vector coordinates"));
        }
        let norm = norm(&coords);
        if norm == 0.0 {
            return Err(Error::NotUnitNorm { norm });
        }
        Ok(UnitVector(coords.into_iter().map(|c| c / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        dot(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;
    fn try_from(coords: Vec<f64>) -> Result<Self> {
        UnitVector::new(coords)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(v: UnitVector) -> Vec<f64> {
        v.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// One vMF component: mean direction and concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfComponent {
    mean_direction: UnitVector,
    concentration: f64,
}

impl VmfComponent {
    pub fn new(mean_direction: UnitVector, concentration: f64) -> Result<Self> {
        if !concentration.is_finite() || concentration < 0.0 {
            return Err(Error::invalid_parameter(
                "concentration",
                format!("must be finite and non-negative, got {concentration}"),
            ));
        }
        Ok(VmfComponent {
            mean_direction,
            concentration,
        })
    }

    pub fn mean_direction(&self) -> &UnitVector {
        &self.mean_direction
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn dim(&self) -> usize {
        self.mean_direction.dim()
    }

    /// log C_d(kappa) = (d/2-1) log kappa - (d/2) log(2 pi) - log I_{d/2-1}(kappa),
    /// with the analytic kappa -> 0 limit handled by the caller via
    /// [`log_uniform_density`].
    fn log_norm_const(&self) -> f64 {
        let d = self.dim() as f64;
        let kappa = self.concentration;
        let nu = d / 2.0 - 1.0;
        nu * kappa.ln() - (d / 2.0) * (2.0 * std::f64::consts::PI).ln()
            - log_bessel_i(nu, kappa)
    }
}

/// Log of the uniform density on S^{d-1}: -log(2 pi^{d/2} / Gamma(d/2)).
pub fn log_uniform_density(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidDimension(d));
    }
    let df = d as f64;
    Ok(-(std::f64::consts::LN_2 + (df / 2.0) * std::f64::consts::PI.ln() - ln_gamma(df / 2.0)))
}

/// Log vMF density log C_d(kappa) + kappa <mu, z>. At kappa = 0 this is the
/// uniform density, taken as the analytic limit rather than through the
/// normalizer formula.
pub fn log_vmf_density(z: &UnitVector, comp: &VmfComponent) -> Result<f64> {
    if z.dim() != comp.dim() {
        return Err(Error::DimensionMismatch {
            expected: comp.dim(),
            got: z.dim(),
        });
    }
    if comp.concentration == 0.0 {
        return log_uniform_density(z.dim());
    }
    Ok(comp.log_norm_const() + comp.concentration * comp.mean_direction.dot(z))
}

/// vMF mixture with a uniform background component (index 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct VmfMixture {
    background_weight: f64,
    components: Vec<(f64, VmfComponent)>,
    dim: usize,
}

impl VmfMixture {
    pub fn new(
        background_weight: f64,
        components: Vec<(f64, VmfComponent)>,
        dim: usize,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        if components.is_empty() {
            return Err(Error::invalid_parameter(
                "components",
                "mixture needs at least one vMF component",
            ));
        }
        let mut total = background_weight;
        if background_weight < 0.0 || !background_weight.is_finite() {
            return Err(Error::invalid_parameter(
                "background_weight",
                format!("must be in [0, 1], got {background_weight}"),
            ));
        }
        for (w, comp) in &components {
            if *w < 0.0 || !w.is_finite() {
                return Err(Error::invalid_parameter(
                    "component weight",
                    format!("must be non-negative, got {w}"),
                ));
            }
            if comp.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: comp.dim(),
                });
            }
            total += *w;
        }
        if (total - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid_parameter(
                "weights",
                format!("background + component weights must sum to 1, got {total}"),
            ));
        }
        Ok(VmfMixture {
            background_weight,
            components,
            dim,
        })
    }

    pub fn background_weight(&self) -> f64 {
        self.background_weight
    }

    pub fn components(&self) -> &[(f64, VmfComponent)] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Weighted log-density of the full mixture at `z`.
    pub fn log_density(&self, z: &UnitVector) -> Result<f64> {
        let cache = MixtureDensity::new(self)?;
        cache.check_dim(z)?;
        Ok(cache.log_mixture_density(z.as_slice()))
    }
}

/// Serialized checkpoint form: {"pi0", "components": [{"weight","mu","kappa"}], "dim"}.
#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    pi0: f64,
    components: Vec<ComponentRepr>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ComponentRepr {
    weight: f64,
    mu: Vec<f64>,
    kappa: f64,
}

impl TryFrom<MixtureRepr> for VmfMixture {
    type Error = Error;
    fn try_from(repr: MixtureRepr) -> Result<Self> {
        let components = repr
            .components
            .into_iter()
            .map(|c| Ok((c.weight, VmfComponent::new(UnitVector::new(c.mu)?, c.kappa)?)))
            .collect::<Result<Vec<_>>>()?;
        VmfMixture::new(repr.pi0, components, repr.dim)
    }
}

impl From<VmfMixture> for MixtureRepr {
    fn from(m: VmfMixture) -> MixtureRepr {
        MixtureRepr {
            pi0: m.background_weight,
            components: m
                .components
                .into_iter()
                .map(|(weight, comp)| ComponentRepr {
                    weight,
                    mu: comp.mean_direction.into(),
                    kappa: comp.concentration,
                })
                .collect(),
            dim: m.dim,
        }
    }
}

/// Posterior responsibilities over {background, cluster 1, ..., cluster G}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsibilityVector(Vec<f64>);

impl ResponsibilityVector {
    pub(crate) fn from_values(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        ResponsibilityVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Mass on the uniform background component.
    pub fn background(&self) -> f64 {
        self.0[0]
    }

    /// Mass on semantic clusters 1..=G, i.e. everything except the background.
    pub fn semantic(&self) -> &[f64] {
        &self.0[1..]
    }

    pub fn num_clusters(&self) -> usize {
        self.0.len() - 1
    }
}

/// Precomputed per-mixture constants for repeated density evaluations.
pub(crate) struct MixtureDensity<'a> {
    mixture: &'a VmfMixture,
    log_weights: Vec<f64>,
    log_norms: Vec<f64>,
    log_uniform: f64,
}

impl<'a> MixtureDensity<'a> {
    pub(crate) fn new(mixture: &'a VmfMixture) -> Result<Self> {
        let log_uniform = log_uniform_density(mixture.dim)?;
        let mut log_weights = Vec::with_capacity(mixture.components.len() + 1);
        log_weights.push(safe_ln(mixture.background_weight));
        let mut log_norms = Vec::with_capacity(mixture.components.len());
        for (w, comp) in &mixture.components {
            log_weights.push(safe_ln(*w));
            log_norms.push(if comp.concentration == 0.0 {
                log_uniform
            } else {
                comp.log_norm_const()
            });
        }
        Ok(MixtureDensity {
            mixture,
            log_weights,
            log_norms,
            log_uniform,
        })
    }

    pub(crate) fn check_dim(&self, z: &UnitVector) -> Result<()> {
        if z.dim() != self.mixture.dim {
            return Err(Error::DimensionMismatch {
                expected: self.mixture.dim,
                got: z.dim(),
            });
        }
        Ok(())
    }

    /// [log p_0(z), log p_1(z), ..., log p_G(z)], background first.
    pub(crate) fn log_component_densities(&self, z: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.mixture.components.len() + 1);
        out.push(self.log_uniform);
        for (g, (_, comp)) in self.mixture.components.iter().enumerate() {
            let kappa = comp.concentration;
            if kappa == 0.0 {
                out.push(self.log_uniform);
            } else {
                out.push(self.log_norms[g] + kappa * dot(comp.mean_direction.as_slice(), z));
            }
        }
        out
    }

    pub(crate) fn log_mixture_density(&self, z: &[f64]) -> f64 {
        let log_p = self.log_component_densities(z);
        log_sum_exp(
            log_p
                .iter()
                .zip(&self.log_weights)
                .map(|(p, w)| p + w)
                .collect::<Vec<_>>()
                .as_slice(),
        )
    }

    /// Tempered posterior with exponent `temper` applied to every component's
    /// log-likelihood, background included.
    pub(crate) fn posterior(&self, z: &[f64], temper: f64) -> Result<Vec<f64>> {
        let log_p = self.log_component_densities(z);
        let logits: Vec<f64> = log_p
            .iter()
            .zip(&self.log_weights)
            .map(|(p, w)| w + temper * p)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateMixture);
        }
        let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = out.iter().sum();
        for v in &mut out {
            *v /= total;
        }
        Ok(out)
    }
}

fn safe_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Posterior responsibility of each mixture component for `z` (Bayes rule in
/// log space with max subtraction).
pub fn responsibilities(mix: &VmfMixture, z: &UnitVector) -> Result<ResponsibilityVector> {
    tempered_responsibilities(mix, z, 1.0)
}

/// Responsibilities with each component's log-likelihood flattened by the
/// exponent `temper` in (0, 1]. `temper = 1` reproduces [`responsibilities`]
/// exactly (same code path).
pub fn tempered_responsibilities(
    mix: &VmfMixture,
    z: &UnitVector,
    temper: f64,
) -> Result<ResponsibilityVector> {
    if !temper.is_finite() || temper <= 0.0 {
        return Err(Error::invalid_parameter(
            "temper",
            format!("tempering factor must be positive, got {temper}"),
        ));
    }
    let cache = MixtureDensity::new(mix)?;
    cache.check_dim(z)?;
    let values = cache.posterior(z.as_slice(), temper)?;
    Ok(ResponsibilityVector::from_values(values))
}

/// Maps two-view agreement to a tempering factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperingConfig {
    /// Floor of the tempering factor for maximally disagreeing views.
    pub r_min: f64,
}

impl Default for TemperingConfig {
    fn default() -> Self {
        TemperingConfig { r_min: 0.1 }
    }
}

impl TemperingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.r_min.is_finite() || self.r_min <= 0.0 || self.r_min > 1.0 {
            return Err(Error::validation(
                "tempering.r_min",
                format!("must be in (0, 1], got {}", self.r_min),
            ));
        }
        Ok(())
    }
}

/// Precision-like tempering factor from two augmented views of the same
/// sample: r = max(r_min, (1 + <z1, z2>)/2), so r = 1 for identical views and
/// the floor for antipodal ones.
pub fn consistency_factor(z1: &UnitVector, z2: &UnitVector, cfg: &TemperingConfig) -> Result<f64> {
    if z1.dim() != z2.dim() {
        return Err(Error::DimensionMismatch {
            expected: z1.dim(),
            got: z2.dim(),
        });
    }
    let similarity = z1.dot(z2).clamp(-1.0, 1.0);
    if similarity >= 1.0 - 1e-12 {
        return Ok(1.0);
    }
    Ok(((1.0 + similarity) / 2.0).max(cfg.r_min))
}

/// Concentration estimate with a saturation indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaEstimate {
    pub kappa: f64,
    pub saturated: bool,
}

/// Banerjee et al. closed-form approximation of the vMF concentration MLE:
/// kappa = rbar (d - rbar^2) / (1 - rbar^2), clamped to [0, KAPPA_MAX].
pub fn estimate_kappa(mean_resultant_length: f64, d: usize) -> Result<KappaEstimate> {
    if d < 2 {
        return Err(Error::InvalidDimension(d));
    }
    let rbar = mean_resultant_length;
    if !rbar.is_finite() || rbar < 0.0 {
        return Err(Error::invalid_parameter(
            "mean_resultant_length",
            format!("must be in [0, 1), got {rbar}"),
        ));
    }
    if rbar >= 1.0 {
        return Ok(KappaEstimate {
            kappa: KAPPA_MAX,
            saturated: true,
        });
    }
    let df = d as f64;
    let kappa = rbar * (df - rbar * rbar) / (1.0 - rbar * rbar);
    if kappa >= KAPPA_MAX {
        Ok(KappaEstimate {
            kappa: KAPPA_MAX,
            saturated: true,
        })
    } else {
        Ok(KappaEstimate {
            kappa,
            saturated: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit(coords: &[f64]) -> UnitVector {
        UnitVector::normalized(coords.to_vec()).unwrap()
    }

    #[test]
    fn uniform_density_values() {
        // circle 2*pi, sphere 4*pi, S^3 area 2*pi^2 (mpmath oracle).
        assert_relative_eq!(log_uniform_density(2).unwrap(), -1.8378770664093455, epsilon = 1e-12);
        assert_relative_eq!(log_uniform_density(3).unwrap(), -2.5310242469692908, epsilon = 1e-12);
        assert_relative_eq!(log_uniform_density(4).unwrap(), -2.9826069522587457, epsilon = 1e-12);
        assert!(matches!(log_uniform_density(1), Err(Error::InvalidDimension(1))));
    }

    #[test]
    fn vmf_density_closed_form_d3() {
        // C_3(kappa) = kappa / (4 pi sinh kappa); values from mpmath.
        let mu = unit(&[0.0, 0.0, 1.0]);
        let comp = VmfComponent::new(mu.clone(), 2.0).unwrap();
        assert_relative_eq!(
            log_vmf_density(&mu, &comp).unwrap(),
            -1.1262444390235136,
            epsilon = 1e-12
        );
        let anti = unit(&[0.0, 0.0, -1.0]);
        assert_relative_eq!(
            log_vmf_density(&anti, &comp).unwrap(),
            -5.1262444390235136,
            epsilon = 1e-12
        );
    }

    #[test]
    fn vmf_density_zero_kappa_is_uniform() {
        let z = unit(&[1.0, 2.0, -0.5]);
        let comp = VmfComponent::new(unit(&[0.0, 1.0, 0.0]), 0.0).unwrap();
        assert_eq!(
            log_vmf_density(&z, &comp).unwrap(),
            log_uniform_density(3).unwrap()
        );
    }

    #[test]
    fn vmf_density_continuous_at_zero_kappa() {
        for d in [2, 3, 4, 16] {
            let mut coords = vec![0.0; d];
            coords[0] = 1.0;
            let mu = UnitVector::new(coords.clone()).unwrap();
            let comp = VmfComponent::new(mu.clone(), 1e-8).unwrap();
            let diff =
                (log_vmf_density(&mu, &comp).unwrap() - log_uniform_density(d).unwrap()).abs();
            assert!(diff < 1e-6, "d={d}: discontinuity {diff}");
        }
    }

    #[test]
    fn vmf_density_rejects_dim_mismatch_and_bad_kappa() {
        let comp = VmfComponent::new(unit(&[1.0, 0.0, 0.0]), 3.0).unwrap();
        let z2 = unit(&[1.0, 0.0]);
        assert!(log_vmf_density(&z2, &comp).is_err());
        assert!(VmfComponent::new(unit(&[1.0, 0.0]), f64::NAN).is_err());
        assert!(VmfComponent::new(unit(&[1.0, 0.0]), f64::INFINITY).is_err());
        assert!(VmfComponent::new(unit(&[1.0, 0.0]), -1.0).is_err());
    }

    fn two_component_mixture(pi0: f64, w1: f64, w2: f64, k1: f64, k2: f64) -> VmfMixture {
        VmfMixture::new(
            pi0,
            vec![
                (w1, VmfComponent::new(unit(&[1.0, 0.0, 0.0]), k1).unwrap()),
                (w2, VmfComponent::new(unit(&[1.0, 0.0, 0.0]), k2).unwrap()),
            ],
            3,
        )
        .unwrap()
    }

    #[test]
    fn responsibilities_single_component() {
        let mix = VmfMixture::new(
            0.0,
            vec![(1.0, VmfComponent::new(unit(&[0.0, 1.0, 0.0]), 5.0).unwrap())],
            3,
        )
        .unwrap();
        let gamma = responsibilities(&mix, &unit(&[0.3, -0.8, 0.1])).unwrap();
        assert_eq!(gamma.values(), &[0.0, 1.0]);
    }

    #[test]
    fn responsibilities_identical_components_split_evenly() {
        let mix = two_component_mixture(0.0, 0.5, 0.5, 4.0, 4.0);
        let gamma = responsibilities(&mix, &unit(&[0.1, 0.9, 0.2])).unwrap();
        assert_relative_eq!(gamma.values()[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(gamma.values()[2], 0.5, epsilon = 1e-12);
        assert_relative_eq!(gamma.background(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn responsibilities_kappa_zero_matches_background() {
        // pi0 = 0.5 plus one kappa=0 component: both densities are uniform.
        let mix = VmfMixture::new(
            0.5,
            vec![(0.5, VmfComponent::new(unit(&[1.0, 0.0, 0.0]), 0.0).unwrap())],
            3,
        )
        .unwrap();
        for z in [unit(&[1.0, 0.0, 0.0]), unit(&[-0.3, 0.4, 0.86])] {
            let gamma = responsibilities(&mix, &z).unwrap();
            assert_relative_eq!(gamma.values()[0], 0.5, epsilon = 1e-12);
            assert_relative_eq!(gamma.values()[1], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn tempered_matches_plain_at_one() {
        let mix = two_component_mixture(0.2, 0.5, 0.3, 3.0, 9.0);
        let z = unit(&[0.6, -0.3, 0.2]);
        let plain = responsibilities(&mix, &z).unwrap();
        let tempered = tempered_responsibilities(&mix, &z, 1.0).unwrap();
        assert_eq!(plain.values(), tempered.values());
    }

    #[test]
    fn tempered_flattens_toward_priors() {
        let mix = two_component_mixture(0.0, 0.5, 0.5, 1.0, 20.0);
        let z = unit(&[0.99, 0.1, 0.0]);
        let gamma = tempered_responsibilities(&mix, &z, 1e-9).unwrap();
        // equal priors over the two components; background prior is zero
        assert_relative_eq!(gamma.values()[1], 0.5, epsilon = 1e-6);
        assert_relative_eq!(gamma.values()[2], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn tempered_hand_softmax() {
        // Plant two components whose log densities at z = e_x are exactly -1
        // and -3, using the independent closed form C_3(k) = k/(4 pi sinh k).
        // With equal priors and r = 0.5 the tempered posterior is
        // e^{-0.5} / (e^{-0.5} + e^{-1.5}) = 0.73105857863000488 (mpmath).
        let kappa = 4.0_f64;
        let log_c = (kappa / (4.0 * std::f64::consts::PI * kappa.sinh())).ln();
        let mu_for = |target_logp: f64| {
            let x: f64 = (target_logp - log_c) / kappa;
            unit(&[x, (1.0 - x * x).sqrt(), 0.0])
        };
        let mix = VmfMixture::new(
            0.0,
            vec![
                (0.5, VmfComponent::new(mu_for(-1.0), kappa).unwrap()),
                (0.5, VmfComponent::new(mu_for(-3.0), kappa).unwrap()),
            ],
            3,
        )
        .unwrap();
        let z = unit(&[1.0, 0.0, 0.0]);
        let gamma = tempered_responsibilities(&mix, &z, 0.5).unwrap();
        assert_relative_eq!(gamma.values()[1], 0.73105857863000488, epsilon = 1e-9);
        assert_relative_eq!(gamma.values()[2], 1.0 - 0.73105857863000488, epsilon = 1e-9);
        assert_relative_eq!(gamma.background(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn tempered_rejects_non_positive_factor() {
        let mix = two_component_mixture(0.0, 0.5, 0.5, 1.0, 1.0);
        let z = unit(&[1.0, 0.0, 0.0]);
        assert!(tempered_responsibilities(&mix, &z, 0.0).is_err());
        assert!(tempered_responsibilities(&mix, &z, -0.5).is_err());
    }

    #[test]
    fn consistency_factor_contract() {
        let cfg = TemperingConfig::default();
        let z = unit(&[0.3, 0.4, 0.5]);
        assert_eq!(consistency_factor(&z, &z, &cfg).unwrap(), 1.0);
        let a = unit(&[1.0, 0.0, 0.0]);
        let b = unit(&[-1.0, 0.0, 0.0]);
        assert_relative_eq!(consistency_factor(&a, &b, &cfg).unwrap(), 0.1, epsilon = 1e-12);
        let c = unit(&[0.0, 1.0, 0.0]);
        assert_relative_eq!(consistency_factor(&a, &c, &cfg).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn kappa_estimate_values() {
        assert_eq!(estimate_kappa(0.0, 3).unwrap().kappa, 0.0);
        let e = estimate_kappa(0.5, 3).unwrap();
        assert_relative_eq!(e.kappa, 1.8333333333333333, epsilon = 1e-12);
        assert!(!e.saturated);
        let e = estimate_kappa(0.9, 3).unwrap();
        assert_relative_eq!(e.kappa, 10.373684210526319, epsilon = 1e-12);
        let e = estimate_kappa(1.0, 3).unwrap();
        assert_eq!(e.kappa, KAPPA_MAX);
        assert!(e.saturated);
        assert!(estimate_kappa(-0.1, 3).is_err());
    }

    #[test]
    fn kappa_estimate_near_true_mle_root() {
        // mpmath roots of A_3(kappa) = rbar
        for (rbar, root) in [(0.5, 1.796755984723713), (0.9, 9.999999587768954)] {
            let approx = estimate_kappa(rbar, 3).unwrap().kappa;
            assert!(
                ((approx - root) / root).abs() < 0.05,
                "rbar={rbar}: {approx} vs root {root}"
            );
            assert!(
                (mean_resultant_ratio(3, approx) - rbar).abs() < 0.01,
                "rbar={rbar}"
            );
        }
    }

    #[test]
    fn kappa_estimate_monotone() {
        let mut prev = -1.0;
        for i in 0..=999 {
            let rbar = i as f64 * 0.999 / 999.0;
            let k = estimate_kappa(rbar, 5).unwrap().kappa;
            assert!(k > prev, "rbar={rbar}");
            prev = k;
        }
    }

    #[test]
    fn mixture_serde_roundtrip_field_names() {
        let mix = two_component_mixture(0.1, 0.4, 0.5, 2.0, 7.0);
        let json = serde_json::to_value(&mix).unwrap();
        assert!(json.get("pi0").is_some());
        assert!(json.get("dim").is_some());
        let comp = &json["components"][0];
        assert!(comp.get("weight").is_some() && comp.get("mu").is_some() && comp.get("kappa").is_some());
        let back: VmfMixture = serde_json::from_value(json).unwrap();
        assert_eq!(back, mix);
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        let comp = VmfComponent::new(unit(&[1.0, 0.0]), 1.0).unwrap();
        assert!(VmfMixture::new(0.5, vec![(0.4, comp.clone())], 2).is_err());
        assert!(VmfMixture::new(-0.1, vec![(1.1, comp)], 2).is_err());
    }

    #[test]
    fn unit_vector_invariants() {
        assert!(UnitVector::new(vec![1.0]).is_err());
        assert!(UnitVector::new(vec![1.0, 1.0]).is_err());
        assert!(UnitVector::new(vec![f64::NAN, 0.0]).is_err());
        assert!(UnitVector::normalized(vec![0.0, 0.0]).is_err());
        let v = UnitVector::normalized(vec![3.0, 4.0]).unwrap();
        assert_relative_eq!(norm(v.as_slice()), 1.0, epsilon = 1e-12);
    }
}
