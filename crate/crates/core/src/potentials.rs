//! Target potentials and their oracles.
//!
//! A [`PotentialModel`] bundles a potential `f` with the constants the
//! samplers need (L, mu, alpha, M, sigma). Three families are built in:
//!
//! - finite-sum quadratics `f_i(x) = |x - c_i|^2 / 2`, whose Gibbs measure is
//!   exactly `N(mean(c), I)`;
//! - a two-component Gaussian mixture, non-convex once the components
//!   separate, with a computed log-Sobolev lower bound;
//! - a strongly convex quadratic plus a bounded sinusoidal ripple.
//!
//! Stochastic oracles use multiplicative noise `f(x; xi) = zeta * f_i(x)` with
//! `zeta ~ U[1 - a, 1 + a]`, where both the component `i` and `zeta` are pure
//! functions of the seed.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist_sq, norm, norm_sq};
use crate::qme::QueryLedger;
use crate::rng::{self, derive_seed, unit_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPurpose {
    ComponentIndex,
    NoiseRealization,
    SmoothingDirection,
}

impl SeedPurpose {
    fn tag(self) -> u64 {
        match self {
            SeedPurpose::ComponentIndex => 0xC0,
            SeedPurpose::NoiseRealization => 0xC1,
            SeedPurpose::SmoothingDirection => 0xC2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StochasticSeed {
    pub seed: u64,
    pub purpose: SeedPurpose,
}

impl StochasticSeed {
    pub fn new(seed: u64) -> Self {
        StochasticSeed {
            seed,
            purpose: SeedPurpose::NoiseRealization,
        }
    }

    pub fn with_purpose(seed: u64, purpose: SeedPurpose) -> Self {
        StochasticSeed { seed, purpose }
    }

    fn sub(&self, purpose: SeedPurpose) -> u64 {
        derive_seed(self.seed, &[purpose.tag()])
    }
}

/// User-supplied potential for the `Custom` kind.
pub trait CustomPotential: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;
    fn component_value(&self, _i: usize, x: &[f64]) -> f64 {
        self.value(x)
    }
    fn component_grad(&self, _i: usize, x: &[f64]) -> Vec<f64> {
        self.grad(x)
    }
}

#[derive(Clone)]
pub enum ModelKind {
    FiniteSumQuadratic {
        centers: Vec<Vec<f64>>,
    },
    GaussianMixture {
        means: Vec<Vec<f64>>,
        weights: Vec<f64>,
        var: f64,
    },
    PerturbedStronglyConvex {
        mu: f64,
        amplitude: f64,
        frequency: f64,
    },
    Custom(Arc<dyn CustomPotential>),
}

impl fmt::Debug for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::FiniteSumQuadratic { centers } => f
                .debug_struct("FiniteSumQuadratic")
                .field("n", &centers.len())
                .finish(),
            ModelKind::GaussianMixture { means, var, .. } => f
                .debug_struct("GaussianMixture")
                .field("components", &means.len())
                .field("var", var)
                .finish(),
            ModelKind::PerturbedStronglyConvex {
                mu,
                amplitude,
                frequency,
            } => f
                .debug_struct("PerturbedStronglyConvex")
                .field("mu", mu)
                .field("amplitude", amplitude)
                .field("frequency", frequency)
                .finish(),
            ModelKind::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::FiniteSumQuadratic { .. } => "finite-sum-quadratic",
            ModelKind::GaussianMixture { .. } => "gaussian-mixture",
            ModelKind::PerturbedStronglyConvex { .. } => "perturbed-strongly-convex",
            ModelKind::Custom(_) => "custom",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PotentialModel {
    pub d: usize,
    pub n: usize,
    /// Smoothness L (full and per-component).
    pub smoothness: f64,
    pub mu: f64,
    pub lsi_alpha: f64,
    /// Gradient-norm bound M on the experiment ball.
    pub grad_norm_bound: f64,
    /// Standard deviation bound of the stochastic gradient.
    pub noise_sigma: f64,
    /// Half-width `a` of the multiplicative noise `U[1 - a, 1 + a]`.
    pub noise_amplitude: f64,
    /// Radius of the ball on which M is valid.
    pub domain_radius: f64,
    pub x_star: Option<Vec<f64>>,
    pub kind: ModelKind,
}

impl PotentialModel {
    /// Finite-sum quadratic with `n` centers drawn uniformly on the sphere of
    /// the given radius.
    pub fn finite_sum_quadratic(
        d: usize,
        n: usize,
        radius: f64,
        center_seed: u64,
        noise_amplitude: f64,
    ) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::param("d, n", "must be positive"));
        }
        let mut r = rng::stream(center_seed, &[rng::tags::MODEL]);
        let centers = (0..n)
            .map(|_| {
                rng::unit_sphere(&mut r, d)
                    .into_iter()
                    .map(|v| v * radius)
                    .collect()
            })
            .collect();
        Self::finite_sum_from_centers(centers, noise_amplitude)
    }

    pub fn finite_sum_from_centers(centers: Vec<Vec<f64>>, noise_amplitude: f64) -> Result<Self> {
        let n = centers.len();
        if n == 0 {
            return Err(Error::param("centers", "need at least one center"));
        }
        let d = centers[0].len();
        if d == 0 || centers.iter().any(|c| c.len() != d) {
            return Err(Error::param("centers", "ragged or empty centers"));
        }
        check_amplitude(noise_amplitude)?;
        let mean = crate::linalg::mean_of(&centers);
        let spread = centers.iter().map(|c| dist_sq(c, &mean)).sum::<f64>() / n as f64;
        let max_off = centers
            .iter()
            .map(|c| dist_sq(c, &mean).sqrt())
            .fold(0.0, f64::max);
        let domain_radius = 10.0 * (d as f64).sqrt();
        let m = domain_radius + max_off;
        let a2 = noise_amplitude * noise_amplitude / 3.0;
        let sigma = (spread * (1.0 + a2) + a2 * m * m).sqrt();
        Ok(PotentialModel {
            d,
            n,
            smoothness: 1.0,
            mu: 1.0,
            lsi_alpha: 1.0,
            grad_norm_bound: m,
            noise_sigma: sigma,
            noise_amplitude,
            domain_radius,
            x_star: Some(mean),
            kind: ModelKind::FiniteSumQuadratic { centers },
        })
    }

    /// `f(x) = |x|^2 / 2` as a one-component finite sum.
    pub fn isotropic_quadratic(d: usize) -> Result<Self> {
        Self::finite_sum_from_centers(vec![vec![0.0; d]], 0.0)
    }

    /// Equal-weight mixture of `N(+a e1, s^2 I)` and `N(-a e1, s^2 I)`.
    pub fn gaussian_mixture(d: usize, a: f64, s: f64, noise_amplitude: f64) -> Result<Self> {
        if d == 0 || !(s > 0.0) || !(a >= 0.0) {
            return Err(Error::param("mixture", "need d > 0, s > 0, a >= 0"));
        }
        check_amplitude(noise_amplitude)?;
        let mut m1 = vec![0.0; d];
        m1[0] = a;
        let mut m2 = vec![0.0; d];
        m2[0] = -a;
        let s2 = s * s;
        let diam_sq = 4.0 * a * a;
        let smoothness = f64::max(1.0 / s2, diam_sq / (4.0 * s2 * s2) - 1.0 / s2);
        let mu = (1.0 / s2 - a * a / (s2 * s2)).max(0.0);
        let alpha = f64::min(mixture_lsi_lower_bound(a, s).max(mu), 1.0 / s2);
        let domain_radius = 10.0 * (d as f64).sqrt() * s + a;
        let m = (domain_radius + a) / s2;
        let sigma = noise_amplitude * m / 3f64.sqrt();
        Ok(PotentialModel {
            d,
            n: 1,
            smoothness,
            mu,
            lsi_alpha: alpha,
            grad_norm_bound: m,
            noise_sigma: sigma,
            noise_amplitude,
            domain_radius,
            x_star: None,
            kind: ModelKind::GaussianMixture {
                means: vec![m1, m2],
                weights: vec![0.5, 0.5],
                var: s2,
            },
        })
    }

    /// `f(x) = mu |x|^2 / 2 + A sin(omega |x|_1)`.
    ///
    /// `mu` is the strong convexity of the convex part; `f` itself is within
    /// `A` of it. The ripple makes `f` non-smooth on the coordinate planes, so
    /// `smoothness` is the almost-everywhere Hessian bound.
    pub fn perturbed_quadratic(
        d: usize,
        mu: f64,
        amplitude: f64,
        frequency: f64,
        noise_amplitude: f64,
        domain_radius: Option<f64>,
    ) -> Result<Self> {
        if d == 0 || !(mu > 0.0) || !(amplitude >= 0.0) {
            return Err(Error::param("perturbed", "need d > 0, mu > 0, amplitude >= 0"));
        }
        check_amplitude(noise_amplitude)?;
        let dd = d as f64;
        let domain_radius = domain_radius.unwrap_or(10.0 * (dd / mu).sqrt());
        let m = mu * domain_radius + amplitude * frequency * dd.sqrt();
        Ok(PotentialModel {
            d,
            n: 1,
            smoothness: mu + amplitude * frequency * frequency * dd,
            mu,
            lsi_alpha: mu * (-2.0 * amplitude).exp(),
            grad_norm_bound: m,
            noise_sigma: noise_amplitude * m / 3f64.sqrt(),
            noise_amplitude,
            domain_radius,
            x_star: if amplitude == 0.0 {
                Some(vec![0.0; d])
            } else {
                None
            },
            kind: ModelKind::PerturbedStronglyConvex {
                mu,
                amplitude,
                frequency,
            },
        })
    }

    pub fn custom(
        d: usize,
        n: usize,
        smoothness: f64,
        grad_norm_bound: f64,
        noise_sigma: f64,
        potential: Arc<dyn CustomPotential>,
    ) -> Self {
        PotentialModel {
            d,
            n,
            smoothness,
            mu: 0.0,
            lsi_alpha: 0.0,
            grad_norm_bound,
            noise_sigma,
            noise_amplitude: 0.0,
            domain_radius: f64::INFINITY,
            x_star: None,
            kind: ModelKind::Custom(potential),
        }
    }

    pub fn kappa(&self) -> Option<f64> {
        (self.mu > 0.0).then(|| self.smoothness / self.mu)
    }

    /// Mean and covariance of the Gibbs measure when it is Gaussian.
    pub fn target_gaussian(&self) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
        match &self.kind {
            ModelKind::FiniteSumQuadratic { .. } => {
                let mean = self.x_star.clone()?;
                let cov = (0..self.d)
                    .map(|i| (0..self.d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect();
                Some((mean, cov))
            }
            ModelKind::PerturbedStronglyConvex { mu, amplitude, .. } if *amplitude == 0.0 => {
                let cov = (0..self.d)
                    .map(|i| {
                        (0..self.d)
                            .map(|j| if i == j { 1.0 / mu } else { 0.0 })
                            .collect()
                    })
                    .collect();
                Some((vec![0.0; self.d], cov))
            }
            _ => None,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Noise-free `f(x)`. Touches no ledger.
    pub fn eval_exact(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.value(x))
    }

    pub(crate) fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::FiniteSumQuadratic { centers } => {
                centers.iter().map(|c| 0.5 * dist_sq(x, c)).sum::<f64>() / centers.len() as f64
            }
            ModelKind::GaussianMixture {
                means,
                weights,
                var,
            } => mixture_neg_log_density(x, means, weights, *var),
            ModelKind::PerturbedStronglyConvex {
                mu,
                amplitude,
                frequency,
            } => {
                let l1: f64 = x.iter().map(|v| v.abs()).sum();
                0.5 * mu * norm_sq(x) + amplitude * (frequency * l1).sin()
            }
            ModelKind::Custom(p) => p.value(x),
        }
    }

    /// Exact full gradient. Touches no ledger.
    pub fn grad_exact(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.grad(x))
    }

    pub(crate) fn grad(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            ModelKind::FiniteSumQuadratic { centers } => {
                let mut g = vec![0.0; self.d];
                for c in centers {
                    for ((gi, xi), ci) in g.iter_mut().zip(x).zip(c) {
                        *gi += xi - ci;
                    }
                }
                let k = centers.len() as f64;
                g.iter_mut().for_each(|v| *v /= k);
                g
            }
            ModelKind::GaussianMixture {
                means,
                weights,
                var,
            } => {
                let resp = mixture_responsibilities(x, means, weights, *var);
                let mut g = vec![0.0; self.d];
                for (r, m) in resp.iter().zip(means) {
                    for ((gi, xi), mi) in g.iter_mut().zip(x).zip(m) {
                        *gi += r * (xi - mi) / var;
                    }
                }
                g
            }
            ModelKind::PerturbedStronglyConvex {
                mu,
                amplitude,
                frequency,
            } => {
                let l1: f64 = x.iter().map(|v| v.abs()).sum();
                let c = amplitude * frequency * (frequency * l1).cos();
                x.iter().map(|&v| mu * v + c * sign(v)).collect()
            }
            ModelKind::Custom(p) => p.grad(x),
        }
    }

    pub(crate) fn component_value(&self, i: usize, x: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::FiniteSumQuadratic { centers } => 0.5 * dist_sq(x, &centers[i]),
            ModelKind::Custom(p) => p.component_value(i, x),
            _ => self.value(x),
        }
    }

    pub(crate) fn component_grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            ModelKind::FiniteSumQuadratic { centers } => {
                x.iter().zip(&centers[i]).map(|(a, b)| a - b).collect()
            }
            ModelKind::Custom(p) => p.component_grad(i, x),
            _ => self.grad(x),
        }
    }

    /// `grad f_i(x)`; charges one classical gradient query.
    pub fn grad_component(&self, i: usize, x: &[f64], ledger: &mut QueryLedger) -> Result<Vec<f64>> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange { index: i, n: self.n });
        }
        self.check_dim(x)?;
        ledger.charge_grad_classical(1);
        Ok(self.component_grad(i, x))
    }

    /// Full gradient via all `n` components; charges `n` classical queries.
    pub fn full_gradient(&self, x: &[f64], ledger: &mut QueryLedger) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        ledger.charge_grad_classical(self.n as u64);
        Ok(self.grad(x))
    }

    /// Component index and multiplicative factor encoded by a seed.
    pub fn realization(&self, xi: &StochasticSeed) -> (usize, f64) {
        let i = if self.n > 1 {
            (derive_seed(xi.sub(SeedPurpose::ComponentIndex), &[]) % self.n as u64) as usize
        } else {
            0
        };
        let u = unit_from_seed(xi.sub(SeedPurpose::NoiseRealization));
        let zeta = 1.0 + self.noise_amplitude * (2.0 * u - 1.0);
        (i, zeta)
    }

    pub(crate) fn stochastic_value(&self, x: &[f64], xi: &StochasticSeed) -> f64 {
        let (i, zeta) = self.realization(xi);
        zeta * self.component_value(i, x)
    }

    /// `grad f(x; xi)`, the gradient of one stochastic realization.
    pub fn stochastic_grad(&self, x: &[f64], xi: &StochasticSeed) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let (i, zeta) = self.realization(xi);
        Ok(self.component_grad(i, x).into_iter().map(|g| zeta * g).collect())
    }

    /// `f(x; xi)`; deterministic in `(x, xi)`, charges one classical evaluation.
    pub fn stochastic_eval(&self, x: &[f64], xi: &StochasticSeed, ledger: &mut QueryLedger) -> Result<f64> {
        self.check_dim(x)?;
        ledger.charge_eval_classical(1);
        Ok(self.stochastic_value(x, xi))
    }

    /// Single-sample unbiased estimate of the gradient of the ball-smoothed
    /// potential `f_v(x) = E_{xi, u ~ B(0,1)} f(x + v u; xi)`.
    ///
    /// Uses the antithetic two-point form
    /// `d / (2v) * (f(x + v w; xi) - f(x - v w; xi)) * w` with `w` uniform on
    /// the sphere; charges two classical evaluations.
    pub fn smoothed_grad_sample(
        &self,
        x: &[f64],
        v: f64,
        xi: &StochasticSeed,
        ledger: &mut QueryLedger,
    ) -> Result<Vec<f64>> {
        if !(v > 0.0) {
            return Err(Error::param("v", "smoothing radius must be positive"));
        }
        self.check_dim(x)?;
        let mut dir_rng = rng::stream(xi.sub(SeedPurpose::SmoothingDirection), &[]);
        let w = rng::unit_sphere(&mut dir_rng, self.d);
        let plus: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a + v * b).collect();
        let minus: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a - v * b).collect();
        ledger.charge_eval_classical(2);
        let diff = self.stochastic_value(&plus, xi) - self.stochastic_value(&minus, xi);
        let s = self.d as f64 / (2.0 * v) * diff;
        Ok(w.into_iter().map(|wi| s * wi).collect())
    }

    /// Density `exp(-f(x))` for normalized potentials (mixture kind only).
    pub fn density(&self, x: &[f64]) -> Option<f64> {
        match &self.kind {
            ModelKind::GaussianMixture { .. } => Some((-self.value(x)).exp()),
            _ => None,
        }
    }
}

fn check_amplitude(a: f64) -> Result<()> {
    if !(0.0..1.0).contains(&a) {
        return Err(Error::param("noise_amplitude", "must lie in [0, 1)"));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn log_components(x: &[f64], means: &[Vec<f64>], weights: &[f64], var: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let log_norm = -0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
    means
        .iter()
        .zip(weights)
        .map(|(m, w)| w.ln() + log_norm - dist_sq(x, m) / (2.0 * var))
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

fn mixture_neg_log_density(x: &[f64], means: &[Vec<f64>], weights: &[f64], var: f64) -> f64 {
    -log_sum_exp(&log_components(x, means, weights, var))
}

fn mixture_responsibilities(x: &[f64], means: &[Vec<f64>], weights: &[f64], var: f64) -> Vec<f64> {
    let l = log_components(x, means, weights, var);
    let z = log_sum_exp(&l);
    l.iter().map(|t| (t - z).exp()).collect()
}

/// Log-Sobolev lower bound for `(N(a, s^2) + N(-a, s^2)) / 2` on the line.
///
/// Writes `f = W_rho + psi` with the rho-strongly convex reference
/// `W_rho(x) = rho x^2/2 + (1/s^2 - rho) ((|x| - a')_+)^2 / 2`,
/// `a' = a / (1 - rho s^2)`, bounds `osc(psi)` in closed form, and returns
/// `max_rho rho * exp(-osc)` (Bakry-Emery followed by Holley-Stroock).
pub fn mixture_lsi_lower_bound(a: f64, s: f64) -> f64 {
    let s2 = s * s;
    if a == 0.0 {
        return 1.0 / s2;
    }
    let h = |x: f64| std::f64::consts::LN_2 - (1.0 + (-2.0 * a * x.abs() / s2).exp()).ln();
    let steps = 2000;
    (1..steps)
        .map(|k| {
            let rho = k as f64 / steps as f64 / s2;
            let ap = a / (1.0 - rho * s2);
            let c_inf = a * (a - ap) / (2.0 * s2);
            let sup = f64::max(a * a / (2.0 * s2) + h(ap), c_inf + std::f64::consts::LN_2);
            rho * (-(sup - c_inf)).exp()
        })
        .fold(0.0, f64::max)
}

/// Numerical gradient by central differences; used by tests and diagnostics.
pub fn finite_difference_grad(model: &PotentialModel, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (model.value(&p) - model.value(&m)) / (2.0 * h)
        })
        .collect()
}

/// Distance from `x` to the model minimizer, if known.
pub fn distance_to_minimizer(model: &PotentialModel, x: &[f64]) -> Option<f64> {
    model.x_star.as_ref().map(|s| norm(&crate::linalg::sub(x, s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn two_centers() -> PotentialModel {
        PotentialModel::finite_sum_from_centers(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], 0.0).unwrap()
    }

    #[test]
    fn quadratic_minimum_is_zero() {
        let m = PotentialModel::isotropic_quadratic(2).unwrap();
        assert_eq!(m.eval_exact(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn finite_sum_average_of_components() {
        // (|(0,0)-(1,0)|^2/2 + |(0,0)-(-1,0)|^2/2) / 2 = 0.5
        let m = two_centers();
        assert!((m.eval_exact(&[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mixture_value_at_mode_matches_density() {
        let m = PotentialModel::gaussian_mixture(1, 1.5, 1.0, 0.0).unwrap();
        // Direct density oracle at x = 1.5.
        let g = |x: f64, mu: f64| (-(x - mu).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let p = 0.5 * g(1.5, 1.5) + 0.5 * g(1.5, -1.5);
        assert!((m.eval_exact(&[1.5]).unwrap() + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = two_centers();
        assert!(matches!(
            m.eval_exact(&[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn component_gradient_examples() {
        let m = two_centers();
        let mut l = QueryLedger::new();
        assert_eq!(m.grad_component(0, &[1.0, 0.0], &mut l).unwrap(), vec![0.0, 0.0]);
        assert_eq!(m.grad_component(0, &[0.0, 0.0], &mut l).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(l.totals().grad_c, 2);
        assert!(matches!(
            m.grad_component(2, &[0.0, 0.0], &mut l),
            Err(Error::IndexOutOfRange { index: 2, n: 2 })
        ));
    }

    #[test]
    fn component_mean_equals_full_gradient() {
        let m = PotentialModel::finite_sum_quadratic(3, 17, 2.0, 5, 0.0).unwrap();
        let mut r = rng::stream(1, &[]);
        let mut l = QueryLedger::new();
        for _ in 0..20 {
            let x = rng::gaussian_vec(&mut r, 3);
            let mut mean = vec![0.0; 3];
            for i in 0..m.n {
                let g = m.grad_component(i, &x, &mut l).unwrap();
                crate::linalg::axpy(&mut mean, 1.0 / m.n as f64, &g);
            }
            let full = m.grad_exact(&x).unwrap();
            assert!(crate::linalg::dist(&mean, &full) <= 1e-10);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let models = vec![
            PotentialModel::finite_sum_quadratic(3, 8, 1.0, 2, 0.1).unwrap(),
            PotentialModel::gaussian_mixture(2, 1.5, 1.0, 0.1).unwrap(),
            PotentialModel::perturbed_quadratic(2, 1.0, 0.05, 50.0, 0.0, None).unwrap(),
        ];
        let mut r = rng::stream(3, &[]);
        for m in &models {
            for _ in 0..20 {
                let x: Vec<f64> = (0..m.d).map(|_| r.random_range(0.1..1.5)).collect();
                let g = m.grad_exact(&x).unwrap();
                let fd = finite_difference_grad(m, &x, 1e-6);
                let rel = crate::linalg::dist(&g, &fd) / norm(&g).max(1e-3);
                assert!(rel <= 1e-5, "{:?}: rel {rel}", m.kind);
            }
        }
    }

    #[test]
    fn gradients_are_l_lipschitz() {
        let models = vec![
            PotentialModel::finite_sum_quadratic(2, 8, 1.0, 2, 0.0).unwrap(),
            PotentialModel::gaussian_mixture(1, 1.5, 1.0, 0.0).unwrap(),
            PotentialModel::gaussian_mixture(2, 2.0, 0.8, 0.0).unwrap(),
        ];
        let mut r = rng::stream(4, &[]);
        for m in &models {
            for _ in 0..1000 {
                let x = rng::gaussian_vec(&mut r, m.d);
                let y = rng::gaussian_vec(&mut r, m.d);
                let lhs = crate::linalg::dist(&m.grad(&x), &m.grad(&y));
                assert!(lhs <= m.smoothness * crate::linalg::dist(&x, &y) * (1.0 + 1e-9));
                for i in 0..m.n {
                    let lhs = crate::linalg::dist(&m.component_grad(i, &x), &m.component_grad(i, &y));
                    assert!(lhs <= m.smoothness * crate::linalg::dist(&x, &y) * (1.0 + 1e-9));
                }
            }
        }
    }

    #[test]
    fn constants_respect_invariants() {
        let models = vec![
            PotentialModel::finite_sum_quadratic(2, 8, 1.0, 2, 0.0).unwrap(),
            PotentialModel::gaussian_mixture(1, 0.5, 1.0, 0.0).unwrap(),
            PotentialModel::perturbed_quadratic(2, 1.0, 0.05, 50.0, 0.0, None).unwrap(),
        ];
        for m in &models {
            if m.mu > 0.0 && m.smoothness > 0.0 {
                assert!(m.mu <= m.smoothness);
            }
            assert!(m.lsi_alpha >= m.mu / 2.0 * (-0.2f64).exp() || m.mu == 0.0);
        }
    }

    #[test]
    fn mixture_lsi_bound_is_positive_and_below_gaussian() {
        let a = mixture_lsi_lower_bound(1.5, 1.0);
        assert!(a > 0.01 && a < 1.0, "{a}");
        assert_eq!(mixture_lsi_lower_bound(0.0, 2.0), 0.25);
    }

    #[test]
    fn stochastic_eval_is_deterministic_and_zero_at_minimum() {
        let m = PotentialModel::finite_sum_from_centers(vec![vec![0.0, 0.0]], 0.5).unwrap();
        let mut l = QueryLedger::new();
        for s in 0..50 {
            let xi = StochasticSeed::new(s);
            assert_eq!(m.stochastic_eval(&[0.0, 0.0], &xi, &mut l).unwrap(), 0.0);
            let a = m.stochastic_eval(&[0.3, 0.1], &xi, &mut l).unwrap();
            let b = m.stochastic_eval(&[0.3, 0.1], &xi, &mut l).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(l.totals().eval_c, 150);
    }

    #[test]
    fn stochastic_eval_is_unbiased() {
        let m = PotentialModel::finite_sum_quadratic(2, 10, 1.0, 9, 0.3).unwrap();
        let x = [0.4, -0.2];
        let mut l = QueryLedger::new();
        let n = 100_000u64;
        let vals: Vec<f64> = (0..n)
            .map(|s| m.stochastic_eval(&x, &StochasticSeed::new(s), &mut l).unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - m.eval_exact(&x).unwrap()).abs() <= 4.0 * se);
    }

    #[test]
    fn same_seed_difference_variance_is_bounded() {
        let m = PotentialModel::gaussian_mixture(2, 1.0, 1.0, 0.4).unwrap();
        let mut r = rng::stream(8, &[]);
        let mut l = QueryLedger::new();
        for _ in 0..5 {
            let x = rng::gaussian_vec(&mut r, 2);
            let y: Vec<f64> = x.iter().map(|v| v + 0.05).collect();
            let diffs: Vec<f64> = (0..20_000u64)
                .map(|s| {
                    let xi = StochasticSeed::new(s);
                    m.stochastic_eval(&x, &xi, &mut l).unwrap() - m.stochastic_eval(&y, &xi, &mut l).unwrap()
                })
                .collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
            let bound = m.noise_sigma.powi(2) * crate::linalg::dist_sq(&x, &y) * m.d as f64;
            assert!(var <= bound, "{var} > {bound}");
        }
    }

    #[test]
    fn smoothed_gradient_examples() {
        let mut l = QueryLedger::new();
        // f(x) = |x|^2 / 2 -> mean of the smoothed gradient is x.
        let q = PotentialModel::isotropic_quadratic(3).unwrap();
        let x = [0.5, -1.0, 2.0];
        let n = 100_000u64;
        let mut mean = vec![0.0; 3];
        for s in 0..n {
            let g = q.smoothed_grad_sample(&x, 0.1, &StochasticSeed::new(s), &mut l).unwrap();
            crate::linalg::axpy(&mut mean, 1.0 / n as f64, &g);
        }
        // Antithetic differences of a quadratic are linear, so the estimate
        // is d (x . w) w and its mean is x up to Monte Carlo error.
        for (m, t) in mean.iter().zip(&x) {
            assert!((m - t).abs() < 0.05, "{m} vs {t}");
        }
        assert!(matches!(
            q.smoothed_grad_sample(&x, 0.0, &StochasticSeed::new(0), &mut l),
            Err(Error::InvalidParameter { .. })
        ));
    }

    #[test]
    fn smoothed_gradient_of_linear_and_abs() {
        struct Linear;
        impl CustomPotential for Linear {
            fn value(&self, x: &[f64]) -> f64 {
                2.0 * x[0] - x[1]
            }
            fn grad(&self, _x: &[f64]) -> Vec<f64> {
                vec![2.0, -1.0]
            }
        }
        struct Abs;
        impl CustomPotential for Abs {
            fn value(&self, x: &[f64]) -> f64 {
                x[0].abs()
            }
            fn grad(&self, x: &[f64]) -> Vec<f64> {
                vec![sign(x[0])]
            }
        }
        let mut l = QueryLedger::new();
        let lin = PotentialModel::custom(2, 1, 0.0, 3.0, 0.0, Arc::new(Linear));
        let n = 100_000u64;
        let mut mean = [0.0; 2];
        let mut sq = [0.0; 2];
        for s in 0..n {
            let g = lin.smoothed_grad_sample(&[0.3, 0.3], 0.5, &StochasticSeed::new(s), &mut l).unwrap();
            for k in 0..2 {
                mean[k] += g[k] / n as f64;
                sq[k] += g[k] * g[k] / n as f64;
            }
        }
        for (k, t) in [2.0, -1.0].iter().enumerate() {
            let se = ((sq[k] - mean[k] * mean[k]) / n as f64).sqrt();
            assert!((mean[k] - t).abs() <= 4.0 * se + 1e-12);
        }
        let abs = PotentialModel::custom(1, 1, 0.0, 1.0, 0.0, Arc::new(Abs));
        let mut m = 0.0;
        for s in 0..n {
            m += abs.smoothed_grad_sample(&[0.0], 0.1, &StochasticSeed::new(s), &mut l).unwrap()[0];
        }
        // |x| is even, so the two-point difference vanishes at 0.
        assert_eq!(m, 0.0);
    }
}
