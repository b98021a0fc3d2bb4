//! Stochastic gradient estimators.
//!
//! - [`gaussian_smoothing_gradient`]: classical two-point zeroth-order estimator.
//! - [`phase_pipeline_gradient`]: phase oracle + Jordan + median + MLMC.
//! - [`quantum_stochastic_gradient`]: clipped mean estimation around a
//!   Jordan anchor, robust to heavy-tailed components.
//! - [`mlmc_unbiased`]: removes the bias of any tunable-accuracy estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jordan::{self, GridSpec};
use crate::linalg::{add, axpy, dist, norm};
use crate::potentials::{PotentialModel, StochasticSeed};
use crate::qme::{self, OracleKind, QmeConfig, QueryLedger};
use crate::rng::{self, tags};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasFlag {
    Unbiased,
    BiasedHighProb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    pub g: Vec<f64>,
    pub sigma_hat_sq: f64,
    pub bias_flag: BiasFlag,
    /// Queries charged by this call alone.
    pub ledger_delta: QueryLedger,
}

/// Runs `f` against a fresh ledger in the caller's phase, then merges it back.
fn tracked<T>(ledger: &mut QueryLedger, f: impl FnOnce(&mut QueryLedger) -> Result<T>) -> Result<(T, QueryLedger)> {
    let mut local = QueryLedger::new();
    local.set_phase(ledger.current_phase());
    let out = f(&mut local)?;
    ledger.merge(&local);
    Ok((out, local))
}

/// Two-point Gaussian smoothing estimator averaged over `b` directions:
/// `(f(x + nu u; xi) - f(x; xi)) / nu * u` with `u ~ N(0, I)` and both
/// evaluations sharing `xi`. Charges `2b` classical evaluations.
pub fn gaussian_smoothing_gradient<R: Rng + ?Sized>(
    model: &PotentialModel,
    x: &[f64],
    nu: f64,
    b: usize,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<GradEstimate> {
    if !(nu > 0.0) {
        return Err(Error::param("nu", "smoothing radius must be positive"));
    }
    if b == 0 {
        return Err(Error::param("b", "batch size must be at least 1"));
    }
    let d = model.d;
    let (g, delta) = tracked(ledger, |l| {
        let mut acc = vec![0.0; d];
        for _ in 0..b {
            let u = rng::gaussian_vec(rng, d);
            let xi = StochasticSeed::new(rng.random());
            let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + nu * b).collect();
            let diff = model.stochastic_eval(&xp, &xi, l)? - model.stochastic_eval(x, &xi, l)?;
            axpy(&mut acc, diff / nu, &u);
        }
        acc.iter_mut().for_each(|v| *v /= b as f64);
        Ok(acc)
    })?;
    Ok(GradEstimate {
        g,
        sigma_hat_sq: f64::NAN,
        bias_flag: BiasFlag::BiasedHighProb,
        ledger_delta: delta,
    })
}

/// MSE bound of the smoothing estimator at a point with gradient norm `grad_norm`.
pub fn smoothing_mse_bound(d: usize, b: usize, grad_norm: f64, sigma: f64, nu: f64, l: f64) -> f64 {
    let d = d as f64;
    4.0 * (d + 5.0) * (grad_norm * grad_norm + sigma * sigma) / b as f64 + 1.5 * nu * nu * l * l * (d + 3.0).powi(3)
}

// ---------------------------------------------------------------------------
// MLMC

pub const DEFAULT_J_MAX: u32 = 40;

/// Target standard deviation of level `j`: `2^{-3j/4} sigma_hat / 10`.
pub fn mlmc_level_std(sigma_hat: f64, j: u32) -> f64 {
    2f64.powf(-0.75 * j as f64) * sigma_hat / 10.0
}

/// Samples `J >= 1` with `P(J = j) = 2^-j` for `j < j_max`; the tail mass
/// `2^{1 - j_max}` sits on `j_max`. Returns `(J, P(J))`.
pub fn sample_level<R: Rng + ?Sized>(rng: &mut R, j_max: u32) -> (u32, f64) {
    let mut j = 1;
    while j < j_max && rng.random::<bool>() {
        j += 1;
    }
    let p = if j < j_max {
        2f64.powi(-(j as i32))
    } else {
        2f64.powi(1 - j_max as i32)
    };
    (j, p)
}

/// Multilevel unbiasing: `g0 + (g_J - g_{J-1}) / P(J)`, where every term is
/// a fresh call of `est` at the level's target standard deviation.
pub fn mlmc_unbiased<R, E>(
    mut est: E,
    sigma_hat: f64,
    j_max: u32,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    E: FnMut(f64, &mut R, &mut QueryLedger) -> Result<Vec<f64>>,
{
    if !(sigma_hat > 0.0) {
        return Err(Error::param("sigma_hat", "must be positive"));
    }
    if j_max == 0 {
        return Err(Error::param("j_max", "must be at least 1"));
    }
    let g0 = est(mlmc_level_std(sigma_hat, 0), rng, ledger)?;
    let (j, p) = sample_level(rng, j_max);
    let fine = est(mlmc_level_std(sigma_hat, j), rng, ledger)?;
    let coarse = est(mlmc_level_std(sigma_hat, j - 1), rng, ledger)?;
    if fine.len() != g0.len() || coarse.len() != g0.len() {
        return Err(Error::DimensionMismatch {
            expected: g0.len(),
            got: fine.len().max(coarse.len()),
        });
    }
    Ok(g0
        .iter()
        .zip(fine.iter().zip(&coarse))
        .map(|(a, (f, c))| a + (f - c) / p)
        .collect())
}

// ---------------------------------------------------------------------------
// Phase-oracle pipeline

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JordanPath {
    /// Statevector when the grid fits the qubit budget, contract otherwise.
    Auto,
    Statevector,
    Contract,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub qme: QmeConfig,
    pub path: JordanPath,
    pub qubit_budget: usize,
    pub j_max: u32,
    /// Per-coordinate error constant of a single Jordan run.
    pub jordan_error_const: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            qme: QmeConfig::default(),
            path: JordanPath::Auto,
            qubit_budget: jordan::DEFAULT_QUBIT_BUDGET,
            j_max: DEFAULT_J_MAX,
            jordan_error_const: 1500.0,
        }
    }
}

pub const JORDAN_SUCCESS_PROB: f64 = 2.0 / 3.0;

fn check_pipeline_model(model: &PotentialModel) -> Result<()> {
    if !(model.smoothness > 0.0) {
        return Err(Error::MissingConstant("smoothness"));
    }
    if !(model.grad_norm_bound > 0.0) {
        return Err(Error::MissingConstant("grad_norm_bound"));
    }
    if !(model.noise_sigma >= 0.0) || !model.noise_sigma.is_finite() {
        return Err(Error::MissingConstant("noise_sigma"));
    }
    Ok(())
}

/// Grid for a single run whose error is at most `a` with probability 2/3.
pub fn pipeline_grid(model: &PotentialModel, x: &[f64], a: f64, cfg: &PipelineConfig) -> Result<GridSpec> {
    let d = model.d as f64;
    let c = cfg.jordan_error_const;
    let eps_j = a * a / (c * c * d * d * model.smoothness);
    jordan::build_grid(model.d, eps_j, model.grad_norm_bound, model.smoothness, x, usize::MAX)
}

/// Charge of one phase-oracle construction for the grid:
/// `t = N / (2 L l)`, standard deviation `sigma l sqrt(d)`, accuracy `1/N0`.
fn charge_phase<R: Rng + ?Sized>(
    model: &PotentialModel,
    grid: &GridSpec,
    cfg: &PipelineConfig,
    phase_rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<bool> {
    let t = grid.n() as f64 / (2.0 * grid.l_jordan * grid.l);
    let sigma_eff = model.noise_sigma * grid.l * (model.d as f64).sqrt();
    let acc = (1.0 / grid.n0() as f64).min(0.5);
    let lf = cfg.qme.log_factor(model.d);
    for _ in 0..=cfg.qme.phase_retries {
        let c = qme::phase_oracle_charge(t, sigma_eff, acc, cfg.qme.c_q, lf, phase_rng, ledger)?;
        if !c.failed {
            return Ok(true);
        }
    }
    Ok(false)
}

/// One phase-oracle + Jordan run. Within `a` of the gradient with
/// probability at least 5/9; otherwise an arbitrary vector of norm at most `M`.
pub fn phase_jordan_run<R: Rng + ?Sized>(
    model: &PotentialModel,
    x: &[f64],
    a: f64,
    cfg: &PipelineConfig,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<Vec<f64>> {
    if !(a > 0.0) {
        return Err(Error::param("a", "accuracy must be positive"));
    }
    let grid = pipeline_grid(model, x, a, cfg)?;
    let mut phase_rng = rng::stream(rng.random(), &[tags::PHASE]);
    let phase_ok = charge_phase(model, &grid, cfg, &mut phase_rng, ledger)?;
    let use_sv = match cfg.path {
        JordanPath::Contract => false,
        JordanPath::Statevector => true,
        JordanPath::Auto => grid.qubits() <= cfg.qubit_budget,
    };
    let corrupt = |rng: &mut R| rng::uniform_ball(rng, model.d, model.grad_norm_bound);
    if !phase_ok {
        return Ok(corrupt(rng));
    }
    if use_sv {
        let mut spec = grid;
        spec.qubit_budget = cfg.qubit_budget;
        let noise_seed: u64 = rng.random();
        let eps_j = spec.eps;
        let f = |y: &[f64]| {
            let bits: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            let u = rng::unit_from_seed(rng::derive_seed(noise_seed, &bits));
            model.value(y) + eps_j * (2.0 * u - 1.0)
        };
        return jordan::jordan_gradient(f, &spec, rng);
    }
    if rng.random::<f64>() < JORDAN_SUCCESS_PROB {
        Ok(add(&model.grad(x), &rng::uniform_ball(rng, model.d, a)))
    } else {
        Ok(corrupt(rng))
    }
}

/// Median of repeated runs at accuracy `s / 2`; mean-squared error about `s^2`.
pub fn biased_phase_gradient<R: Rng + ?Sized>(
    model: &PotentialModel,
    x: &[f64],
    s: f64,
    cfg: &PipelineConfig,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<Vec<f64>> {
    let t = jordan::median_repetitions(model.grad_norm_bound, s * s);
    jordan::robust_median_gradient(|| phase_jordan_run(model, x, s / 2.0, cfg, rng, ledger), t, model.grad_norm_bound)
}

/// Unbiased gradient with variance about `sigma_hat^2` from stochastic
/// evaluations only.
pub fn phase_pipeline_gradient<R: Rng + ?Sized>(
    model: &PotentialModel,
    x: &[f64],
    sigma_hat: f64,
    cfg: &PipelineConfig,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<GradEstimate> {
    check_pipeline_model(model)?;
    if x.len() != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            got: x.len(),
        });
    }
    let (g, delta) = tracked(ledger, |l| {
        mlmc_unbiased(
            |s, r: &mut R, l: &mut QueryLedger| biased_phase_gradient(model, x, s, cfg, r, l),
            sigma_hat,
            cfg.j_max,
            rng,
            l,
        )
    })?;
    Ok(GradEstimate {
        g,
        sigma_hat_sq: sigma_hat * sigma_hat,
        bias_flag: BiasFlag::Unbiased,
        ledger_delta: delta,
    })
}

// ---------------------------------------------------------------------------
// Robust stochastic gradient

/// Multipliers of the robust estimator. Defaults follow the analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Alg4Constants {
    pub c_beta: f64,
    pub c_clip: f64,
    pub c_eps_prime: f64,
    pub var_sigma: f64,
    pub var_eps: f64,
    /// Failure probability of one component Jordan run; `None` means `L / beta`.
    pub component_fail_prob: Option<f64>,
    pub delta: f64,
    /// Anchor re-draws allowed when a reference gradient is supplied.
    pub anchor_redraws: u32,
    /// Above this many emulation draws the output is produced at contract level.
    pub max_emulation_draws: u64,
}

impl Default for Alg4Constants {
    fn default() -> Self {
        Alg4Constants {
            c_beta: 164.0,
            c_clip: 40.0,
            c_eps_prime: 12000.0,
            var_sigma: 10.0,
            var_eps: 3.0,
            component_fail_prob: None,
            delta: 0.05,
            anchor_redraws: 100,
            max_emulation_draws: 2_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alg4Params {
    pub eps: f64,
    pub sigma: f64,
    pub beta: f64,
    /// Clipping radius `D`.
    pub d_clip: f64,
    pub eps_prime: f64,
    /// Gradient norm bound `M`.
    pub m: f64,
    pub var_bound: f64,
    pub fail_prob: f64,
    pub noise_radius: f64,
    pub delta: f64,
    pub anchor_redraws: u32,
    pub max_emulation_draws: u64,
}

impl Alg4Params {
    pub fn new(l: f64, sigma: f64, eps: f64, m: f64, d: usize, c: &Alg4Constants) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        if !(sigma >= eps) {
            return Err(Error::Precondition(format!(
                "robust estimator needs sigma >= eps (sigma = {sigma}, eps = {eps})"
            )));
        }
        if !(l > 0.0) || !(m > 0.0) {
            return Err(Error::MissingConstant("smoothness / grad_norm_bound"));
        }
        let beta = c.c_beta * l * sigma * sigma / (eps * eps);
        let fail_prob = c.component_fail_prob.unwrap_or(l / beta).clamp(0.0, 1.0);
        Ok(Alg4Params {
            eps,
            sigma,
            beta,
            d_clip: c.c_clip * sigma * sigma / eps,
            eps_prime: eps * eps / (beta * beta * (d as f64).powi(3) * c.c_eps_prime * c.c_eps_prime),
            m,
            var_bound: c.var_sigma * sigma * sigma + c.var_eps * eps * eps,
            fail_prob,
            noise_radius: eps / 8.0,
            delta: c.delta,
            anchor_redraws: c.anchor_redraws,
            max_emulation_draws: c.max_emulation_draws,
        })
    }

    pub fn for_model(model: &PotentialModel, eps: f64, c: &Alg4Constants) -> Result<Self> {
        Self::new(model.smoothness, model.noise_sigma, eps, model.grad_norm_bound, model.d, c)
    }

    pub fn without_clipping(mut self) -> Self {
        self.d_clip = f64::INFINITY;
        self
    }
}

/// Jordan estimate of one component gradient: within `eps/8` with
/// probability `1 - fail_prob`, otherwise a point of the `M`-ball.
fn component_jordan<R: Rng + ?Sized>(
    comp: &dyn Fn(u64) -> Result<Vec<f64>>,
    xi: u64,
    p: &Alg4Params,
    d: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let g = comp(xi)?;
    if g.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: g.len(),
        });
    }
    if rng.random::<f64>() < p.fail_prob {
        Ok(rng::uniform_ball(rng, d, p.m))
    } else {
        Ok(add(&g, &rng::uniform_ball(rng, d, p.noise_radius)))
    }
}

/// Robust gradient of `E_xi f(x; xi)` from per-component Jordan runs.
///
/// `comp(xi)` returns the component gradient for the realization `xi`.
/// An anchor `s` is estimated from one realization; each sample `g` with
/// `|g - s| > D` is replaced by `s`; the clipped variable is then
/// mean-estimated to standard deviation `eps / 4`. When `reference` is
/// given, anchors further than `2 sigma` from it are re-drawn.
pub fn quantum_stochastic_gradient<R: Rng + ?Sized>(
    comp: &dyn Fn(u64) -> Result<Vec<f64>>,
    d: usize,
    p: &Alg4Params,
    qme_cfg: &QmeConfig,
    reference: Option<&[f64]>,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<GradEstimate> {
    let target = (p.eps / 4.0).powi(2);
    let (g, delta) = tracked(ledger, |l| {
        let mut anchor = None;
        for _ in 0..=p.anchor_redraws {
            l.charge_eval_quantum(1);
            let s = component_jordan(comp, rng.random(), p, d, rng)?;
            let ok = reference.map_or(true, |r| dist(&s, r) <= 2.0 * p.sigma);
            anchor = Some(s);
            if ok {
                break;
            }
        }
        let s = anchor.expect("at least one anchor draw");
        let req = qme_cfg.request(d, p.var_bound, target, OracleKind::Evaluation);
        qme::quantum_mean_estimate(
            &req,
            |r: &mut R| {
                let g = component_jordan(comp, r.random(), p, d, r)?;
                Ok(if dist(&g, &s) <= p.d_clip { g } else { s.clone() })
            },
            rng,
            l,
        )
    })?;
    Ok(GradEstimate {
        g,
        sigma_hat_sq: target,
        bias_flag: BiasFlag::BiasedHighProb,
        ledger_delta: delta,
    })
}

/// Robust estimator on a model's stochastic realizations at `x`.
///
/// When the emulation would need more than `max_emulation_draws` draws the
/// output is `grad f(x)` plus Gaussian noise of total variance `(eps/4)^2`,
/// with the same quantum charge.
pub fn quantum_stochastic_gradient_model<R: Rng + ?Sized>(
    model: &PotentialModel,
    x: &[f64],
    p: &Alg4Params,
    qme_cfg: &QmeConfig,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<GradEstimate> {
    let target = (p.eps / 4.0).powi(2);
    let req = qme_cfg.request(model.d, p.var_bound, target, OracleKind::Evaluation);
    if req.draws().unwrap_or(u64::MAX) > p.max_emulation_draws {
        let (g, delta) = tracked(ledger, |l| {
            l.charge_eval_quantum(1 + req.quantum_cost()?);
            let z = rng::gaussian_vec(rng, model.d);
            let sd = p.eps / 4.0 / (model.d as f64).sqrt();
            Ok(model.grad(x).iter().zip(&z).map(|(g, z)| g + sd * z).collect())
        })?;
        return Ok(GradEstimate {
            g,
            sigma_hat_sq: target,
            bias_flag: BiasFlag::BiasedHighProb,
            ledger_delta: delta,
        });
    }
    let comp = |xi: u64| model.stochastic_grad(x, &StochasticSeed::new(xi));
    quantum_stochastic_gradient(&comp, model.d, p, qme_cfg, None, rng, ledger)
}

/// Unbiased version of the robust estimator via MLMC. Levels finer than
/// `sigma` are requested at their own accuracy; coarser ones at `sigma`.
pub fn alg4_mlmc_gradient<R: Rng + ?Sized>(
    model: &PotentialModel,
    x: &[f64],
    sigma_hat: f64,
    consts: &Alg4Constants,
    cfg: &PipelineConfig,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<GradEstimate> {
    let (g, delta) = tracked(ledger, |l| {
        mlmc_unbiased(
            |s, r: &mut R, l: &mut QueryLedger| {
                let eps = s.min(model.noise_sigma);
                let p = Alg4Params::for_model(model, eps, consts)?;
                Ok(quantum_stochastic_gradient_model(model, x, &p, &cfg.qme, r, l)?.g)
            },
            sigma_hat,
            cfg.j_max,
            rng,
            l,
        )
    })?;
    Ok(GradEstimate {
        g,
        sigma_hat_sq: sigma_hat * sigma_hat,
        bias_flag: BiasFlag::Unbiased,
        ledger_delta: delta,
    })
}

/// Norm of the difference, for tests and reports.
pub fn error_norm(g: &[f64], truth: &[f64]) -> f64 {
    norm(&crate::linalg::sub(g, truth))
}
