//! Minimizing an approximately convex function by sampling `exp(-beta f_v)`.
//!
//! `f_v` is the ball-smoothed potential. Its gradient is estimated by mean
//! estimation over antithetic two-point samples, and the chain is a plain
//! Langevin walk on `beta f_v`.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm};
use crate::potentials::{ModelKind, PotentialModel, StochasticSeed};
use crate::qme::{self, OracleKind, QmeConfig, QueryLedger};
use crate::rng::{self, tags};
use crate::samplers::DIVERGENCE_RADIUS;

pub const OPTIMIZE_PHASE: &str = "optimize";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    /// Target optimality gap.
    pub eps: f64,
    /// `c` in `beta = c d / eps`.
    pub beta_const: f64,
    /// Smoothing radius; `eps / (M d)` when unset.
    pub smoothing_v: Option<f64>,
    /// Lipschitz constant; the model's gradient-norm bound when unset.
    pub lipschitz_m: Option<f64>,
    pub repeat_count: usize,
    /// TV accuracy asked of the sampler.
    pub tv_target: f64,
    /// `c` in the smoothness `c beta M sqrt(d) / v` handed to the planner.
    pub smoothness_const: f64,
    pub step_size: Option<f64>,
    pub steps: Option<usize>,
    pub sigma_hat_sq: Option<f64>,
    /// Reject `v > eps / (M d)`.
    pub enforce_v_bound: bool,
    /// Fraction of each chain discarded before averaging `f`.
    pub burn_in: f64,
    pub start: Option<Vec<f64>>,
    pub qme: QmeConfig,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            eps: 0.2,
            beta_const: 1.0,
            smoothing_v: None,
            lipschitz_m: None,
            repeat_count: 10,
            tv_target: 0.1,
            smoothness_const: 1.0,
            step_size: None,
            steps: None,
            sigma_hat_sq: None,
            enforce_v_bound: true,
            burn_in: 0.25,
            start: None,
            qme: QmeConfig::default(),
        }
    }
}

/// Resolved schedule for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizePlan {
    pub d: usize,
    pub beta_temp: f64,
    pub smoothing_v: f64,
    pub lipschitz_m: f64,
    /// Smoothness of `beta f_v`.
    pub sampler_smoothness: f64,
    /// LSI lower bound `(beta mu / 2) exp(-3 beta eps / d)`.
    pub lsi_alpha: f64,
    /// KL accuracy matching `tv_target` through Pinsker.
    pub sampler_eps: f64,
    pub eta: f64,
    pub steps: usize,
    pub sigma_hat_sq: f64,
    /// Bound on the second moment of one scaled two-point sample.
    pub var_bound: f64,
    pub theorem_eta: f64,
    pub theorem_steps: f64,
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        if !(self.beta_const > 0.0) || !(self.smoothness_const > 0.0) {
            return Err(Error::param("beta_const", "constants must be positive"));
        }
        if self.repeat_count == 0 {
            return Err(Error::param("repeat_count", "must be positive"));
        }
        if !(self.tv_target > 0.0 && self.tv_target < 1.0) {
            return Err(Error::param("tv_target", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::param("burn_in", "must lie in [0, 1)"));
        }
        for (name, v) in [
            ("smoothing_v", self.smoothing_v),
            ("lipschitz_m", self.lipschitz_m),
            ("step_size", self.step_size),
            ("sigma_hat_sq", self.sigma_hat_sq),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::param(name, "must be positive"));
                }
            }
        }
        if self.steps == Some(0) {
            return Err(Error::param("steps", "must be positive"));
        }
        Ok(())
    }

    pub fn plan(&self, model: &PotentialModel) -> Result<OptimizePlan> {
        self.validate()?;
        let mu = match &model.kind {
            ModelKind::PerturbedStronglyConvex { mu, .. } => *mu,
            _ => {
                return Err(Error::Precondition(format!(
                    "optimizer needs a perturbed strongly convex model, got {}",
                    model.kind.name()
                )))
            }
        };
        let d = model.d as f64;
        let m = self.lipschitz_m.unwrap_or(model.grad_norm_bound);
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::MissingConstant("lipschitz_m"));
        }
        let v_max = self.eps / (m * d);
        let v = self.smoothing_v.unwrap_or(v_max);
        if self.enforce_v_bound && v > v_max * (1.0 + 1e-12) {
            return Err(Error::param("smoothing_v", format!("must not exceed eps/(M d) = {v_max}")));
        }
        let beta = self.beta_const * d / self.eps;
        let l = self.smoothness_const * beta * m * d.sqrt() / v;
        let alpha = lsi_lower_bound(beta, mu, self.eps, model.d);
        let se = 2.0 * self.tv_target * self.tv_target;
        let theorem_eta = se * alpha / (d * l * l);
        let theorem_steps = (d * l * l * f64::max(1.0, 10f64.ln()) / (se * alpha * alpha)).ceil();
        let steps = match self.steps {
            Some(k) => k,
            None if theorem_steps <= 1e9 => theorem_steps as usize,
            None => {
                return Err(Error::param(
                    "steps",
                    format!("theorem schedule needs {theorem_steps:.3e} steps; set an override"),
                ))
            }
        };
        Ok(OptimizePlan {
            d: model.d,
            beta_temp: beta,
            smoothing_v: v,
            lipschitz_m: m,
            sampler_smoothness: l,
            lsi_alpha: alpha,
            sampler_eps: se,
            eta: self.step_size.unwrap_or(theorem_eta),
            steps,
            sigma_hat_sq: self.sigma_hat_sq.unwrap_or(alpha * se),
            var_bound: (beta * d * m).powi(2),
            theorem_eta,
            theorem_steps,
        })
    }
}

/// `(beta mu / 2) exp(-3 beta eps / d)`.
pub fn lsi_lower_bound(beta: f64, mu: f64, eps: f64, d: usize) -> f64 {
    0.5 * beta * mu * (-3.0 * beta * eps / d as f64).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub x_best: Vec<f64>,
    /// Exact `f` at `x_best`.
    pub f_best: f64,
    pub x_final: Vec<f64>,
    /// Time average of `f` after burn-in.
    pub mean_f: f64,
    pub gap: Option<f64>,
    pub success: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub plan: OptimizePlan,
    pub chains: Vec<ChainOutcome>,
    /// Grid-search minimum used as ground truth.
    pub f_star: Option<f64>,
    pub gap: Option<f64>,
    pub success_rate: Option<f64>,
    pub ledger: QueryLedger,
}

/// Runs `repeat_count` independent chains and returns the best point found.
pub fn approx_convex_minimize<R: Rng + ?Sized>(
    model: &PotentialModel,
    cfg: &OptimizeConfig,
    ledger: &mut QueryLedger,
    rng: &mut R,
) -> Result<(Vec<f64>, f64, OptimizeReport)> {
    let plan = cfg.plan(model)?;
    let x0 = match &cfg.start {
        Some(s) if s.len() != model.d => {
            return Err(Error::DimensionMismatch {
                expected: model.d,
                got: s.len(),
            })
        }
        Some(s) => s.clone(),
        None => vec![0.0; model.d],
    };
    let master = rng.next_u64();
    let f_star = grid_minimum(model, 401).ok();
    let runs: Vec<Result<(ChainOutcome, QueryLedger)>> = (0..cfg.repeat_count as u64)
        .into_par_iter()
        .map(|c| {
            let mut l = QueryLedger::new();
            l.set_phase(OPTIMIZE_PHASE);
            let out = run_chain(model, cfg, &plan, &x0, master, c, &mut l)?;
            Ok((out, l))
        })
        .collect();
    let mut chains = Vec::with_capacity(runs.len());
    for r in runs {
        let (mut out, l) = r?;
        ledger.merge(&l);
        if let Some(fs) = f_star {
            let gap = out.f_best - fs;
            out.gap = Some(gap);
            out.success = Some(gap <= cfg.eps);
        }
        chains.push(out);
    }
    let best = chains
        .iter()
        .min_by(|a, b| a.f_best.total_cmp(&b.f_best))
        .expect("repeat_count > 0");
    let (x_best, f_best) = (best.x_best.clone(), best.f_best);
    let success_rate = f_star.map(|_| {
        chains.iter().filter(|c| c.success == Some(true)).count() as f64 / chains.len() as f64
    });
    let report = OptimizeReport {
        plan,
        f_star,
        gap: f_star.map(|fs| f_best - fs),
        success_rate,
        chains,
        ledger: ledger.clone(),
    };
    Ok((x_best, f_best, report))
}

fn run_chain(
    model: &PotentialModel,
    cfg: &OptimizeConfig,
    plan: &OptimizePlan,
    x0: &[f64],
    master: u64,
    chain: u64,
    ledger: &mut QueryLedger,
) -> Result<ChainOutcome> {
    let d = model.d;
    let mut walk = rng::stream(master, &[tags::CHAIN, chain, tags::MOMENTUM]);
    let mut draws = rng::stream(master, &[tags::CHAIN, chain, tags::PROVIDER]);
    let req = cfg
        .qme
        .request(d, plan.var_bound, plan.sigma_hat_sq, OracleKind::Evaluation)
        .with_queries_per_sample(2);
    let beta = plan.beta_temp;
    let v = plan.smoothing_v;
    let noise = (2.0 * plan.eta).sqrt();
    let burn = (plan.steps as f64 * cfg.burn_in) as usize;

    let mut x = x0.to_vec();
    let mut scratch = QueryLedger::new();
    let observe = |x: &[f64], rng: &mut rng::SimRng, ledger: &mut QueryLedger| {
        model.stochastic_eval(x, &StochasticSeed::new(rng.next_u64()), ledger)
    };
    let mut best_obs = observe(&x, &mut draws, ledger)?;
    let mut x_best = x.clone();
    let (mut f_sum, mut f_count) = (0.0, 0usize);
    for step in 1..=plan.steps {
        let g = qme::quantum_mean_estimate(
            &req,
            |r| {
                let xi = StochasticSeed::new(r.next_u64());
                let mut s = model.smoothed_grad_sample(&x, v, &xi, &mut scratch)?;
                s.iter_mut().for_each(|c| *c *= beta);
                Ok(s)
            },
            &mut draws,
            ledger,
        )?;
        let z = rng::gaussian_vec(&mut walk, d);
        for ((xi, gi), zi) in x.iter_mut().zip(&g).zip(&z) {
            *xi += -plan.eta * gi + noise * zi;
        }
        if !all_finite(&x) || norm(&x) > DIVERGENCE_RADIUS {
            return Err(Error::Divergence {
                step,
                reason: "optimizer chain left the domain".into(),
            });
        }
        let obs = observe(&x, &mut draws, ledger)?;
        if obs < best_obs {
            best_obs = obs;
            x_best.clone_from(&x);
        }
        if step > burn {
            f_sum += model.value(&x);
            f_count += 1;
        }
    }
    Ok(ChainOutcome {
        f_best: model.value(&x_best),
        x_best,
        x_final: x,
        mean_f: if f_count > 0 { f_sum / f_count as f64 } else { f64::NAN },
        gap: None,
        success: None,
    })
}

/// Minimum of `f` over a regular grid covering every point that can beat
/// the origin; `points` per axis. Only for `d <= 3`.
pub fn grid_minimum(model: &PotentialModel, points: usize) -> Result<f64> {
    let (mu, amplitude) = match &model.kind {
        ModelKind::PerturbedStronglyConvex { mu, amplitude, .. } => (*mu, *amplitude),
        _ => return Err(Error::Precondition("grid search needs a perturbed quadratic".into())),
    };
    if model.d > 3 || points < 2 {
        return Err(Error::param("points", "grid search needs d <= 3 and at least 2 points"));
    }
    let f0 = model.value(&vec![0.0; model.d]);
    let r = (2.0 * (f0 + amplitude) / mu).max(0.0).sqrt();
    let h = 2.0 * r / (points - 1) as f64;
    let total = points.pow(model.d as u32);
    let best = (0..total)
        .into_par_iter()
        .map(|mut idx| {
            let mut x = vec![0.0; model.d];
            for xi in x.iter_mut() {
                *xi = -r + h * (idx % points) as f64;
                idx /= points;
            }
            model.value(&x)
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(best.min(f0))
}
