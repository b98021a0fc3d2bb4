//! HMC and LMC chains, their gradient providers, and the schedule planner.
//!
//! Every provider is plugged into the same two integrators:
//! the leapfrog step
//! `x' = x + eta p - eta^2/2 g(x)`, `p' = p - eta/2 (g(x) + g(x'))`
//! with two fresh gradient calls per step, and the Euler-Maruyama step
//! `x' = x - eta g(x) + sqrt(2 eta) z`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradest::{self, Alg4Constants, PipelineConfig};
use crate::linalg::{all_finite, dist_sq, norm};
use crate::potentials::PotentialModel;
use crate::qme::{self, OracleKind, QueryLedger};
use crate::rng::{self, tags, SimRng};

pub const DIVERGENCE_RADIUS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem {
    QsvrgHmc,
    QcvHmc,
    QsvrgLmc,
    QzHmc,
    QzLmc,
    SvrgHmc,
    CvHmc,
    SgHmc,
    SvrgLmc,
    Sgld,
}

impl Theorem {
    pub const ALL: [Theorem; 10] = [
        Theorem::QsvrgHmc,
        Theorem::QcvHmc,
        Theorem::QsvrgLmc,
        Theorem::QzHmc,
        Theorem::QzLmc,
        Theorem::SvrgHmc,
        Theorem::CvHmc,
        Theorem::SgHmc,
        Theorem::SvrgLmc,
        Theorem::Sgld,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Theorem::QsvrgHmc => "qsvrg-hmc",
            Theorem::QcvHmc => "qcv-hmc",
            Theorem::QsvrgLmc => "qsvrg-lmc",
            Theorem::QzHmc => "qz-hmc",
            Theorem::QzLmc => "qz-lmc",
            Theorem::SvrgHmc => "svrg-hmc",
            Theorem::CvHmc => "cv-hmc",
            Theorem::SgHmc => "sg-hmc",
            Theorem::SvrgLmc => "svrg-lmc",
            Theorem::Sgld => "sgld",
        }
    }

    pub fn is_hmc(&self) -> bool {
        matches!(
            self,
            Theorem::QsvrgHmc | Theorem::QcvHmc | Theorem::QzHmc | Theorem::SvrgHmc | Theorem::CvHmc | Theorem::SgHmc
        )
    }

    pub fn is_quantum(&self) -> bool {
        matches!(
            self,
            Theorem::QsvrgHmc | Theorem::QcvHmc | Theorem::QsvrgLmc | Theorem::QzHmc | Theorem::QzLmc
        )
    }

    pub fn is_zeroth_order(&self) -> bool {
        matches!(self, Theorem::QzHmc | Theorem::QzLmc)
    }
}

/// Multipliers standing in for the constants hidden by `O(.)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConstants {
    pub eta: f64,
    pub s: f64,
    pub t: f64,
    pub k: f64,
    pub b: f64,
    pub m: f64,
    pub sigma: f64,
    /// Initial KL divergence used inside the LMC step counts.
    pub kl0: f64,
    /// Distance of the initial point from the minimizer.
    pub init_dist: f64,
}

impl Default for PlanConstants {
    fn default() -> Self {
        PlanConstants {
            eta: 1.0,
            s: 1.0,
            t: 1.0,
            k: 1.0,
            b: 1.0,
            m: 1.0,
            sigma: 1.0,
            kl0: 10.0,
            init_dist: 0.0,
        }
    }
}

impl PlanConstants {
    /// Same constants with the step-size and step-count multipliers scaled
    /// so that the integration time is unchanged.
    pub fn with_step_multiplier(&self, c: f64) -> Self {
        PlanConstants {
            eta: self.eta * c,
            s: self.s / c,
            k: self.k / c,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub theorem: Theorem,
    pub eta: f64,
    /// Leapfrog steps per proposal.
    pub s: usize,
    /// Proposals.
    pub t: usize,
    /// Total integrator steps.
    pub k: usize,
    pub b: usize,
    pub m: usize,
    pub sigma_hat_sq: Option<f64>,
    pub constants: PlanConstants,
    #[serde(default = "one")]
    pub record_every: usize,
}

fn one() -> usize {
    1
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::param("eta", "must be positive"));
        }
        if self.s == 0 || self.t == 0 || self.k == 0 || self.b == 0 || self.m == 0 || self.record_every == 0 {
            return Err(Error::param("s, t, k, b, m", "must be positive"));
        }
        if let Some(s) = self.sigma_hat_sq {
            if !(s > 0.0) {
                return Err(Error::param("sigma_hat_sq", "must be positive"));
            }
        }
        Ok(())
    }
}

fn round_at_least_one(v: f64) -> usize {
    v.round().max(1.0) as usize
}

fn ceil_at_least_one(v: f64) -> usize {
    v.ceil().max(1.0) as usize
}

/// Schedule of `theorem` with every hidden constant replaced by a multiplier.
pub fn plan_hyperparams(theorem: Theorem, model: &PotentialModel, eps: f64, c: &PlanConstants) -> Result<HyperParams> {
    if !(eps > 0.0) {
        return Err(Error::param("eps", "must be positive"));
    }
    let l = model.smoothness;
    if !(l > 0.0) {
        return Err(Error::MissingConstant("smoothness"));
    }
    let d = model.d as f64;
    let n = model.n as f64;
    let mut hp = HyperParams {
        theorem,
        eta: 0.0,
        s: 1,
        t: 1,
        k: 1,
        b: 1,
        m: 1,
        sigma_hat_sq: None,
        constants: c.clone(),
        record_every: 1,
    };
    if theorem.is_hmc() {
        let mu = model.mu;
        if !(mu > 0.0) {
            return Err(Error::MissingConstant("mu"));
        }
        let kappa = l / mu;
        let k32 = kappa.powf(1.5);
        hp.eta = if theorem == Theorem::QzHmc {
            c.eta * eps / (d.sqrt() * k32)
        } else {
            c.eta * eps / (l.sqrt() * d.sqrt() * k32)
        };
        hp.s = ceil_at_least_one(c.s * l * d.sqrt() * k32 / eps);
        let w0 = (2.0 * c.init_dist * c.init_dist + 2.0 * d / mu).sqrt();
        hp.t = ceil_at_least_one(c.t * kappa * f64::max(1.0, (w0 / eps).ln()));
        hp.k = hp.s * hp.t;
        match theorem {
            Theorem::QsvrgHmc => {
                hp.b = round_at_least_one(c.b * l.powf(0.125) * eps.powf(0.25) * n.sqrt() / (d.powf(0.125) * kappa.powf(0.375)));
                hp.m = round_at_least_one(c.m * n / hp.b as f64);
            }
            Theorem::QcvHmc => {
                hp.b = round_at_least_one(c.b * d.powf(0.25) * kappa.powf(0.75) / (l.powf(0.25) * eps.sqrt()));
                hp.m = model.n;
            }
            Theorem::QzHmc => {
                hp.sigma_hat_sq = Some(c.sigma * l.powf(1.5) * d.sqrt() * eps / k32);
                hp.m = model.n;
            }
            Theorem::SvrgHmc => {
                hp.b = round_at_least_one(c.b * eps.powf(1.0 / 3.0) * n.powf(2.0 / 3.0));
                hp.m = round_at_least_one(c.m * n / hp.b as f64);
            }
            Theorem::CvHmc => {
                hp.b = round_at_least_one(c.b * d.sqrt() * k32 / (l.sqrt() * eps));
                hp.m = model.n;
            }
            Theorem::SgHmc => {
                hp.b = round_at_least_one(c.b * d / eps).min(model.n);
                hp.m = model.n;
            }
            _ => unreachable!(),
        }
    } else {
        let alpha = model.lsi_alpha;
        if !(alpha > 0.0) {
            return Err(Error::MissingConstant("lsi_alpha"));
        }
        let log_kl = f64::max(1.0, c.kl0.ln());
        let base_eta = eps * alpha / (d * l * l);
        match theorem {
            Theorem::QsvrgLmc | Theorem::SvrgLmc => {
                if theorem == Theorem::QsvrgLmc {
                    hp.b = round_at_least_one(c.b * n.powf(1.0 / 3.0));
                    hp.m = round_at_least_one(c.m * n.powf(2.0 / 3.0)).min(hp.b * hp.b);
                } else {
                    hp.b = ceil_at_least_one(c.b * n.sqrt());
                    hp.m = ceil_at_least_one(c.m * n.sqrt());
                }
                hp.eta = c.eta * f64::min(base_eta, alpha / (l * l * hp.m as f64));
                hp.k = ceil_at_least_one(c.k * l * l * log_kl / (alpha * alpha) * (n.powf(2.0 / 3.0) + d / eps));
            }
            Theorem::QzLmc | Theorem::Sgld => {
                hp.eta = c.eta * base_eta;
                hp.k = ceil_at_least_one(c.k * d * l * l * log_kl / (eps * alpha * alpha));
                if theorem == Theorem::QzLmc {
                    hp.sigma_hat_sq = Some(c.sigma * alpha * eps);
                    hp.m = model.n;
                } else {
                    hp.b = round_at_least_one(c.b * d / eps).min(model.n);
                    hp.m = model.n;
                }
            }
            _ => unreachable!(),
        }
    }
    hp.validate()?;
    Ok(hp)
}

/// Iterate of a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub anchor: Option<Vec<f64>>,
    pub anchor_full_grad: Option<Vec<f64>>,
    pub epoch_pos: usize,
    /// Gradient calls made so far.
    pub k: u64,
    pub rng_stream: u64,
}

impl ChainState {
    pub fn new(x0: Vec<f64>, rng_stream: u64) -> Self {
        let d = x0.len();
        ChainState {
            x: x0,
            p: vec![0.0; d],
            anchor: None,
            anchor_full_grad: None,
            epoch_pos: 0,
            k: 0,
            rng_stream,
        }
    }

    fn set_anchor(&mut self, x: &[f64], g: Vec<f64>) {
        self.anchor = Some(x.to_vec());
        self.anchor_full_grad = Some(g);
    }
}

fn anchor_of(state: &ChainState) -> Result<(&[f64], &[f64])> {
    match (&state.anchor, &state.anchor_full_grad) {
        (Some(a), Some(g)) => Ok((a, g)),
        _ => Err(Error::Precondition("variance-reduction anchor is not set".into())),
    }
}

/// `grad f_i(x) - grad f_i(a) + grad f(a)` for a uniformly drawn `i`.
fn correction_sample<R: Rng + ?Sized>(model: &PotentialModel, x: &[f64], a: &[f64], ga: &[f64], rng: &mut R) -> Vec<f64> {
    let i = rng.random_range(0..model.n);
    let gx = model.component_grad(i, x);
    let gax = model.component_grad(i, a);
    gx.iter().zip(&gax).zip(ga).map(|((p, q), r)| p - q + r).collect()
}

#[allow(clippy::too_many_arguments)]
fn vr_mean_estimate<R: Rng + ?Sized>(
    model: &PotentialModel,
    x: &[f64],
    a: &[f64],
    ga: &[f64],
    b: usize,
    qme_cfg: &qme::QmeConfig,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<Vec<f64>> {
    let var = model.smoothness * model.smoothness * dist_sq(x, a);
    if var == 0.0 {
        return Ok(ga.to_vec());
    }
    let req = qme_cfg
        .request(model.d, var, var / (b * b) as f64, OracleKind::Gradient)
        .with_queries_per_sample(2);
    qme::quantum_mean_estimate(&req, |r: &mut R| Ok(correction_sample(model, x, a, ga, r)), rng, ledger)
}

/// Quantum SVRG gradient. At `k mod m = 0` the anchor moves to `x` and the
/// full gradient is returned; otherwise the correction source is
/// mean-estimated to variance `L^2 |x - anchor|^2 / b^2`.
#[allow(clippy::too_many_arguments)]
pub fn qsvrg_gradient<R: Rng + ?Sized>(
    state: &mut ChainState,
    x: &[f64],
    model: &PotentialModel,
    b: usize,
    m: usize,
    qme_cfg: &qme::QmeConfig,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<Vec<f64>> {
    if b == 0 || m == 0 {
        return Err(Error::param("b, m", "must be at least 1"));
    }
    let out = if state.k % m as u64 == 0 {
        let g = model.full_gradient(x, ledger)?;
        state.set_anchor(x, g.clone());
        g
    } else {
        let (a, ga) = anchor_of(state)?;
        let (a, ga) = (a.to_vec(), ga.to_vec());
        vr_mean_estimate(model, x, &a, &ga, b, qme_cfg, rng, ledger)?
    };
    state.k += 1;
    state.epoch_pos = (state.k % m as u64) as usize;
    Ok(out)
}

/// Quantum control-variate gradient around the fixed initial anchor.
pub fn qcv_gradient<R: Rng + ?Sized>(
    state: &mut ChainState,
    x: &[f64],
    model: &PotentialModel,
    b: usize,
    qme_cfg: &qme::QmeConfig,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<Vec<f64>> {
    if b == 0 {
        return Err(Error::param("b", "must be at least 1"));
    }
    let (a, ga) = anchor_of(state)?;
    let (a, ga) = (a.to_vec(), ga.to_vec());
    let out = vr_mean_estimate(model, x, &a, &ga, b, qme_cfg, rng, ledger)?;
    state.k += 1;
    Ok(out)
}

fn classical_vr<R: Rng + ?Sized>(
    model: &PotentialModel,
    x: &[f64],
    a: &[f64],
    ga: &[f64],
    b: usize,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Vec<f64> {
    let mut acc = vec![0.0; model.d];
    for _ in 0..b {
        crate::linalg::axpy(&mut acc, 1.0, &correction_sample(model, x, a, ga, rng));
    }
    ledger.charge_grad_classical(2 * b as u64);
    acc.iter_mut().for_each(|v| *v /= b as f64);
    acc
}

/// Where a chain's gradients come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GradSource {
    Exact,
    Qsvrg { b: usize, m: usize },
    Qcv { b: usize },
    Svrg { b: usize, m: usize },
    Cv { b: usize },
    MiniBatch { b: usize },
    PhasePipeline { sigma_hat: f64 },
    Alg4Mlmc { sigma_hat: f64 },
}

impl GradSource {
    pub fn for_plan(hp: &HyperParams, zeroth: ZerothOrderOracle) -> Result<Self> {
        let sh = || {
            hp.sigma_hat_sq
                .map(f64::sqrt)
                .ok_or(Error::MissingConstant("sigma_hat_sq"))
        };
        Ok(match hp.theorem {
            Theorem::QsvrgHmc | Theorem::QsvrgLmc => GradSource::Qsvrg { b: hp.b, m: hp.m },
            Theorem::QcvHmc => GradSource::Qcv { b: hp.b },
            Theorem::SvrgHmc | Theorem::SvrgLmc => GradSource::Svrg { b: hp.b, m: hp.m },
            Theorem::CvHmc => GradSource::Cv { b: hp.b },
            Theorem::SgHmc | Theorem::Sgld => GradSource::MiniBatch { b: hp.b },
            Theorem::QzHmc | Theorem::QzLmc => match zeroth {
                ZerothOrderOracle::PhasePipeline => GradSource::PhasePipeline { sigma_hat: sh()? },
                ZerothOrderOracle::Alg4Mlmc => GradSource::Alg4Mlmc { sigma_hat: sh()? },
            },
        })
    }

    fn needs_fixed_anchor(&self) -> bool {
        matches!(self, GradSource::Qcv { .. } | GradSource::Cv { .. })
    }
}

/// Zeroth-order gradient route: the phase-oracle pipeline needs full
/// smoothness, the clipped estimator only per-realization smoothness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZerothOrderOracle {
    PhasePipeline,
    Alg4Mlmc,
}

/// A gradient source bound to a model and its own random stream.
pub struct GradProvider<'a> {
    pub model: &'a PotentialModel,
    pub source: GradSource,
    pub pipeline: PipelineConfig,
    pub alg4: Alg4Constants,
    rng: SimRng,
}

impl<'a> GradProvider<'a> {
    pub fn new(model: &'a PotentialModel, source: GradSource, seed: u64) -> Self {
        GradProvider {
            model,
            source,
            pipeline: PipelineConfig {
                path: gradest::JordanPath::Contract,
                ..Default::default()
            },
            alg4: Alg4Constants::default(),
            rng: rng::stream(seed, &[tags::PROVIDER]),
        }
    }

    pub fn with_pipeline(mut self, cfg: PipelineConfig) -> Self {
        self.pipeline = cfg;
        self
    }

    /// Sets the fixed control-variate anchor at `x0` when the source needs one.
    pub fn init(&mut self, state: &mut ChainState, ledger: &mut QueryLedger) -> Result<()> {
        if self.source.needs_fixed_anchor() {
            let x0 = state.x.clone();
            let g = self.model.full_gradient(&x0, ledger)?;
            state.set_anchor(&x0, g);
        }
        Ok(())
    }

    pub fn grad(&mut self, state: &mut ChainState, x: &[f64], ledger: &mut QueryLedger) -> Result<Vec<f64>> {
        let model = self.model;
        let rng = &mut self.rng;
        let qcfg = &self.pipeline.qme;
        match &self.source {
            GradSource::Exact => {
                state.k += 1;
                model.full_gradient(x, ledger)
            }
            GradSource::Qsvrg { b, m } => qsvrg_gradient(state, x, model, *b, *m, qcfg, rng, ledger),
            GradSource::Qcv { b } => qcv_gradient(state, x, model, *b, qcfg, rng, ledger),
            GradSource::Svrg { b, m } => {
                let out = if state.k % *m as u64 == 0 {
                    let g = model.full_gradient(x, ledger)?;
                    state.set_anchor(x, g.clone());
                    g
                } else {
                    let (a, ga) = anchor_of(state)?;
                    classical_vr(model, x, a, ga, *b, rng, ledger)
                };
                state.k += 1;
                state.epoch_pos = (state.k % *m as u64) as usize;
                Ok(out)
            }
            GradSource::Cv { b } => {
                let (a, ga) = anchor_of(state)?;
                let out = classical_vr(model, x, a, ga, *b, rng, ledger);
                state.k += 1;
                Ok(out)
            }
            GradSource::MiniBatch { b } => {
                let mut acc = vec![0.0; model.d];
                for _ in 0..*b {
                    let i = rng.random_range(0..model.n);
                    crate::linalg::axpy(&mut acc, 1.0, &model.grad_component(i, x, ledger)?);
                }
                acc.iter_mut().for_each(|v| *v /= *b as f64);
                state.k += 1;
                Ok(acc)
            }
            GradSource::PhasePipeline { sigma_hat } => {
                state.k += 1;
                Ok(gradest::phase_pipeline_gradient(model, x, *sigma_hat, &self.pipeline, rng, ledger)?.g)
            }
            GradSource::Alg4Mlmc { sigma_hat } => {
                state.k += 1;
                Ok(gradest::alg4_mlmc_gradient(model, x, *sigma_hat, &self.alg4, &self.pipeline, rng, ledger)?.g)
            }
        }
    }
}

/// Recorded output of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Proposal-end positions (HMC) or every `record_every`-th position (LMC).
    pub points: Vec<Vec<f64>>,
    pub final_state: ChainState,
}

fn guard(x: &[f64], step: usize) -> Result<()> {
    if !all_finite(x) {
        return Err(Error::Divergence {
            step,
            reason: "non-finite position".into(),
        });
    }
    if norm(x) > DIVERGENCE_RADIUS {
        return Err(Error::Divergence {
            step,
            reason: format!("|x| exceeded {DIVERGENCE_RADIUS:e}"),
        });
    }
    Ok(())
}

fn check_start(model: &PotentialModel, x0: &[f64], hp: &HyperParams) -> Result<()> {
    hp.validate()?;
    if x0.len() != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            got: x0.len(),
        });
    }
    Ok(())
}

/// One leapfrog step with fresh gradient calls at both ends.
pub fn leapfrog_step(
    provider: &mut GradProvider<'_>,
    state: &mut ChainState,
    eta: f64,
    ledger: &mut QueryLedger,
) -> Result<()> {
    let x = state.x.clone();
    let g0 = provider.grad(state, &x, ledger)?;
    let x1: Vec<f64> = x
        .iter()
        .zip(&state.p)
        .zip(&g0)
        .map(|((x, p), g)| x + eta * p - 0.5 * eta * eta * g)
        .collect();
    let g1 = provider.grad(state, &x1, ledger)?;
    for ((p, a), b) in state.p.iter_mut().zip(&g0).zip(&g1) {
        *p -= 0.5 * eta * (a + b);
    }
    state.x = x1;
    Ok(())
}

/// Unadjusted HMC: `t` proposals of `s` leapfrog steps, fresh momentum each time.
pub fn hmc_run<R: Rng + ?Sized>(
    model: &PotentialModel,
    provider: &mut GradProvider<'_>,
    hp: &HyperParams,
    x0: &[f64],
    ledger: &mut QueryLedger,
    rng: &mut R,
) -> Result<Trajectory> {
    check_start(model, x0, hp)?;
    let mut state = ChainState::new(x0.to_vec(), 0);
    provider.init(&mut state, ledger)?;
    let mut points = Vec::with_capacity(hp.t);
    let mut step = 0;
    for _ in 0..hp.t {
        state.p = rng::gaussian_vec(rng, model.d);
        for _ in 0..hp.s {
            leapfrog_step(provider, &mut state, hp.eta, ledger)?;
            step += 1;
            guard(&state.x, step)?;
        }
        points.push(state.x.clone());
    }
    Ok(Trajectory {
        points,
        final_state: state,
    })
}

/// Stochastic-gradient Langevin dynamics for `k` steps.
pub fn lmc_run<R: Rng + ?Sized>(
    model: &PotentialModel,
    provider: &mut GradProvider<'_>,
    hp: &HyperParams,
    x0: &[f64],
    ledger: &mut QueryLedger,
    rng: &mut R,
) -> Result<Trajectory> {
    check_start(model, x0, hp)?;
    let mut state = ChainState::new(x0.to_vec(), 0);
    provider.init(&mut state, ledger)?;
    let mut points = Vec::with_capacity(hp.k / hp.record_every + 1);
    let noise = (2.0 * hp.eta).sqrt();
    for step in 1..=hp.k {
        let x = state.x.clone();
        let g = provider.grad(&mut state, &x, ledger)?;
        let z = rng::gaussian_vec(rng, model.d);
        for ((xi, gi), zi) in state.x.iter_mut().zip(&g).zip(&z) {
            *xi += -hp.eta * gi + noise * zi;
        }
        guard(&state.x, step)?;
        if step % hp.record_every == 0 {
            points.push(state.x.clone());
        }
    }
    Ok(Trajectory {
        points,
        final_state: state,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZerothOrderVariant {
    QzHmc,
    QzLmc,
}

/// HMC or LMC driven only by stochastic evaluations.
#[allow(clippy::too_many_arguments)]
pub fn zeroth_order_run<R: Rng + ?Sized>(
    model: &PotentialModel,
    hp: &HyperParams,
    x0: &[f64],
    variant: ZerothOrderVariant,
    oracle: ZerothOrderOracle,
    pipeline: &PipelineConfig,
    provider_seed: u64,
    ledger: &mut QueryLedger,
    rng: &mut R,
) -> Result<Trajectory> {
    let sh = hp
        .sigma_hat_sq
        .map(f64::sqrt)
        .ok_or(Error::MissingConstant("sigma_hat_sq"))?;
    let source = match oracle {
        ZerothOrderOracle::PhasePipeline => GradSource::PhasePipeline { sigma_hat: sh },
        ZerothOrderOracle::Alg4Mlmc => GradSource::Alg4Mlmc { sigma_hat: sh },
    };
    let mut provider = GradProvider::new(model, source, provider_seed).with_pipeline(pipeline.clone());
    match variant {
        ZerothOrderVariant::QzHmc => hmc_run(model, &mut provider, hp, x0, ledger, rng),
        ZerothOrderVariant::QzLmc => lmc_run(model, &mut provider, hp, x0, ledger, rng),
    }
}

/// Default starting point: the minimizer when known, else the origin.
pub fn default_start(model: &PotentialModel) -> Vec<f64> {
    model.x_star.clone().unwrap_or_else(|| vec![0.0; model.d])
}

/// Runs one chain of `hp.theorem` with seeds derived from `(seed, chain)`.
/// Charges go to the phase named after the theorem.
#[allow(clippy::too_many_arguments)]
pub fn run_chain(
    model: &PotentialModel,
    hp: &HyperParams,
    pipeline: &PipelineConfig,
    zeroth: ZerothOrderOracle,
    x0: &[f64],
    seed: u64,
    chain: u64,
    ledger: &mut QueryLedger,
) -> Result<Trajectory> {
    let source = GradSource::for_plan(hp, zeroth)?;
    let mut provider =
        GradProvider::new(model, source, rng::derive_seed(seed, &[tags::CHAIN, chain])).with_pipeline(pipeline.clone());
    let mut rng = rng::stream(seed, &[tags::CHAIN, chain, tags::MOMENTUM]);
    let prev = ledger.set_phase(hp.theorem.name());
    let out = if hp.theorem.is_hmc() {
        hmc_run(model, &mut provider, hp, x0, ledger, &mut rng)
    } else {
        lmc_run(model, &mut provider, hp, x0, ledger, &mut rng)
    };
    ledger.set_phase(&prev);
    out
}

/// Hamiltonian `f(x) + |p|^2 / 2`.
pub fn hamiltonian(model: &PotentialModel, x: &[f64], p: &[f64]) -> f64 {
    model.value(x) + 0.5 * crate::linalg::norm_sq(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mean_of;
    use crate::potentials::CustomPotential;
    use std::sync::Arc;

    struct Free;
    impl CustomPotential for Free {
        fn value(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn grad(&self, x: &[f64]) -> Vec<f64> {
            vec![0.0; x.len()]
        }
    }

    fn hp(theorem: Theorem, eta: f64, s: usize, t: usize, k: usize) -> HyperParams {
        HyperParams {
            theorem,
            eta,
            s,
            t,
            k,
            b: 1,
            m: 1,
            sigma_hat_sq: None,
            constants: PlanConstants::default(),
            record_every: 1,
        }
    }

    #[test]
    fn planner_example() {
        let m = PotentialModel::finite_sum_quadratic(2, 64, 1.0, 1, 0.0).unwrap();
        let h = plan_hyperparams(Theorem::QsvrgHmc, &m, 0.1, &PlanConstants::default()).unwrap();
        assert!((h.eta - 0.1 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(h.s, (2f64.sqrt() * 10.0).ceil() as usize);
        let b = (0.1f64.powf(0.25) * 8.0 * 2f64.powf(-0.125)).round() as usize;
        assert_eq!(h.b, b);
        assert_eq!(h.m, 64 / b);
        let one = PotentialModel::finite_sum_quadratic(2, 1, 1.0, 1, 0.0).unwrap();
        let h1 = plan_hyperparams(Theorem::QsvrgHmc, &one, 0.1, &PlanConstants::default()).unwrap();
        assert_eq!((h1.b, h1.m), (1, 1));
    }

    #[test]
    fn planner_errors_and_alpha_scaling() {
        let mut m = PotentialModel::isotropic_quadratic(2).unwrap();
        let a = plan_hyperparams(Theorem::QzLmc, &m, 0.1, &PlanConstants::default()).unwrap();
        m.smoothness = 2.0;
        m.lsi_alpha = 1.0;
        let mut m1 = PotentialModel::isotropic_quadratic(2).unwrap();
        m1.smoothness = 2.0;
        m1.lsi_alpha = 0.5;
        let k1 = plan_hyperparams(Theorem::QzLmc, &m1, 0.1, &PlanConstants::default()).unwrap().k;
        let k2 = plan_hyperparams(Theorem::QzLmc, &m, 0.1, &PlanConstants::default()).unwrap().k;
        assert!(k1 >= 4 * (k2 - 1) && k1 <= 4 * k2);
        assert!(a.sigma_hat_sq.unwrap() > 0.0);
        m.mu = 0.0;
        assert!(matches!(
            plan_hyperparams(Theorem::QsvrgHmc, &m, 0.1, &PlanConstants::default()),
            Err(Error::MissingConstant("mu"))
        ));
        m.lsi_alpha = 0.0;
        assert!(plan_hyperparams(Theorem::Sgld, &m, 0.1, &PlanConstants::default()).is_err());
    }

    #[test]
    fn qsvrg_lmc_respects_m_le_b_squared() {
        for n in [1usize, 8, 100, 1000] {
            let m = PotentialModel::finite_sum_quadratic(2, n, 1.0, 2, 0.0).unwrap();
            let h = plan_hyperparams(Theorem::QsvrgLmc, &m, 0.1, &PlanConstants::default()).unwrap();
            assert!(h.m <= h.b * h.b);
        }
    }

    #[test]
    fn qsvrg_zero_distance_and_full_epoch() {
        let m = PotentialModel::finite_sum_quadratic(3, 20, 1.0, 3, 0.0).unwrap();
        let mut st = ChainState::new(vec![0.1, 0.2, 0.3], 0);
        let mut r = rng::stream(0, &[]);
        let mut l = QueryLedger::new();
        let x = st.x.clone();
        let g = qsvrg_gradient(&mut st, &x, &m, 2, 5, &Default::default(), &mut r, &mut l).unwrap();
        assert_eq!(l.charged().grad_c, 20);
        let truth = m.grad_exact(&x).unwrap();
        for (a, b) in g.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-12);
        }
        let g2 = qsvrg_gradient(&mut st, &x, &m, 2, 5, &Default::default(), &mut r, &mut l).unwrap();
        assert_eq!(g2, g);
        assert_eq!(l.charged().grad_c, 20);
        let mut fresh = ChainState::new(x.clone(), 0);
        fresh.k = 1;
        assert!(qsvrg_gradient(&mut fresh, &x, &m, 2, 5, &Default::default(), &mut r, &mut l).is_err());
        let mut cv = ChainState::new(x.clone(), 0);
        assert!(qcv_gradient(&mut cv, &x, &m, 2, &Default::default(), &mut r, &mut l).is_err());
    }

    #[test]
    fn qsvrg_variance_bound() {
        let m = PotentialModel::finite_sum_quadratic(2, 30, 1.0, 4, 0.0).unwrap();
        let mut st = ChainState::new(vec![0.0, 0.0], 0);
        let mut r = rng::stream(1, &[]);
        let mut l = QueryLedger::new();
        let a = vec![0.0, 0.0];
        qsvrg_gradient(&mut st, &a, &m, 3, 1_000_000, &Default::default(), &mut r, &mut l).unwrap();
        let x = vec![0.5, -0.3];
        let outs: Vec<Vec<f64>> = (0..10_000)
            .map(|_| qsvrg_gradient(&mut st, &x, &m, 3, 1_000_000, &Default::default(), &mut r, &mut l).unwrap())
            .collect();
        let mean = mean_of(&outs);
        let var = outs.iter().map(|o| dist_sq(o, &mean)).sum::<f64>() / (outs.len() - 1) as f64;
        assert!(var <= 1.1 * dist_sq(&x, &a) / 9.0, "{var}");
        let truth = m.grad_exact(&x).unwrap();
        assert!(dist_sq(&mean, &truth).sqrt() < 0.01);
    }

    #[test]
    fn free_particle_moves_straight() {
        let m = PotentialModel::custom(2, 1, 0.0, 1.0, 0.0, Arc::new(Free));
        let mut prov = GradProvider::new(&m, GradSource::Exact, 0);
        let mut st = ChainState::new(vec![1.0, -1.0], 0);
        st.p = vec![0.5, 2.0];
        let mut l = QueryLedger::new();
        for _ in 0..10 {
            leapfrog_step(&mut prov, &mut st, 0.1, &mut l).unwrap();
        }
        assert!((st.x[0] - 1.5).abs() < 1e-12 && (st.x[1] - 1.0).abs() < 1e-12);
        assert_eq!(st.p, vec![0.5, 2.0]);
    }

    #[test]
    fn leapfrog_energy_error_is_second_order() {
        let m = PotentialModel::isotropic_quadratic(1).unwrap();
        let drift = |eta: f64| {
            let mut prov = GradProvider::new(&m, GradSource::Exact, 0);
            let mut st = ChainState::new(vec![1.0], 0);
            st.p = vec![0.3];
            let h0 = hamiltonian(&m, &st.x, &st.p);
            let steps = (1.0 / eta).round() as usize;
            let mut l = QueryLedger::new();
            let mut worst: f64 = 0.0;
            for _ in 0..steps {
                leapfrog_step(&mut prov, &mut st, eta, &mut l).unwrap();
                worst = worst.max((hamiltonian(&m, &st.x, &st.p) - h0).abs());
            }
            worst
        };
        let pts: Vec<(f64, f64)> = [0.1, 0.05, 0.025, 0.0125].iter().map(|&e| (e, drift(e))).collect();
        let (slope, _, _) = crate::metrics::slope_fit(&pts).unwrap();
        assert!((slope - 2.0).abs() < 0.2, "{slope}");
    }

    #[test]
    fn leapfrog_is_reversible() {
        let m = PotentialModel::gaussian_mixture(2, 1.0, 1.0, 0.0).unwrap();
        let mut prov = GradProvider::new(&m, GradSource::Exact, 0);
        let mut st = ChainState::new(vec![0.4, -0.7], 0);
        st.p = vec![1.1, 0.2];
        let mut l = QueryLedger::new();
        for _ in 0..50 {
            leapfrog_step(&mut prov, &mut st, 0.05, &mut l).unwrap();
        }
        st.p.iter_mut().for_each(|p| *p = -*p);
        for _ in 0..50 {
            leapfrog_step(&mut prov, &mut st, 0.05, &mut l).unwrap();
        }
        assert!(dist_sq(&st.x, &[0.4, -0.7]).sqrt() < 1e-8);
    }

    #[test]
    fn brownian_variance() {
        let m = PotentialModel::custom(1, 1, 0.0, 1.0, 0.0, Arc::new(Free));
        let h = hp(Theorem::Sgld, 0.01, 1, 1, 50);
        let mut l = QueryLedger::new();
        let finals: Vec<f64> = (0..4000)
            .map(|c| {
                let mut prov = GradProvider::new(&m, GradSource::Exact, c);
                let mut r = rng::stream(c, &[9]);
                lmc_run(&m, &mut prov, &h, &[0.0], &mut l, &mut r).unwrap().final_state.x[0]
            })
            .collect();
        let var = finals.iter().map(|x| x * x).sum::<f64>() / finals.len() as f64;
        let expect = 2.0 * 0.01 * 50.0;
        let se = expect * (2.0 / finals.len() as f64).sqrt();
        assert!((var - expect).abs() < 4.0 * se, "{var}");
    }

    #[test]
    fn lmc_stationary_variance_on_gaussian() {
        let m = PotentialModel::isotropic_quadratic(1).unwrap();
        let eta = 0.1;
        let mut h = hp(Theorem::Sgld, eta, 1, 1, 400_000);
        h.record_every = 1;
        let mut prov = GradProvider::new(&m, GradSource::Exact, 0);
        let mut r = rng::stream(3, &[]);
        let mut l = QueryLedger::new();
        let tr = lmc_run(&m, &mut prov, &h, &[0.0], &mut l, &mut r).unwrap();
        let xs: Vec<f64> = tr.points[1000..].iter().map(|p| p[0]).collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        let exact = 1.0 / (1.0 - eta / 2.0);
        assert!((var - exact).abs() < 0.03, "{var} vs {exact}");
        assert!(exact - 1.0 <= 2.0 * eta);
    }

    #[test]
    fn divergence_is_reported() {
        let m = PotentialModel::isotropic_quadratic(1).unwrap();
        let h = hp(Theorem::Sgld, 3.0, 1, 1, 10_000);
        let mut prov = GradProvider::new(&m, GradSource::Exact, 0);
        let mut r = rng::stream(3, &[]);
        let mut l = QueryLedger::new();
        let e = lmc_run(&m, &mut prov, &h, &[1.0], &mut l, &mut r).unwrap_err();
        assert!(matches!(e, Error::Divergence { .. }));
    }

    #[test]
    fn runs_are_deterministic() {
        let m = PotentialModel::finite_sum_quadratic(2, 40, 1.0, 5, 0.0).unwrap();
        let h = plan_hyperparams(Theorem::QsvrgHmc, &m, 0.2, &PlanConstants::default()).unwrap();
        let go = || {
            let mut l = QueryLedger::new();
            let t = run_chain(&m, &h, &Default::default(), ZerothOrderOracle::PhasePipeline, &default_start(&m), 11, 3, &mut l)
                .unwrap();
            (t, l)
        };
        let (a, la) = go();
        let (b, lb) = go();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.phase("qsvrg-hmc").grad_c > 0);
    }

    #[test]
    fn cv_provider_charges_anchor_once() {
        let m = PotentialModel::finite_sum_quadratic(2, 25, 1.0, 6, 0.0).unwrap();
        let mut prov = GradProvider::new(&m, GradSource::Cv { b: 3 }, 0);
        let mut st = ChainState::new(vec![0.0, 0.0], 0);
        let mut l = QueryLedger::new();
        prov.init(&mut st, &mut l).unwrap();
        assert_eq!(l.totals().grad_c, 25);
        prov.grad(&mut st, &[0.1, 0.1], &mut l).unwrap();
        assert_eq!(l.totals().grad_c, 31);
    }
}
