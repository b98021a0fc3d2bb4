//! Quantum mean estimation and phase oracles, emulated at contract level.
//!
//! [`quantum_mean_estimate`] returns an unbiased estimate whose variance is
//! at most the requested target by averaging `B = ceil(var / target)`
//! classical draws, and charges the ledger the quantum cost
//! `Q = ceil(c_q * sqrt(d) * sqrt(var / target) * log_factor)`.
//! The classical draws are booked under a separate `:emulation` phase so
//! that they never count toward an algorithm's cost.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const EMULATION_SUFFIX: &str = ":emulation";
pub const DEFAULT_PHASE: &str = "main";

/// Draws above this count are refused rather than silently taking hours.
pub const MAX_EMULATION_DRAWS: u64 = 50_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub grad_c: u64,
    pub grad_q: u64,
    pub eval_c: u64,
    pub eval_q: u64,
}

impl Counters {
    pub fn add(&mut self, o: &Counters) {
        self.grad_c += o.grad_c;
        self.grad_q += o.grad_q;
        self.eval_c += o.eval_c;
        self.eval_q += o.eval_q;
    }

    pub fn gradient_total(&self) -> u64 {
        self.grad_c + self.grad_q
    }

    pub fn eval_total(&self) -> u64 {
        self.eval_c + self.eval_q
    }

    fn dominated_by(&self, o: &Counters) -> bool {
        self.grad_c <= o.grad_c && self.grad_q <= o.grad_q && self.eval_c <= o.eval_c && self.eval_q <= o.eval_q
    }
}

/// Per-phase oracle query counts.
///
/// Charges go to the current phase, set with [`QueryLedger::set_phase`].
/// Equality and serialization only look at the counts.
#[derive(Clone, Debug)]
pub struct QueryLedger {
    phases: BTreeMap<String, Counters>,
    current: String,
}

impl Default for QueryLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for QueryLedger {
    fn eq(&self, other: &Self) -> bool {
        self.phases == other.phases
    }
}

impl Eq for QueryLedger {}

impl QueryLedger {
    pub fn new() -> Self {
        QueryLedger {
            phases: BTreeMap::new(),
            current: DEFAULT_PHASE.to_string(),
        }
    }

    pub fn current_phase(&self) -> &str {
        &self.current
    }

    /// Switches the phase that receives charges and returns the previous one.
    pub fn set_phase(&mut self, phase: &str) -> String {
        std::mem::replace(&mut self.current, phase.to_string())
    }

    /// Runs `f` with charges routed to `phase`, then restores the old phase.
    pub fn in_phase<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.set_phase(phase);
        let out = f(self);
        self.current = prev;
        out
    }

    fn entry(&mut self) -> &mut Counters {
        self.phases.entry(self.current.clone()).or_default()
    }

    pub fn charge_grad_classical(&mut self, k: u64) {
        if k > 0 {
            self.entry().grad_c += k;
        }
    }

    pub fn charge_grad_quantum(&mut self, k: u64) {
        if k > 0 {
            self.entry().grad_q += k;
        }
    }

    pub fn charge_eval_classical(&mut self, k: u64) {
        if k > 0 {
            self.entry().eval_c += k;
        }
    }

    pub fn charge_eval_quantum(&mut self, k: u64) {
        if k > 0 {
            self.entry().eval_q += k;
        }
    }

    pub fn charge(&mut self, kind: OracleKind, quantum: bool, k: u64) {
        match (kind, quantum) {
            (OracleKind::Gradient, false) => self.charge_grad_classical(k),
            (OracleKind::Gradient, true) => self.charge_grad_quantum(k),
            (OracleKind::Evaluation, false) => self.charge_eval_classical(k),
            (OracleKind::Evaluation, true) => self.charge_eval_quantum(k),
        }
    }

    pub fn phases(&self) -> &BTreeMap<String, Counters> {
        &self.phases
    }

    pub fn phase(&self, name: &str) -> Counters {
        self.phases.get(name).copied().unwrap_or_default()
    }

    /// Sum over every phase, emulation included.
    pub fn totals(&self) -> Counters {
        let mut c = Counters::default();
        self.phases.values().for_each(|p| c.add(p));
        c
    }

    /// Sum over the phases that represent algorithmic cost.
    pub fn charged(&self) -> Counters {
        let mut c = Counters::default();
        self.phases
            .iter()
            .filter(|(k, _)| !k.ends_with(EMULATION_SUFFIX))
            .for_each(|(_, p)| c.add(p));
        c
    }

    pub fn merge(&mut self, other: &QueryLedger) {
        for (k, v) in &other.phases {
            self.phases.entry(k.clone()).or_default().add(v);
        }
    }

    pub fn merged(a: &QueryLedger, b: &QueryLedger) -> QueryLedger {
        let mut out = a.clone();
        out.merge(b);
        out
    }

    /// True when every counter of `self` is at most the matching one in `later`.
    pub fn is_prefix_of(&self, later: &QueryLedger) -> bool {
        self.phases
            .iter()
            .all(|(k, v)| v.dominated_by(&later.phase(k)))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("ledger serializes")
    }
}

impl Serialize for QueryLedger {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.phases.serialize(s)
    }
}

impl<'de> Deserialize<'de> for QueryLedger {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let phases = BTreeMap::<String, Counters>::deserialize(d)?;
        Ok(QueryLedger {
            phases,
            current: DEFAULT_PHASE.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Gradient,
    Evaluation,
}

/// Constants hidden inside the soft-O of the quantum costs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QmeConfig {
    pub c_q: f64,
    pub delta_fail: f64,
    /// Overrides `max(1, ln d * ln(1/delta_fail))` when set.
    pub log_factor: Option<f64>,
    /// Retries after a flagged phase failure.
    pub phase_retries: u32,
}

impl Default for QmeConfig {
    fn default() -> Self {
        QmeConfig {
            c_q: 1.0,
            delta_fail: 1e-3,
            log_factor: None,
            phase_retries: 1,
        }
    }
}

impl QmeConfig {
    pub fn log_factor(&self, d: usize) -> f64 {
        self.log_factor
            .unwrap_or_else(|| default_log_factor(d, self.delta_fail))
    }

    pub fn request(&self, d: usize, var_bound: f64, sigma_hat_sq: f64, oracle: OracleKind) -> QmeRequest {
        QmeRequest {
            var_bound,
            sigma_hat_sq,
            d,
            c_q: self.c_q,
            log_factor: self.log_factor(d),
            oracle,
            queries_per_sample: 1,
        }
    }
}

pub fn default_log_factor(d: usize, delta_fail: f64) -> f64 {
    f64::max(1.0, (d as f64).ln() * (1.0 / delta_fail).ln())
}

/// A mean-estimation request. `var_bound` bounds `E|X - EX|^2` of the source.
#[derive(Clone, Debug, PartialEq)]
pub struct QmeRequest {
    pub var_bound: f64,
    pub sigma_hat_sq: f64,
    pub d: usize,
    pub c_q: f64,
    pub log_factor: f64,
    pub oracle: OracleKind,
    /// Oracle queries consumed by one draw of the source.
    pub queries_per_sample: u64,
}

impl QmeRequest {
    pub fn with_queries_per_sample(mut self, k: u64) -> Self {
        self.queries_per_sample = k;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_hat_sq > 0.0) || !self.sigma_hat_sq.is_finite() {
            return Err(Error::param("sigma_hat_sq", "must be positive and finite"));
        }
        if !(self.var_bound >= 0.0) || !self.var_bound.is_finite() {
            return Err(Error::param("var_bound", "must be nonnegative and finite"));
        }
        if self.d == 0 || !(self.c_q > 0.0) || !(self.log_factor > 0.0) {
            return Err(Error::param("d, c_q, log_factor", "must be positive"));
        }
        Ok(())
    }

    fn degenerate(&self) -> bool {
        self.sigma_hat_sq >= self.var_bound
    }

    /// Classical draws `B` used by the emulator.
    pub fn draws(&self) -> Result<u64> {
        self.validate()?;
        if self.degenerate() {
            return Ok(1);
        }
        let b = (self.var_bound / self.sigma_hat_sq).ceil();
        if b > MAX_EMULATION_DRAWS as f64 {
            return Err(Error::Precondition(format!(
                "mean estimation would need {b:.3e} emulation draws"
            )));
        }
        Ok(b as u64)
    }

    /// Quantum query charge `Q` (per source query).
    pub fn quantum_cost(&self) -> Result<u64> {
        self.validate()?;
        let q = if self.degenerate() {
            self.c_q * self.log_factor
        } else {
            self.c_q * (self.d as f64).sqrt() * (self.var_bound / self.sigma_hat_sq).sqrt() * self.log_factor
        };
        Ok(q.ceil() as u64)
    }
}

/// Emulated unbiased quantum mean estimation.
///
/// Returns the average of `B` draws from `source`; the estimate is unbiased
/// and its variance is `var / B <= sigma_hat_sq`.
pub fn quantum_mean_estimate<R, F>(
    req: &QmeRequest,
    mut source: F,
    rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<Vec<f64>>,
{
    let b = req.draws()?;
    let q = req.quantum_cost()?;
    let mut acc = vec![0.0; req.d];
    for _ in 0..b {
        let s = source(rng)?;
        if s.len() != req.d {
            return Err(Error::DimensionMismatch {
                expected: req.d,
                got: s.len(),
            });
        }
        if !crate::linalg::all_finite(&s) {
            return Err(Error::NonFinite("mean-estimation source"));
        }
        crate::linalg::axpy(&mut acc, 1.0, &s);
    }
    acc.iter_mut().for_each(|v| *v /= b as f64);
    ledger.charge(req.oracle, true, q * req.queries_per_sample);
    let emu = format!("{}{}", ledger.current_phase(), EMULATION_SUFFIX);
    ledger.in_phase(&emu, |l| l.charge(req.oracle, false, b * req.queries_per_sample));
    Ok(acc)
}

/// Outcome of one phase-oracle construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseCharge {
    pub queries: u64,
    pub failed: bool,
}

pub const PHASE_FAILURE_PROB: f64 = 1.0 / 9.0;

/// Charges the evaluation cost of implementing `exp(i t E[X])` for a
/// variable with standard deviation `sigma` to accuracy `epsilon`.
///
/// The charge is `ceil(c_q * t * sigma * ln(1/epsilon) * log_factor)`, floored
/// at one for `t > 0` and zero for `t = 0`. A failure flag is raised with
/// probability 1/9, drawn from `phase_rng`.
pub fn phase_oracle_charge<R: Rng + ?Sized>(
    t: f64,
    sigma: f64,
    epsilon: f64,
    c_q: f64,
    log_factor: f64,
    phase_rng: &mut R,
    ledger: &mut QueryLedger,
) -> Result<PhaseCharge> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::param("epsilon", "must lie in (0, 1)"));
    }
    if !(t >= 0.0) || !(sigma >= 0.0) || !t.is_finite() || !sigma.is_finite() {
        return Err(Error::param("t, sigma", "must be nonnegative and finite"));
    }
    let u: f64 = phase_rng.random();
    if t == 0.0 {
        return Ok(PhaseCharge {
            queries: 0,
            failed: false,
        });
    }
    let raw = c_q * t * sigma * (1.0 / epsilon).ln() * log_factor;
    let queries = (raw.ceil() as u64).max(1);
    ledger.charge_eval_quantum(queries);
    Ok(PhaseCharge {
        queries,
        failed: u < PHASE_FAILURE_PROB,
    })
}
