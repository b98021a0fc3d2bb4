//! Experiment configuration, seeded execution and CSV / JSON output.
//!
//! A run is fully determined by its config file and seed list. Every CSV
//! row carries the config hash, the seed and the build identifier.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradest::{self, Alg4Constants, Alg4Params, JordanPath, PipelineConfig};
use crate::jordan;
use crate::linalg::{mean_of, norm, norm_sq, sub};
use crate::metrics::{self, MetricKind, MetricReport, W2Options};
use crate::optimizer::{self, OptimizeConfig};
use crate::potentials::{ModelKind, PotentialModel};
use crate::qme::{Counters, QueryLedger};
use crate::rng::{self, tags};
use crate::samplers::{self, HyperParams, PlanConstants, Theorem, ZerothOrderOracle};

pub const CSV_SCHEMA: &str = "qsampler-csv/1";
pub const CSV_COLUMNS: [&str; 17] = [
    "schema",
    "config_hash",
    "build",
    "experiment",
    "seed",
    "label",
    "param",
    "value",
    "metric",
    "metric_value",
    "ci_low",
    "ci_high",
    "grad_c",
    "grad_q",
    "eval_c",
    "eval_q",
    "note",
];
pub const OUT_DIR_ENV: &str = "QSAMPLER_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "qsampler-out";

/// Short commit hash of the build, or `unknown` outside a repository.
pub fn build_id() -> &'static str {
    env!("QSAMPLER_BUILD_ID")
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Sampler,
    GradEst,
    Jordan,
    Optimize,
    ScalingSweep,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Sampler => "sampler",
            ExperimentKind::GradEst => "grad-est",
            ExperimentKind::Jordan => "jordan",
            ExperimentKind::Optimize => "optimize",
            ExperimentKind::ScalingSweep => "scaling-sweep",
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    FiniteSumQuadratic {
        d: usize,
        n: usize,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default)]
        center_seed: u64,
        #[serde(default)]
        noise_amplitude: f64,
    },
    IsotropicQuadratic {
        d: usize,
    },
    GaussianMixture {
        d: usize,
        a: f64,
        s: f64,
        #[serde(default)]
        noise_amplitude: f64,
    },
    PerturbedQuadratic {
        d: usize,
        mu: f64,
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        noise_amplitude: f64,
        #[serde(default)]
        domain_radius: Option<f64>,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<PotentialModel> {
        match *self {
            ModelSpec::FiniteSumQuadratic {
                d,
                n,
                radius,
                center_seed,
                noise_amplitude,
            } => PotentialModel::finite_sum_quadratic(d, n, radius, center_seed, noise_amplitude),
            ModelSpec::IsotropicQuadratic { d } => PotentialModel::isotropic_quadratic(d),
            ModelSpec::GaussianMixture {
                d,
                a,
                s,
                noise_amplitude,
            } => PotentialModel::gaussian_mixture(d, a, s, noise_amplitude),
            ModelSpec::PerturbedQuadratic {
                d,
                mu,
                amplitude,
                frequency,
                noise_amplitude,
                domain_radius,
            } => PotentialModel::perturbed_quadratic(d, mu, amplitude, frequency, noise_amplitude, domain_radius),
        }
    }

    /// Copy with `n` or `d` replaced.
    pub fn with_param(&self, param: SweepParam, v: f64) -> Result<ModelSpec> {
        if param == SweepParam::Eps {
            return Ok(self.clone());
        }
        let k = v.round();
        if !(k >= 1.0) || (k - v).abs() > 1e-9 {
            return Err(Error::param("sweep.values", "n and d must be positive integers"));
        }
        let k = k as usize;
        let mut out = self.clone();
        match (param, &mut out) {
            (SweepParam::Eps, _) => unreachable!(),
            (SweepParam::N, ModelSpec::FiniteSumQuadratic { n, .. }) => *n = k,
            (SweepParam::N, _) => {
                return Err(Error::param("sweep.param", "n sweeps need a finite-sum model"));
            }
            (SweepParam::D, ModelSpec::FiniteSumQuadratic { d, .. })
            | (SweepParam::D, ModelSpec::IsotropicQuadratic { d })
            | (SweepParam::D, ModelSpec::GaussianMixture { d, .. })
            | (SweepParam::D, ModelSpec::PerturbedQuadratic { d, .. }) => *d = k,
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMetric {
    /// Gaussian-fit W2 for Gaussian targets, histogram TV for 1-D mixtures.
    #[default]
    Auto,
    W2Fit,
    W2Empirical,
    Tv,
    None,
}

fn default_chains() -> usize {
    100
}

/// Chains evaluate gradients at every step, so the pipeline stays on the
/// contract path unless a config asks for the statevector.
pub fn chain_pipeline() -> PipelineConfig {
    PipelineConfig {
        path: JordanPath::Contract,
        ..PipelineConfig::default()
    }
}

fn default_zeroth() -> ZerothOrderOracle {
    ZerothOrderOracle::PhasePipeline
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub theorem: Theorem,
    pub eps: f64,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Overrides of the hidden constants.
    #[serde(default)]
    pub constants: PlanConstants,
    #[serde(default = "chain_pipeline")]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_zeroth")]
    pub zeroth: ZerothOrderOracle,
    #[serde(default)]
    pub metric: SamplerMetric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GradMethod {
    Smoothing { nu: f64, b: usize },
    PhasePipeline { sigma_hat: f64 },
    Alg4Mlmc { sigma_hat: f64 },
    Alg4 { eps: f64 },
}

fn default_trials() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradEstSpec {
    pub method: GradMethod,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub alg4: Alg4Constants,
}

fn default_budget() -> usize {
    jordan::DEFAULT_QUBIT_BUDGET
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JordanSpec {
    pub eps: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    /// Gradient-norm bound of the grid; the model's when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_jordan: Option<f64>,
    /// Smoothness; the model's when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default = "default_budget")]
    pub qubit_budget: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Eps,
    N,
    D,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Eps => "eps",
            SweepParam::N => "n",
            SweepParam::D => "d",
        }
    }

    /// Abscissa of the log-log fit: `1/eps`, `n` or `d`.
    fn fit_x(&self, v: f64) -> f64 {
        match self {
            SweepParam::Eps => 1.0 / v,
            _ => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelSpec,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradest: Option<GradEstSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jordan: Option<JordanSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize: Option<OptimizeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let path = e
                .span()
                .map(|s| key_at(text, s.start))
                .unwrap_or_else(|| "<root>".to_string());
            config_err(&path, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { path: p, message } => config_err(&p, format!("{}: {message}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err("<root>", e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 digits.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.workers == Some(0) {
            return Err(config_err("workers", "must be positive"));
        }
        self.model.build().map_err(|e| config_err("model", e.to_string()))?;
        let need = |present: bool, field: &str| {
            if present {
                Ok(())
            } else {
                Err(config_err(field, format!("section required for a {} experiment", self.experiment.name())))
            }
        };
        match self.experiment {
            ExperimentKind::Sampler => need(self.sampler.is_some(), "sampler")?,
            ExperimentKind::GradEst => need(self.gradest.is_some(), "gradest")?,
            ExperimentKind::Jordan => need(self.jordan.is_some(), "jordan")?,
            ExperimentKind::Optimize => need(self.optimize.is_some(), "optimize")?,
            ExperimentKind::ScalingSweep => {
                need(self.sampler.is_some(), "sampler")?;
                need(self.sweep.is_some(), "sweep")?;
            }
        }
        if let Some(s) = &self.sampler {
            if !(s.eps > 0.0) {
                return Err(config_err("sampler.eps", "must be positive"));
            }
            if s.chains == 0 {
                return Err(config_err("sampler.chains", "must be positive"));
            }
        }
        if let Some(g) = &self.gradest {
            if g.trials == 0 {
                return Err(config_err("gradest.trials", "must be positive"));
            }
        }
        if let Some(j) = &self.jordan {
            if j.trials == 0 || !(j.eps > 0.0) {
                return Err(config_err("jordan", "need trials > 0 and eps > 0"));
            }
        }
        if let Some(o) = &self.optimize {
            o.validate().map_err(|e| config_err("optimize", e.to_string()))?;
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(config_err("sweep.values", "sweep grid must not be empty"));
            }
            if sw.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(config_err("sweep.values", "values must be positive"));
            }
            for v in &sw.values {
                self.model
                    .with_param(sw.param, *v)
                    .map_err(|e| config_err("sweep.values", e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Dotted key of the table / entry that contains byte offset `pos`.
fn key_at(text: &str, pos: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if offset > pos {
            break;
        }
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, true) => "<root>".into(),
        (true, false) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

// ---------------------------------------------------------------------------
// Rows

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub seed: Option<u64>,
    pub label: String,
    pub param: String,
    pub value: f64,
    pub metric: String,
    pub metric_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub counters: Counters,
    pub note: String,
}

impl Row {
    fn new(experiment: &str, seed: Option<u64>, label: &str, param: &str, value: f64, metric: &str, metric_value: f64) -> Self {
        Row {
            experiment: experiment.into(),
            seed,
            label: label.into(),
            param: param.into(),
            value,
            metric: metric.into(),
            metric_value,
            ci_low: metric_value,
            ci_high: metric_value,
            counters: Counters::default(),
            note: String::new(),
        }
    }

    fn ci(mut self, lo: f64, hi: f64) -> Self {
        self.ci_low = lo;
        self.ci_high = hi;
        self
    }

    fn counters(mut self, c: Counters) -> Self {
        self.counters = c;
        self
    }

    fn note(mut self, n: impl Into<String>) -> Self {
        self.note = n.into();
        self
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV text with header; floats use the shortest round-trip form.
pub fn render_csv(rows: &[Row], config_hash: &str) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let fields = [
            CSV_SCHEMA.to_string(),
            config_hash.to_string(),
            build_id().to_string(),
            r.experiment.clone(),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.label.clone(),
            r.param.clone(),
            r.value.to_string(),
            r.metric.clone(),
            r.metric_value.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.counters.grad_c.to_string(),
            r.counters.grad_q.to_string(),
            r.counters.eval_c.to_string(),
            r.counters.eval_q.to_string(),
            r.note.clone(),
        ];
        let line: Vec<String> = fields.iter().map(|f| csv_field(f)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub ledger: QueryLedger,
}

#[derive(Default)]
struct Collector {
    rows: Vec<Row>,
    ledgers: Vec<LedgerEntry>,
}

impl Collector {
    fn ledger(&mut self, label: &str, param: &str, value: f64, seed: u64, ledger: QueryLedger) {
        self.ledgers.push(LedgerEntry {
            label: label.into(),
            param: param.into(),
            value,
            seed,
            ledger,
        });
    }
}

// ---------------------------------------------------------------------------
// Running

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Replaces the config's seed list.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub config_hash: String,
    pub rows: Vec<Row>,
    pub csv: String,
    pub csv_path: PathBuf,
    pub ledger_path: PathBuf,
}

/// Output directory: explicit option, then config, then the environment,
/// then `qsampler-out`.
pub fn resolve_out_dir(opts: &RunOptions, cfg_out: Option<&Path>) -> PathBuf {
    opts.out_dir
        .clone()
        .or_else(|| cfg_out.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| config_err("workers", e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn write_outputs(
    dir: &Path,
    stem: &str,
    hash: &str,
    experiment: &str,
    col: &Collector,
    partial: bool,
) -> Result<(String, PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let suffix = if partial { ".partial" } else { "" };
    let csv = render_csv(&col.rows, hash);
    let csv_path = dir.join(format!("{stem}{suffix}.csv"));
    fs::write(&csv_path, &csv)?;
    let total = col
        .ledgers
        .iter()
        .fold(QueryLedger::new(), |acc, e| QueryLedger::merged(&acc, &e.ledger));
    let doc = serde_json::json!({
        "schema": CSV_SCHEMA,
        "config_hash": hash,
        "build": build_id(),
        "experiment": experiment,
        "partial": partial,
        "entries": col.ledgers,
        "total": total,
        "charged": total.charged(),
    });
    let ledger_path = dir.join(format!("{stem}{suffix}.ledger.json"));
    fs::write(&ledger_path, serde_json::to_string_pretty(&doc).expect("ledger serializes"))?;
    Ok((csv, csv_path, ledger_path))
}

/// Executes the configured experiment and writes `<kind>-<hash>.csv` and
/// `<kind>-<hash>.ledger.json`. On failure the rows gathered so far are
/// written with a `.partial` suffix and the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let seeds = opts.seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
    let dir = resolve_out_dir(opts, cfg.output.as_deref());
    let name = cfg.experiment.name();
    let stem = format!("{name}-{hash}");
    let mut col = Collector::default();
    let res = with_pool(opts.workers.or(cfg.workers), || execute(cfg, &seeds, &mut col))?;
    if let Err(e) = res {
        let _ = write_outputs(&dir, &stem, &hash, name, &col, true);
        return Err(e);
    }
    let (csv, csv_path, ledger_path) = write_outputs(&dir, &stem, &hash, name, &col, false)?;
    Ok(RunOutput {
        config_hash: hash,
        rows: col.rows,
        csv,
        csv_path,
        ledger_path,
    })
}

fn execute(cfg: &ExperimentConfig, seeds: &[u64], col: &mut Collector) -> Result<()> {
    let model = cfg.model.build()?;
    match cfg.experiment {
        ExperimentKind::Sampler => {
            let spec = cfg.sampler.as_ref().expect("validated");
            for &seed in seeds {
                sampler_rows(&model, spec, spec.eps, seed, col)?;
            }
        }
        ExperimentKind::GradEst => {
            let spec = cfg.gradest.as_ref().expect("validated");
            for &seed in seeds {
                gradest_rows(&model, spec, seed, col)?;
            }
        }
        ExperimentKind::Jordan => {
            let spec = cfg.jordan.as_ref().expect("validated");
            for &seed in seeds {
                jordan_rows(&model, spec, seed, col)?;
            }
        }
        ExperimentKind::Optimize => {
            let spec = cfg.optimize.as_ref().expect("validated");
            for &seed in seeds {
                optimize_rows(&model, spec, seed, col)?;
            }
        }
        ExperimentKind::ScalingSweep => {
            let spec = cfg.sampler.as_ref().expect("validated");
            let sweep = cfg.sweep.as_ref().expect("validated");
            sweep_rows(&cfg.model, spec, sweep, seeds, col)?;
        }
    }
    Ok(())
}

/// Final states of `spec.chains` chains and their merged ledger.
pub fn sample_chains(
    model: &PotentialModel,
    spec: &SamplerSpec,
    eps: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, QueryLedger, HyperParams)> {
    let mut hp = samplers::plan_hyperparams(spec.theorem, model, eps, &spec.constants)?;
    hp.record_every = hp.k;
    let x0 = spec.start.clone().unwrap_or_else(|| samplers::default_start(model));
    let runs: Vec<Result<(Vec<f64>, QueryLedger)>> = (0..spec.chains as u64)
        .into_par_iter()
        .map(|c| {
            let mut l = QueryLedger::new();
            let tr = samplers::run_chain(model, &hp, &spec.pipeline, spec.zeroth, &x0, seed, c, &mut l)?;
            Ok((tr.final_state.x, l))
        })
        .collect();
    let mut samples = Vec::with_capacity(runs.len());
    let mut ledger = QueryLedger::new();
    for r in runs {
        let (x, l) = r?;
        ledger.merge(&l);
        samples.push(x);
    }
    Ok((samples, ledger, hp))
}

fn point_report(kind: MetricKind, value: f64, n: usize) -> MetricReport {
    MetricReport {
        kind,
        value,
        ci_low: value,
        ci_high: value,
        sample_count: n,
        ledger: QueryLedger::new(),
        note: None,
    }
}

/// Distance of the chain outputs to the target, if one is available.
pub fn sampler_metric(
    model: &PotentialModel,
    metric: SamplerMetric,
    samples: &[Vec<f64>],
    seed: u64,
) -> Result<Option<(&'static str, MetricReport)>> {
    let gaussian = model.target_gaussian();
    let mixture_1d = matches!(model.kind, ModelKind::GaussianMixture { .. }) && model.d == 1;
    let metric = match metric {
        SamplerMetric::Auto if gaussian.is_some() => SamplerMetric::W2Fit,
        SamplerMetric::Auto if mixture_1d => SamplerMetric::Tv,
        SamplerMetric::Auto => SamplerMetric::None,
        m => m,
    };
    match metric {
        SamplerMetric::W2Fit | SamplerMetric::W2Empirical => {
            let (mean, cov) = gaussian.ok_or(Error::Precondition("W2 needs a Gaussian target".into()))?;
            if metric == SamplerMetric::W2Fit {
                let v = metrics::gaussian_fit_w2(samples, &mean, &cov)?;
                return Ok(Some(("w2-fit", point_report(MetricKind::W2, v, samples.len()))));
            }
            let opts = W2Options {
                seed,
                bootstrap: 0,
                ..W2Options::default()
            };
            Ok(Some(("w2", metrics::w2_to_gaussian(samples, &mean, &cov, &opts)?)))
        }
        SamplerMetric::Tv => {
            let ModelKind::GaussianMixture { means, var, .. } = &model.kind else {
                return Err(Error::Precondition("TV needs a mixture target".into()));
            };
            if model.d != 1 {
                return Err(Error::Precondition("TV needs a one-dimensional target".into()));
            }
            let sd = var.sqrt();
            let lo = means.iter().map(|m| m[0]).fold(f64::INFINITY, f64::min) - 6.0 * sd;
            let hi = means.iter().map(|m| m[0]).fold(f64::NEG_INFINITY, f64::max) + 6.0 * sd;
            let xs: Vec<f64> = samples.iter().map(|s| s[0]).collect();
            let rep = metrics::tv_histogram(&xs, |x| model.density(&[x]).unwrap_or(0.0), lo, hi, 60, 200, seed)?;
            Ok(Some(("tv", rep)))
        }
        SamplerMetric::None | SamplerMetric::Auto => Ok(None),
    }
}

fn total_queries(c: &Counters) -> u64 {
    c.grad_c + c.grad_q + c.eval_c + c.eval_q
}

fn sampler_rows(model: &PotentialModel, spec: &SamplerSpec, eps: f64, seed: u64, col: &mut Collector) -> Result<()> {
    let (samples, ledger, hp) = sample_chains(model, spec, eps, seed)?;
    let label = spec.theorem.name();
    let c = ledger.charged();
    let note = format!("eta={} s={} t={} k={} b={} m={}", hp.eta, hp.s, hp.t, hp.k, hp.b, hp.m);
    col.rows.push(
        Row::new("sampler", Some(seed), label, "eps", eps, "queries", total_queries(&c) as f64)
            .counters(c)
            .note(note),
    );
    if let Some((name, rep)) = sampler_metric(model, spec.metric, &samples, seed)? {
        col.rows.push(
            Row::new("sampler", Some(seed), label, "eps", eps, name, rep.value)
                .ci(rep.ci_low, rep.ci_high)
                .counters(c)
                .note(rep.note.unwrap_or_default()),
        );
    }
    col.ledger(label, "eps", eps, seed, ledger);
    Ok(())
}

fn gradest_rows(model: &PotentialModel, spec: &GradEstSpec, seed: u64, col: &mut Collector) -> Result<()> {
    let x = spec.point.clone().unwrap_or_else(|| vec![0.0; model.d]);
    if x.len() != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            got: x.len(),
        });
    }
    let truth = model.grad_exact(&x)?;
    let mut r = rng::stream(seed, &[tags::TRIAL]);
    let mut ledger = QueryLedger::new();
    let (label, param, value) = match &spec.method {
        GradMethod::Smoothing { nu, .. } => ("smoothing", "nu", *nu),
        GradMethod::PhasePipeline { sigma_hat } => ("phase-pipeline", "sigma_hat", *sigma_hat),
        GradMethod::Alg4Mlmc { sigma_hat } => ("alg4-mlmc", "sigma_hat", *sigma_hat),
        GradMethod::Alg4 { eps } => ("robust", "eps", *eps),
    };
    let prev = ledger.set_phase(label);
    let mut errs = Vec::with_capacity(spec.trials);
    for _ in 0..spec.trials {
        let g = match &spec.method {
            GradMethod::Smoothing { nu, b } => gradest::gaussian_smoothing_gradient(model, &x, *nu, *b, &mut r, &mut ledger)?,
            GradMethod::PhasePipeline { sigma_hat } => {
                gradest::phase_pipeline_gradient(model, &x, *sigma_hat, &spec.pipeline, &mut r, &mut ledger)?
            }
            GradMethod::Alg4Mlmc { sigma_hat } => {
                gradest::alg4_mlmc_gradient(model, &x, *sigma_hat, &spec.alg4, &spec.pipeline, &mut r, &mut ledger)?
            }
            GradMethod::Alg4 { eps } => {
                let p = Alg4Params::for_model(model, *eps, &spec.alg4)?;
                gradest::quantum_stochastic_gradient_model(model, &x, &p, &spec.pipeline.qme, &mut r, &mut ledger)?
            }
        };
        errs.push(sub(&g.g, &truth));
    }
    ledger.set_phase(&prev);
    let sq: Vec<f64> = errs.iter().map(|e| norm_sq(e)).collect();
    let n = sq.len() as f64;
    let mse = sq.iter().sum::<f64>() / n;
    let sd = (sq.iter().map(|v| (v - mse).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let half = 1.96 * sd / n.sqrt();
    let c = ledger.charged();
    col.rows.push(
        Row::new("grad-est", Some(seed), label, param, value, "mse", mse)
            .ci(mse - half, mse + half)
            .counters(c),
    );
    col.rows.push(Row::new("grad-est", Some(seed), label, param, value, "bias-norm", norm(&mean_of(&errs))).counters(c));
    col.ledger(label, param, value, seed, ledger);
    Ok(())
}

fn jordan_rows(model: &PotentialModel, spec: &JordanSpec, seed: u64, col: &mut Collector) -> Result<()> {
    let x = spec.point.clone().unwrap_or_else(|| vec![0.0; model.d]);
    let l_jordan = spec.l_jordan.unwrap_or(model.grad_norm_bound);
    let beta = spec.beta.unwrap_or(model.smoothness);
    let grid = jordan::build_grid(model.d, spec.eps, l_jordan, beta, &x, spec.qubit_budget)?;
    let truth = model.grad_exact(&x)?;
    let radius = grid.error_radius();
    let mut r = rng::stream(seed, &[tags::TRIAL]);
    let mut ledger = QueryLedger::new();
    ledger.set_phase("jordan");
    let (mut fails, mut err_sum) = (0usize, 0.0);
    for _ in 0..spec.trials {
        ledger.charge_eval_quantum(1);
        let g = jordan::jordan_gradient(|y| model.value(y), &grid, &mut r)?;
        let e = sub(&g, &truth);
        if e.iter().any(|v| v.abs() > radius) {
            fails += 1;
        }
        err_sum += e.iter().map(|v| v.abs()).fold(0.0, f64::max);
    }
    let n = spec.trials as f64;
    let p = fails as f64 / n;
    let half = 1.96 * (p * (1.0 - p) / n).sqrt();
    let c = ledger.charged();
    let note = format!("radius={radius} bits={} qubits={}", grid.bits_b, grid.qubits());
    col.rows.push(
        Row::new("jordan", Some(seed), "statevector", "eps", spec.eps, "fail-rate", p)
            .ci((p - half).max(0.0), (p + half).min(1.0))
            .counters(c)
            .note(note),
    );
    col.rows.push(Row::new("jordan", Some(seed), "statevector", "eps", spec.eps, "mean-max-error", err_sum / n).counters(c));
    col.ledger("statevector", "eps", spec.eps, seed, ledger);
    Ok(())
}

fn optimize_rows(model: &PotentialModel, spec: &OptimizeConfig, seed: u64, col: &mut Collector) -> Result<()> {
    let mut r = rng::stream(seed, &[tags::TRIAL]);
    let mut ledger = QueryLedger::new();
    let (x_best, f_best, rep) = optimizer::approx_convex_minimize(model, spec, &mut ledger, &mut r)?;
    let c = ledger.charged();
    let nan = f64::NAN;
    let note = format!(
        "beta={} v={} eta={} steps={} x_best={:?}",
        rep.plan.beta_temp, rep.plan.smoothing_v, rep.plan.eta, rep.plan.steps, x_best
    );
    for (metric, v) in [
        ("f-best", f_best),
        ("gap", rep.gap.unwrap_or(nan)),
        ("success-rate", rep.success_rate.unwrap_or(nan)),
    ] {
        col.rows.push(
            Row::new("optimize", Some(seed), "qz-lmc", "eps", spec.eps, metric, v)
                .counters(c)
                .note(note.clone()),
        );
    }
    col.ledger("qz-lmc", "eps", spec.eps, seed, ledger);
    Ok(())
}

/// One row per sweep value with the seed-averaged charged query total,
/// then a `slope_fit` row.
fn sweep_rows(model: &ModelSpec, spec: &SamplerSpec, sweep: &SweepSpec, seeds: &[u64], col: &mut Collector) -> Result<f64> {
    let label = spec.theorem.name();
    let param = sweep.param.name();
    let mut pts = Vec::with_capacity(sweep.values.len());
    for &v in &sweep.values {
        let m = model.with_param(sweep.param, v)?.build()?;
        let eps = if sweep.param == SweepParam::Eps { v } else { spec.eps };
        let mut sum = Counters::default();
        for &seed in seeds {
            let (_, ledger, _) = sample_chains(&m, spec, eps, seed)?;
            sum.add(&ledger.charged());
            col.ledger(label, param, v, seed, ledger);
        }
        let k = seeds.len() as u64;
        let mean = Counters {
            grad_c: sum.grad_c / k,
            grad_q: sum.grad_q / k,
            eval_c: sum.eval_c / k,
            eval_q: sum.eval_q / k,
        };
        let q = total_queries(&sum) as f64 / k as f64;
        col.rows.push(Row::new("scaling-sweep", None, label, param, v, "queries", q).counters(mean));
        pts.push((sweep.param.fit_x(v), q.max(1.0)));
    }
    let (slope, _, r2) = if pts.len() >= 3 {
        metrics::slope_fit(&pts)?
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    col.rows.push(Row::new("scaling-sweep", None, "slope_fit", param, f64::NAN, "slope", slope).note(format!("theorem={label} r2={r2}")));
    Ok(slope)
}

// ---------------------------------------------------------------------------
// Scaling table

fn default_table_theorems() -> Vec<Theorem> {
    Theorem::ALL.to_vec()
}

fn default_n_values() -> Vec<f64> {
    vec![64.0, 256.0, 1024.0]
}

fn default_eps_values() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableConfig {
    pub d: usize,
    pub radius: f64,
    pub center_seed: u64,
    /// Accuracy of the n-sweep.
    pub eps: f64,
    /// Component count of the eps-sweep.
    pub n: usize,
    pub n_values: Vec<f64>,
    pub eps_values: Vec<f64>,
    pub theorems: Vec<Theorem>,
    pub constants: PlanConstants,
    pub pipeline: PipelineConfig,
    pub zeroth: ZerothOrderOracle,
    pub seeds: Vec<u64>,
    pub chains: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            d: 2,
            radius: 1.0,
            center_seed: 7,
            eps: 0.1,
            n: 256,
            n_values: default_n_values(),
            eps_values: default_eps_values(),
            theorems: default_table_theorems(),
            constants: PlanConstants::default(),
            pipeline: chain_pipeline(),
            zeroth: ZerothOrderOracle::PhasePipeline,
            seeds: vec![1],
            chains: 1,
            output: None,
            workers: None,
        }
    }
}

impl TableConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TableConfig = toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| key_at(text, s.start)).unwrap_or_else(|| "<root>".into());
            config_err(&path, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.theorems.is_empty() {
            return Err(config_err("theorems", "must not be empty"));
        }
        if self.n_values.is_empty() {
            return Err(config_err("n_values", "sweep grid must not be empty"));
        }
        if self.eps_values.is_empty() {
            return Err(config_err("eps_values", "sweep grid must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.chains == 0 {
            return Err(config_err("chains", "must be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn model(&self, n: usize) -> ModelSpec {
        ModelSpec::FiniteSumQuadratic {
            d: self.d,
            n,
            radius: self.radius,
            center_seed: self.center_seed,
            noise_amplitude: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub theorem: Theorem,
    pub n_slope: f64,
    pub eps_slope: f64,
    /// Charged queries at the largest `n` of the n-sweep.
    pub queries_at_max_n: f64,
}

/// Runs the n- and eps-sweeps for every listed algorithm on a strongly
/// convex finite sum and fits the exponents.
pub fn reproduce_table1(cfg: &TableConfig) -> Result<(Vec<TableRow>, Vec<Row>, Vec<LedgerEntry>)> {
    cfg.validate()?;
    let mut col = Collector::default();
    let mut table = Vec::with_capacity(cfg.theorems.len());
    let res: Result<()> = with_pool(cfg.workers, || {
        for &theorem in &cfg.theorems {
            let spec = SamplerSpec {
                theorem,
                eps: cfg.eps,
                chains: cfg.chains,
                constants: cfg.constants.clone(),
                pipeline: cfg.pipeline.clone(),
                zeroth: cfg.zeroth,
                metric: SamplerMetric::None,
                start: None,
            };
            let n_sweep = SweepSpec {
                param: SweepParam::N,
                values: cfg.n_values.clone(),
            };
            let before = col.rows.len();
            let n_slope = sweep_rows(&cfg.model(cfg.n), &spec, &n_sweep, &cfg.seeds, &mut col)?;
            let queries_at_max_n = col.rows[before..col.rows.len() - 1]
                .last()
                .map(|r| r.metric_value)
                .unwrap_or(f64::NAN);
            let eps_sweep = SweepSpec {
                param: SweepParam::Eps,
                values: cfg.eps_values.clone(),
            };
            let eps_slope = sweep_rows(&cfg.model(cfg.n), &spec, &eps_sweep, &cfg.seeds, &mut col)?;
            table.push(TableRow {
                theorem,
                n_slope,
                eps_slope,
                queries_at_max_n,
            });
        }
        Ok(())
    })?;
    res?;
    Ok((table, col.rows, col.ledgers))
}

/// Runs [`reproduce_table1`] and writes `table1-<hash>.csv` plus the
/// ledger JSON into the resolved output directory.
pub fn run_table(cfg: &TableConfig, opts: &RunOptions) -> Result<(Vec<TableRow>, RunOutput)> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seeds = vec![s];
    }
    if opts.workers.is_some() {
        cfg.workers = opts.workers;
    }
    let hash = cfg.hash();
    let dir = resolve_out_dir(opts, cfg.output.as_deref());
    let (table, rows, ledgers) = reproduce_table1(&cfg)?;
    let col = Collector { rows, ledgers };
    let stem = format!("table1-{hash}");
    let (csv, csv_path, ledger_path) = write_outputs(&dir, &stem, &hash, "table1", &col, false)?;
    Ok((
        table,
        RunOutput {
            config_hash: hash,
            rows: col.rows,
            csv,
            csv_path,
            ledger_path,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLER: &str = r#"
experiment = "sampler"
seeds = [1, 2]

[model]
kind = "finite-sum-quadratic"
d = 2
n = 16

[sampler]
theorem = "qsvrg-hmc"
eps = 0.2
chains = 20

[sampler.constants]
eta = 0.5
"#;

    fn tmp(name: &str) -> PathBuf {
        let p = std::env::temp_dir().join(format!("qsampler-harness-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&p);
        p
    }

    #[test]
    fn config_round_trip() {
        let c = ExperimentConfig::parse(SAMPLER).unwrap();
        let again = ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert_eq!(c.hash().len(), 16);
        assert_eq!(c.sampler.as_ref().unwrap().constants.eta, 0.5);
        assert_eq!(c.sampler.as_ref().unwrap().constants.s, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let bad = SAMPLER.replace("chains = 20", "chains = 20\nchain = 3");
        match ExperimentConfig::parse(&bad) {
            Err(Error::Config { path, message }) => {
                assert!(path.starts_with("sampler"), "{path}");
                assert!(message.contains("chain"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let bad = SAMPLER.replace("eta = 0.5", "etta = 0.5");
        assert!(matches!(ExperimentConfig::parse(&bad), Err(Error::Config { .. })));
    }

    #[test]
    fn empty_sweep_grid_names_the_field() {
        let text = SAMPLER.replace("experiment = \"sampler\"", "experiment = \"scaling-sweep\"")
            + "\n[sweep]\nparam = \"eps\"\nvalues = []\n";
        match ExperimentConfig::parse(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "sweep.values"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_section_and_seeds_are_errors() {
        let text = SAMPLER.replace("experiment = \"sampler\"", "experiment = \"jordan\"");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config { path, .. }) if path == "jordan"));
        let text = SAMPLER.replace("seeds = [1, 2]", "");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config { path, .. }) if path == "seeds"));
    }

    #[test]
    fn sampler_run_is_byte_identical() {
        let c = ExperimentConfig::parse(SAMPLER).unwrap();
        let dir = tmp("det");
        let opts = RunOptions {
            out_dir: Some(dir.clone()),
            ..RunOptions::default()
        };
        let a = run_experiment(&c, &opts).unwrap();
        let b = run_experiment(&c, &RunOptions { workers: Some(1), ..opts }).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(fs::read(&a.csv_path).unwrap(), a.csv.as_bytes());
        assert_eq!(a.rows.len(), 4);
        assert!(a.csv.starts_with("schema,config_hash,build,"));
        for line in a.csv.lines().skip(1) {
            assert!(line.contains(&a.config_hash));
            assert!(line.contains(build_id()));
        }
        let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a.ledger_path).unwrap()).unwrap();
        assert_eq!(doc["entries"].as_array().unwrap().len(), 2);
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn eps_sweep_emits_rows_then_slope() {
        let text = SAMPLER
            .replace("experiment = \"sampler\"", "experiment = \"scaling-sweep\"")
            .replace("seeds = [1, 2]", "seeds = [1]")
            .replace("chains = 20", "chains = 1")
            + "\n[sweep]\nparam = \"eps\"\nvalues = [0.2, 0.1, 0.05, 0.025]\n";
        let c = ExperimentConfig::parse(&text).unwrap();
        let dir = tmp("sweep");
        let out = run_experiment(
            &c,
            &RunOptions {
                out_dir: Some(dir.clone()),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.rows.len(), 5);
        assert!(out.rows[..4].iter().all(|r| r.metric == "queries"));
        assert_eq!(out.rows[4].label, "slope_fit");
        assert!(out.rows[4].metric_value > 0.0);
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn divergence_writes_partial_output() {
        let text = SAMPLER.replace("eta = 0.5", "eta = 400.0");
        let c = ExperimentConfig::parse(&text).unwrap();
        let dir = tmp("partial");
        let err = run_experiment(
            &c,
            &RunOptions {
                out_dir: Some(dir.clone()),
                ..RunOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
        assert!(fs::read_dir(&dir).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains(".partial.csv")));
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn csv_quotes_fields_with_commas() {
        let r = Row::new("x", None, "a,b", "p", 1.0, "m", 2.0);
        let csv = render_csv(&[r], "h");
        assert!(csv.lines().nth(1).unwrap().contains("\"a,b\""));
    }

    #[test]
    fn model_sweep_substitution() {
        let m = ModelSpec::FiniteSumQuadratic {
            d: 2,
            n: 4,
            radius: 1.0,
            center_seed: 0,
            noise_amplitude: 0.0,
        };
        assert_eq!(m.with_param(SweepParam::N, 64.0).unwrap().build().unwrap().n, 64);
        assert!(m.with_param(SweepParam::N, 2.5).is_err());
        assert!(ModelSpec::IsotropicQuadratic { d: 2 }.with_param(SweepParam::N, 4.0).is_err());
    }
}
