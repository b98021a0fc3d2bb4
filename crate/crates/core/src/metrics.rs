//! Distances between sample sets and reference distributions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::dist_sq;
use crate::qme::QueryLedger;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    W2,
    KL,
    TV,
    SlopeFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: MetricKind,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub sample_count: usize,
    pub ledger: QueryLedger,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl MetricReport {
    fn point(kind: MetricKind, value: f64, n: usize) -> Self {
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

    fn with_ci(mut self, mut boot: Vec<f64>) -> Self {
        if !boot.is_empty() {
            boot.sort_by(f64::total_cmp);
            let q = |p: f64| boot[((boot.len() - 1) as f64 * p).round() as usize];
            self.ci_low = q(0.025).min(self.value);
            self.ci_high = q(0.975).max(self.value);
        }
        self
    }

    pub fn with_ledger(mut self, ledger: QueryLedger) -> Self {
        self.ledger = ledger;
        self
    }
}

fn to_matrix(c: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if c.len() != d || c.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: c.len(),
        });
    }
    let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (c[i][j] + c[j][i]));
    Ok(m)
}

/// Symmetric PSD square root; rejects matrices with clearly negative spectrum.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
        return Err(Error::param("covariance", "not positive semidefinite"));
    }
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// Closed-form W2 between Gaussians (Bures-Wasserstein).
pub fn w2_gaussian_exact(mean1: &[f64], cov1: &[Vec<f64>], mean2: &[f64], cov2: &[Vec<f64>]) -> Result<f64> {
    let d = mean1.len();
    if mean2.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mean2.len(),
        });
    }
    let c1 = to_matrix(cov1, d)?;
    let c2 = to_matrix(cov2, d)?;
    let r2 = psd_sqrt(&c2)?;
    psd_sqrt(&c1)?;
    let cross = psd_sqrt(&(&r2 * &c1 * &r2))?;
    let tr = c1.trace() + c2.trace() - 2.0 * cross.trace();
    Ok((dist_sq(mean1, mean2) + tr.max(0.0)).sqrt())
}

/// `KL(N(m1, c1) || N(m2, c2))`.
pub fn gaussian_kl(mean1: &[f64], cov1: &[Vec<f64>], mean2: &[f64], cov2: &[Vec<f64>]) -> Result<f64> {
    let d = mean1.len();
    let c1 = to_matrix(cov1, d)?;
    let c2 = to_matrix(cov2, d)?;
    let chol2 = c2
        .clone()
        .cholesky()
        .ok_or(Error::param("covariance", "reference covariance must be positive definite"))?;
    let chol1 = c1
        .clone()
        .cholesky()
        .ok_or(Error::param("covariance", "covariance must be positive definite"))?;
    let inv2 = chol2.inverse();
    let dm = DVector::from_iterator(d, mean2.iter().zip(mean1).map(|(a, b)| a - b));
    let quad = (dm.transpose() * &inv2 * &dm)[(0, 0)];
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let kl = 0.5 * ((&inv2 * &c1).trace() + quad - d as f64 + logdet(&chol2.l()) - logdet(&chol1.l()));
    Ok(kl.max(0.0))
}

/// Sample mean and (unbiased) covariance.
pub fn sample_moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = samples.len();
    let d = samples.first().map_or(0, |s| s.len());
    let mean = crate::linalg::mean_of(samples);
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    cov.iter_mut().flatten().for_each(|v| *v /= denom);
    (mean, cov)
}

/// KL proxy: divergence of the moment-matched Gaussian from the target Gaussian.
pub fn gaussian_fit_kl(samples: &[Vec<f64>], mean: &[f64], cov: &[Vec<f64>]) -> Result<MetricReport> {
    let (m, c) = sample_moments(samples);
    let kl = gaussian_kl(&m, &c, mean, cov)?;
    let mut r = MetricReport::point(MetricKind::KL, kl, samples.len());
    r.note = Some("moment-matched Gaussian proxy".into());
    Ok(r)
}

/// Bures W2 between the moment-matched Gaussian and a target Gaussian.
pub fn gaussian_fit_w2(samples: &[Vec<f64>], mean: &[f64], cov: &[Vec<f64>]) -> Result<f64> {
    let (m, c) = sample_moments(samples);
    w2_gaussian_exact(&m, &c, mean, cov)
}

const HALTON_BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= b as f64;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

/// `n` deterministic points whose empirical measure approximates
/// `N(mean, cov)`: Halton points pushed through the normal quantile and the
/// symmetric square root of `cov`. Up to 12 dimensions.
pub fn gaussian_quantizer(mean: &[f64], cov: &[Vec<f64>], n: usize) -> Result<Vec<Vec<f64>>> {
    let d = mean.len();
    if d == 0 || d > HALTON_BASES.len() {
        return Err(Error::param("mean", "quantizer supports 1 to 12 dimensions"));
    }
    let root = psd_sqrt(&to_matrix(cov, d)?)?;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    Ok((1..=n as u64)
        .map(|i| {
            let z = DVector::from_iterator(d, HALTON_BASES[..d].iter().map(|&b| std.inverse_cdf(radical_inverse(i, b))));
            let y = &root * z;
            y.iter().zip(mean).map(|(v, m)| v + m).collect()
        })
        .collect())
}

/// Empirical W2 from samples to an equal-size Gaussian quantizer.
///
/// By the triangle inequality this bounds the distance to the Gaussian
/// itself up to the quantizer's own error, which is returned in the note.
pub fn w2_to_gaussian(samples: &[Vec<f64>], mean: &[f64], cov: &[Vec<f64>], opts: &W2Options) -> Result<MetricReport> {
    let q = gaussian_quantizer(mean, cov, samples.len())?;
    let mut r = empirical_w2(samples, &q, opts)?;
    let fit = gaussian_fit_w2(&q, mean, cov)?;
    r.note = Some(format!("quantizer moment error {fit:.4}"));
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct W2Options {
    /// Largest equal-size problem solved by exact assignment.
    pub exact_limit: usize,
    /// Entropic regularization as a fraction of the median pairwise cost.
    pub reg_fraction: f64,
    pub sinkhorn_iters: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for W2Options {
    fn default() -> Self {
        W2Options {
            exact_limit: 2000,
            reg_fraction: 0.01,
            sinkhorn_iters: 500,
            bootstrap: 200,
            seed: 0,
        }
    }
}

pub const MIN_W2_SAMPLES: usize = 100;

/// Empirical W2 between two sample sets, with a bootstrap interval.
pub fn empirical_w2(a: &[Vec<f64>], b: &[Vec<f64>], opts: &W2Options) -> Result<MetricReport> {
    if a.len() < MIN_W2_SAMPLES || b.len() < MIN_W2_SAMPLES {
        return Err(Error::param("samples", format!("need at least {MIN_W2_SAMPLES} per set")));
    }
    let d = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let (value, note) = w2_core(a, b, opts);
    let mut r = MetricReport::point(MetricKind::W2, value, a.len().min(b.len()));
    r.note = note;
    let mut brng = rng::stream(opts.seed, &[rng::tags::BOOTSTRAP]);
    let boot: Vec<f64> = (0..opts.bootstrap)
        .map(|_| {
            let ra = resample(a, &mut brng);
            let rb = resample(b, &mut brng);
            w2_core(&ra, &rb, opts).0
        })
        .collect();
    Ok(r.with_ci(boot))
}

fn resample<R: Rng + ?Sized>(s: &[Vec<f64>], rng: &mut R) -> Vec<Vec<f64>> {
    (0..s.len()).map(|_| s[rng.random_range(0..s.len())].clone()).collect()
}

fn w2_core(a: &[Vec<f64>], b: &[Vec<f64>], opts: &W2Options) -> (f64, Option<String>) {
    if a[0].len() == 1 {
        let xa: Vec<f64> = a.iter().map(|v| v[0]).collect();
        let xb: Vec<f64> = b.iter().map(|v| v[0]).collect();
        return (w2_1d(&xa, &xb), None);
    }
    if a.len() == b.len() && a.len() <= opts.exact_limit {
        let n = a.len();
        let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| dist_sq(p, q))).collect();
        let assign = hungarian(&cost, n);
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        return ((total / n as f64).sqrt(), None);
    }
    let (v, reg) = sinkhorn_w2(a, b, opts);
    (v, Some(format!("entropic transport, reg = {reg:.3e}; biased upward by at most reg * ln(n m)")))
}

/// Exact 1-D W2 by matching quantile functions; handles unequal sizes.
pub fn w2_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    if xa.len() == xb.len() {
        let s: f64 = xa.iter().zip(&xb).map(|(p, q)| (p - q) * (p - q)).sum();
        return (s / xa.len() as f64).sqrt();
    }
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut u, mut acc) = (0usize, 0usize, 0.0f64, 0.0f64);
    while i < xa.len() && j < xb.len() {
        let ea = (i + 1) as f64 / na;
        let eb = (j + 1) as f64 / nb;
        let next = ea.min(eb);
        acc += (next - u) * (xa[i] - xb[j]).powi(2);
        u = next;
        if ea <= next {
            i += 1;
        }
        if eb <= next {
            j += 1;
        }
    }
    acc.sqrt()
}

/// Minimum-cost perfect assignment for a dense `n x n` cost matrix (row-major).
/// Returns the column assigned to every row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|m| *m = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

fn median_pairwise_cost(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut r = rng::stream(0x5eed, &[]);
    let mut c: Vec<f64> = (0..2001)
        .map(|_| dist_sq(&a[r.random_range(0..a.len())], &b[r.random_range(0..b.len())]))
        .collect();
    c.sort_by(f64::total_cmp);
    c[c.len() / 2].max(1e-300)
}

fn log_sum_exp(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn between uniform empirical measures. Returns the
/// transport cost of the regularized plan (square-rooted) and the regularization.
pub fn sinkhorn_w2(a: &[Vec<f64>], b: &[Vec<f64>], opts: &W2Options) -> (f64, f64) {
    let (n, m) = (a.len(), b.len());
    let reg = opts.reg_fraction * median_pairwise_cost(a, b);
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| dist_sq(p, q))).collect();
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..opts.sinkhorn_iters {
        for i in 0..n {
            f[i] = reg * la - reg * log_sum_exp((0..m).map(|j| (g[j] - cost[i * m + j]) / reg));
        }
        let mut err = 0.0f64;
        for j in 0..m {
            let new = reg * lb - reg * log_sum_exp((0..n).map(|i| (f[i] - cost[i * m + j]) / reg));
            err = err.max((new - g[j]).abs());
            g[j] = new;
        }
        if err < 1e-9 * reg.max(1.0) {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost[i * m + j];
            total += ((f[i] + g[j] - c) / reg).exp() * c;
        }
    }
    (total.max(0.0).sqrt(), reg)
}

/// Histogram total-variation distance to a 1-D density on `[lo, hi]`.
///
/// Mass outside the window is one extra cell on both sides of the comparison.
pub fn tv_histogram(samples: &[f64], density: impl Fn(f64) -> f64, lo: f64, hi: f64, bins: usize, bootstrap: usize, seed: u64) -> Result<MetricReport> {
    if bins == 0 || !(hi > lo) || samples.is_empty() {
        return Err(Error::param("histogram", "need bins > 0, hi > lo and samples"));
    }
    let w = (hi - lo) / bins as f64;
    let probs: Vec<f64> = (0..bins)
        .map(|k| {
            let a = lo + k as f64 * w;
            simpson(&density, a, a + w, 32)
        })
        .collect();
    let tv = |s: &[f64]| {
        let mut counts = vec![0usize; bins + 1];
        for &x in s {
            if x >= lo && x < hi {
                counts[(((x - lo) / w) as usize).min(bins - 1)] += 1;
            } else {
                counts[bins] += 1;
            }
        }
        let n = s.len() as f64;
        let inside: f64 = probs.iter().sum();
        let mut t: f64 = probs.iter().zip(&counts).map(|(p, c)| (*c as f64 / n - p).abs()).sum();
        t += (counts[bins] as f64 / n - (1.0 - inside).max(0.0)).abs();
        0.5 * t
    };
    let value = tv(samples);
    let mut brng = rng::stream(seed, &[rng::tags::BOOTSTRAP]);
    let boot: Vec<f64> = (0..bootstrap)
        .map(|_| {
            let rs: Vec<f64> = (0..samples.len()).map(|_| samples[brng.random_range(0..samples.len())]).collect();
            tv(&rs)
        })
        .collect();
    Ok(MetricReport::point(MetricKind::TV, value, samples.len()).with_ci(boot))
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, k: usize) -> f64 {
    let k = k + k % 2;
    let h = (b - a) / k as f64;
    let mut s = f(a) + f(b);
    for i in 1..k {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Least-squares line through `(ln x, ln y)`: returns `(slope, intercept, r^2)`.
pub fn slope_fit(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    if points.len() < 3 {
        return Err(Error::param("points", "need at least 3 points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::param("points", "coordinates must be positive"));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::param("points", "x values must not all coincide"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if ss_tot <= 1e-300 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, r2))
}

pub fn slope_report(points: &[(f64, f64)]) -> Result<MetricReport> {
    let (s, _, r2) = slope_fit(points)?;
    let mut r = MetricReport::point(MetricKind::SlopeFit, s, points.len());
    r.note = Some(format!("r2 = {r2:.4}"));
    Ok(r)
}
