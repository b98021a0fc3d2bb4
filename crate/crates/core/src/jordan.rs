//! Statevector simulation of Jordan's gradient estimation.
//!
//! The grid `G = {-N/2, ..., N/2 - 1}^d` around `x0` carries the phase
//! `exp(2 pi i F~(g))`, where
//! `F(g) = N / (2 L l) * (f(x0 + l g / N) - f(x0))` and `F~` is `F` rounded to
//! `b0` fractional bits. An inverse QFT over `G` on each register
//! concentrates the amplitude near `k = N grad f / (2 L)`, so a measured
//! label `k` reports the gradient `2 L k / N`.

use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const DEFAULT_QUBIT_BUDGET: usize = 24;
const NORM_TOL: f64 = 1e-9;

/// Grid parameters for one run of the algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d: usize,
    /// Side length of the hypercube sampled around `x0`.
    pub l: f64,
    pub bits_b: u32,
    pub bits_b0: u32,
    pub x0: Vec<f64>,
    /// Bound on the gradient norm near `x0`.
    pub l_jordan: f64,
    /// Smoothness of `f`.
    pub beta: f64,
    /// Evaluation error tolerated in `f`.
    pub eps: f64,
    pub qubit_budget: usize,
}

impl GridSpec {
    pub fn n(&self) -> usize {
        1usize << self.bits_b
    }

    pub fn n0(&self) -> u64 {
        1u64 << self.bits_b0
    }

    pub fn qubits(&self) -> usize {
        self.d * self.bits_b as usize
    }

    /// Per-coordinate error guaranteed with probability 2/3.
    pub fn error_radius(&self) -> f64 {
        1500.0 * (self.d as f64 * self.eps * self.beta).sqrt()
    }

    /// Spacing of the reported gradient values.
    pub fn resolution(&self) -> f64 {
        2.0 * self.l_jordan / self.n() as f64
    }

    /// Grid point `x0 + (l / N) g` for centred labels `g`.
    pub fn point(&self, g: &[i64]) -> Vec<f64> {
        let h = self.l / self.n() as f64;
        self.x0.iter().zip(g).map(|(x, &gi)| x + h * gi as f64).collect()
    }

    /// Maps a measured label vector to the reported gradient.
    pub fn label_to_gradient(&self, k: &[i64]) -> Vec<f64> {
        let r = self.resolution();
        k.iter().map(|&ki| r * ki as f64).collect()
    }
}

/// Chooses `N` and `N0` for the given accuracy and checks the qubit budget.
///
/// `N` is the largest power of two with
/// `24 pi r / L <= 1/N <= 48 pi r / L`, `r = sqrt(d eps beta)`, and `N0`
/// the largest with `N eps / (2 L l) <= 1/N0 <= N eps / (L l)`.
pub fn build_grid(
    d: usize,
    eps: f64,
    l_jordan: f64,
    beta: f64,
    x0: &[f64],
    qubit_budget: usize,
) -> Result<GridSpec> {
    for (name, v) in [("eps", eps), ("l_jordan", l_jordan), ("beta", beta)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::param(name, "must be positive and finite"));
        }
    }
    if d == 0 || x0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    let r = (d as f64 * eps * beta).sqrt();
    let lo = 24.0 * PI * r / l_jordan;
    let hi = 48.0 * PI * r / l_jordan;
    let bits_b = largest_power_in(1.0 / hi, 1.0 / lo).filter(|&b| b >= 1).ok_or(Error::NoValidGrid { lo, hi })?;
    let needed = d * bits_b as usize;
    if needed > qubit_budget {
        return Err(Error::QubitBudget {
            needed,
            budget: qubit_budget,
        });
    }
    let n = (1u64 << bits_b) as f64;
    let l = 2.0 * (eps / (beta * d as f64)).sqrt();
    let lo0 = n * eps / (2.0 * l_jordan * l);
    let hi0 = n * eps / (l_jordan * l);
    let bits_b0 = largest_power_in(1.0 / hi0, 1.0 / lo0).ok_or(Error::NoValidGrid { lo: lo0, hi: hi0 })?;
    if bits_b0 > 52 {
        return Err(Error::NoValidGrid { lo: lo0, hi: hi0 });
    }
    Ok(GridSpec {
        d,
        l,
        bits_b,
        bits_b0,
        x0: x0.to_vec(),
        l_jordan,
        beta,
        eps,
        qubit_budget,
    })
}

/// Largest `b >= 0` with `lo <= 2^b <= hi`, allowing for rounding at the ends.
fn largest_power_in(lo: f64, hi: f64) -> Option<u32> {
    if !(hi >= 1.0 - 1e-12) || !hi.is_finite() {
        return None;
    }
    let b = (hi.log2() + 1e-9).floor().max(0.0);
    (2f64.powf(b) >= lo * (1.0 - 1e-9)).then_some(b as u32)
}

/// Complex amplitudes over `d` registers of `bits` qubits each.
///
/// Register `r` has stride `N^r` in the flat index.
#[derive(Clone, Debug)]
pub struct Statevector {
    pub amplitudes: Vec<Complex64>,
    pub d: usize,
    pub bits: u32,
}

impl Statevector {
    pub fn uniform(d: usize, bits: u32) -> Self {
        let len = 1usize << (bits as usize * d);
        let a = Complex64::new(1.0 / (len as f64).sqrt(), 0.0);
        Statevector {
            amplitudes: vec![a; len],
            d,
            bits,
        }
    }

    pub fn from_amplitudes(amplitudes: Vec<Complex64>, d: usize, bits: u32) -> Result<Self> {
        if amplitudes.len() != 1usize << (bits as usize * d) {
            return Err(Error::DimensionMismatch {
                expected: 1usize << (bits as usize * d),
                got: amplitudes.len(),
            });
        }
        Ok(Statevector { amplitudes, d, bits })
    }

    pub fn side(&self) -> usize {
        1usize << self.bits
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn check_norm(&self) -> Result<()> {
        let n = self.norm();
        if (n - 1.0).abs() > NORM_TOL || !n.is_finite() {
            return Err(Error::NormDrift(n));
        }
        Ok(())
    }

    /// Centred labels of every register for a flat index.
    pub fn labels(&self, mut idx: usize) -> Vec<i64> {
        let n = self.side();
        let half = (n / 2) as i64;
        (0..self.d)
            .map(|_| {
                let q = idx % n;
                idx /= n;
                q as i64 - half
            })
            .collect()
    }

    /// Multiplies each amplitude by `exp(2 pi i phase(labels))`.
    pub fn apply_phase(&mut self, phase: impl Fn(&[i64]) -> f64) {
        for idx in 0..self.amplitudes.len() {
            let g = self.labels(idx);
            let p = phase(&g);
            self.amplitudes[idx] *= Complex64::from_polar(1.0, 2.0 * PI * p);
        }
    }

    /// Applies a diagonal phase given as a precomputed table.
    pub fn apply_phase_table(&mut self, phases: &[f64]) -> Result<()> {
        if phases.len() != self.amplitudes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.amplitudes.len(),
                got: phases.len(),
            });
        }
        for (a, p) in self.amplitudes.iter_mut().zip(phases) {
            *a *= Complex64::from_polar(1.0, 2.0 * PI * p);
        }
        Ok(())
    }

    /// Inverse QFT over `G` on every register:
    /// `|g> -> N^{-1/2} sum_k exp(-2 pi i g k / N) |k>`.
    pub fn inverse_qft(&mut self) {
        self.centred_transform(false);
    }

    /// Forward QFT over `G`, the adjoint of [`Statevector::inverse_qft`].
    pub fn qft(&mut self) {
        self.centred_transform(true);
    }

    fn centred_transform(&mut self, forward: bool) {
        let n = self.side();
        let mut planner = FftPlanner::<f64>::new();
        let fft: Arc<dyn Fft<f64>> = if forward {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let sign_pre: Vec<f64> = (0..n).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let global = if forward {
            Complex64::from_polar(1.0, PI * n as f64 / 2.0)
        } else {
            Complex64::from_polar(1.0, -PI * n as f64 / 2.0)
        };
        let post: Vec<Complex64> = sign_pre
            .iter()
            .map(|&s| global * s / (n as f64).sqrt())
            .collect();
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for r in 0..self.d {
            let stride = n.pow(r as u32);
            let block = stride * n;
            for base in (0..self.amplitudes.len()).step_by(block) {
                for off in 0..stride {
                    let start = base + off;
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = self.amplitudes[start + j * stride] * sign_pre[j];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (q, v) in line.iter().enumerate() {
                        self.amplitudes[start + q * stride] = v * post[q];
                    }
                }
            }
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Samples a flat index from `|amplitude|^2` by cumulative-sum search.
    pub fn measure<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut cum = Vec::with_capacity(self.amplitudes.len());
        let mut acc = 0.0;
        for a in &self.amplitudes {
            acc += a.norm_sqr();
            cum.push(acc);
        }
        let u: f64 = rng.random::<f64>() * acc;
        cum.partition_point(|&c| c <= u).min(cum.len() - 1)
    }
}

/// Table of rounded phases `F~(g)` over the grid, in flat-index order.
pub fn phase_table(f: impl Fn(&[f64]) -> f64, spec: &GridSpec) -> Result<Vec<f64>> {
    let n = spec.n();
    let len = 1usize << spec.qubits();
    let f0 = f(&spec.x0);
    let scale = n as f64 / (2.0 * spec.l_jordan * spec.l);
    let n0 = spec.n0() as f64;
    let probe = Statevector {
        amplitudes: Vec::new(),
        d: spec.d,
        bits: spec.bits_b,
    };
    let mut out = Vec::with_capacity(len);
    for idx in 0..len {
        let x = spec.point(&probe.labels(idx));
        let v = f(&x);
        if !v.is_finite() {
            return Err(Error::NonFinite("phase evaluation"));
        }
        out.push((scale * (v - f0) * n0).round() / n0);
    }
    Ok(out)
}

/// Final statevector of the algorithm before measurement.
pub fn jordan_state(f: impl Fn(&[f64]) -> f64, spec: &GridSpec) -> Result<Statevector> {
    if spec.qubits() > spec.qubit_budget {
        return Err(Error::QubitBudget {
            needed: spec.qubits(),
            budget: spec.qubit_budget,
        });
    }
    let phases = phase_table(f, spec)?;
    let mut sv = Statevector::uniform(spec.d, spec.bits_b);
    sv.check_norm()?;
    sv.apply_phase_table(&phases)?;
    sv.check_norm()?;
    sv.inverse_qft();
    sv.check_norm()?;
    Ok(sv)
}

/// One run of Jordan's algorithm: returns `2 L k / N` for the measured `k`.
pub fn jordan_gradient<R: Rng + ?Sized>(
    f: impl Fn(&[f64]) -> f64,
    spec: &GridSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sv = jordan_state(f, spec)?;
    let idx = sv.measure(rng);
    Ok(spec.label_to_gradient(&sv.labels(idx)))
}

/// Repetitions needed so the median has mean-squared error at most
/// `sigma_hat_sq` when each run is off by at most `M` with probability
/// below 1/3.
pub fn median_repetitions(m: f64, sigma_hat_sq: f64) -> usize {
    let arg = 8.0 * m * m / (3.0 * sigma_hat_sq);
    if !(arg > 1.0) {
        return 1;
    }
    (24.0 * arg.ln()).sqrt().ceil().max(1.0) as usize
}

/// Coordinate-wise lower median of `t` runs, or zero if its norm exceeds `m`.
pub fn robust_median_gradient(
    mut run: impl FnMut() -> Result<Vec<f64>>,
    t: usize,
    m: f64,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::param("t", "need at least one repetition"));
    }
    if !(m > 0.0) {
        return Err(Error::param("m", "norm bound must be positive"));
    }
    let runs: Vec<Vec<f64>> = (0..t).map(|_| run()).collect::<Result<_>>()?;
    let d = runs[0].len();
    if let Some(bad) = runs.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let med: Vec<f64> = (0..d)
        .map(|j| {
            let mut col: Vec<f64> = runs.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            col[(t - 1) / 2]
        })
        .collect();
    if crate::linalg::norm(&med) > m || !crate::linalg::all_finite(&med) {
        return Ok(vec![0.0; d]);
    }
    Ok(med)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn eps_for_bits(bits: u32, d: usize, beta: f64, l: f64) -> f64 {
        // 24 pi sqrt(d eps beta) / L = 2^-bits
        let r = l / (24.0 * PI * (1u64 << bits) as f64);
        r * r / (d as f64 * beta)
    }

    #[test]
    fn grid_exact_bracket_gives_six_bits() {
        let eps = eps_for_bits(6, 1, 1.0, 1.0);
        let g = build_grid(1, eps, 1.0, 1.0, &[0.0], 24).unwrap();
        assert_eq!(g.bits_b, 6);
        let n = g.n() as f64;
        let r = (eps * 1.0f64).sqrt();
        assert!(24.0 * PI * r <= 1.0 / n * (1.0 + 1e-9));
        assert!(1.0 / n <= 48.0 * PI * r * (1.0 + 1e-9));
        let n0 = g.n0() as f64;
        assert!(n * eps / (2.0 * g.l) <= 1.0 / n0 * (1.0 + 1e-9));
        assert!(1.0 / n0 <= n * eps / g.l * (1.0 + 1e-9));
    }

    #[test]
    fn quartering_eps_adds_one_bit() {
        let eps = eps_for_bits(6, 1, 1.0, 1.0) * 0.9;
        let a = build_grid(1, eps, 1.0, 1.0, &[0.0], 24).unwrap();
        let b = build_grid(1, eps / 4.0, 1.0, 1.0, &[0.0], 24).unwrap();
        assert_eq!(b.bits_b, a.bits_b + 1);
    }

    #[test]
    fn budget_and_bracket_errors() {
        let eps = eps_for_bits(4, 3, 1.0, 1.0);
        let e = build_grid(3, eps, 1.0, 1.0, &[0.0; 3], 8).unwrap_err();
        assert!(matches!(e, Error::QubitBudget { needed: 12, budget: 8 }));
        assert!(matches!(
            build_grid(1, 1.0, 1.0, 1.0, &[0.0], 24),
            Err(Error::NoValidGrid { .. })
        ));
        assert!(build_grid(1, 0.0, 1.0, 1.0, &[0.0], 24).is_err());
    }

    #[test]
    fn qft_round_trip() {
        let mut r = rng::stream(5, &[]);
        for (d, bits) in [(1usize, 5u32), (2, 3), (3, 2)] {
            let len = 1usize << (bits as usize * d);
            let raw: Vec<Complex64> = (0..len)
                .map(|_| Complex64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5))
                .collect();
            let nrm = raw.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            let amps: Vec<Complex64> = raw.iter().map(|a| a / nrm).collect();
            let mut sv = Statevector::from_amplitudes(amps.clone(), d, bits).unwrap();
            sv.qft();
            sv.check_norm().unwrap();
            sv.inverse_qft();
            for (a, b) in sv.amplitudes.iter().zip(&amps) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn inverse_qft_matches_direct_dft() {
        let (bits, n) = (3u32, 8usize);
        let mut r = rng::stream(6, &[]);
        let raw: Vec<Complex64> = (0..n).map(|_| Complex64::new(r.random(), r.random())).collect();
        let nrm = raw.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        let amps: Vec<Complex64> = raw.iter().map(|a| a / nrm).collect();
        let mut sv = Statevector::from_amplitudes(amps.clone(), 1, bits).unwrap();
        sv.inverse_qft();
        for k in 0..n {
            let kk = k as f64 - 4.0;
            let direct: Complex64 = (0..n)
                .map(|j| {
                    let g = j as f64 - 4.0;
                    amps[j] * Complex64::from_polar(1.0, -2.0 * PI * g * kk / n as f64)
                })
                .sum::<Complex64>()
                / (n as f64).sqrt();
            assert!((direct - sv.amplitudes[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn on_grid_linear_slopes_are_exact() {
        for (d, bits) in [(1usize, 3u32), (1, 6), (2, 3), (2, 5)] {
            let eps = eps_for_bits(bits, d, 1.0, 1.0);
            let spec = build_grid(d, eps, 1.0, 1.0, &vec![0.3; d], 24).unwrap();
            assert_eq!(spec.bits_b, bits);
            let n = spec.n() as i64;
            let mut r = rng::stream(9, &[bits as u64]);
            let step = if bits <= 3 { 1 } else { 7 };
            let ks: Vec<i64> = (-n / 2..n / 2).step_by(step).collect();
            for &k1 in &ks {
                let k = if d == 1 { vec![k1] } else { vec![k1, (3 * k1 + 1).rem_euclid(n) - n / 2] };
                let g = spec.label_to_gradient(&k);
                let f = |x: &[f64]| x.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                let sv = jordan_state(f, &spec).unwrap();
                let p = sv.probabilities();
                let top = p.iter().cloned().fold(0.0, f64::max);
                assert!((top - 1.0).abs() < 1e-9, "d={d} bits={bits} k={k:?} top={top}");
                let est = jordan_gradient(f, &spec, &mut r).unwrap();
                for (a, b) in est.iter().zip(&g) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_function_gives_zero() {
        let spec = build_grid(2, eps_for_bits(4, 2, 1.0, 1.0), 1.0, 1.0, &[1.0, 2.0], 24).unwrap();
        let mut r = rng::stream(2, &[]);
        for _ in 0..20 {
            assert_eq!(jordan_gradient(|_| 3.5, &spec, &mut r).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn quadratic_within_lemma_radius() {
        let beta = 2.0;
        let eps = eps_for_bits(6, 1, beta, 1.0);
        let spec = build_grid(1, eps, 1.0, beta, &[0.4], 24).unwrap();
        let mut r = rng::stream(4, &[]);
        let rad = spec.error_radius();
        let ok = (0..200)
            .filter(|_| {
                let g = jordan_gradient(|x: &[f64]| beta / 4.0 * (x[0] - 0.4).powi(2), &spec, &mut r).unwrap();
                g[0].abs() <= rad
            })
            .count();
        assert!(ok as f64 >= 200.0 * 2.0 / 3.0);
    }

    #[test]
    fn median_examples() {
        let mut it = [vec![0.9], vec![1.0], vec![100.0]].into_iter();
        assert_eq!(robust_median_gradient(|| Ok(it.next().unwrap()), 3, 10.0).unwrap(), vec![1.0]);
        assert_eq!(robust_median_gradient(|| Ok(vec![20.0]), 1, 10.0).unwrap(), vec![0.0]);
        assert_eq!(robust_median_gradient(|| Ok(vec![2.0, -1.0]), 4, 10.0).unwrap(), vec![2.0, -1.0]);
        let mut it = [vec![1.0], vec![2.0], vec![3.0], vec![4.0]].into_iter();
        assert_eq!(robust_median_gradient(|| Ok(it.next().unwrap()), 4, 10.0).unwrap(), vec![2.0]);
        assert!(robust_median_gradient(|| Ok(vec![1.0]), 0, 1.0).is_err());
    }

    #[test]
    fn repetitions_formula() {
        assert_eq!(median_repetitions(1.0, 10.0), 1);
        // 8/(3*0.01) = 266.67; sqrt(24 ln 266.67) = 11.57
        assert_eq!(median_repetitions(1.0, 0.01), 12);
    }
}
