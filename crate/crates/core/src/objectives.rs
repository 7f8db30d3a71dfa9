//! Training losses, regression metrics and histogram distances.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// Probabilities are clamped to `[CE_CLAMP, 1 − CE_CLAMP]` before the log.
pub const CE_CLAMP: f64 = 1e-7;
/// Smoothing mass added to every bin of the reference histogram in KL.
pub const KL_SMOOTHING: f64 = 1e-9;
pub const DEFAULT_BINS: usize = 20;

fn check_pair<T>(a: &[T], b: &[T], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid_arg!("{what}: length mismatch ({} vs {})", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(invalid_arg!("{what}: empty input"));
    }
    Ok(())
}

pub fn mse<T: Scalar>(y: &[T], yhat: &[T]) -> Result<T> {
    check_pair(y, yhat, "mse")?;
    let s: T = y.iter().zip(yhat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::of_usize(y.len()))
}

pub fn mae<T: Scalar>(y: &[T], yhat: &[T]) -> Result<T> {
    check_pair(y, yhat, "mae")?;
    let s: T = y.iter().zip(yhat).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(s / T::of_usize(y.len()))
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn cross_entropy<T: Scalar>(y_c: &[T], p: &[T]) -> Result<T> {
    check_pair(y_c, p, "cross_entropy")?;
    let lo = T::of(CE_CLAMP);
    let hi = T::one() - lo;
    let s: T = y_c
        .iter()
        .zip(p)
        .map(|(&y, &p)| {
            let p = p.max(lo).min(hi);
            y * p.ln() + (T::one() - y) * (T::one() - p).ln()
        })
        .sum();
    Ok(-s / T::of_usize(y_c.len()))
}

/// Cross-entropy of sigmoid outputs and its gradient with respect to the logits.
///
/// The gradient is zero where the clamp is active, matching the clamped loss.
pub fn cross_entropy_logits<T: Scalar>(y_c: &[T], logits: &[T]) -> Result<(T, Vec<T>)> {
    check_pair(y_c, logits, "cross_entropy")?;
    let p: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();
    let loss = cross_entropy(y_c, &p)?;
    let lo = T::of(CE_CLAMP);
    let n = T::of_usize(y_c.len());
    let grad = p
        .iter()
        .zip(y_c)
        .map(|(&p, &y)| if p < lo || p > T::one() - lo { T::zero() } else { (p - y) / n })
        .collect();
    Ok((loss, grad))
}

/// `½(ln var + (target − mu)²/var)`, without the `½ ln 2π` constant.
pub fn gaussian_nll<T: Scalar>(target: T, mu: T, var: T, variance_floor: T) -> Result<T> {
    if !(var >= variance_floor) {
        return Err(invalid_arg!("variance {var} below floor {variance_floor}"));
    }
    let r = target - mu;
    Ok(T::of(0.5) * (var.ln() + r * r / var))
}

/// Batch-mean Gaussian NLL for a head emitting `(mu, log_var)` with
/// `var = exp(log_var) + floor`, plus gradients with respect to `mu` and `log_var`.
pub fn gaussian_nll_head<T: Scalar>(
    target: &[T],
    mu: &[T],
    log_var: &[T],
    floor: T,
) -> Result<(T, Vec<T>, Vec<T>)> {
    check_pair(target, mu, "gaussian_nll")?;
    check_pair(target, log_var, "gaussian_nll")?;
    let n = T::of_usize(target.len());
    let half = T::of(0.5);
    let mut loss = T::zero();
    let mut d_mu = Vec::with_capacity(target.len());
    let mut d_lv = Vec::with_capacity(target.len());
    for ((&t, &m), &lv) in target.iter().zip(mu).zip(log_var) {
        let e = lv.exp();
        let var = e + floor;
        let r = t - m;
        loss += gaussian_nll(t, m, var, floor)?;
        d_mu.push(-r / var / n);
        d_lv.push(half * (T::one() / var - r * r / (var * var)) * e / n);
    }
    Ok((loss / n, d_mu, d_lv))
}

/// `alpha`, `lambda1`, `lambda2` of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.01, lambda1: 0.9, lambda2: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(invalid_arg!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid_arg!("lambda weights must be non-negative"));
        }
        if (self.lambda1 + self.lambda2 - 1.0).abs() > 1e-12 {
            return Err(invalid_arg!(
                "lambda1 + lambda2 must equal 1, got {}",
                self.lambda1 + self.lambda2
            ));
        }
        Ok(())
    }
}

/// `alpha·l_mse − lambda1·l_cse − lambda2·l_gll`.
pub fn total_adapt_loss<T: Scalar>(w: &LossWeights, l_mse: T, l_cse: T, l_gll: T) -> Result<T> {
    w.validate()?;
    Ok(T::of(w.alpha) * l_mse - T::of(w.lambda1) * l_cse - T::of(w.lambda2) * l_gll)
}

pub fn r_squared<T: Scalar>(y: &[T], yhat: &[T]) -> Result<T> {
    check_pair(y, yhat, "r_squared")?;
    if y.len() < 2 {
        return Err(invalid_arg!("r_squared needs at least two samples"));
    }
    let n = T::of_usize(y.len());
    let mean = y.iter().copied().sum::<T>() / n;
    let ss_tot: T = y.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if ss_tot == T::zero() {
        return Err(Error::DegenerateInput("r_squared: labels have zero variance".into()));
    }
    let ss_res: T = y.iter().zip(yhat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(T::one() - ss_res / ss_tot)
}

pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_pair(a, b, "pearson")?;
    if a.len() < 2 {
        return Err(invalid_arg!("pearson needs at least two samples"));
    }
    let n = T::of_usize(a.len());
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == T::zero() || sbb == T::zero() {
        return Err(Error::DegenerateInput("pearson: zero variance".into()));
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// Equal-width histogram normalized to unit mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub mass: Vec<f64>,
}

/// `[lo, hi]` covering every value of both samples (widened when degenerate).
pub fn union_range(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let mut it = a.iter().chain(b).copied();
    let first = it.next().ok_or_else(|| invalid_arg!("union_range: no values"))?;
    let (lo, hi) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(invalid_arg!("union_range: non-finite values"));
    }
    Ok(if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
}

/// Values outside `[lo, hi]` are clipped into the edge bins.
pub fn build_histogram(values: &[f64], k_bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if values.is_empty() {
        return Err(invalid_arg!("build_histogram: empty values"));
    }
    if k_bins == 0 {
        return Err(invalid_arg!("build_histogram: need at least one bin"));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(invalid_arg!("build_histogram: invalid range [{lo}, {hi}]"));
    }
    let width = (hi - lo) / k_bins as f64;
    let bin_edges = (0..=k_bins).map(|i| if i == k_bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0usize; k_bins];
    for &v in values {
        if v.is_nan() {
            return Err(invalid_arg!("build_histogram: NaN value"));
        }
        let idx = ((v - lo) / width).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(k_bins - 1) };
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    Ok(Histogram { bin_edges, mass: counts.into_iter().map(|c| c as f64 / n).collect() })
}

fn check_edges(a: &Histogram, b: &Histogram) -> Result<()> {
    if a.bin_edges != b.bin_edges {
        return Err(invalid_arg!("histograms have different bin edges"));
    }
    Ok(())
}

/// `sqrt(½ Σ (√a − √b)²)`, in `[0, 1]`.
pub fn hellinger(a: &Histogram, b: &Histogram) -> Result<f64> {
    check_edges(a, b)?;
    let s: f64 = a.mass.iter().zip(&b.mass).map(|(p, q)| (p.sqrt() - q.sqrt()).powi(2)).sum();
    Ok((0.5 * s).sqrt().min(1.0))
}

/// `Σ a·ln(a/b)` with both histograms smoothed by [`KL_SMOOTHING`] and
/// renormalized, so identical inputs give exactly zero.
pub fn kl_divergence(a: &Histogram, b: &Histogram) -> Result<f64> {
    check_edges(a, b)?;
    let za: f64 = a.mass.iter().map(|p| p + KL_SMOOTHING).sum();
    let zb: f64 = b.mass.iter().map(|q| q + KL_SMOOTHING).sum();
    let kl: f64 = a
        .mass
        .iter()
        .zip(&b.mass)
        .map(|(p, q)| {
            let (ps, qs) = ((p + KL_SMOOTHING) / za, (q + KL_SMOOTHING) / zb);
            ps * (ps / qs).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

/// KL between two samples binned over their union range.
pub fn sample_kl(a: &[f64], b: &[f64], k_bins: usize) -> Result<f64> {
    let range = union_range(a, b)?;
    kl_divergence(&build_histogram(a, k_bins, range)?, &build_histogram(b, k_bins, range)?)
}

/// Regression metrics plus label-vs-prediction distribution distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    /// `None` when the predictions (or labels) have zero variance.
    pub corr: Option<f64>,
    pub hellinger: f64,
    pub kl: f64,
}

/// Computes every metric on `(y, yhat)`; only Pearson may come back degenerate.
pub fn metric_record(y: &[f64], yhat: &[f64], k_bins: usize) -> Result<MetricRecord> {
    let corr = match pearson(y, yhat) {
        Ok(r) => Some(r),
        Err(Error::DegenerateInput(_)) => None,
        Err(e) => return Err(e),
    };
    let range = union_range(y, yhat)?;
    let hy = build_histogram(y, k_bins, range)?;
    let hp = build_histogram(yhat, k_bins, range)?;
    Ok(MetricRecord {
        mse: mse(y, yhat)?,
        mae: mae(y, yhat)?,
        r2: r_squared(y, yhat)?,
        corr,
        hellinger: hellinger(&hy, &hp)?,
        kl: kl_divergence(&hy, &hp)?,
    })
}
