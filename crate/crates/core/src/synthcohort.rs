//! Synthetic wearable cohorts with gold-standard VO2max labels, silver-label
//! corruption and parameterized label shifts.
//!
//! Raw sets carry three minute-resolution channels (`accel` in J/min/kg,
//! `hr` in bpm, `hrv` in ms) and six metadata columns
//! (`age`, `sex`, `height`, `weight`, `rhr`, `month`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::scalar::Scalar;

/// Channel names of an unprocessed set, in storage order.
pub const RAW_CHANNELS: [&str; 3] = ["accel", "hr", "hrv"];
/// Metadata columns of an unprocessed set, in storage order.
pub const RAW_META: [&str; 6] = ["age", "sex", "height", "weight", "rhr", "month"];

/// Energy expenditure of one MET in J/min/kg.
pub const JOULES_PER_MET: f64 = 71.0;

/// Gold labels are clipped to this physiological range (ml O2/min/kg).
pub const LABEL_CLIP: (f64, f64) = (15.0, 70.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelGrade {
    Gold,
    Silver,
}

/// Mean and standard deviation of one characteristic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }
}

/// Per-sex population characteristics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SexParams {
    pub age: Moments,
    pub height: Moments,
    pub weight: Moments,
    pub rhr: Moments,
    pub mvpa: Moments,
    pub vpa: Moments,
    pub vo2max: Moments,
}

impl SexParams {
    pub(crate) fn fields(&self) -> [(&'static str, Moments); 7] {
        [
            ("age", self.age),
            ("height", self.height),
            ("weight", self.weight),
            ("rhr", self.rhr),
            ("mvpa", self.mvpa),
            ("vpa", self.vpa),
            ("vo2max", self.vo2max),
        ]
    }

    pub(crate) fn field_mut(&mut self, name: &str) -> Option<&mut Moments> {
        Some(match name {
            "age" => &mut self.age,
            "height" => &mut self.height,
            "weight" => &mut self.weight,
            "rhr" => &mut self.rhr,
            "mvpa" => &mut self.mvpa,
            "vpa" => &mut self.vpa,
            "vo2max" => &mut self.vo2max,
            _ => return None,
        })
    }

    /// Intercept of the gold-label function that centers the cohort's label
    /// mean on `vo2max.mean`.
    fn label_base(&self) -> f64 {
        self.vo2max.mean + 0.25 * (self.age.mean - 47.0) + 0.15 * (self.rhr.mean - 62.0)
    }
}

/// White-noise scale added to each raw channel (MET units for accel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelNoise {
    pub accel: f64,
    pub hr: f64,
    pub hrv: f64,
}

/// Generator parameters for one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub domain: Domain,
    pub male_frac: f64,
    pub male: SexParams,
    pub female: SexParams,
    /// Minutes of wear per participant.
    pub series_length_raw: usize,
    pub ts_noise_std: ChannelNoise,
}

impl CohortSpec {
    /// Large silver-standard population cohort (source domain).
    pub fn fenland() -> Self {
        Self {
            domain: Domain::Source,
            male_frac: 5229.0 / 11059.0,
            male: SexParams {
                age: Moments::new(47.70, 7.57),
                height: Moments::new(1.78, 0.07),
                weight: Moments::new(85.85, 13.83),
                rhr: Moments::new(61.48, 8.68),
                mvpa: Moments::new(35.87, 22.35),
                vpa: Moments::new(3.27, 8.57),
                vo2max: Moments::new(41.95, 4.61),
            },
            female: SexParams {
                age: Moments::new(47.66, 7.36),
                height: Moments::new(1.64, 0.06),
                weight: Moments::new(70.54, 13.92),
                rhr: Moments::new(64.46, 8.28),
                mvpa: Moments::new(34.40, 22.59),
                vpa: Moments::new(3.31, 15.67),
                vo2max: Moments::new(37.44, 4.73),
            },
            series_length_raw: 9000,
            ts_noise_std: ChannelNoise { accel: 0.05, hr: 2.0, hrv: 4.0 },
        }
    }

    /// Small gold-standard validation cohort (target domain), recorded on a
    /// different device than the source cohort.
    pub fn bbvs() -> Self {
        Self {
            domain: Domain::Target,
            male_frac: 98.0 / 181.0,
            male: SexParams {
                age: Moments::new(53.59, 7.31),
                height: Moments::new(1.79, 0.07),
                weight: Moments::new(84.63, 10.15),
                rhr: Moments::new(59.60, 8.06),
                mvpa: Moments::new(40.97, 25.23),
                vpa: Moments::new(5.94, 12.61),
                vo2max: Moments::new(35.69, 6.99),
            },
            female: SexParams {
                age: Moments::new(54.39, 6.63),
                height: Moments::new(1.64, 0.06),
                weight: Moments::new(69.31, 10.95),
                rhr: Moments::new(61.91, 6.93),
                mvpa: Moments::new(41.73, 22.26),
                vpa: Moments::new(4.21, 8.76),
                vo2max: Moments::new(29.60, 5.80),
            },
            series_length_raw: 9000,
            ts_noise_std: ChannelNoise { accel: 0.4, hr: 4.0, hrv: 10.0 },
        }
    }

    /// Checks the invariants, including divisibility by `downsample_ratio`.
    pub fn validate(&self, downsample_ratio: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.male_frac) {
            return Err(invalid_arg!("male_frac {} outside [0, 1]", self.male_frac));
        }
        for (sex, block) in [("male", &self.male), ("female", &self.female)] {
            for (name, m) in block.fields() {
                if !m.mean.is_finite() || !m.std.is_finite() {
                    return Err(invalid_arg!("{sex}.{name} has non-finite moments"));
                }
                if m.std < 0.0 {
                    return Err(invalid_arg!("{sex}.{name}.std is negative"));
                }
            }
        }
        let noise = self.ts_noise_std;
        if [noise.accel, noise.hr, noise.hrv].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid_arg!("ts_noise_std must be finite and non-negative"));
        }
        if self.series_length_raw == 0 {
            return Err(invalid_arg!("series_length_raw must be positive"));
        }
        if downsample_ratio == 0 || self.series_length_raw % downsample_ratio != 0 {
            return Err(invalid_arg!(
                "series_length_raw {} not divisible by downsample ratio {}",
                self.series_length_raw,
                downsample_ratio
            ));
        }
        Ok(())
    }
}

/// A cohort: time series `x` (n×t×f_ts), metadata `m` (n×f_meta) and labels `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T> {
    pub x: Vec<T>,
    pub m: Vec<T>,
    pub y: Vec<T>,
    pub domain: Vec<Domain>,
    pub grade: LabelGrade,
    pub processed: bool,
    pub t: usize,
    pub ts_channels: Vec<String>,
    pub meta_fields: Vec<String>,
}

impl<T: Scalar> SampleSet<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn f_ts(&self) -> usize {
        self.ts_channels.len()
    }

    pub fn f_meta(&self) -> usize {
        self.meta_fields.len()
    }

    /// Time series of sample `i`, `t×f_ts` row-major.
    pub fn series(&self, i: usize) -> &[T] {
        let w = self.t * self.f_ts();
        &self.x[i * w..(i + 1) * w]
    }

    pub fn meta(&self, i: usize) -> &[T] {
        let w = self.f_meta();
        &self.m[i * w..(i + 1) * w]
    }

    pub fn meta_column(&self, name: &str) -> Option<Vec<T>> {
        let c = self.meta_fields.iter().position(|f| f == name)?;
        Some((0..self.len()).map(|i| self.meta(i)[c]).collect())
    }

    /// Checks shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.x.len() != n * self.t * self.f_ts() || self.m.len() != n * self.f_meta() {
            return Err(invalid_arg!("sample set tensors disagree on the sample count"));
        }
        if self.domain.len() != n {
            return Err(invalid_arg!("domain tags do not cover every sample"));
        }
        if self.x.iter().chain(&self.m).chain(&self.y).any(|v| !v.is_finite()) {
            return Err(invalid_arg!("sample set contains non-finite values"));
        }
        Ok(())
    }

    /// Subset in the order given by `idx`.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut x = Vec::with_capacity(idx.len() * self.t * self.f_ts());
        let mut m = Vec::with_capacity(idx.len() * self.f_meta());
        for &i in idx {
            x.extend_from_slice(self.series(i));
            m.extend_from_slice(self.meta(i));
        }
        Self {
            x,
            m,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            domain: idx.iter().map(|&i| self.domain[i]).collect(),
            grade: self.grade,
            processed: self.processed,
            t: self.t,
            ts_channels: self.ts_channels.clone(),
            meta_fields: self.meta_fields.clone(),
        }
    }

    /// Concatenates two sets with identical layouts. A mixed-grade result is
    /// reported as silver.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.t != other.t
            || self.ts_channels != other.ts_channels
            || self.meta_fields != other.meta_fields
            || self.processed != other.processed
        {
            return Err(invalid_arg!("cannot concatenate sample sets with different layouts"));
        }
        let grade = if self.grade == other.grade { self.grade } else { LabelGrade::Silver };
        let mut out = self.clone();
        out.grade = grade;
        out.x.extend_from_slice(&other.x);
        out.m.extend_from_slice(&other.m);
        out.y.extend_from_slice(&other.y);
        out.domain.extend_from_slice(&other.domain);
        Ok(out)
    }

    /// Input-only view; labels are not carried over.
    pub fn strip_labels(&self) -> Unlabeled<T> {
        Unlabeled {
            x: self.x.clone(),
            m: self.m.clone(),
            domain: self.domain.clone(),
            t: self.t,
            f_ts: self.f_ts(),
            f_meta: self.f_meta(),
        }
    }

    /// Lossless for `f32 → f64`, rounding for `f64 → f32`.
    pub fn cast<U: Scalar>(&self) -> SampleSet<U> {
        let c = |v: &Vec<T>| v.iter().map(|&a| U::of(a.f64())).collect();
        SampleSet {
            x: c(&self.x),
            m: c(&self.m),
            y: c(&self.y),
            domain: self.domain.clone(),
            grade: self.grade,
            processed: self.processed,
            t: self.t,
            ts_channels: self.ts_channels.clone(),
            meta_fields: self.meta_fields.clone(),
        }
    }
}

/// Inputs of a partition whose labels must stay out of reach of training code.
#[derive(Debug, Clone, PartialEq)]
pub struct Unlabeled<T> {
    pub x: Vec<T>,
    pub m: Vec<T>,
    pub domain: Vec<Domain>,
    pub t: usize,
    pub f_ts: usize,
    pub f_meta: usize,
}

impl<T: Copy> Unlabeled<T> {
    pub fn len(&self) -> usize {
        self.domain.len()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let (wx, wm) = (self.t * self.f_ts, self.f_meta);
        let mut x = Vec::with_capacity(idx.len() * wx);
        let mut m = Vec::with_capacity(idx.len() * wm);
        for &i in idx {
            x.extend_from_slice(&self.x[i * wx..(i + 1) * wx]);
            m.extend_from_slice(&self.m[i * wm..(i + 1) * wm]);
        }
        Self {
            x,
            m,
            domain: idx.iter().map(|&i| self.domain[i]).collect(),
            t: self.t,
            f_ts: self.f_ts,
            f_meta: self.f_meta,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.domain.is_empty()
    }
}

/// Affine-plus-noise map from gold to silver labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelCorruption {
    pub slope: f64,
    pub intercept: f64,
    pub noise_std: f64,
}

/// Gold-label moments of the default source cohort, measured on 10⁵ draws
/// (seed 0), used to center the default corruption.
pub const REFERENCE_GOLD_MEAN: f64 = 39.56;
pub const REFERENCE_GOLD_STD: f64 = 3.78;

impl LabelCorruption {
    /// Solves intercept and noise for a target mean bias and Pearson r,
    /// given the gold-label moments.
    pub fn calibrated(slope: f64, gold_mean: f64, gold_std: f64, bias: f64, r: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 1.0) || slope <= 0.0 || gold_std < 0.0 {
            return Err(invalid_arg!("calibration needs 0 < r <= 1, slope > 0, std >= 0"));
        }
        Ok(Self {
            slope,
            intercept: bias - (slope - 1.0) * gold_mean,
            noise_std: slope * gold_std * (1.0 / (r * r) - 1.0).sqrt(),
        })
    }

    /// Pearson correlation between gold and silver implied by the model.
    pub fn analytic_r(&self, gold_std: f64) -> f64 {
        let s = self.slope * gold_std;
        s / (s * s + self.noise_std * self.noise_std).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.slope, self.intercept, self.noise_std].iter().all(|v| v.is_finite()) {
            return Err(invalid_arg!("label corruption has non-finite parameters"));
        }
        if self.noise_std < 0.0 {
            return Err(invalid_arg!("label corruption noise_std is negative"));
        }
        Ok(())
    }
}

impl Default for LabelCorruption {
    /// Slope 0.85, mean bias −2.3 and r ≈ 0.68 on the reference cohort.
    fn default() -> Self {
        Self::calibrated(0.85, REFERENCE_GOLD_MEAN, REFERENCE_GOLD_STD, -2.3, 0.68)
            .expect("default calibration is valid")
    }
}

/// Fixed offset plus Gaussian noise applied to labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub offset: f64,
    pub noise_std: f64,
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("finite std").sample(rng)
}

/// Moment-matched log-normal draw for non-negative skewed quantities.
fn lognormal(rng: &mut ChaCha8Rng, m: Moments) -> f64 {
    if m.mean <= 0.0 {
        return 0.0;
    }
    if m.std == 0.0 {
        return m.mean;
    }
    let s2 = (1.0 + (m.std * m.std) / (m.mean * m.mean)).ln();
    let mu = m.mean.ln() - s2 / 2.0;
    LogNormal::new(mu, s2.sqrt()).expect("finite parameters").sample(rng)
}

/// Ground-truth VO2max for one participant.
///
/// `base − 0.25·(age − 47) − 0.15·(RHR − 62) + 0.4·MVPA_z + 0.5·VPA_z + N(0, 2²)`,
/// clipped to [`LABEL_CLIP`]; `base` centers the cohort mean on the block's
/// `vo2max.mean` and the z-scores are taken against the block's moments.
pub fn gold_label(block: &SexParams, age: f64, rhr: f64, mvpa: f64, vpa: f64, noise: f64) -> f64 {
    let z = |v: f64, m: Moments| if m.std > 0.0 { (v - m.mean) / m.std } else { 0.0 };
    let y = block.label_base() - 0.25 * (age - 47.0) - 0.15 * (rhr - 62.0)
        + 0.08 * z(mvpa, block.mvpa) * 5.0
        + 0.5 * z(vpa, block.vpa)
        + noise;
    y.clamp(LABEL_CLIP.0, LABEL_CLIP.1)
}

struct Participant {
    sex_male: bool,
    age: f64,
    height: f64,
    weight: f64,
    rhr: f64,
    mvpa: f64,
    vpa: f64,
    month: u32,
}

fn draw_participant(spec: &CohortSpec, rng: &mut ChaCha8Rng) -> Participant {
    let sex_male = rng.random::<f64>() < spec.male_frac;
    let b = if sex_male { &spec.male } else { &spec.female };
    let age = normal(rng, b.age.mean, b.age.std).clamp(18.0, 90.0);
    let height = normal(rng, b.height.mean, b.height.std).clamp(1.3, 2.2);
    let weight = normal(rng, b.weight.mean, b.weight.std).clamp(35.0, 220.0);
    let rhr = normal(rng, b.rhr.mean, b.rhr.std).clamp(35.0, 110.0);
    let mvpa = lognormal(rng, b.mvpa).min(600.0);
    let vpa = lognormal(rng, b.vpa).min(mvpa);
    let month = rng.random_range(1..=12);
    Participant { sex_male, age, height, weight, rhr, mvpa, vpa, month }
}

/// Minute-level accel (J/min/kg), HR and HRV for one participant.
///
/// Activity is a smooth sub-threshold baseline (circadian sinusoid plus a few
/// random harmonics) with `mvpa` min/day of moderate minutes, `vpa` of which
/// are vigorous, scattered over the record. HR rises with activity around the
/// participant's RHR and HRV falls with HR.
fn draw_series(p: &Participant, spec: &CohortSpec, rng: &mut ChaCha8Rng) -> [Vec<f64>; 3] {
    let len = spec.series_length_raw;
    let days = len as f64 / 1440.0;
    let tau = std::f64::consts::TAU;

    let level = rng.random_range(0.25..0.55);
    let circ_amp = rng.random_range(0.10..0.25);
    let circ_phase = rng.random_range(0.0..tau);
    let harmonics: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.08),
                rng.random_range(60.0..480.0),
                rng.random_range(0.0..tau),
            )
        })
        .collect();
    let mut mets: Vec<f64> = (0..len)
        .map(|t| {
            let t = t as f64;
            let mut v = level + circ_amp * (tau * t / 1440.0 + circ_phase).sin();
            for &(a, period, ph) in &harmonics {
                v += a * (tau * t / period + ph).sin();
            }
            v.clamp(0.05, 0.95)
        })
        .collect();

    let n_mvpa = ((p.mvpa * days).round() as usize).min(len);
    let n_vpa = ((p.vpa * days).round() as usize).min(n_mvpa);
    let active = rand::seq::index::sample(rng, len, n_mvpa);
    for (k, t) in active.into_iter().enumerate() {
        mets[t] = if k < n_vpa {
            rng.random_range(4.3..8.0)
        } else {
            rng.random_range(1.05..4.0)
        };
    }

    let noise = spec.ts_noise_std;
    let hr_gain = rng.random_range(10.0..16.0);
    let mut accel = Vec::with_capacity(len);
    let mut hr = Vec::with_capacity(len);
    let mut hrv = Vec::with_capacity(len);
    for (t, &m) in mets.iter().enumerate() {
        let circ = (tau * t as f64 / 1440.0 + circ_phase).sin();
        let a = (m + normal(rng, 0.0, noise.accel)).max(0.0);
        accel.push(a * JOULES_PER_MET);
        let h = p.rhr + hr_gain * (m - level).max(0.0) + 3.0 * circ + normal(rng, 0.0, noise.hr);
        hr.push(h.max(30.0));
        let v = 55.0 - 0.5 * (h - p.rhr) - 0.4 * (p.age - 47.0) + normal(rng, 0.0, noise.hrv);
        hrv.push(v.max(5.0));
    }
    [accel, hr, hrv]
}

/// Generates `n` participants with gold labels. Deterministic in `(spec, n, seed)`.
pub fn generate_cohort<T: Scalar>(spec: &CohortSpec, n: usize, seed: u64) -> Result<SampleSet<T>> {
    if n == 0 {
        return Err(invalid_arg!("cohort size must be at least 1"));
    }
    spec.validate(1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = spec.series_length_raw;
    let f = RAW_CHANNELS.len();
    let mut x = vec![T::zero(); n * len * f];
    let mut m = Vec::with_capacity(n * RAW_META.len());
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let p = draw_participant(spec, &mut rng);
        let channels = draw_series(&p, spec, &mut rng);
        let row = &mut x[i * len * f..(i + 1) * len * f];
        for (c, series) in channels.iter().enumerate() {
            for (t, &v) in series.iter().enumerate() {
                row[t * f + c] = T::of(v);
            }
        }
        let block = if p.sex_male { &spec.male } else { &spec.female };
        let eps = normal(&mut rng, 0.0, 2.0);
        y.push(T::of(gold_label(block, p.age, p.rhr, p.mvpa, p.vpa, eps)));
        let sex = if p.sex_male { 1.0 } else { 0.0 };
        for v in [p.age, sex, p.height, p.weight, p.rhr, p.month as f64] {
            m.push(T::of(v));
        }
    }
    Ok(SampleSet {
        x,
        m,
        y,
        domain: vec![spec.domain; n],
        grade: LabelGrade::Gold,
        processed: false,
        t: len,
        ts_channels: RAW_CHANNELS.iter().map(|s| s.to_string()).collect(),
        meta_fields: RAW_META.iter().map(|s| s.to_string()).collect(),
    })
}

/// `y_silver = slope·y_gold + intercept + N(0, noise_std²)`; inputs untouched.
pub fn corrupt_to_silver<T: Scalar>(
    gold: &SampleSet<T>,
    c: &LabelCorruption,
    seed: u64,
) -> Result<SampleSet<T>> {
    if gold.grade != LabelGrade::Gold {
        return Err(Error::InvalidState("labels are already silver-standard".into()));
    }
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = gold.clone();
    for y in out.y.iter_mut() {
        let eps = normal(&mut rng, 0.0, c.noise_std);
        *y = T::of(c.slope * y.f64() + c.intercept + eps);
    }
    out.grade = LabelGrade::Silver;
    Ok(out)
}

/// `y' = y + offset + N(0, noise_std²)`; inputs untouched.
pub fn apply_label_shift<T: Scalar>(set: &SampleSet<T>, s: &ShiftSpec, seed: u64) -> Result<SampleSet<T>> {
    if !s.offset.is_finite() || !s.noise_std.is_finite() || s.noise_std < 0.0 {
        return Err(invalid_arg!("shift needs a finite offset and non-negative noise_std"));
    }
    set.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = set.clone();
    for y in out.y.iter_mut() {
        let eta = normal(&mut rng, 0.0, s.noise_std);
        *y = T::of(y.f64() + s.offset + eta);
    }
    Ok(out)
}

/// Mean bias and Pearson r of a corruption measured on a gold set.
pub fn corruption_envelope<T: Scalar>(gold: &SampleSet<T>, c: &LabelCorruption, seed: u64) -> Result<(f64, f64)> {
    let silver = corrupt_to_silver(gold, c, seed)?;
    let g: Vec<f64> = gold.y.iter().map(|v| v.f64()).collect();
    let s: Vec<f64> = silver.y.iter().map(|v| v.f64()).collect();
    let bias = s.iter().zip(&g).map(|(a, b)| a - b).sum::<f64>() / g.len() as f64;
    let r = crate::objectives::pearson(&g, &s)?;
    Ok((bias, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(mut spec: CohortSpec) -> CohortSpec {
        spec.series_length_raw = 300;
        spec
    }

    #[test]
    fn zero_participants_is_rejected() {
        let err = generate_cohort::<f64>(&CohortSpec::fenland(), 0, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn non_finite_spec_is_rejected() {
        let mut spec = short(CohortSpec::fenland());
        spec.male.rhr.mean = f64::NAN;
        assert!(matches!(generate_cohort::<f64>(&spec, 3, 0), Err(Error::InvalidArgument(_))));
        let mut spec = short(CohortSpec::fenland());
        spec.male_frac = 1.5;
        assert!(spec.validate(15).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = short(CohortSpec::fenland());
        let a = generate_cohort::<f64>(&spec, 50, 3).unwrap();
        let b = generate_cohort::<f64>(&spec, 50, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort::<f64>(&spec, 50, 4).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn gold_labels_are_clipped_and_finite() {
        let set = generate_cohort::<f64>(&short(CohortSpec::bbvs()), 300, 9).unwrap();
        set.validate().unwrap();
        assert!(set.y.iter().all(|&y| (15.0..=70.0).contains(&y)));
        assert_eq!(set.x.len(), 300 * 300 * 3);
        assert!(!set.processed);
        assert_eq!(set.grade, LabelGrade::Gold);
    }

    #[test]
    fn fenland_male_mean_matches_table() {
        let mut spec = short(CohortSpec::fenland());
        spec.male_frac = 1.0;
        let set = generate_cohort::<f64>(&spec, 2000, 7).unwrap();
        let mean = set.y.iter().sum::<f64>() / 2000.0;
        let tol = 3.0 * 4.61 / 2000f64.sqrt();
        assert!((mean - 41.95).abs() <= tol, "mean {mean}");
    }

    #[test]
    fn metadata_marginals_follow_spec() {
        let mut spec = short(CohortSpec::fenland());
        spec.male_frac = 1.0;
        let set = generate_cohort::<f64>(&spec, 2000, 11).unwrap();
        let ages = set.meta_column("age").unwrap();
        let mean = ages.iter().sum::<f64>() / ages.len() as f64;
        assert!((mean - 47.70).abs() < 4.0 * 7.57 / 2000f64.sqrt());
        let rhr = set.meta_column("rhr").unwrap();
        let mean = rhr.iter().sum::<f64>() / rhr.len() as f64;
        assert!((mean - 61.48).abs() < 4.0 * 8.68 / 2000f64.sqrt());
    }

    #[test]
    fn identity_corruption_and_constant_offset() {
        let gold = generate_cohort::<f64>(&short(CohortSpec::fenland()), 40, 1).unwrap();
        let id = LabelCorruption { slope: 1.0, intercept: 0.0, noise_std: 0.0 };
        let s = corrupt_to_silver(&gold, &id, 5).unwrap();
        assert_eq!(s.y, gold.y);
        assert_eq!(s.grade, LabelGrade::Silver);
        assert_eq!((s.x == gold.x, s.m == gold.m), (true, true));

        let off = LabelCorruption { slope: 1.0, intercept: -2.5, noise_std: 0.0 };
        let s = corrupt_to_silver(&gold, &off, 5).unwrap();
        for (a, b) in s.y.iter().zip(&gold.y) {
            assert!((a - b + 2.5).abs() < 1e-12);
        }
        assert!(matches!(corrupt_to_silver(&s, &off, 5), Err(Error::InvalidState(_))));
    }

    #[test]
    fn default_corruption_hits_published_envelope() {
        let gold = generate_cohort::<f64>(&short(CohortSpec::fenland()), 2000, 21).unwrap();
        let (bias, r) = corruption_envelope(&gold, &LabelCorruption::default(), 1).unwrap();
        assert!((-3.0..=-1.6).contains(&bias), "bias {bias}");
        assert!((0.57..=0.79).contains(&r), "r {r}");
    }

    #[test]
    fn shift_identity_and_linearity() {
        let set = generate_cohort::<f64>(&short(CohortSpec::bbvs()), 30, 2).unwrap();
        let same = apply_label_shift(&set, &ShiftSpec { offset: 0.0, noise_std: 0.0 }, 1).unwrap();
        assert_eq!(same, set);
        let left = apply_label_shift(&set, &ShiftSpec { offset: -5.0, noise_std: 0.0 }, 1).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&left.y) - (mean(&set.y) - 5.0)).abs() < 1e-12);
        assert!(apply_label_shift(&set, &ShiftSpec { offset: 0.0, noise_std: -1.0 }, 1).is_err());
    }
}
