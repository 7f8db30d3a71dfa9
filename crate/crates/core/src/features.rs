//! Wearable feature pipeline: downsampling, ENMO and MET derivation,
//! intensity counts, cyclical month encoding and min-max scaling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::scalar::Scalar;
use crate::synthcohort::{SampleSet, JOULES_PER_MET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub ts_channels: Vec<String>,
    pub meta_fields: Vec<String>,
    pub downsample_ratio: usize,
}

/// Time-series channels the pipeline knows how to produce.
pub const KNOWN_CHANNELS: [&str; 4] = ["accel", "hr", "hrv", "enmo"];
/// Metadata fields the pipeline knows how to produce.
pub const KNOWN_META: [&str; 11] = [
    "age",
    "sex",
    "height",
    "weight",
    "bmi",
    "rhr",
    "sedentary_min",
    "mvpa_min",
    "vpa_min",
    "month_sin",
    "month_cos",
];

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            ts_channels: KNOWN_CHANNELS.iter().map(|s| s.to_string()).collect(),
            meta_fields: KNOWN_META.iter().map(|s| s.to_string()).collect(),
            downsample_ratio: 15,
        }
    }
}

impl FeatureLayout {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_ratio == 0 {
            return Err(invalid_arg!("downsample_ratio must be at least 1"));
        }
        if self.ts_channels.is_empty() && self.meta_fields.is_empty() {
            return Err(invalid_arg!("feature layout selects no features"));
        }
        for (list, known) in [(&self.ts_channels, &KNOWN_CHANNELS[..]), (&self.meta_fields, &KNOWN_META[..])] {
            for (i, name) in list.iter().enumerate() {
                if !known.contains(&name.as_str()) {
                    return Err(invalid_arg!("unknown feature '{name}'"));
                }
                if list[..i].contains(name) {
                    return Err(invalid_arg!("duplicate feature '{name}'"));
                }
            }
        }
        Ok(())
    }
}

/// MET cut points for intensity classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityThresholds {
    pub sedentary_below: f64,
    pub mvpa_at_or_above: f64,
    pub vigorous_at_or_above: f64,
}

impl Default for IntensityThresholds {
    fn default() -> Self {
        Self { sedentary_below: 1.0, mvpa_at_or_above: 1.0, vigorous_at_or_above: 4.15 }
    }
}

impl IntensityThresholds {
    /// The 1.5 / 3 / 6 MET cut points used in the prose description of the
    /// original pipeline.
    pub fn prose() -> Self {
        Self { sedentary_below: 1.5, mvpa_at_or_above: 3.0, vigorous_at_or_above: 6.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self;
        if !(t.sedentary_below <= t.mvpa_at_or_above && t.mvpa_at_or_above <= t.vigorous_at_or_above) {
            return Err(invalid_arg!("intensity thresholds must be non-decreasing"));
        }
        Ok(())
    }
}

/// Block means over consecutive windows of `ratio` samples.
pub fn downsample<T: Scalar>(series: &[T], ratio: usize) -> Result<Vec<T>> {
    if ratio == 0 {
        return Err(invalid_arg!("downsample ratio must be positive"));
    }
    if series.is_empty() || series.len() % ratio != 0 {
        return Err(invalid_arg!("series length {} not a positive multiple of {ratio}", series.len()));
    }
    let r = T::of_usize(ratio);
    Ok(series.chunks_exact(ratio).map(|c| c.iter().copied().sum::<T>() / r).collect())
}

/// `(sin(2π·month/12), cos(2π·month/12))`.
pub fn encode_month(month: u32) -> Result<(f64, f64)> {
    if !(1..=12).contains(&month) {
        return Err(invalid_arg!("month {month} outside 1..=12"));
    }
    let a = std::f64::consts::TAU * month as f64 / 12.0;
    Ok((a.sin(), a.cos()))
}

pub fn accel_to_mets(accel_j_per_min_kg: f64) -> Result<f64> {
    if !(accel_j_per_min_kg >= 0.0) {
        return Err(invalid_arg!("acceleration must be non-negative"));
    }
    Ok(accel_j_per_min_kg / JOULES_PER_MET)
}

/// ENMO-like variable `accel/0.0060321 + 0.057`.
pub fn derive_enmo(accel_mg: f64) -> Result<f64> {
    if !(accel_mg >= 0.0) {
        return Err(invalid_arg!("acceleration must be non-negative"));
    }
    Ok(accel_mg / 0.0060321 + 0.057)
}

/// Counts of sedentary, MVPA and vigorous samples.
pub fn classify_intensity(mets: &[f64], t: &IntensityThresholds) -> Result<(usize, usize, usize)> {
    if mets.iter().any(|m| !(*m >= 0.0)) {
        return Err(invalid_arg!("MET values must be non-negative"));
    }
    let count = |pred: &dyn Fn(f64) -> bool| mets.iter().filter(|&&m| pred(m)).count();
    Ok((
        count(&|m| m < t.sedentary_below),
        count(&|m| m >= t.mvpa_at_or_above),
        count(&|m| m >= t.vigorous_at_or_above),
    ))
}

/// Column-wise metadata min/max fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit<T: Scalar>(set: &SampleSet<T>) -> Result<Self> {
        if set.is_empty() {
            return Err(invalid_arg!("cannot fit a scaler on an empty set"));
        }
        let f = set.f_meta();
        let mut min = vec![f64::INFINITY; f];
        let mut max = vec![f64::NEG_INFINITY; f];
        for i in 0..set.len() {
            for (c, v) in set.meta(i).iter().enumerate() {
                min[c] = min[c].min(v.f64());
                max[c] = max[c].max(v.f64());
            }
        }
        Ok(Self { min, max })
    }

    /// Sequence-wise scaling of every time-series channel and column-wise
    /// scaling of the metadata with the fitted bounds. Constant sequences and
    /// columns map to zero.
    pub fn transform<T: Scalar>(&self, set: &SampleSet<T>) -> Result<SampleSet<T>> {
        if set.is_empty() {
            return Err(invalid_arg!("cannot scale an empty set"));
        }
        if self.min.len() != set.f_meta() {
            return Err(invalid_arg!("scaler fitted on {} columns, set has {}", self.min.len(), set.f_meta()));
        }
        let mut out = set.clone();
        let f = set.f_ts();
        let w = set.t * f;
        for i in 0..set.len() {
            let s = &mut out.x[i * w..(i + 1) * w];
            for c in 0..f {
                let (lo, hi) = s.iter().skip(c).step_by(f).fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
                let span = hi - lo;
                for v in s.iter_mut().skip(c).step_by(f) {
                    *v = if span > T::zero() { (*v - lo) / span } else { T::zero() };
                }
            }
        }
        let fm = set.f_meta();
        for (k, v) in out.m.iter_mut().enumerate() {
            let c = k % fm;
            let span = self.max[c] - self.min[c];
            *v = if span > 0.0 { T::of((v.f64() - self.min[c]) / span) } else { T::zero() };
        }
        Ok(out)
    }
}

/// Fits a scaler on `set` and applies it.
pub fn minmax_scale<T: Scalar>(set: &SampleSet<T>) -> Result<(SampleSet<T>, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(set)?;
    Ok((scaler.transform(set)?, scaler))
}

fn raw_index(set_fields: &[String], name: &str) -> Result<usize> {
    set_fields
        .iter()
        .position(|f| f == name)
        .ok_or_else(|| invalid_arg!("raw set lacks '{name}'"))
}

/// Derives the layout's channels and metadata from a raw set, without scaling.
pub fn extract_features<T: Scalar>(
    raw: &SampleSet<T>,
    layout: &FeatureLayout,
    thresholds: &IntensityThresholds,
) -> Result<SampleSet<T>> {
    if raw.processed {
        return Err(Error::InvalidState("sample set is already processed".into()));
    }
    layout.validate()?;
    thresholds.validate()?;
    raw.validate()?;
    let ratio = layout.downsample_ratio;
    if raw.t % ratio != 0 || raw.t < ratio {
        return Err(invalid_arg!("series length {} not divisible by {ratio}", raw.t));
    }
    let t_out = raw.t / ratio;
    let f_raw = raw.f_ts();
    let accel_c = raw_index(&raw.ts_channels, "accel")?;
    let days = raw.t as f64 / 1440.0;

    let mut x = Vec::with_capacity(raw.len() * t_out * layout.ts_channels.len());
    let mut m = Vec::with_capacity(raw.len() * layout.meta_fields.len());
    let mut channel = vec![T::zero(); raw.t];
    let mut out_channels: Vec<Vec<T>> = vec![Vec::new(); layout.ts_channels.len()];
    for i in 0..raw.len() {
        let s = raw.series(i);
        for (k, name) in layout.ts_channels.iter().enumerate() {
            let (src, enmo) = match name.as_str() {
                "enmo" => (accel_c, true),
                other => (raw_index(&raw.ts_channels, other)?, false),
            };
            for (t, v) in channel.iter_mut().enumerate() {
                let a = s[t * f_raw + src];
                *v = if enmo { T::of(derive_enmo(a.f64())?) } else { a };
            }
            out_channels[k] = downsample(&channel, ratio)?;
        }
        for t in 0..t_out {
            for ch in &out_channels {
                x.push(ch[t]);
            }
        }

        let meta = raw.meta(i);
        let get = |name: &str| -> Result<f64> { Ok(meta[raw_index(&raw.meta_fields, name)?].f64()) };
        let mets = (0..raw.t)
            .map(|t| accel_to_mets(s[t * f_raw + accel_c].f64()))
            .collect::<Result<Vec<_>>>()?;
        let (sed, mvpa, vig) = classify_intensity(&mets, thresholds)?;
        let month = get("month")?;
        if month.fract() != 0.0 {
            return Err(invalid_arg!("month must be integral, got {month}"));
        }
        let (msin, mcos) = encode_month(month as u32)?;
        for name in &layout.meta_fields {
            let v = match name.as_str() {
                "bmi" => get("weight")? / get("height")?.powi(2),
                "sedentary_min" => sed as f64 / days,
                "mvpa_min" => mvpa as f64 / days,
                "vpa_min" => vig as f64 / days,
                "month_sin" => msin,
                "month_cos" => mcos,
                other => get(other)?,
            };
            m.push(T::of(v));
        }
    }
    Ok(SampleSet {
        x,
        m,
        y: raw.y.clone(),
        domain: raw.domain.clone(),
        grade: raw.grade,
        processed: true,
        t: t_out,
        ts_channels: layout.ts_channels.clone(),
        meta_fields: layout.meta_fields.clone(),
    })
}

/// Full pipeline: feature extraction followed by min-max scaling fitted on `raw`.
pub fn assemble_features<T: Scalar>(
    raw: &SampleSet<T>,
    layout: &FeatureLayout,
    thresholds: &IntensityThresholds,
) -> Result<(SampleSet<T>, MinMaxScaler)> {
    minmax_scale(&extract_features(raw, layout, thresholds)?)
}

/// Full pipeline reusing a scaler fitted elsewhere (held-out data).
pub fn assemble_features_with<T: Scalar>(
    raw: &SampleSet<T>,
    layout: &FeatureLayout,
    thresholds: &IntensityThresholds,
    scaler: &MinMaxScaler,
) -> Result<SampleSet<T>> {
    scaler.transform(&extract_features(raw, layout, thresholds)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::{generate_cohort, CohortSpec, Domain, LabelGrade};
    use proptest::prelude::*;

    fn meta_only(rows: &[[f64; 1]]) -> SampleSet<f64> {
        SampleSet {
            x: vec![],
            m: rows.iter().map(|r| r[0]).collect(),
            y: vec![1.0; rows.len()],
            domain: vec![Domain::Target; rows.len()],
            grade: LabelGrade::Gold,
            processed: true,
            t: 0,
            ts_channels: vec![],
            meta_fields: vec!["c".into()],
        }
    }

    #[test]
    fn downsample_cases() {
        assert_eq!(downsample(&vec![1.0; 9000], 15).unwrap().len(), 600);
        assert_eq!(downsample(&[2.0, 4.0, 6.0], 3).unwrap(), vec![4.0]);
        assert!(downsample(&[1.0; 14], 15).is_err());
        assert!(downsample::<f64>(&[], 15).is_err());
    }

    #[test]
    fn minmax_columns() {
        let (s, sc) = minmax_scale(&meta_only(&[[2.0], [4.0], [6.0]])).unwrap();
        assert_eq!(s.m, vec![0.0, 0.5, 1.0]);
        assert_eq!((sc.min[0], sc.max[0]), (2.0, 6.0));
        let (s, _) = minmax_scale(&meta_only(&[[5.0], [5.0], [5.0]])).unwrap();
        assert_eq!(s.m, vec![0.0, 0.0, 0.0]);
        let empty = meta_only(&[]);
        assert!(minmax_scale(&empty).is_err());
    }

    #[test]
    fn month_encoding() {
        let (s, c) = encode_month(3).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && c.abs() < 1e-12);
        let (s, c) = encode_month(12).unwrap();
        assert!(s.abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
        assert!(encode_month(13).is_err());
        assert!(encode_month(0).is_err());
        for m in 1..=12 {
            let (s, c) = encode_month(m).unwrap();
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn met_and_enmo_conversions() {
        assert_eq!(accel_to_mets(71.0).unwrap(), 1.0);
        assert_eq!(accel_to_mets(0.0).unwrap(), 0.0);
        assert_eq!(accel_to_mets(213.0).unwrap(), 3.0);
        assert!(accel_to_mets(-1.0).is_err());
        assert_eq!(derive_enmo(0.0).unwrap(), 0.057);
        assert!((derive_enmo(0.0060321).unwrap() - 1.057).abs() < 1e-12);
        assert!((derive_enmo(0.0120642).unwrap() - 2.057).abs() < 1e-12);
        assert!(derive_enmo(-0.1).is_err());
    }

    #[test]
    fn intensity_counts() {
        let t = IntensityThresholds::default();
        assert_eq!(classify_intensity(&[0.5, 2.0, 5.0], &t).unwrap(), (1, 2, 1));
        assert_eq!(classify_intensity(&[], &t).unwrap(), (0, 0, 0));
        assert_eq!(classify_intensity(&[4.15], &t).unwrap(), (0, 1, 1));
        assert!(classify_intensity(&[-0.1], &t).is_err());
        let bad = IntensityThresholds { sedentary_below: 2.0, mvpa_at_or_above: 1.0, vigorous_at_or_above: 4.0 };
        assert!(bad.validate().is_err());
        assert!(IntensityThresholds::prose().validate().is_ok());
    }

    #[test]
    fn layout_validation() {
        let mut l = FeatureLayout::default();
        l.ts_channels.push("accel".into());
        assert!(l.validate().is_err());
        let mut l = FeatureLayout::default();
        l.meta_fields.push("shoe_size".into());
        assert!(l.validate().is_err());
        let mut l = FeatureLayout::default();
        l.downsample_ratio = 0;
        assert!(l.validate().is_err());
    }

    #[test]
    fn assembled_shapes_and_purity() {
        let mut spec = CohortSpec::fenland();
        spec.series_length_raw = 9000;
        let raw = generate_cohort::<f64>(&spec, 3, 1).unwrap();
        let layout = FeatureLayout::default();
        let (a, _) = assemble_features(&raw, &layout, &IntensityThresholds::default()).unwrap();
        assert_eq!(a.t, 600);
        assert_eq!(a.f_ts(), 4);
        assert_eq!(a.f_meta(), 11);
        assert_eq!(a.x.len(), 3 * 600 * 4);
        assert_eq!(a.m.len(), 3 * 11);
        assert!(a.processed);
        assert!(a.x.iter().chain(&a.m).all(|v| (0.0..=1.0).contains(v)));
        let (b, _) = assemble_features(&raw, &layout, &IntensityThresholds::default()).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            assemble_features(&a, &layout, &IntensityThresholds::default()),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn constant_channel_scales_to_zero() {
        let mut spec = CohortSpec::fenland();
        spec.series_length_raw = 150;
        let mut raw = generate_cohort::<f64>(&spec, 2, 1).unwrap();
        for t in 0..raw.t * 2 {
            raw.x[t * 3] = 20.0;
        }
        let layout = FeatureLayout::default();
        let (p, _) = assemble_features(&raw, &layout, &IntensityThresholds::default()).unwrap();
        assert!(p.x.iter().step_by(4).all(|&v| v == 0.0));
        // ENMO is an affine image of accel and is constant as well
        assert!(p.x.iter().skip(3).step_by(4).all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn downsample_preserves_mean(blocks in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 5), 1..20)) {
            let series: Vec<f64> = blocks.concat();
            let d = downsample(&series, 5).unwrap();
            let m1 = series.iter().sum::<f64>() / series.len() as f64;
            let m2 = d.iter().sum::<f64>() / d.len() as f64;
            prop_assert!((m1 - m2).abs() < 1e-9);
        }

        #[test]
        fn vigorous_never_exceeds_mvpa(mets in prop::collection::vec(0.0f64..10.0, 0..100)) {
            let (_, mvpa, vig) = classify_intensity(&mets, &IntensityThresholds::default()).unwrap();
            prop_assert!(vig <= mvpa);
        }

        #[test]
        fn minmax_idempotent_on_unit_data(col in prop::collection::vec(0.0f64..=1.0, 2..30)) {
            let mut col = col;
            col[0] = 0.0;
            col[1] = 1.0;
            let rows: Vec<[f64; 1]> = col.iter().map(|&v| [v]).collect();
            let (s, _) = minmax_scale(&meta_only(&rows)).unwrap();
            prop_assert_eq!(s.m, col);
        }
    }
}
