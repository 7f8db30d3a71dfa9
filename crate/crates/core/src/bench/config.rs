//! Experiment configuration as flat `key = value` text.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::baselines::BaselineKind;
use crate::error::{invalid_arg, Error, Result};
use crate::features::{FeatureLayout, IntensityThresholds};
use crate::kv::{KvReader, KvWriter};
use crate::netgraph::NetConfig;
use crate::synthcohort::{CohortSpec, LabelCorruption, ShiftSpec};
use crate::trainer::TrainConfig;

/// Numeric precision of a harness run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(invalid_arg!("unknown precision `{s}`")),
        }
    }
}

/// The adversarial model or one of the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Udama,
    Baseline(BaselineKind),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Udama => f.write_str("udama"),
            Method::Baseline(k) => k.fmt(f),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "udama" {
            Ok(Method::Udama)
        } else {
            s.parse().map(Method::Baseline)
        }
    }
}

/// Everything that determines a batch of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub precision: Precision,
    pub data_seed: u64,
    pub source: CohortSpec,
    pub source_n: usize,
    pub target: CohortSpec,
    pub target_n: usize,
    pub corruption: LabelCorruption,
    pub layout: FeatureLayout,
    pub thresholds: IntensityThresholds,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub pretrain_max_epochs: usize,
    pub methods: Vec<Method>,
    pub folds: usize,
    pub split_train_frac: f64,
    pub seeds: Vec<u64>,
    pub injection_frac: f64,
    pub injection_ratios: Vec<f64>,
    pub shifts: Vec<ShiftSpec>,
    pub coral_weight: f64,
    pub wdgrl_critic_steps: usize,
    pub wdgrl_penalty_weight: f64,
    pub out_dir: PathBuf,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            data_seed: 0,
            source: CohortSpec::fenland(),
            source_n: 2000,
            target: CohortSpec::bbvs(),
            target_n: 200,
            corruption: LabelCorruption::default(),
            layout: FeatureLayout::default(),
            thresholds: IntensityThresholds::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            pretrain_max_epochs: 100,
            methods: std::iter::once(Method::Udama).chain(BaselineKind::ALL.map(Method::Baseline)).collect(),
            folds: 3,
            split_train_frac: 0.7,
            seeds: (0..15).collect(),
            injection_frac: 0.10,
            injection_ratios: vec![0.01, 0.05, 0.10, 0.30, 0.50, 1.00],
            shifts: vec![
                ShiftSpec { offset: 0.0, noise_std: 0.0 },
                ShiftSpec { offset: -6.0, noise_std: 1.0 },
                ShiftSpec { offset: 6.0, noise_std: 1.0 },
            ],
            coral_weight: 1.0,
            wdgrl_critic_steps: 5,
            wdgrl_penalty_weight: 10.0,
            out_dir: PathBuf::from("runs"),
            record_wall_time: false,
        }
    }
}

fn join<V: fmt::Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_list<V: FromStr>(key: &str, raw: &str) -> Result<Vec<V>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<V>().map_err(|_| Error::Parse(format!("key `{key}`: cannot parse `{s}`"))))
        .collect()
}

fn take_list<V: FromStr>(r: &mut KvReader, key: &str, target: &mut Vec<V>) -> Result<()> {
    if let Some(raw) = r.take::<String>(key)? {
        *target = split_list(key, &raw)?;
    }
    Ok(())
}

fn write_cohort(w: &mut KvWriter, p: &str, c: &CohortSpec) {
    w.put(&format!("{p}male_frac"), c.male_frac)
        .put(&format!("{p}series_length_raw"), c.series_length_raw)
        .put(&format!("{p}noise.accel"), c.ts_noise_std.accel)
        .put(&format!("{p}noise.hr"), c.ts_noise_std.hr)
        .put(&format!("{p}noise.hrv"), c.ts_noise_std.hrv);
    for (sex, block) in [("male", &c.male), ("female", &c.female)] {
        for (name, m) in block.fields() {
            w.put(&format!("{p}{sex}.{name}.mean"), m.mean).put(&format!("{p}{sex}.{name}.std"), m.std);
        }
    }
}

fn read_cohort(r: &mut KvReader, p: &str, c: &mut CohortSpec) -> Result<()> {
    r.set(&format!("{p}male_frac"), &mut c.male_frac)?;
    r.set(&format!("{p}series_length_raw"), &mut c.series_length_raw)?;
    r.set(&format!("{p}noise.accel"), &mut c.ts_noise_std.accel)?;
    r.set(&format!("{p}noise.hr"), &mut c.ts_noise_std.hr)?;
    r.set(&format!("{p}noise.hrv"), &mut c.ts_noise_std.hrv)?;
    for (sex, block) in [("male", &mut c.male), ("female", &mut c.female)] {
        let names: Vec<&str> = block.fields().iter().map(|(n, _)| *n).collect();
        for name in names {
            let m = block.field_mut(name).expect("listed field");
            r.set(&format!("{p}{sex}.{name}.mean"), &mut m.mean)?;
            r.set(&format!("{p}{sex}.{name}.std"), &mut m.std)?;
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Checks every invariant; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, e: Error| invalid_arg!("`{k}`: {e}");
        self.source.validate(self.layout.downsample_ratio).map_err(|e| key("source", e))?;
        self.target.validate(self.layout.downsample_ratio).map_err(|e| key("target", e))?;
        self.corruption.validate().map_err(|e| key("corruption", e))?;
        self.layout.validate().map_err(|e| key("layout", e))?;
        self.thresholds.validate().map_err(|e| key("thresholds", e))?;
        self.net.validate().map_err(|e| key("net", e))?;
        self.train.validate().map_err(|e| key("train", e))?;
        if self.net.ts_features != self.layout.ts_channels.len() {
            return Err(invalid_arg!(
                "`net.ts_features` is {} but `layout.ts_channels` lists {}",
                self.net.ts_features,
                self.layout.ts_channels.len()
            ));
        }
        if self.net.meta_features != self.layout.meta_fields.len() {
            return Err(invalid_arg!(
                "`net.meta_features` is {} but `layout.meta_fields` lists {}",
                self.net.meta_features,
                self.layout.meta_fields.len()
            ));
        }
        if self.source_n < 2 || self.target_n < 2 {
            return Err(invalid_arg!("`source.n` and `target.n` must be at least 2"));
        }
        if self.pretrain_max_epochs < self.train.patience {
            return Err(invalid_arg!("`pretrain.max_epochs` must be at least `train.patience`"));
        }
        if self.methods.is_empty() {
            return Err(invalid_arg!("`methods` is empty"));
        }
        if self.folds == 0 {
            return Err(invalid_arg!("`folds` must be at least 1"));
        }
        if !(self.split_train_frac > 0.0 && self.split_train_frac < 1.0) {
            return Err(invalid_arg!("`split_train_frac` must lie in (0, 1), got {}", self.split_train_frac));
        }
        if self.seeds.is_empty() {
            return Err(invalid_arg!("`seeds` is empty"));
        }
        let frac_ok = |v: f64| v > 0.0 && v.is_finite();
        if !frac_ok(self.injection_frac) {
            return Err(invalid_arg!("`injection_frac` must be positive"));
        }
        if !self.injection_ratios.iter().all(|&v| frac_ok(v)) {
            return Err(invalid_arg!("`injection_ratios` must be positive"));
        }
        if self.shifts.iter().any(|s| !s.offset.is_finite() || !(s.noise_std >= 0.0 && s.noise_std.is_finite())) {
            return Err(invalid_arg!("`shifts` need finite offsets and non-negative noise"));
        }
        if !(self.coral_weight >= 0.0 && self.coral_weight.is_finite()) {
            return Err(invalid_arg!("`coral_weight` must be non-negative"));
        }
        if !(self.wdgrl_penalty_weight >= 0.0 && self.wdgrl_penalty_weight.is_finite()) {
            return Err(invalid_arg!("`wdgrl.penalty_weight` must be non-negative"));
        }
        Ok(())
    }

    fn write(&self, w: &mut KvWriter, docs: bool) {
        let doc = |w: &mut KvWriter, text: &str| {
            if docs {
                w.blank().comment(text);
            }
        };
        doc(w, "Scalar type used for training: f32 or f64.");
        w.put("precision", self.precision);
        doc(w, "Seed of the synthetic cohorts; run seeds are listed under `seeds`.");
        w.put("data_seed", self.data_seed);
        doc(w, "Source cohort: size, generator moments (per sex) and per-channel noise.");
        w.put("source.n", self.source_n);
        write_cohort(w, "source.", &self.source);
        doc(w, "Target cohort, same keys as the source.");
        w.put("target.n", self.target_n);
        write_cohort(w, "target.", &self.target);
        doc(w, "Gold to silver map applied to source labels: slope·y + intercept + N(0, noise_std²).");
        w.put("corruption.slope", self.corruption.slope)
            .put("corruption.intercept", self.corruption.intercept)
            .put("corruption.noise_std", self.corruption.noise_std);
        doc(w, "Feature layout: comma-separated channel and metadata names, downsampling ratio.");
        w.put("layout.ts_channels", self.layout.ts_channels.join(","))
            .put("layout.meta_fields", self.layout.meta_fields.join(","))
            .put("layout.downsample_ratio", self.layout.downsample_ratio);
        doc(w, "MET cut points for sedentary, MVPA and vigorous minutes.");
        w.put("thresholds.sedentary_below", self.thresholds.sedentary_below)
            .put("thresholds.mvpa_at_or_above", self.thresholds.mvpa_at_or_above)
            .put("thresholds.vigorous_at_or_above", self.thresholds.vigorous_at_or_above);
        doc(w, "Network shape; the two feature widths must match the layout.");
        self.net.write_kv(w, "net.");
        doc(w, "Optimizer, early stopping and adaptation weights (lambda1 + lambda2 = 1).");
        self.train.write_kv(w, "train.");
        doc(w, "Epoch cap for source pretraining (other settings follow `train.*`).");
        w.put("pretrain.max_epochs", self.pretrain_max_epochs);
        doc(w, "Methods compared by `run_cv`: udama and any baseline name.");
        w.put("methods", join(&self.methods));
        doc(w, "Independently seeded random train/test splits of the target cohort.");
        w.put("folds", self.folds).put("split_train_frac", self.split_train_frac);
        doc(w, "Run seeds; every (seed, fold) pair is one run.");
        w.put("seeds", join(&self.seeds));
        doc(w, "Injected source samples as a fraction of target train, for single runs and the sweep.");
        w.put("injection_frac", self.injection_frac).put("injection_ratios", join(&self.injection_ratios));
        doc(w, "Source label shifts for the stress test, as offset:noise_std pairs.");
        let shifts: Vec<String> = self.shifts.iter().map(|s| format!("{}:{}", s.offset, s.noise_std)).collect();
        w.put("shifts", shifts.join(","));
        doc(w, "Baseline settings.");
        w.put("coral_weight", self.coral_weight)
            .put("wdgrl.critic_steps", self.wdgrl_critic_steps)
            .put("wdgrl.penalty_weight", self.wdgrl_penalty_weight);
    }

    /// Full configuration with a comment above every group of keys.
    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("Experiment configuration. Unknown keys are rejected.");
        self.write(&mut w, true);
        w.blank().comment("Output location and run-time bookkeeping; neither affects results.");
        w.put("out_dir", self.out_dir.display()).put("record_wall_time", self.record_wall_time);
        w.finish()
    }

    /// Parses `text` over the defaults, validates, and rejects unknown keys.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut c = Self::default();
        r.set("precision", &mut c.precision)?;
        r.set("data_seed", &mut c.data_seed)?;
        r.set("source.n", &mut c.source_n)?;
        read_cohort(&mut r, "source.", &mut c.source)?;
        r.set("target.n", &mut c.target_n)?;
        read_cohort(&mut r, "target.", &mut c.target)?;
        r.set("corruption.slope", &mut c.corruption.slope)?;
        r.set("corruption.intercept", &mut c.corruption.intercept)?;
        r.set("corruption.noise_std", &mut c.corruption.noise_std)?;
        take_list(&mut r, "layout.ts_channels", &mut c.layout.ts_channels)?;
        take_list(&mut r, "layout.meta_fields", &mut c.layout.meta_fields)?;
        r.set("layout.downsample_ratio", &mut c.layout.downsample_ratio)?;
        r.set("thresholds.sedentary_below", &mut c.thresholds.sedentary_below)?;
        r.set("thresholds.mvpa_at_or_above", &mut c.thresholds.mvpa_at_or_above)?;
        r.set("thresholds.vigorous_at_or_above", &mut c.thresholds.vigorous_at_or_above)?;
        c.net = NetConfig::read_kv(&mut r, "net.")?;
        c.train = TrainConfig::read_kv(&mut r, "train.")?;
        r.set("pretrain.max_epochs", &mut c.pretrain_max_epochs)?;
        take_list(&mut r, "methods", &mut c.methods)?;
        r.set("folds", &mut c.folds)?;
        r.set("split_train_frac", &mut c.split_train_frac)?;
        take_list(&mut r, "seeds", &mut c.seeds)?;
        r.set("injection_frac", &mut c.injection_frac)?;
        take_list(&mut r, "injection_ratios", &mut c.injection_ratios)?;
        if let Some(raw) = r.take::<String>("shifts")? {
            c.shifts = raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    let bad = || Error::Parse(format!("key `shifts`: expected offset:noise_std, got `{s}`"));
                    let (o, n) = s.split_once(':').ok_or_else(bad)?;
                    Ok(ShiftSpec { offset: o.trim().parse().map_err(|_| bad())?, noise_std: n.trim().parse().map_err(|_| bad())? })
                })
                .collect::<Result<_>>()?;
        }
        r.set("coral_weight", &mut c.coral_weight)?;
        r.set("wdgrl.critic_steps", &mut c.wdgrl_critic_steps)?;
        r.set("wdgrl.penalty_weight", &mut c.wdgrl_penalty_weight)?;
        if let Some(p) = r.take::<String>("out_dir")? {
            c.out_dir = PathBuf::from(p);
        }
        r.set("record_wall_time", &mut c.record_wall_time)?;
        r.finish()?;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of every result-affecting key, in canonical form.
    pub fn config_hash(&self) -> String {
        let mut w = KvWriter::new();
        self.write(&mut w, false);
        let digest = Sha256::digest(w.finish().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
