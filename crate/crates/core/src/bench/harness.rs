//! Data preparation, split bookkeeping and per-method pipelines.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::baselines::{train_autoencoder_pretrain, train_dann, train_deep_coral, train_wdgrl, BaselineKind};
use crate::error::Result;
use crate::features::{assemble_features, assemble_features_with};
use crate::netgraph::ModelParams;
use crate::objectives::{sample_kl, LossWeights, DEFAULT_BINS};
use crate::scalar::Scalar;
use crate::seeds::{stream, sub_seed};
use crate::synthcohort::{apply_label_shift, corrupt_to_silver, generate_cohort, SampleSet, ShiftSpec};
use crate::trainer::{
    adapt_udama, assign_distribution_labels, evaluate, finetune, injection_count, mix_domains, predict_inputs, pretrain,
    train_supervised, TrainConfig, TrainTrace,
};

use super::config::{ExperimentConfig, Method};
use super::records::{RunRecord, SCHEMA_VERSION};

/// No shift: the source labels as generated.
pub const NO_SHIFT: ShiftSpec = ShiftSpec { offset: 0.0, noise_std: 0.0 };

/// One cell of an experiment grid.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub experiment: String,
    /// Name written to the record; defaults to the method name.
    pub label: String,
    pub method: Method,
    /// Overrides `train.alpha/lambda1/lambda2` for the adversarial model.
    pub weights: Option<LossWeights>,
    pub fold: usize,
    pub seed: u64,
    pub injection_frac: f64,
    pub shift: ShiftSpec,
}

impl RunSpec {
    pub fn new(experiment: &str, method: Method, fold: usize, seed: u64, injection_frac: f64) -> Self {
        Self {
            experiment: experiment.into(),
            label: method.to_string(),
            method,
            weights: None,
            fold,
            seed,
            injection_frac,
            shift: NO_SHIFT,
        }
    }
}

/// Trained model, its trace and the evaluated record.
pub struct RunOutcome<T> {
    pub params: ModelParams<T>,
    pub trace: TrainTrace,
    pub record: RunRecord,
}

type ShiftKey = (u64, u64);

fn shift_key(s: &ShiftSpec) -> ShiftKey {
    (s.offset.to_bits(), s.noise_std.to_bits())
}

/// Prepared cohorts plus caches of the source-side models, which depend only
/// on (shift, seed) and are shared across folds and methods.
pub struct Harness<T> {
    pub cfg: ExperimentConfig,
    pub config_hash: String,
    /// Processed silver-standard source cohort.
    pub source: SampleSet<T>,
    /// Processed gold-standard target cohort, scaled with the source scaler.
    pub target: SampleSet<T>,
    pretrained: HashMap<(ShiftKey, u64), (ModelParams<T>, TrainTrace)>,
    autoencoded: HashMap<(ShiftKey, u64), ModelParams<T>>,
}

impl<T: Scalar> Harness<T> {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = cfg.data_seed;
        let gold = generate_cohort::<T>(&cfg.source, cfg.source_n, sub_seed(ds, "source"))?;
        let silver = corrupt_to_silver(&gold, &cfg.corruption, sub_seed(ds, "silver"))?;
        let target_raw = generate_cohort::<T>(&cfg.target, cfg.target_n, sub_seed(ds, "target"))?;
        let (source, scaler) = assemble_features(&silver, &cfg.layout, &cfg.thresholds)?;
        let target = assemble_features_with(&target_raw, &cfg.layout, &cfg.thresholds, &scaler)?;
        Ok(Self {
            config_hash: cfg.config_hash(),
            cfg,
            source,
            target,
            pretrained: HashMap::new(),
            autoencoded: HashMap::new(),
        })
    }

    /// Sorted `(train, test)` indices into the target cohort.
    pub fn split(&self, fold: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.target.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream(sub_seed(seed, "cv"), &format!("fold{fold}")));
        let n_train = ((self.cfg.split_train_frac * n as f64).round() as usize).clamp(1, n - 1);
        let mut train = idx[..n_train].to_vec();
        let mut test = idx[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }

    pub fn shifted_source(&self, shift: &ShiftSpec) -> Result<SampleSet<T>> {
        if *shift == NO_SHIFT {
            return Ok(self.source.clone());
        }
        apply_label_shift(&self.source, shift, sub_seed(self.cfg.data_seed, "shift"))
    }

    /// Histogram KL between the shifted source labels and the target labels.
    pub fn label_kl(&self, shift: &ShiftSpec) -> Result<f64> {
        let s: Vec<f64> = self.shifted_source(shift)?.y.iter().map(|v| v.f64()).collect();
        let t: Vec<f64> = self.target.y.iter().map(|v| v.f64()).collect();
        sample_kl(&s, &t, DEFAULT_BINS)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig { max_epochs: self.cfg.pretrain_max_epochs, ..self.cfg.train.clone() }
    }

    /// Source-pretrained model for `(shift, seed)`, trained on first use.
    pub fn pretrained(&mut self, shift: &ShiftSpec, seed: u64) -> Result<(ModelParams<T>, TrainTrace)> {
        let key = (shift_key(shift), seed);
        if let Some(hit) = self.pretrained.get(&key) {
            return Ok(hit.clone());
        }
        let src = self.shifted_source(shift)?;
        let out = pretrain(&src, &self.cfg.net, &self.pretrain_config(), sub_seed(seed, "pretrain"))?;
        self.pretrained.insert(key, out.clone());
        Ok(out)
    }

    /// Seeds the pretraining cache, e.g. from a saved checkpoint.
    pub fn insert_pretrained(&mut self, shift: &ShiftSpec, seed: u64, params: ModelParams<T>, trace: TrainTrace) {
        self.pretrained.insert((shift_key(shift), seed), (params, trace));
    }

    fn autoencoded(&mut self, shift: &ShiftSpec, seed: u64) -> Result<ModelParams<T>> {
        let key = (shift_key(shift), seed);
        if let Some(hit) = self.autoencoded.get(&key) {
            return Ok(hit.clone());
        }
        let src = self.shifted_source(shift)?;
        let (p, _) = train_autoencoder_pretrain(&src, &self.cfg.net, &self.pretrain_config(), sub_seed(seed, "autoencoder"))?;
        self.autoencoded.insert(key, p.clone());
        Ok(p)
    }

    /// Trains `spec.method` on the fold's target-train part and evaluates it on
    /// the held-out part. Test rows reach only the evaluation call.
    pub fn run(&mut self, spec: &RunSpec) -> Result<RunOutcome<T>> {
        let started = Instant::now();
        let (train_idx, test_idx) = self.split(spec.fold, spec.seed);
        let tgt_train = self.target.select(&train_idx);
        let run_seed = sub_seed(spec.seed, &format!("fold{}", spec.fold));
        let cfg = match spec.weights {
            Some(w) => TrainConfig { weights: w, ..self.cfg.train.clone() },
            None => self.cfg.train.clone(),
        };
        let adversarial = matches!(spec.method, Method::Udama | Method::Baseline(BaselineKind::Dann));
        let (params, trace) = match spec.method {
            Method::Udama | Method::Baseline(BaselineKind::Dann) => {
                let (pre, _) = self.pretrained(&spec.shift, spec.seed)?;
                let src = self.shifted_source(&spec.shift)?;
                let (mixed, a) = mix_domains(&tgt_train, &src, spec.injection_frac, run_seed)?;
                let a = assign_distribution_labels(&mixed, &a)?;
                let pre = pre.freeze_plan();
                if spec.method == Method::Udama {
                    adapt_udama(&pre, &mixed, &a, &cfg, run_seed)?
                } else {
                    train_dann(&pre, &mixed, &a, &cfg, run_seed)?
                }
            }
            Method::Baseline(kind) => match kind {
                BaselineKind::InDomainSupervised => train_supervised(&tgt_train, &self.cfg.net, &cfg, run_seed)?,
                BaselineKind::OutOfDomainSupervised => self.pretrained(&spec.shift, spec.seed)?,
                BaselineKind::Transfer => {
                    let (pre, _) = self.pretrained(&spec.shift, spec.seed)?;
                    finetune(&pre.freeze_plan(), &tgt_train, &cfg, run_seed)?
                }
                BaselineKind::Autoencoder => {
                    let pre = self.autoencoded(&spec.shift, spec.seed)?;
                    finetune(&pre.freeze_plan(), &tgt_train, &cfg, run_seed)?
                }
                BaselineKind::DeepCoral => {
                    let src = self.shifted_source(&spec.shift)?;
                    train_deep_coral(&src, &tgt_train, &self.cfg.net, &self.pretrain_config(), self.cfg.coral_weight, run_seed)?
                }
                BaselineKind::Wdgrl => {
                    let src = self.shifted_source(&spec.shift)?;
                    train_wdgrl(
                        &src,
                        &tgt_train,
                        &self.cfg.net,
                        &self.pretrain_config(),
                        self.cfg.wdgrl_critic_steps,
                        self.cfg.wdgrl_penalty_weight,
                        run_seed,
                    )?
                }
                BaselineKind::Dann => unreachable!("handled with the adversarial model"),
            },
        };
        let test = self.target.select(&test_idx);
        let metrics = evaluate(&params, &test)?;
        let y_pred = predict_inputs(&params, &test)?.iter().map(|v| v.f64()).collect();
        let mut record = self.blank_record(spec);
        if adversarial {
            let count = injection_count(spec.injection_frac, tgt_train.len());
            record.injection_source_frac = Some(count as f64 / self.source.len() as f64);
        } else {
            record.injection_frac = None;
        }
        record.metrics = Some(metrics);
        record.best_epoch = Some(trace.best_epoch);
        record.stop_epoch = Some(trace.stop_epoch);
        record.y_true = test.y.iter().map(|v| v.f64()).collect();
        record.y_pred = y_pred;
        if self.cfg.record_wall_time {
            record.wall_time_s = Some(started.elapsed().as_secs_f64());
        }
        Ok(RunOutcome { params, trace, record })
    }

    /// Record for `spec` with no results filled in.
    pub fn blank_record(&self, spec: &RunSpec) -> RunRecord {
        RunRecord {
            schema_version: SCHEMA_VERSION,
            experiment: spec.experiment.clone(),
            method: spec.label.clone(),
            fold: spec.fold,
            seed: spec.seed,
            injection_frac: Some(spec.injection_frac),
            injection_source_frac: None,
            shift_offset: spec.shift.offset,
            shift_noise: spec.shift.noise_std,
            label_kl: None,
            metrics: None,
            best_epoch: None,
            stop_epoch: None,
            config_hash: self.config_hash.clone(),
            wall_time_s: None,
            error: None,
            y_true: Vec::new(),
            y_pred: Vec::new(),
        }
    }

    /// Like [`Self::run`], but failures become an error record.
    pub fn run_or_record(&mut self, spec: &RunSpec) -> RunRecord {
        match self.run(spec) {
            Ok(out) => out.record,
            Err(e) => {
                let mut r = self.blank_record(spec);
                r.error = Some(e.to_string());
                r
            }
        }
    }

    fn grid(&self) -> Vec<(u64, usize)> {
        self.cfg.seeds.iter().flat_map(|&s| (0..self.cfg.folds).map(move |f| (s, f))).collect()
    }

    /// One record per (seed, fold) for `method`.
    pub fn run_cv(&mut self, method: Method) -> Result<Vec<RunRecord>> {
        let mut out = Vec::new();
        for (seed, fold) in self.grid() {
            out.push(self.run(&RunSpec::new("cv", method, fold, seed, self.cfg.injection_frac))?.record);
        }
        Ok(out)
    }

    /// The adversarial model at every injection ratio and seed, fold 0.
    /// Cells that cannot run are kept as error records.
    pub fn injection_sweep(&mut self) -> Result<Vec<RunRecord>> {
        if self.cfg.seeds.len() < 2 {
            return Err(crate::error::invalid_arg!("`seeds` needs at least two entries for the sweep"));
        }
        let mut out = Vec::new();
        for ratio in self.cfg.injection_ratios.clone() {
            for seed in self.cfg.seeds.clone() {
                let spec = RunSpec::new("sweep", Method::Udama, 0, seed, ratio);
                let mut rec = self.run_or_record(&spec);
                if rec.injection_source_frac.is_none() {
                    let n_train = self.split(0, seed).0.len();
                    rec.injection_source_frac = Some(injection_count(ratio, n_train) as f64 / self.source.len() as f64);
                }
                out.push(rec);
            }
        }
        Ok(out)
    }

    /// Coarse-only, fine-only and full variants on shared splits and seeds.
    pub fn ablation(&mut self) -> Result<Vec<RunRecord>> {
        let alpha = self.cfg.train.weights.alpha;
        let variants = [
            ("udama_coarse_only", LossWeights { alpha, lambda1: 1.0, lambda2: 0.0 }),
            ("udama_fine_only", LossWeights { alpha, lambda1: 0.0, lambda2: 1.0 }),
            ("udama", self.cfg.train.weights),
        ];
        let mut out = Vec::new();
        for (seed, fold) in self.grid() {
            for (name, w) in variants {
                let mut spec = RunSpec::new("ablation", Method::Udama, fold, seed, self.cfg.injection_frac);
                spec.label = name.into();
                spec.weights = Some(w);
                out.push(self.run(&spec)?.record);
            }
        }
        Ok(out)
    }

    /// The adversarial model and DANN under every configured source label shift.
    pub fn stress_test(&mut self) -> Result<Vec<RunRecord>> {
        if self.cfg.shifts.is_empty() {
            return Err(crate::error::invalid_arg!("`shifts` is empty"));
        }
        let mut out = Vec::new();
        for shift in self.cfg.shifts.clone() {
            let kl = self.label_kl(&shift)?;
            for (seed, fold) in self.grid() {
                for method in [Method::Udama, Method::Baseline(BaselineKind::Dann)] {
                    let mut spec = RunSpec::new("stress", method, fold, seed, self.cfg.injection_frac);
                    spec.shift = shift;
                    let mut rec = self.run(&spec)?.record;
                    rec.label_kl = Some(kl);
                    out.push(rec);
                }
            }
        }
        Ok(out)
    }
}
