//! Supervised pretraining, source-sample injection, the alternating
//! adversarial adaptation loop, fine-tuning and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::kv::{KvReader, KvWriter};
use crate::netgraph::adam::{discriminator_layers, generator_layers, Adam, AdamConfig};
use crate::netgraph::layers::Mlp2;
use crate::netgraph::{Embedding, LayerId, Mode, ModelParams, NetConfig};
use crate::objectives::{
    cross_entropy_logits, gaussian_nll_head, metric_record, total_adapt_loss, LossWeights, MetricRecord, DEFAULT_BINS,
};
use crate::scalar::{sigmoid, Scalar};
use crate::seeds::stream;
use crate::synthcohort::{Domain, LabelGrade, SampleSet, Unlabeled};

/// Which value the fine discriminator's Gaussian is asked to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GllTarget {
    /// The mean of the sample's domain label distribution.
    DomainMean,
    /// The sample's own training label.
    SampleLabel,
}

impl fmt::Display for GllTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GllTarget::DomainMean => "domain_mean",
            GllTarget::SampleLabel => "sample_label",
        })
    }
}

impl FromStr for GllTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domain_mean" => Ok(GllTarget::DomainMean),
            "sample_label" => Ok(GllTarget::SampleLabel),
            other => Err(Error::Parse(format!("unknown gll target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weights: LossWeights,
    pub validation_fraction: f64,
    pub gll_target: GllTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            weights: LossWeights::default(),
            validation_fraction: 0.2,
            gll_target: GllTarget::DomainMean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(invalid_arg!("batch_size, max_epochs and patience must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(invalid_arg!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(invalid_arg!("validation_fraction must lie in (0, 1)"));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }

    pub fn write_kv(&self, w: &mut KvWriter, prefix: &str) {
        w.put(&format!("{prefix}learning_rate"), self.learning_rate)
            .put(&format!("{prefix}batch_size"), self.batch_size)
            .put(&format!("{prefix}max_epochs"), self.max_epochs)
            .put(&format!("{prefix}patience"), self.patience)
            .put(&format!("{prefix}alpha"), self.weights.alpha)
            .put(&format!("{prefix}lambda1"), self.weights.lambda1)
            .put(&format!("{prefix}lambda2"), self.weights.lambda2)
            .put(&format!("{prefix}validation_fraction"), self.validation_fraction)
            .put(&format!("{prefix}gll_target"), self.gll_target);
    }

    pub fn read_kv(r: &mut KvReader, prefix: &str) -> Result<Self> {
        let mut c = Self::default();
        r.set(&format!("{prefix}learning_rate"), &mut c.learning_rate)?;
        r.set(&format!("{prefix}batch_size"), &mut c.batch_size)?;
        r.set(&format!("{prefix}max_epochs"), &mut c.max_epochs)?;
        r.set(&format!("{prefix}patience"), &mut c.patience)?;
        r.set(&format!("{prefix}alpha"), &mut c.weights.alpha)?;
        r.set(&format!("{prefix}lambda1"), &mut c.weights.lambda1)?;
        r.set(&format!("{prefix}lambda2"), &mut c.weights.lambda2)?;
        r.set(&format!("{prefix}validation_fraction"), &mut c.validation_fraction)?;
        r.set(&format!("{prefix}gll_target"), &mut c.gll_target)?;
        Ok(c)
    }
}

/// Per-sample domain tags and domain label moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAssignment {
    /// 0 for source, 1 for target.
    pub y_c: Vec<u8>,
    /// `(mean, variance)` of the sample's domain labels; empty until assigned.
    pub y_d: Vec<(f64, f64)>,
}

/// One line of a training trace. Epoch 0 is the state before any update and
/// carries only validation values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_mse: Option<f64>,
    pub l_cse: Option<f64>,
    pub l_gll: Option<f64>,
    /// Method-specific extra term (alignment distance, reconstruction), unweighted.
    pub l_aux: Option<f64>,
    /// Critic regularizer of the extra term, when it has one.
    pub l_penalty: Option<f64>,
    pub l_total: Option<f64>,
    /// Discriminator-step losses, before the adversarial step.
    pub disc_cse: Option<f64>,
    pub disc_gll: Option<f64>,
    pub val_loss: f64,
    /// Balanced accuracy of the coarse discriminator on a held-out mixed set.
    pub disc_acc: Option<f64>,
}

impl EpochRecord {
    pub(crate) fn initial(val_loss: f64, disc_acc: Option<f64>) -> Self {
        Self {
            epoch: 0,
            l_mse: None,
            l_cse: None,
            l_gll: None,
            l_aux: None,
            l_penalty: None,
            l_total: None,
            disc_cse: None,
            disc_gll: None,
            val_loss,
            disc_acc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceHeader {
    schema_version: u32,
    best_epoch: usize,
    stop_epoch: usize,
    weights: Option<LossWeights>,
}

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    /// Last epoch run.
    pub stop_epoch: usize,
    /// Adaptation weights, for adversarial runs.
    pub weights: Option<LossWeights>,
}

impl TrainTrace {
    pub fn val_at(&self, epoch: usize) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch == epoch).map(|e| e.val_loss)
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// A header line followed by one JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = TraceHeader {
            schema_version: TRACE_SCHEMA_VERSION,
            best_epoch: self.best_epoch,
            stop_epoch: self.stop_epoch,
            weights: self.weights,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TraceHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::Parse("empty trace".into()))?)?;
        if header.schema_version != TRACE_SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported trace schema {}", header.schema_version)));
        }
        let epochs = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { epochs, best_epoch: header.best_epoch, stop_epoch: header.stop_epoch, weights: header.weights })
    }
}

/// Anything that can be fed to the encoder.
pub trait Inputs<T> {
    fn rows(&self) -> usize;
    fn steps(&self) -> usize;
    fn series_buf(&self) -> &[T];
    fn meta_buf(&self) -> &[T];
}

impl<T: Scalar> Inputs<T> for SampleSet<T> {
    fn rows(&self) -> usize {
        self.len()
    }
    fn steps(&self) -> usize {
        self.t
    }
    fn series_buf(&self) -> &[T] {
        &self.x
    }
    fn meta_buf(&self) -> &[T] {
        &self.m
    }
}

impl<T: Scalar> Inputs<T> for Unlabeled<T> {
    fn rows(&self) -> usize {
        self.len()
    }
    fn steps(&self) -> usize {
        self.t
    }
    fn series_buf(&self) -> &[T] {
        &self.x
    }
    fn meta_buf(&self) -> &[T] {
        &self.m
    }
}

const EVAL_CHUNK: usize = 128;

/// Eval-mode embeddings, computed in chunks.
pub fn embed_inputs<T: Scalar, I: Inputs<T> + ?Sized>(params: &ModelParams<T>, data: &I) -> Result<Embedding<T>> {
    let (n, t) = (data.rows(), data.steps());
    let fx = params.cfg.ts_features * t;
    let fm = params.cfg.meta_features;
    let mut out = Embedding { rows: 0, dim: params.emb_dim(), data: Vec::with_capacity(n * params.emb_dim()) };
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let e = params.encode(
            &data.series_buf()[start * fx..end * fx],
            &data.meta_buf()[start * fm..end * fm],
            end - start,
            t,
            Mode::Eval,
        )?;
        out.data.extend_from_slice(&e.data);
        out.rows += e.rows;
        start = end;
    }
    Ok(out)
}

/// Eval-mode predictions for every row.
pub fn predict_inputs<T: Scalar, I: Inputs<T> + ?Sized>(params: &ModelParams<T>, data: &I) -> Result<Vec<T>> {
    if data.rows() == 0 {
        return Ok(Vec::new());
    }
    Ok(params.predict(&embed_inputs(params, data)?))
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

/// Regression metrics of `params` on a labeled, processed test set.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, test: &SampleSet<T>) -> Result<MetricRecord> {
    if !test.processed {
        return Err(invalid_arg!("test set must be processed with the training scaler"));
    }
    if test.is_empty() {
        return Err(invalid_arg!("empty test set"));
    }
    let yhat = predict_inputs(params, test)?;
    metric_record(&to_f64(&test.y), &to_f64(&yhat), DEFAULT_BINS)
}

pub(crate) fn mse_of<T: Scalar>(params: &ModelParams<T>, set: &SampleSet<T>) -> Result<f64> {
    let yhat = predict_inputs(params, set)?;
    Ok(set.y.iter().zip(&yhat).map(|(y, p)| (y.f64() - p.f64()).powi(2)).sum::<f64>() / set.len() as f64)
}

pub(crate) struct Batch<T> {
    pub x: Vec<T>,
    pub m: Vec<T>,
    pub y: Vec<T>,
}

pub(crate) fn gather<T: Scalar>(set: &SampleSet<T>, idx: &[usize]) -> Batch<T> {
    let mut x = Vec::with_capacity(idx.len() * set.t * set.f_ts());
    let mut m = Vec::with_capacity(idx.len() * set.f_meta());
    for &i in idx {
        x.extend_from_slice(set.series(i));
        m.extend_from_slice(set.meta(i));
    }
    Batch { x, m, y: idx.iter().map(|&i| set.y[i]).collect() }
}

/// Shuffled `(train, validation)` index split; validation gets
/// `round(frac·n)` samples, at least one.
pub(crate) fn split_indices(idx: &[usize], frac: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut v = idx.to_vec();
    v.shuffle(rng);
    let n_val = ((frac * v.len() as f64).round() as usize).clamp(1, v.len().saturating_sub(1).max(1));
    let mut val = v[..n_val].to_vec();
    let mut train = v[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

pub(crate) fn check_supervised_size(n: usize, cfg: &TrainConfig) -> Result<()> {
    if (n as f64) < 2.0 / cfg.validation_fraction {
        return Err(invalid_arg!(
            "{n} samples are too few for a validation fraction of {}",
            cfg.validation_fraction
        ));
    }
    Ok(())
}

pub(crate) fn check_layout<T: Scalar>(net: &NetConfig, set: &SampleSet<T>) -> Result<()> {
    if !set.processed {
        return Err(invalid_arg!("training needs a processed sample set"));
    }
    if net.ts_features != set.f_ts() || net.meta_features != set.f_meta() {
        return Err(invalid_arg!(
            "network expects {}/{} features, data has {}/{}",
            net.ts_features,
            net.meta_features,
            set.f_ts(),
            set.f_meta()
        ));
    }
    set.validate()
}

/// Keeps the best parameters seen after the first epoch and decides when to stop.
pub(crate) struct EarlyStopper<T> {
    patience: usize,
    best: Option<(usize, f64, ModelParams<T>)>,
}

impl<T: Scalar> EarlyStopper<T> {
    pub(crate) fn new(patience: usize) -> Self {
        Self { patience, best: None }
    }

    /// Returns `true` when training should stop.
    pub(crate) fn observe(&mut self, epoch: usize, val: f64, params: &ModelParams<T>) -> bool {
        let improved = match &self.best {
            None => true,
            Some((_, b, _)) => val < *b,
        };
        if improved && val.is_finite() {
            self.best = Some((epoch, val, params.clone()));
        }
        match &self.best {
            Some((b, _, _)) => epoch - b >= self.patience,
            None => epoch >= self.patience,
        }
    }

    pub(crate) fn finish(self, fallback: ModelParams<T>) -> (ModelParams<T>, usize) {
        match self.best {
            Some((e, _, p)) => (p, e),
            None => (fallback, 0),
        }
    }
}

/// Value of an extra objective on one batch.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct AuxLoss {
    pub raw: f64,
    pub weighted: f64,
    pub penalty: Option<f64>,
}

/// Extra per-batch objective attached to the supervised loop.
pub(crate) trait Alignment<T: Scalar> {
    /// Adds this term's gradient with respect to the source embedding to
    /// `d_src` and any other encoder gradients to `grads`.
    fn batch(
        &mut self,
        params: &mut ModelParams<T>,
        src_emb: &Embedding<T>,
        d_src: &mut [T],
        grads: &mut ModelParams<T>,
    ) -> Result<AuxLoss>;
}

pub(crate) struct NoAlignment;

impl<T: Scalar> Alignment<T> for NoAlignment {
    fn batch(&mut self, _: &mut ModelParams<T>, _: &Embedding<T>, _: &mut [T], _: &mut ModelParams<T>) -> Result<AuxLoss> {
        Ok(AuxLoss::default())
    }
}

/// MSE training of the trainable, non-discriminator layers with early
/// stopping on `val`.
pub(crate) fn fit_supervised<T: Scalar, A: Alignment<T>>(
    mut params: ModelParams<T>,
    train: &SampleSet<T>,
    val: &SampleSet<T>,
    cfg: &TrainConfig,
    seed: u64,
    mut align: Option<A>,
) -> Result<(ModelParams<T>, TrainTrace)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(invalid_arg!("training and validation sets must be non-empty"));
    }
    let mut batch_rng = stream(seed, "batches");
    let mut drop_rng = stream(seed, "dropout");
    let mut opt = Adam::new(cfg.adam(), generator_layers)?;
    let mut grads = params.zeros_like();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut epochs = vec![EpochRecord::initial(mse_of(&params, val)?, None)];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (t, bs) = (train.t, cfg.batch_size);
    let mut stop_epoch = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut batch_rng);
        let (mut sum_mse, mut n_batches) = (0.0, 0usize);
        let (mut sum_raw, mut sum_weighted, mut sum_pen, mut has_pen) = (0.0, 0.0, 0.0, false);
        for chunk in order.chunks(bs) {
            let b = gather(train, chunk);
            let rows = chunk.len();
            let (emb, tape) = params.encode_train(&b.x, &b.m, rows, t, &mut drop_rng)?;
            params.absorb_batch_stats(&tape);
            let yhat = params.predict(&emb);
            let inv = T::of(2.0 / rows as f64);
            let mut l = 0.0;
            let dy: Vec<T> = yhat
                .iter()
                .zip(&b.y)
                .map(|(&p, &y)| {
                    l += (p - y).f64().powi(2);
                    (p - y) * inv
                })
                .collect();
            sum_mse += l / rows as f64;
            let mut d_emb = params.predictor.backward(&emb.data, &dy, rows, &mut grads.predictor, true).expect("requested");
            if let Some(a) = align.as_mut() {
                let aux = a.batch(&mut params, &emb, &mut d_emb, &mut grads)?;
                sum_raw += aux.raw;
                sum_weighted += aux.weighted;
                if let Some(p) = aux.penalty {
                    sum_pen += p;
                    has_pen = true;
                }
            }
            params.encoder_backward(&tape, &d_emb, &mut grads);
            opt.step(&mut params, &grads);
            grads.zero();
            n_batches += 1;
        }
        let val_loss = mse_of(&params, val)?;
        let nb = n_batches as f64;
        epochs.push(EpochRecord {
            epoch,
            l_mse: Some(sum_mse / nb),
            l_cse: None,
            l_gll: None,
            l_aux: align.as_ref().map(|_| sum_raw / nb),
            l_penalty: has_pen.then_some(sum_pen / nb),
            l_total: Some((sum_mse + sum_weighted) / nb),
            disc_cse: None,
            disc_gll: None,
            val_loss,
            disc_acc: None,
        });
        stop_epoch = epoch;
        if stopper.observe(epoch, val_loss, &params) {
            break;
        }
    }
    let (best, best_epoch) = stopper.finish(params);
    Ok((best, TrainTrace { epochs, best_epoch, stop_epoch, weights: None }))
}

/// Fresh model with the predictor bias at the mean training label.
pub(crate) fn fresh_model<T: Scalar>(net: &NetConfig, train: &SampleSet<T>, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::init(net, crate::seeds::sub_seed(seed, "init"))?;
    let mean = train.y.iter().map(|v| v.f64()).sum::<f64>() / train.len().max(1) as f64;
    params.predictor.b[0] = T::of(mean);
    Ok(params)
}

/// Supervised training from scratch with an internal validation split.
pub fn train_supervised<T: Scalar>(
    train: &SampleSet<T>,
    net: &NetConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<T>, TrainTrace)> {
    cfg.validate()?;
    check_layout(net, train)?;
    check_supervised_size(train.len(), cfg)?;
    let all: Vec<usize> = (0..train.len()).collect();
    let (tr, va) = split_indices(&all, cfg.validation_fraction, &mut stream(seed, "split"));
    let (tr, va) = (train.select(&tr), train.select(&va));
    let params = fresh_model(net, &tr, seed)?;
    fit_supervised(params, &tr, &va, cfg, seed, None::<NoAlignment>)
}

/// Supervised training from scratch, early-stopped on an external validation set.
pub fn train_supervised_validated<T: Scalar>(
    train: &SampleSet<T>,
    val: &SampleSet<T>,
    net: &NetConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<T>, TrainTrace)> {
    check_layout(net, train)?;
    check_layout(net, val)?;
    let params = fresh_model(net, train, seed)?;
    fit_supervised(params, train, val, cfg, seed, None::<NoAlignment>)
}

/// Supervised training on silver-labelled source data.
pub fn pretrain<T: Scalar>(
    source: &SampleSet<T>,
    net: &NetConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<T>, TrainTrace)> {
    if source.grade != LabelGrade::Silver {
        return Err(invalid_arg!("pretraining expects silver-standard source labels"));
    }
    train_supervised(source, net, cfg, seed)
}

fn check_freeze_plan<T: Scalar>(params: &ModelParams<T>) -> Result<()> {
    if params.frozen_layers() != [LayerId::Recurrent(0), LayerId::MetaDense] {
        return Err(Error::InvalidState("the freeze plan must be applied before adaptation".into()));
    }
    Ok(())
}

/// MSE-only training of the unfrozen layers on gold target data.
pub fn finetune<T: Scalar>(
    pretrained: &ModelParams<T>,
    target_train: &SampleSet<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<T>, TrainTrace)> {
    check_freeze_plan(pretrained)?;
    cfg.validate()?;
    check_layout(&pretrained.cfg, target_train)?;
    check_supervised_size(target_train.len(), cfg)?;
    let all: Vec<usize> = (0..target_train.len()).collect();
    let (tr, va) = split_indices(&all, cfg.validation_fraction, &mut stream(seed, "split"));
    fit_supervised(
        pretrained.clone(),
        &target_train.select(&tr),
        &target_train.select(&va),
        cfg,
        seed,
        None::<NoAlignment>,
    )
}

/// `round(frac·n)` with halves rounded up.
pub fn injection_count(frac: f64, n_target: usize) -> usize {
    (frac * n_target as f64 + 0.5 + 1e-9).floor() as usize
}

/// Concatenates `target_train` with a uniform draw of injected source samples.
pub fn mix_domains<T: Scalar>(
    target_train: &SampleSet<T>,
    source_pool: &SampleSet<T>,
    injection_frac: f64,
    seed: u64,
) -> Result<(SampleSet<T>, DomainAssignment)> {
    if !(injection_frac >= 0.0 && injection_frac.is_finite()) {
        return Err(invalid_arg!("injection fraction must be non-negative"));
    }
    let count = injection_count(injection_frac, target_train.len());
    if count > source_pool.len() {
        return Err(invalid_arg!("need {count} injected samples but the source pool holds {}", source_pool.len()));
    }
    let mut rng = stream(seed, "inject");
    let picked = index::sample(&mut rng, source_pool.len(), count).into_vec();
    let mut mixed = target_train.clone();
    mixed.domain.iter_mut().for_each(|d| *d = Domain::Target);
    if count > 0 {
        let mut injected = source_pool.select(&picked);
        injected.domain.iter_mut().for_each(|d| *d = Domain::Source);
        mixed = mixed.concat(&injected)?;
    }
    let mut y_c = vec![1u8; target_train.len()];
    y_c.extend(std::iter::repeat_n(0u8, count));
    Ok((mixed, DomainAssignment { y_c, y_d: Vec::new() }))
}

/// Fills `y_d` with the population moments of each domain's labels.
pub fn assign_distribution_labels<T: Scalar>(mixed: &SampleSet<T>, assignment: &DomainAssignment) -> Result<DomainAssignment> {
    if assignment.y_c.len() != mixed.len() {
        return Err(invalid_arg!("assignment covers {} samples, set has {}", assignment.y_c.len(), mixed.len()));
    }
    let mut moments = [(0.0, 0.0); 2];
    for tag in 0..2u8 {
        let ys: Vec<f64> = mixed.y.iter().zip(&assignment.y_c).filter(|(_, &c)| c == tag).map(|(y, _)| y.f64()).collect();
        if ys.is_empty() {
            continue;
        }
        if ys.len() < 2 {
            return Err(invalid_arg!("domain {tag} has fewer than two samples"));
        }
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(invalid_arg!("domain {tag} labels have zero variance"));
        }
        moments[tag as usize] = (mean, var);
    }
    Ok(DomainAssignment {
        y_c: assignment.y_c.clone(),
        y_d: assignment.y_c.iter().map(|&c| moments[c as usize]).collect(),
    })
}

/// Balanced accuracy of the coarse discriminator: mean of per-domain hit rates.
pub fn coarse_balanced_accuracy<T: Scalar>(
    params: &ModelParams<T>,
    target: &Unlabeled<T>,
    source: &Unlabeled<T>,
) -> Result<f64> {
    if target.is_empty() || source.is_empty() {
        return Err(invalid_arg!("balanced accuracy needs both domains"));
    }
    let half = T::of(0.5);
    let pt = params.disc_coarse(&embed_inputs(params, target)?);
    let ps = params.disc_coarse(&embed_inputs(params, source)?);
    let tpr = pt.iter().filter(|&&p| p >= half).count() as f64 / pt.len() as f64;
    let tnr = ps.iter().filter(|&&p| p < half).count() as f64 / ps.len() as f64;
    Ok(0.5 * (tpr + tnr))
}

/// Held-out inputs used to monitor the coarse discriminator during adaptation.
pub struct Monitor<'a, T> {
    pub source: &'a Unlabeled<T>,
}

/// Result of an adaptation run, including the split it used.
pub struct AdaptOutcome<T> {
    pub params: ModelParams<T>,
    pub trace: TrainTrace,
    /// Indices into the mixed set used for gradient steps.
    pub train_idx: Vec<usize>,
    /// Target-only validation indices.
    pub val_idx: Vec<usize>,
}

/// Alternating adversarial adaptation; see [`adapt_udama_with`].
pub fn adapt_udama<T: Scalar>(
    pretrained: &ModelParams<T>,
    mixed: &SampleSet<T>,
    assignment: &DomainAssignment,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<T>, TrainTrace)> {
    let out = adapt_udama_with(pretrained, mixed, assignment, cfg, seed, None)?;
    Ok((out.params, out.trace))
}

/// Runs one discriminator step and one adversarial step per mini-batch.
///
/// Both heads are re-drawn at the start; the fine head's output bias starts at
/// the mean domain moments. A head whose weight is zero is left out entirely.
pub fn adapt_udama_with<T: Scalar>(
    pretrained: &ModelParams<T>,
    mixed: &SampleSet<T>,
    assignment: &DomainAssignment,
    cfg: &TrainConfig,
    seed: u64,
    monitor: Option<Monitor<'_, T>>,
) -> Result<AdaptOutcome<T>> {
    check_freeze_plan(pretrained)?;
    cfg.validate()?;
    check_layout(&pretrained.cfg, mixed)?;
    let n = mixed.len();
    if assignment.y_c.len() != n || assignment.y_d.len() != n {
        return Err(invalid_arg!("domain assignment does not match the mixed set"));
    }
    let target_idx: Vec<usize> = (0..n).filter(|&i| assignment.y_c[i] == 1).collect();
    if target_idx.len() < 2 {
        return Err(invalid_arg!("adaptation needs at least two target samples"));
    }
    let (tgt_train, val_idx) = split_indices(&target_idx, cfg.validation_fraction, &mut stream(seed, "split"));
    let mut train_idx: Vec<usize> = tgt_train;
    train_idx.extend((0..n).filter(|&i| assignment.y_c[i] == 0));
    train_idx.sort_unstable();
    let val = mixed.select(&val_idx);
    let val_inputs = val.strip_labels();

    let w = cfg.weights;
    let use_coarse = w.lambda1 > 0.0;
    let use_fine = w.lambda2 > 0.0;
    let mut params = pretrained.clone();
    params.reset_discriminators(crate::seeds::sub_seed(seed, "disc-init"));
    let k = train_idx.len() as f64;
    let mu0 = train_idx.iter().map(|&i| assignment.y_d[i].0).sum::<f64>() / k;
    let var0 = train_idx.iter().map(|&i| assignment.y_d[i].1).sum::<f64>() / k;
    params.fine.out.b[0] = T::of(mu0);
    params.fine.out.b[1] = T::of(var0.max(params.cfg.variance_floor).ln());

    let disc_acc = |p: &ModelParams<T>| -> Result<Option<f64>> {
        match &monitor {
            Some(m) if use_coarse => Ok(Some(coarse_balanced_accuracy(p, &val_inputs, m.source)?)),
            _ => Ok(None),
        }
    };

    let mut disc_opt = Adam::new(cfg.adam(), discriminator_layers)?;
    let mut gen_opt = Adam::new(cfg.adam(), generator_layers)?;
    let mut dgrads = params.zeros_like();
    let mut ggrads = params.zeros_like();
    let mut scratch = params.zeros_like();
    let mut batch_rng = stream(seed, "batches");
    let mut drop_rng = stream(seed, "dropout");
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut epochs = vec![EpochRecord::initial(mse_of(&params, &val)?, disc_acc(&params)?)];
    let mut order = train_idx.clone();
    let t = mixed.t;
    let floor = T::of(params.cfg.variance_floor);
    let alpha = T::of(w.alpha);
    let mut stop_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut batch_rng);
        let mut acc = [0.0f64; 6];
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rows = chunk.len();
            let b = gather(mixed, chunk);
            let y_c: Vec<T> = chunk.iter().map(|&i| T::of(assignment.y_c[i] as f64)).collect();
            let gll_t: Vec<T> = chunk
                .iter()
                .map(|&i| match cfg.gll_target {
                    GllTarget::DomainMean => T::of(assignment.y_d[i].0),
                    GllTarget::SampleLabel => mixed.y[i],
                })
                .collect();
            let (emb, tape) = params.encode_train(&b.x, &b.m, rows, t, &mut drop_rng)?;
            params.absorb_batch_stats(&tape);

            // Discriminator step on the detached embedding.
            if use_coarse {
                let (logits, ct) = params.coarse.forward(&emb.data, rows);
                let (l, dl) = cross_entropy_logits(&y_c, &logits)?;
                params.coarse.backward(&emb.data, &ct, &dl, rows, &mut dgrads.coarse, false);
                acc[4] += l.f64();
            }
            if use_fine {
                let (l, d) = fine_loss(&params.fine, &emb, &gll_t, floor)?;
                params.fine.backward(&emb.data, &d.0, &d.1, rows, &mut dgrads.fine, false);
                acc[5] += l;
            }
            disc_opt.step(&mut params, &dgrads);
            dgrads.zero();

            // Adversarial step against the updated discriminators.
            let yhat = params.predict(&emb);
            let inv = T::of(2.0 / rows as f64);
            let mut l_mse = 0.0;
            let dy: Vec<T> = yhat
                .iter()
                .zip(&b.y)
                .map(|(&p, &y)| {
                    l_mse += (p - y).f64().powi(2);
                    alpha * (p - y) * inv
                })
                .collect();
            l_mse /= rows as f64;
            let mut d_emb = params.predictor.backward(&emb.data, &dy, rows, &mut ggrads.predictor, true).expect("requested");
            let mut l_cse = 0.0;
            if use_coarse {
                let (logits, ct) = params.coarse.forward(&emb.data, rows);
                let (l, dl) = cross_entropy_logits(&y_c, &logits)?;
                let scale = -T::of(w.lambda1);
                let dl: Vec<T> = dl.iter().map(|&g| g * scale).collect();
                let de = params.coarse.backward(&emb.data, &ct, &dl, rows, &mut scratch.coarse, true).expect("requested");
                d_emb.iter_mut().zip(&de).for_each(|(a, &g)| *a += g);
                l_cse = l.f64();
            }
            let mut l_gll = 0.0;
            if use_fine {
                let (l, (fo_tape, dfo)) = fine_loss(&params.fine, &emb, &gll_t, floor)?;
                let scale = -T::of(w.lambda2);
                let dfo: Vec<T> = dfo.iter().map(|&g| g * scale).collect();
                let de = params.fine.backward(&emb.data, &fo_tape, &dfo, rows, &mut scratch.fine, true).expect("requested");
                d_emb.iter_mut().zip(&de).for_each(|(a, &g)| *a += g);
                l_gll = l;
            }
            params.encoder_backward(&tape, &d_emb, &mut ggrads);
            gen_opt.step(&mut params, &ggrads);
            ggrads.zero();
            scratch.zero();

            acc[0] += l_mse;
            acc[1] += l_cse;
            acc[2] += l_gll;
            acc[3] += total_adapt_loss(&w, l_mse, l_cse, l_gll)?;
            n_batches += 1;
        }
        let nb = n_batches as f64;
        let val_loss = mse_of(&params, &val)?;
        epochs.push(EpochRecord {
            epoch,
            l_mse: Some(acc[0] / nb),
            l_cse: use_coarse.then_some(acc[1] / nb),
            l_gll: use_fine.then_some(acc[2] / nb),
            l_aux: None,
            l_penalty: None,
            l_total: Some(acc[3] / nb),
            disc_cse: use_coarse.then_some(acc[4] / nb),
            disc_gll: use_fine.then_some(acc[5] / nb),
            val_loss,
            disc_acc: disc_acc(&params)?,
        });
        stop_epoch = epoch;
        if stopper.observe(epoch, val_loss, &params) {
            break;
        }
    }
    let (params, best_epoch) = stopper.finish(params);
    Ok(AdaptOutcome {
        params,
        trace: TrainTrace { epochs, best_epoch, stop_epoch, weights: Some(w) },
        train_idx,
        val_idx,
    })
}

/// Batch Gaussian NLL of the fine head and its output gradient.
#[allow(clippy::type_complexity)]
fn fine_loss<T: Scalar>(
    fine: &Mlp2<T>,
    emb: &Embedding<T>,
    target: &[T],
    floor: T,
) -> Result<(f64, (crate::netgraph::layers::Mlp2Tape<T>, Vec<T>))> {
    let (fo, tape) = fine.forward(&emb.data, emb.rows);
    let (mu, lv): (Vec<T>, Vec<T>) = fo.chunks_exact(2).map(|c| (c[0], c[1])).unzip();
    let (l, dmu, dlv) = gaussian_nll_head(target, &mu, &lv, floor)?;
    let d = dmu.iter().zip(&dlv).flat_map(|(&a, &b)| [a, b]).collect();
    Ok((l.f64(), (tape, d)))
}

/// Trains a freshly initialized coarse head on frozen eval-mode embeddings of
/// `train` for `epochs` passes, returning a copy of `params` that carries it.
pub fn train_probe<T: Scalar>(
    params: &ModelParams<T>,
    train: &SampleSet<T>,
    y_c: &[u8],
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<ModelParams<T>> {
    if y_c.len() != train.len() {
        return Err(invalid_arg!("probe labels do not match the training set"));
    }
    let mut probe = params.clone().freeze_plan();
    probe.reset_discriminators(crate::seeds::sub_seed(seed, "disc-init"));
    for l in probe.layer_ids() {
        probe.set_trainable(l, l == LayerId::Coarse)?;
    }
    let emb = embed_inputs(&probe, train)?;
    let mut opt = Adam::new(cfg.adam(), discriminator_layers)?;
    let mut grads = probe.zeros_like();
    let mut rng = stream(seed, "batches");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let e = emb.select(chunk);
            let yc: Vec<T> = chunk.iter().map(|&i| T::of(y_c[i] as f64)).collect();
            let (logits, tape) = probe.coarse.forward(&e.data, e.rows);
            let (_, dl) = cross_entropy_logits(&yc, &logits)?;
            probe.coarse.backward(&e.data, &tape, &dl, e.rows, &mut grads.coarse, false);
            opt.step(&mut probe, &grads);
            grads.zero();
        }
    }
    let mut out = params.clone();
    out.coarse = probe.coarse;
    Ok(out)
}

/// Probability outputs of the coarse head for each row, eval mode.
pub fn coarse_probabilities<T: Scalar, I: Inputs<T> + ?Sized>(params: &ModelParams<T>, data: &I) -> Result<Vec<T>> {
    Ok(params
        .coarse
        .forward(&embed_inputs(params, data)?.data, data.rows())
        .0
        .into_iter()
        .map(sigmoid)
        .collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_set(n: usize, t: usize, seed: u64, grade: LabelGrade) -> SampleSet<f64> {
        use rand::Rng;
        let mut rng = stream(seed, "toy");
        let mut x = Vec::new();
        let mut m = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let level: f64 = rng.random_range(0.0..1.0);
            for _ in 0..t {
                x.push(level + rng.random_range(-0.05..0.05));
                x.push(rng.random_range(0.0..1.0));
            }
            let a: f64 = rng.random_range(0.0..1.0);
            m.extend([a, rng.random_range(0.0..1.0)]);
            y.push(30.0 + 10.0 * level + 4.0 * a);
        }
        SampleSet {
            x,
            m,
            y,
            domain: vec![Domain::Source; n],
            grade,
            processed: true,
            t,
            ts_channels: vec!["accel".into(), "hr".into()],
            meta_fields: vec!["age".into(), "bmi".into()],
        }
    }

    pub(crate) fn toy_net() -> NetConfig {
        NetConfig {
            ts_features: 2,
            meta_features: 2,
            recurrent_units: 4,
            recurrent_layers: 2,
            meta_hidden: 6,
            dropout: 0.1,
            disc_hidden: 5,
            variance_floor: 1e-6,
        }
    }

    pub(crate) fn quick_cfg() -> TrainConfig {
        TrainConfig { max_epochs: 6, patience: 3, learning_rate: 5e-3, ..TrainConfig::default() }
    }

    #[test]
    fn assignment_moments() {
        let mut s = toy_set(4, 2, 1, LabelGrade::Gold);
        s.y = vec![30.0, 34.0, 40.0, 44.0];
        let a = DomainAssignment { y_c: vec![1, 1, 0, 0], y_d: vec![] };
        let d = assign_distribution_labels(&s, &a).unwrap();
        assert_eq!(d.y_d, vec![(32.0, 4.0), (32.0, 4.0), (42.0, 4.0), (42.0, 4.0)]);
        let single = DomainAssignment { y_c: vec![1, 1, 1, 0], y_d: vec![] };
        assert!(assign_distribution_labels(&s, &single).is_err());
    }

    #[test]
    fn injection_rounds_half_up() {
        assert_eq!(injection_count(0.10, 126), 13);
        assert_eq!(injection_count(0.0, 126), 0);
        assert_eq!(injection_count(0.5, 5), 3);
        assert_eq!(injection_count(1.0, 140), 140);
    }

    #[test]
    fn mixing_tags_and_errors() {
        let tgt = toy_set(10, 3, 1, LabelGrade::Gold);
        let src = toy_set(20, 3, 2, LabelGrade::Silver);
        let (mixed, a) = mix_domains(&tgt, &src, 0.0, 1).unwrap();
        assert_eq!(mixed.len(), 10);
        assert!(a.y_c.iter().all(|&c| c == 1));
        let (mixed, a) = mix_domains(&tgt, &src, 0.5, 1).unwrap();
        assert_eq!(mixed.len(), 15);
        assert_eq!(a.y_c.iter().filter(|&&c| c == 0).count(), 5);
        assert_eq!(mix_domains(&tgt, &src, 0.5, 1).unwrap().0, mixed);
        assert!(mix_domains(&tgt, &src, 3.0, 1).is_err());
    }

    #[test]
    fn pretrain_requires_silver_and_enough_samples() {
        let gold = toy_set(40, 3, 1, LabelGrade::Gold);
        assert!(pretrain(&gold, &toy_net(), &quick_cfg(), 1).is_err());
        let tiny = toy_set(9, 3, 1, LabelGrade::Silver);
        assert!(matches!(pretrain(&tiny, &toy_net(), &quick_cfg(), 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pretrain_improves_and_is_deterministic() {
        let src = toy_set(80, 4, 3, LabelGrade::Silver);
        let (p1, tr1) = pretrain(&src, &toy_net(), &quick_cfg(), 5).unwrap();
        let (p2, tr2) = pretrain(&src, &toy_net(), &quick_cfg(), 5).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(tr1, tr2);
        assert!(tr1.best().val_loss < tr1.epochs[0].val_loss);
        assert!(tr1.stop_epoch - tr1.best_epoch <= 3);
        assert!(tr1.best_epoch >= 1);
    }

    #[test]
    fn adaptation_respects_freeze_and_weights() {
        let src = toy_set(60, 4, 3, LabelGrade::Silver);
        let tgt = toy_set(30, 4, 4, LabelGrade::Gold);
        let (p, _) = pretrain(&src, &toy_net(), &quick_cfg(), 5).unwrap();
        let (mixed, a) = mix_domains(&tgt, &src, 0.3, 2).unwrap();
        let a = assign_distribution_labels(&mixed, &a).unwrap();
        assert!(matches!(adapt_udama(&p, &mixed, &a, &quick_cfg(), 1), Err(Error::InvalidState(_))));
        let frozen = p.freeze_plan();
        let mut bad = quick_cfg();
        bad.weights.lambda2 = 0.5;
        assert!(matches!(adapt_udama(&frozen, &mixed, &a, &bad, 1), Err(Error::InvalidArgument(_))));

        let (q, trace) = adapt_udama(&frozen, &mixed, &a, &quick_cfg(), 1).unwrap();
        assert_eq!(q.rnn[0], frozen.rnn[0]);
        assert_eq!(q.meta_dense, frozen.meta_dense);
        for e in &trace.epochs[1..] {
            let w = LossWeights::default();
            let expect = w.alpha * e.l_mse.unwrap() - w.lambda1 * e.l_cse.unwrap() - w.lambda2 * e.l_gll.unwrap();
            assert!((expect - e.l_total.unwrap()).abs() < 1e-9);
        }

        let mut dann = quick_cfg();
        dann.weights = LossWeights { alpha: 0.01, lambda1: 1.0, lambda2: 0.0 };
        let (_, t2) = adapt_udama(&frozen, &mixed, &a, &dann, 1).unwrap();
        assert!(t2.epochs.iter().all(|e| e.l_gll.is_none() && e.disc_gll.is_none()));
        let text = t2.to_jsonl().unwrap();
        assert_eq!(TrainTrace::from_jsonl(&text).unwrap(), t2);
    }

    #[test]
    fn finetune_keeps_frozen_tensors() {
        let src = toy_set(60, 4, 3, LabelGrade::Silver);
        let tgt = toy_set(30, 4, 4, LabelGrade::Gold);
        let (p, _) = pretrain(&src, &toy_net(), &quick_cfg(), 5).unwrap();
        let p = p.freeze_plan();
        let (q, tr) = finetune(&p, &tgt, &quick_cfg(), 2).unwrap();
        assert_eq!(q.rnn[0], p.rnn[0]);
        assert_eq!(q.meta_dense, p.meta_dense);
        assert!(tr.best().val_loss <= tr.epochs[0].val_loss);
    }

    #[test]
    fn evaluate_perfect_and_constant() {
        let mut p = init_params_for_test();
        let set = toy_set(12, 3, 9, LabelGrade::Gold);
        p.predictor.w.iter_mut().for_each(|v| *v = 0.0);
        let mean = set.y.iter().sum::<f64>() / 12.0;
        p.predictor.b[0] = mean;
        let r = evaluate(&p, &set).unwrap();
        assert!(r.corr.is_none());
        assert!(r.r2.abs() < 1e-12);
    }

    fn init_params_for_test() -> ModelParams<f64> {
        ModelParams::init(&toy_net(), 1).unwrap()
    }
}
