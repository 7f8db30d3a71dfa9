//! Comparison methods sharing the encoder, preprocessing, early stopping and
//! evaluation path of the adversarial model.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, Error, Result};
use crate::netgraph::adam::{coarse_layer, recurrent_layers, Adam};
use crate::netgraph::layers::{BiGru, BiGruTape, Dense, Mlp2};
use crate::netgraph::{Embedding, EncoderTape, ModelParams, NetConfig};
use crate::objectives::LossWeights;
use crate::scalar::Scalar;
use crate::seeds::stream;
use crate::synthcohort::SampleSet;
use crate::trainer::{
    adapt_udama, check_layout, check_supervised_size, fit_supervised, fresh_model, gather, split_indices, Alignment, AuxLoss,
    DomainAssignment, EarlyStopper, EpochRecord, NoAlignment, TrainConfig, TrainTrace,
};

pub use crate::trainer::train_supervised;

/// Methods the adversarial model is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    InDomainSupervised,
    OutOfDomainSupervised,
    Transfer,
    Autoencoder,
    DeepCoral,
    Wdgrl,
    Dann,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 7] = [
        BaselineKind::InDomainSupervised,
        BaselineKind::OutOfDomainSupervised,
        BaselineKind::Transfer,
        BaselineKind::Autoencoder,
        BaselineKind::DeepCoral,
        BaselineKind::Wdgrl,
        BaselineKind::Dann,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::InDomainSupervised => "in_domain_supervised",
            BaselineKind::OutOfDomainSupervised => "out_of_domain_supervised",
            BaselineKind::Transfer => "transfer",
            BaselineKind::Autoencoder => "autoencoder",
            BaselineKind::DeepCoral => "deep_coral",
            BaselineKind::Wdgrl => "wdgrl",
            BaselineKind::Dann => "dann",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid_arg!("unknown baseline `{s}`"))
    }
}

// ---------------------------------------------------------------------------
// Recurrent autoencoder

/// Mirror of the recurrent encoder: the pooled code is repeated over time,
/// passed through a BiGRU stack and projected back to the channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentDecoder<T> {
    pub rnn: Vec<BiGru<T>>,
    pub out: Dense<T>,
}

struct DecoderTape<T> {
    inputs: Vec<Vec<T>>,
    rnn: Vec<BiGruTape<T>>,
    top: Vec<T>,
}

struct SeriesTape<T> {
    inputs: Vec<Vec<T>>,
    rnn: Vec<BiGruTape<T>>,
}

impl<T: Scalar> RecurrentDecoder<T> {
    pub fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.recurrent_units;
        Self {
            rnn: (0..cfg.recurrent_layers).map(|_| BiGru::init(2 * h, h, rng)).collect(),
            out: Dense::init(2 * h, cfg.ts_features, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            rnn: self.rnn.iter().map(|g| BiGru::zeros(g.fwd.n_in, g.fwd.hidden)).collect(),
            out: Dense::zeros(self.out.n_in, self.out.n_out),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for g in &mut self.rnn {
            for c in [&mut g.fwd, &mut g.bwd] {
                v.extend([&mut c.w_ih[..], &mut c.w_hh[..], &mut c.b_ih[..], &mut c.b_hh[..]]);
            }
        }
        v.extend([&mut self.out.w[..], &mut self.out.b[..]]);
        v
    }

    fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for g in &self.rnn {
            for c in [&g.fwd, &g.bwd] {
                v.extend([&c.w_ih[..], &c.w_hh[..], &c.b_ih[..], &c.b_hh[..]]);
            }
        }
        v.extend([&self.out.w[..], &self.out.b[..]]);
        v
    }

    /// Reconstruction `rows×steps×F_ts` from pooled codes `rows×2H`.
    pub fn decode(&self, code: &[T], rows: usize, steps: usize) -> Vec<T> {
        self.forward(code, rows, steps, false).0
    }

    fn forward(&self, code: &[T], rows: usize, steps: usize, keep_tape: bool) -> (Vec<T>, DecoderTape<T>) {
        let w = code.len() / rows.max(1);
        let mut z = Vec::with_capacity(rows * steps * w);
        for r in 0..rows {
            for _ in 0..steps {
                z.extend_from_slice(&code[r * w..(r + 1) * w]);
            }
        }
        let mut tape = DecoderTape { inputs: Vec::new(), rnn: Vec::new(), top: Vec::new() };
        for g in &self.rnn {
            let (o, t) = g.forward(&z, rows, steps, keep_tape);
            if keep_tape {
                tape.inputs.push(std::mem::replace(&mut z, o));
                tape.rnn.push(t.expect("tape requested"));
            } else {
                z = o;
            }
        }
        let y = self.out.forward(&z, rows * steps);
        tape.top = z;
        (y, tape)
    }

    /// Accumulates decoder gradients and returns the gradient of the pooled code.
    fn backward(&self, tape: &DecoderTape<T>, dy: &[T], rows: usize, steps: usize, grad: &mut Self) -> Vec<T> {
        let mut d = self.out.backward(&tape.top, dy, rows * steps, &mut grad.out, true).expect("requested");
        for l in (0..self.rnn.len()).rev() {
            d = self.rnn[l]
                .backward(&tape.inputs[l], &tape.rnn[l], &d, rows, steps, &mut grad.rnn[l], true)
                .expect("requested");
        }
        let w = d.len() / (rows * steps).max(1);
        let mut dc = vec![T::zero(); rows * w];
        for r in 0..rows {
            for s in 0..steps {
                let src = &d[(r * steps + s) * w..(r * steps + s + 1) * w];
                dc[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
        }
        dc
    }
}

/// Mean-pooled output of the encoder's recurrent stack, `rows×2H`.
fn encode_series<T: Scalar>(params: &ModelParams<T>, x: &[T], rows: usize, steps: usize, keep_tape: bool) -> (Vec<T>, SeriesTape<T>) {
    let mut z = x.to_vec();
    let mut tape = SeriesTape { inputs: Vec::new(), rnn: Vec::new() };
    for g in &params.rnn {
        let (o, t) = g.forward(&z, rows, steps, keep_tape);
        if keep_tape {
            tape.inputs.push(std::mem::replace(&mut z, o));
            tape.rnn.push(t.expect("tape requested"));
        } else {
            z = o;
        }
    }
    let w = 2 * params.cfg.recurrent_units;
    let inv_t = T::one() / T::of_usize(steps);
    let mut pooled = vec![T::zero(); rows * w];
    for r in 0..rows {
        for s in 0..steps {
            let src = &z[(r * steps + s) * w..(r * steps + s + 1) * w];
            pooled[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, &b)| *a += b * inv_t);
        }
    }
    (pooled, tape)
}

fn series_backward<T: Scalar>(params: &ModelParams<T>, tape: &SeriesTape<T>, d_pooled: &[T], rows: usize, steps: usize, grads: &mut ModelParams<T>) {
    let w = 2 * params.cfg.recurrent_units;
    let inv_t = T::one() / T::of_usize(steps);
    let mut d = Vec::with_capacity(rows * steps * w);
    for r in 0..rows {
        for _ in 0..steps {
            d.extend(d_pooled[r * w..(r + 1) * w].iter().map(|&v| v * inv_t));
        }
    }
    for l in (0..params.rnn.len()).rev() {
        match params.rnn[l].backward(&tape.inputs[l], &tape.rnn[l], &d, rows, steps, &mut grads.rnn[l], l > 0) {
            Some(v) => d = v,
            None => break,
        }
    }
}

/// Series reconstruction through the encoder's recurrent stack and `decoder`.
pub fn reconstruct<T: Scalar>(params: &ModelParams<T>, decoder: &RecurrentDecoder<T>, x: &[T], rows: usize, steps: usize) -> Vec<T> {
    let (code, _) = encode_series(params, x, rows, steps, false);
    decoder.decode(&code, rows, steps)
}

fn reconstruction_mse<T: Scalar>(params: &ModelParams<T>, decoder: &RecurrentDecoder<T>, set: &SampleSet<T>) -> f64 {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(128) {
        let b = gather(set, chunk);
        let y = reconstruct(params, decoder, &b.x, chunk.len(), set.t);
        sum += y.iter().zip(&b.x).map(|(p, x)| (p.f64() - x.f64()).powi(2)).sum::<f64>();
    }
    sum / (set.len() * set.t * set.f_ts()) as f64
}

/// Pretrains the recurrent encoder as a sequence autoencoder on the source
/// series and discards the decoder.
///
/// The trace records the training reconstruction loss as `l_aux` and the
/// held-out reconstruction loss as `val_loss`. The predictor bias is set to
/// the mean source label so that fine-tuning starts from a sensible offset.
pub fn train_autoencoder_pretrain<T: Scalar>(
    source: &SampleSet<T>,
    net: &NetConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<T>, TrainTrace)> {
    cfg.validate()?;
    check_layout(net, source)?;
    check_supervised_size(source.len(), cfg)?;
    let all: Vec<usize> = (0..source.len()).collect();
    let (tr, va) = split_indices(&all, cfg.validation_fraction, &mut stream(seed, "split"));
    let (train, val) = (source.select(&tr), source.select(&va));
    let mut params = fresh_model(net, &train, seed)?;
    let mut decoder = RecurrentDecoder::init(net, &mut stream(seed, "decoder-init"));

    let mut enc_opt = Adam::new(cfg.adam(), recurrent_layers)?;
    let mut dec_opt = Adam::new(cfg.adam(), |_| true)?;
    let mut grads = params.zeros_like();
    let mut dgrads = decoder.zeros_like();
    let mut batch_rng = stream(seed, "batches");
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut epochs = vec![EpochRecord::initial(reconstruction_mse(&params, &decoder, &val), None)];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let t = train.t;
    let mut stop_epoch = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut batch_rng);
        let (mut sum, mut n_batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let rows = chunk.len();
            let b = gather(&train, chunk);
            let (code, etape) = encode_series(&params, &b.x, rows, t, true);
            let (y, dtape) = decoder.forward(&code, rows, t, true);
            let inv = T::of(2.0 / y.len() as f64);
            let mut l = 0.0;
            let dy: Vec<T> = y
                .iter()
                .zip(&b.x)
                .map(|(&p, &x)| {
                    l += (p - x).f64().powi(2);
                    (p - x) * inv
                })
                .collect();
            sum += l / y.len() as f64;
            let dc = decoder.backward(&dtape, &dy, rows, t, &mut dgrads);
            series_backward(&params, &etape, &dc, rows, t, &mut grads);
            enc_opt.step(&mut params, &grads);
            {
                let g = dgrads.tensors();
                dec_opt.step_tensors(decoder.tensors_mut(), &g);
            }
            grads.zero();
            for v in dgrads.tensors_mut() {
                v.iter_mut().for_each(|x| *x = T::zero());
            }
            n_batches += 1;
        }
        let val_loss = reconstruction_mse(&params, &decoder, &val);
        let mut rec = EpochRecord::initial(val_loss, None);
        rec.epoch = epoch;
        rec.l_aux = Some(sum / n_batches as f64);
        rec.l_total = rec.l_aux;
        epochs.push(rec);
        stop_epoch = epoch;
        if stopper.observe(epoch, val_loss, &params) {
            break;
        }
    }
    let (params, best_epoch) = stopper.finish(params);
    Ok((params, TrainTrace { epochs, best_epoch, stop_epoch, weights: None }))
}

// ---------------------------------------------------------------------------
// Deep-CORAL

fn centered_covariance(data: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for r in data.chunks_exact(d) {
        mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v / rows as f64);
    }
    let xc: Vec<f64> = data.chunks_exact(d).flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let mut cov = vec![0.0; d * d];
    for r in xc.chunks_exact(d) {
        for i in 0..d {
            let ri = r[i];
            for (c, &rj) in cov[i * d..(i + 1) * d].iter_mut().zip(r) {
                *c += ri * rj;
            }
        }
    }
    let inv = 1.0 / (rows - 1) as f64;
    cov.iter_mut().for_each(|c| *c *= inv);
    (xc, cov)
}

fn check_coral<T>(a: &Embedding<T>, b: &Embedding<T>) -> Result<()> {
    if a.rows < 2 || b.rows < 2 {
        return Err(invalid_arg!("covariance alignment needs at least two rows per batch"));
    }
    if a.dim != b.dim {
        return Err(invalid_arg!("embedding widths differ: {} vs {}", a.dim, b.dim));
    }
    Ok(())
}

/// `‖C_s − C_t‖²_F / (4d²)` with unbiased batch covariances.
pub fn coral_loss<T: Scalar>(emb_s: &Embedding<T>, emb_t: &Embedding<T>) -> Result<f64> {
    Ok(coral_loss_grad(emb_s, emb_t)?.0)
}

/// Loss and gradients with respect to both embeddings.
pub fn coral_loss_grad<T: Scalar>(emb_s: &Embedding<T>, emb_t: &Embedding<T>) -> Result<(f64, Vec<T>, Vec<T>)> {
    check_coral(emb_s, emb_t)?;
    let d = emb_s.dim;
    let to64 = |e: &Embedding<T>| e.data.iter().map(|v| v.f64()).collect::<Vec<f64>>();
    let (xs, cs) = centered_covariance(&to64(emb_s), emb_s.rows, d);
    let (xt, ct) = centered_covariance(&to64(emb_t), emb_t.rows, d);
    let diff: Vec<f64> = cs.iter().zip(&ct).map(|(a, b)| a - b).collect();
    let scale = 4.0 * (d * d) as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / scale;
    // dL/dX = ±Xc·(C_s − C_t) / (d²(n − 1)); centering drops out because Xc has zero column sums.
    let grad = |xc: &[f64], rows: usize, sign: f64| -> Vec<T> {
        let k = sign / ((d * d) as f64 * (rows - 1) as f64);
        let mut g = vec![T::zero(); rows * d];
        for (r, out) in xc.chunks_exact(d).zip(g.chunks_exact_mut(d)) {
            for (j, o) in out.iter_mut().enumerate() {
                let s: f64 = r.iter().enumerate().map(|(i, &v)| v * diff[i * d + j]).sum();
                *o = T::of(k * s);
            }
        }
        g
    };
    Ok((loss, grad(&xs, emb_s.rows, 1.0), grad(&xt, emb_t.rows, -1.0)))
}

/// Cycles through shuffled target rows and encodes them in training mode.
struct TargetFeed<'a, T> {
    target: &'a SampleSet<T>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl<'a, T: Scalar> TargetFeed<'a, T> {
    fn new(target: &'a SampleSet<T>, seed: u64, name: &str) -> Self {
        let mut rng = stream(seed, name);
        let mut order: Vec<usize> = (0..target.len()).collect();
        order.shuffle(&mut rng);
        Self { target, order, pos: 0, rng, dropout: stream(seed, &format!("{name}-dropout")) }
    }

    fn next(&mut self, params: &mut ModelParams<T>, rows: usize) -> Result<(Embedding<T>, EncoderTape<T>)> {
        let rows = rows.min(self.order.len());
        let mut idx = Vec::with_capacity(rows);
        while idx.len() < rows {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            idx.push(self.order[self.pos]);
            self.pos += 1;
        }
        let b = gather(self.target, &idx);
        let (emb, tape) = params.encode_train(&b.x, &b.m, rows, self.target.t, &mut self.dropout)?;
        params.absorb_batch_stats(&tape);
        Ok((emb, tape))
    }
}

struct CoralAlignment<'a, T> {
    feed: TargetFeed<'a, T>,
    weight: f64,
}

impl<T: Scalar> Alignment<T> for CoralAlignment<'_, T> {
    fn batch(&mut self, params: &mut ModelParams<T>, src: &Embedding<T>, d_src: &mut [T], grads: &mut ModelParams<T>) -> Result<AuxLoss> {
        if src.rows < 2 {
            return Ok(AuxLoss::default());
        }
        let (tgt, tape) = self.feed.next(params, src.rows)?;
        let (l, ds, dt) = coral_loss_grad(src, &tgt)?;
        let w = T::of(self.weight);
        d_src.iter_mut().zip(&ds).for_each(|(a, &g)| *a += w * g);
        let dt: Vec<T> = dt.iter().map(|&g| w * g).collect();
        params.encoder_backward(&tape, &dt, grads);
        Ok(AuxLoss { raw: l, weighted: self.weight * l, penalty: None })
    }
}

/// Split of the labelled target training set into unlabelled inputs used for
/// alignment and a labelled validation part used only for early stopping.
fn target_split<T: Scalar>(target_train: &SampleSet<T>, cfg: &TrainConfig, seed: u64) -> Result<(SampleSet<T>, SampleSet<T>)> {
    check_supervised_size(target_train.len(), cfg)?;
    let all: Vec<usize> = (0..target_train.len()).collect();
    let (tr, va) = split_indices(&all, cfg.validation_fraction, &mut stream(seed, "split"));
    Ok((target_train.select(&tr), target_train.select(&va)))
}

/// Source-supervised training with a covariance alignment term between
/// per-batch source and target embeddings.
///
/// Target labels are used only for early stopping on a held-out part of
/// `target_train`. With `coral_weight == 0` no target batches are drawn, so the
/// run is identical to [`crate::trainer::train_supervised_validated`] on the
/// same split.
pub fn train_deep_coral<T: Scalar>(
    source: &SampleSet<T>,
    target_train: &SampleSet<T>,
    net: &NetConfig,
    cfg: &TrainConfig,
    coral_weight: f64,
    seed: u64,
) -> Result<(ModelParams<T>, TrainTrace)> {
    if !(coral_weight >= 0.0 && coral_weight.is_finite()) {
        return Err(invalid_arg!("coral weight must be non-negative, got {coral_weight}"));
    }
    cfg.validate()?;
    check_layout(net, source)?;
    check_layout(net, target_train)?;
    let (tgt, val) = target_split(target_train, cfg, seed)?;
    let params = fresh_model(net, source, seed)?;
    if coral_weight == 0.0 {
        return fit_supervised(params, source, &val, cfg, seed, None::<NoAlignment>);
    }
    let align = CoralAlignment { feed: TargetFeed::new(&tgt, seed, "coral-batches"), weight: coral_weight };
    fit_supervised(params, source, &val, cfg, seed, Some(align))
}

// ---------------------------------------------------------------------------
// WDGRL

/// `mean critic(source) − mean critic(target)`.
pub fn wasserstein_estimate<T: Scalar>(critic: &Mlp2<T>, emb_s: &Embedding<T>, emb_t: &Embedding<T>) -> Result<f64> {
    if emb_s.rows == 0 || emb_t.rows == 0 || emb_s.dim != emb_t.dim {
        return Err(invalid_arg!("critic needs two non-empty batches of equal width"));
    }
    if critic.out.n_out != 1 {
        return Err(invalid_arg!("critic must have a scalar output"));
    }
    let mean = |e: &Embedding<T>| critic.forward(&e.data, e.rows).0.iter().map(|v| v.f64()).sum::<f64>() / e.rows as f64;
    Ok(mean(emb_s) - mean(emb_t))
}

/// Mean of `(‖∇critic(x̂)‖ − 1)²` over interpolates of paired rows. Adds
/// `weight ×` its parameter gradient to `grad`; the ReLU pattern is held fixed.
pub fn gradient_penalty<T: Scalar>(
    critic: &Mlp2<T>,
    emb_s: &Embedding<T>,
    emb_t: &Embedding<T>,
    weight: f64,
    rng: &mut ChaCha8Rng,
    grad: &mut Mlp2<T>,
) -> f64 {
    let rows = emb_s.rows.min(emb_t.rows);
    let d = emb_s.dim;
    let mut total = 0.0;
    let mut xh = vec![T::zero(); d];
    for i in 0..rows {
        let e: f64 = rng.random_range(0.0..1.0);
        let (e, f) = (T::of(e), T::of(1.0 - e));
        for ((o, &s), &t) in xh.iter_mut().zip(emb_s.row(i)).zip(emb_t.row(i)) {
            *o = e * s + f * t;
        }
        let (g, mask) = critic.input_gradient(&xh);
        let norm = g.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt();
        total += (norm - 1.0).powi(2);
        if norm == 0.0 {
            continue;
        }
        let k = weight / rows as f64 * 2.0 * (norm - 1.0) / norm;
        let q: Vec<T> = g.iter().map(|&v| T::of(k) * v).collect();
        for (h, &on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            let w2 = critic.out.w[h];
            let row = &critic.hidden.w[h * d..(h + 1) * d];
            let mut dot = T::zero();
            for ((gw, &w1), &qj) in grad.hidden.w[h * d..(h + 1) * d].iter_mut().zip(row).zip(&q) {
                *gw += w2 * qj;
                dot += w1 * qj;
            }
            grad.out.w[h] += dot;
        }
    }
    total / rows.max(1) as f64
}

/// Adds `scale/rows` per row of `critic` output gradient; returns `dL/demb`.
fn critic_mean_backward<T: Scalar>(critic: &Mlp2<T>, emb: &Embedding<T>, scale: f64, grad: &mut Mlp2<T>, want_dx: bool) -> Option<Vec<T>> {
    let (_, tape) = critic.forward(&emb.data, emb.rows);
    let dy = vec![T::of(scale / emb.rows as f64); emb.rows];
    critic.backward(&emb.data, &tape, &dy, emb.rows, grad, want_dx)
}

struct WassersteinAlignment<'a, T> {
    feed: TargetFeed<'a, T>,
    critic_opt: Adam<T>,
    critic_grads: ModelParams<T>,
    scratch: Mlp2<T>,
    interp: ChaCha8Rng,
    critic_steps: usize,
    penalty_weight: f64,
}

impl<T: Scalar> Alignment<T> for WassersteinAlignment<'_, T> {
    fn batch(&mut self, params: &mut ModelParams<T>, src: &Embedding<T>, d_src: &mut [T], grads: &mut ModelParams<T>) -> Result<AuxLoss> {
        let (tgt, tape) = self.feed.next(params, src.rows)?;
        let mut pen = 0.0;
        for _ in 0..self.critic_steps {
            // The critic ascends the distance estimate, so it descends its negation.
            let critic = &params.coarse;
            let g = &mut self.critic_grads.coarse;
            critic_mean_backward(critic, src, -1.0, g, false);
            critic_mean_backward(critic, &tgt, 1.0, g, false);
            pen += gradient_penalty(critic, src, &tgt, self.penalty_weight, &mut self.interp, g);
            self.critic_opt.step(params, &self.critic_grads);
            self.critic_grads.zero();
        }
        let dist = wasserstein_estimate(&params.coarse, src, &tgt)?;
        let ds = critic_mean_backward(&params.coarse, src, 1.0, &mut self.scratch, true).expect("requested");
        let dt = critic_mean_backward(&params.coarse, &tgt, -1.0, &mut self.scratch, true).expect("requested");
        d_src.iter_mut().zip(&ds).for_each(|(a, &g)| *a += g);
        params.encoder_backward(&tape, &dt, grads);
        self.scratch = Mlp2::zeros(self.scratch.hidden.n_in, self.scratch.hidden.n_out, 1);
        Ok(AuxLoss {
            raw: dist,
            weighted: dist,
            penalty: (self.critic_steps > 0).then(|| pen / self.critic_steps as f64),
        })
    }
}

/// Source-supervised training while the encoder minimizes a critic's
/// Wasserstein estimate between source and target embeddings.
///
/// The critic reuses the coarse head (two dense layers, scalar output, no
/// sigmoid) and takes `critic_steps` updates per encoder step on the detached
/// embeddings of the current batch, with a gradient penalty on interpolates.
/// Early stopping uses a labelled held-out part of `target_train`.
pub fn train_wdgrl<T: Scalar>(
    source: &SampleSet<T>,
    target_train: &SampleSet<T>,
    net: &NetConfig,
    cfg: &TrainConfig,
    critic_steps: usize,
    penalty_weight: f64,
    seed: u64,
) -> Result<(ModelParams<T>, TrainTrace)> {
    if !(penalty_weight >= 0.0 && penalty_weight.is_finite()) {
        return Err(invalid_arg!("penalty weight must be non-negative, got {penalty_weight}"));
    }
    cfg.validate()?;
    check_layout(net, source)?;
    check_layout(net, target_train)?;
    let (tgt, val) = target_split(target_train, cfg, seed)?;
    let params = fresh_model(net, source, seed)?;
    let align = WassersteinAlignment {
        feed: TargetFeed::new(&tgt, seed, "wdgrl-batches"),
        critic_opt: Adam::new(cfg.adam(), coarse_layer)?,
        critic_grads: params.zeros_like(),
        scratch: Mlp2::zeros(params.coarse.hidden.n_in, params.coarse.hidden.n_out, 1),
        interp: stream(seed, "wdgrl-interp"),
        critic_steps,
        penalty_weight,
    };
    fit_supervised(params, source, &val, cfg, seed, Some(align))
}

// ---------------------------------------------------------------------------
// DANN

/// The adversarial loop with only the coarse discriminator: weights
/// `(alpha, 1, 0)`.
pub fn train_dann<T: Scalar>(
    pretrained: &ModelParams<T>,
    mixed: &SampleSet<T>,
    assignment: &DomainAssignment,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<T>, TrainTrace)> {
    let cfg = TrainConfig { weights: LossWeights { alpha: cfg.weights.alpha, lambda1: 1.0, lambda2: 0.0 }, ..cfg.clone() };
    adapt_udama(pretrained, mixed, assignment, &cfg, seed)
}
