//! Encoder, predictor and discriminator graphs with manual gradients.

pub mod adam;
pub mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, Error, Result};
use crate::features::FeatureLayout;
use crate::kv::{KvReader, KvWriter};
use crate::scalar::{sigmoid, Scalar};
use layers::{relu, relu_backward, BatchNorm, BatchNormTape, BiGru, BiGruTape, Dense, Mlp2};

/// Network hyper-parameters, including the input widths the encoder expects.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub ts_features: usize,
    pub meta_features: usize,
    pub recurrent_units: usize,
    pub recurrent_layers: usize,
    pub meta_hidden: usize,
    pub dropout: f64,
    pub disc_hidden: usize,
    pub variance_floor: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        let layout = FeatureLayout::default();
        Self {
            ts_features: layout.ts_channels.len(),
            meta_features: layout.meta_fields.len(),
            recurrent_units: 32,
            recurrent_layers: 2,
            meta_hidden: 128,
            dropout: 0.3,
            disc_hidden: 64,
            variance_floor: 1e-6,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("ts_features", self.ts_features),
            ("meta_features", self.meta_features),
            ("recurrent_units", self.recurrent_units),
            ("recurrent_layers", self.recurrent_layers),
            ("meta_hidden", self.meta_hidden),
            ("disc_hidden", self.disc_hidden),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(invalid_arg!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid_arg!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(invalid_arg!("variance_floor must be positive"));
        }
        Ok(())
    }

    pub fn emb_dim(&self) -> usize {
        2 * self.recurrent_units + self.meta_hidden
    }

    pub fn write_kv(&self, w: &mut KvWriter, prefix: &str) {
        w.put(&format!("{prefix}ts_features"), self.ts_features)
            .put(&format!("{prefix}meta_features"), self.meta_features)
            .put(&format!("{prefix}recurrent_units"), self.recurrent_units)
            .put(&format!("{prefix}recurrent_layers"), self.recurrent_layers)
            .put(&format!("{prefix}meta_hidden"), self.meta_hidden)
            .put(&format!("{prefix}dropout"), self.dropout)
            .put(&format!("{prefix}disc_hidden"), self.disc_hidden)
            .put(&format!("{prefix}variance_floor"), self.variance_floor);
    }

    /// Missing keys keep their defaults.
    pub fn read_kv(r: &mut KvReader, prefix: &str) -> Result<Self> {
        let mut c = Self::default();
        r.set(&format!("{prefix}ts_features"), &mut c.ts_features)?;
        r.set(&format!("{prefix}meta_features"), &mut c.meta_features)?;
        r.set(&format!("{prefix}recurrent_units"), &mut c.recurrent_units)?;
        r.set(&format!("{prefix}recurrent_layers"), &mut c.recurrent_layers)?;
        r.set(&format!("{prefix}meta_hidden"), &mut c.meta_hidden)?;
        r.set(&format!("{prefix}dropout"), &mut c.dropout)?;
        r.set(&format!("{prefix}disc_hidden"), &mut c.disc_hidden)?;
        r.set(&format!("{prefix}variance_floor"), &mut c.variance_floor)?;
        Ok(c)
    }
}

/// Freezable unit of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    Recurrent(usize),
    MetaNorm,
    MetaDense,
    Predictor,
    Coarse,
    Fine,
}

impl LayerId {
    pub fn is_encoder(self) -> bool {
        matches!(self, LayerId::Recurrent(_) | LayerId::MetaNorm | LayerId::MetaDense)
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, LayerId::Coarse | LayerId::Fine)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Recurrent(i) => write!(f, "rnn{i}"),
            LayerId::MetaNorm => f.write_str("meta_norm"),
            LayerId::MetaDense => f.write_str("meta_dense"),
            LayerId::Predictor => f.write_str("predictor"),
            LayerId::Coarse => f.write_str("coarse"),
            LayerId::Fine => f.write_str("fine"),
        }
    }
}

/// Row-major `rows × dim` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), dim: self.dim, data }
    }

    pub fn concat(&self, other: &Self) -> Self {
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self { rows: self.rows + other.rows, dim: self.dim, data }
    }
}

/// Whether stochastic and batch-statistic layers are active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// A view of one stored tensor.
pub struct Slot<'a, T> {
    pub layer: LayerId,
    pub name: String,
    /// `false` for running statistics, which no optimizer touches.
    pub param: bool,
    pub data: &'a [T],
}

pub struct SlotMut<'a, T> {
    pub layer: LayerId,
    pub name: String,
    pub param: bool,
    pub data: &'a mut [T],
}

/// Every tensor of the model plus per-layer trainable flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: NetConfig,
    pub rnn: Vec<BiGru<T>>,
    pub meta_norm: BatchNorm<T>,
    pub meta_dense: Dense<T>,
    pub predictor: Dense<T>,
    pub coarse: Mlp2<T>,
    pub fine: Mlp2<T>,
    trainable: BTreeMap<LayerId, bool>,
}

/// Intermediate values needed by [`ModelParams::encoder_backward`].
pub struct EncoderTape<T> {
    rows: usize,
    steps: usize,
    inputs: Vec<Vec<T>>,
    rnn: Vec<BiGruTape<T>>,
    bn: BatchNormTape<T>,
    meta_norm_out: Vec<T>,
    meta_act: Vec<T>,
    mask: Option<Vec<T>>,
}

impl<T> EncoderTape<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

pub fn init_params<T: Scalar>(cfg: &NetConfig, seed: u64) -> Result<ModelParams<T>> {
    ModelParams::init(cfg, seed)
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform fan-in initialization, zero biases, unit batch-norm scale.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.recurrent_units;
        let rnn = (0..cfg.recurrent_layers)
            .map(|l| BiGru::init(if l == 0 { cfg.ts_features } else { 2 * h }, h, &mut rng))
            .collect();
        let meta_dense = Dense::init(cfg.meta_features, cfg.meta_hidden, &mut rng);
        let d = cfg.emb_dim();
        let predictor = Dense::init(d, 1, &mut rng);
        let coarse = Mlp2::init(d, cfg.disc_hidden, 1, &mut rng);
        let fine = Mlp2::init(d, cfg.disc_hidden, 2, &mut rng);
        let mut m = Self {
            cfg: cfg.clone(),
            rnn,
            meta_norm: BatchNorm::new(cfg.meta_features),
            meta_dense,
            predictor,
            coarse,
            fine,
            trainable: BTreeMap::new(),
        };
        m.trainable = m.layer_ids().into_iter().map(|l| (l, true)).collect();
        Ok(m)
    }

    /// Same shapes as `self`, every tensor zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn zero(&mut self) {
        for s in self.slots_mut() {
            s.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids: Vec<LayerId> = (0..self.rnn.len()).map(LayerId::Recurrent).collect();
        ids.extend([LayerId::MetaNorm, LayerId::MetaDense, LayerId::Predictor, LayerId::Coarse, LayerId::Fine]);
        ids
    }

    pub fn is_trainable(&self, layer: LayerId) -> bool {
        self.trainable.get(&layer).copied().unwrap_or(false)
    }

    pub fn set_trainable(&mut self, layer: LayerId, on: bool) -> Result<()> {
        match self.trainable.get_mut(&layer) {
            Some(flag) => {
                *flag = on;
                Ok(())
            }
            None => Err(invalid_arg!("unknown layer {layer}")),
        }
    }

    pub fn frozen_layers(&self) -> Vec<LayerId> {
        self.trainable.iter().filter(|(_, &on)| !on).map(|(&l, _)| l).collect()
    }

    pub fn emb_dim(&self) -> usize {
        self.cfg.emb_dim()
    }

    pub fn slots(&self) -> Vec<Slot<'_, T>> {
        let mut out: Vec<Slot<'_, T>> = Vec::new();
        macro_rules! push {
            ($layer:expr, $name:expr, $param:expr, $data:expr) => {
                out.push(Slot { layer: $layer, name: format!("{}.{}", $layer, $name), param: $param, data: $data })
            };
        }
        for (i, l) in self.rnn.iter().enumerate() {
            let id = LayerId::Recurrent(i);
            for (dir, c) in [("fwd", &l.fwd), ("bwd", &l.bwd)] {
                push!(id, format!("{dir}.w_ih"), true, &c.w_ih);
                push!(id, format!("{dir}.w_hh"), true, &c.w_hh);
                push!(id, format!("{dir}.b_ih"), true, &c.b_ih);
                push!(id, format!("{dir}.b_hh"), true, &c.b_hh);
            }
        }
        push!(LayerId::MetaNorm, "gamma", true, &self.meta_norm.gamma);
        push!(LayerId::MetaNorm, "beta", true, &self.meta_norm.beta);
        push!(LayerId::MetaNorm, "running_mean", false, &self.meta_norm.running_mean);
        push!(LayerId::MetaNorm, "running_var", false, &self.meta_norm.running_var);
        push!(LayerId::MetaDense, "w", true, &self.meta_dense.w);
        push!(LayerId::MetaDense, "b", true, &self.meta_dense.b);
        push!(LayerId::Predictor, "w", true, &self.predictor.w);
        push!(LayerId::Predictor, "b", true, &self.predictor.b);
        for (id, m) in [(LayerId::Coarse, &self.coarse), (LayerId::Fine, &self.fine)] {
            push!(id, "hidden.w", true, &m.hidden.w);
            push!(id, "hidden.b", true, &m.hidden.b);
            push!(id, "out.w", true, &m.out.w);
            push!(id, "out.b", true, &m.out.b);
        }
        out
    }

    pub fn slots_mut(&mut self) -> Vec<SlotMut<'_, T>> {
        let mut out: Vec<SlotMut<'_, T>> = Vec::new();
        for (i, l) in self.rnn.iter_mut().enumerate() {
            let id = LayerId::Recurrent(i);
            for (dir, c) in [("fwd", &mut l.fwd), ("bwd", &mut l.bwd)] {
                let layers::GruCell { w_ih, w_hh, b_ih, b_hh, .. } = c;
                for (n, d) in [("w_ih", w_ih), ("w_hh", w_hh), ("b_ih", b_ih), ("b_hh", b_hh)] {
                    out.push(SlotMut { layer: id, name: format!("{id}.{dir}.{n}"), param: true, data: d });
                }
            }
        }
        let bn = &mut self.meta_norm;
        for (n, p, d) in [
            ("gamma", true, &mut bn.gamma),
            ("beta", true, &mut bn.beta),
            ("running_mean", false, &mut bn.running_mean),
            ("running_var", false, &mut bn.running_var),
        ] {
            out.push(SlotMut { layer: LayerId::MetaNorm, name: format!("meta_norm.{n}"), param: p, data: d });
        }
        for (id, dense) in [(LayerId::MetaDense, &mut self.meta_dense), (LayerId::Predictor, &mut self.predictor)] {
            out.push(SlotMut { layer: id, name: format!("{id}.w"), param: true, data: &mut dense.w });
            out.push(SlotMut { layer: id, name: format!("{id}.b"), param: true, data: &mut dense.b });
        }
        for (id, m) in [(LayerId::Coarse, &mut self.coarse), (LayerId::Fine, &mut self.fine)] {
            let Mlp2 { hidden, out: o } = m;
            out.push(SlotMut { layer: id, name: format!("{id}.hidden.w"), param: true, data: &mut hidden.w });
            out.push(SlotMut { layer: id, name: format!("{id}.hidden.b"), param: true, data: &mut hidden.b });
            out.push(SlotMut { layer: id, name: format!("{id}.out.w"), param: true, data: &mut o.w });
            out.push(SlotMut { layer: id, name: format!("{id}.out.b"), param: true, data: &mut o.b });
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.slots().iter().all(|s| s.data.iter().all(|v| v.is_finite()))
    }

    /// Re-draws both discriminator heads from `seed`, leaving the rest intact.
    pub fn reset_discriminators(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.emb_dim();
        self.coarse = Mlp2::init(d, self.cfg.disc_hidden, 1, &mut rng);
        self.fine = Mlp2::init(d, self.cfg.disc_hidden, 2, &mut rng);
    }

    fn check_inputs(&self, x: &[T], m: &[T], rows: usize, steps: usize) -> Result<()> {
        if rows == 0 || steps == 0 {
            return Err(invalid_arg!("encoder needs at least one row and one step"));
        }
        if x.len() != rows * steps * self.cfg.ts_features {
            return Err(invalid_arg!(
                "series buffer has {} values, expected {rows}×{steps}×{}",
                x.len(),
                self.cfg.ts_features
            ));
        }
        if m.len() != rows * self.cfg.meta_features {
            return Err(invalid_arg!(
                "metadata buffer has {} values, expected {rows}×{}",
                m.len(),
                self.cfg.meta_features
            ));
        }
        if !x.iter().chain(m).all(|v| v.is_finite()) {
            return Err(invalid_arg!("non-finite encoder input"));
        }
        Ok(())
    }

    /// Embeds `rows` samples of `steps` steps each. Batch statistics and dropout
    /// are used only in [`Mode::Train`]; running statistics are not updated here.
    pub fn encode(&self, x: &[T], m: &[T], rows: usize, steps: usize, mode: Mode<'_>) -> Result<Embedding<T>> {
        self.check_inputs(x, m, rows, steps)?;
        Ok(self.forward_encoder(x, m, rows, steps, mode, false).0)
    }

    /// Train-mode forward that keeps the tape for backpropagation.
    pub fn encode_train(&self, x: &[T], m: &[T], rows: usize, steps: usize, rng: &mut ChaCha8Rng) -> Result<(Embedding<T>, EncoderTape<T>)> {
        self.check_inputs(x, m, rows, steps)?;
        let (e, tape) = self.forward_encoder(x, m, rows, steps, Mode::Train(rng), true);
        Ok((e, tape.expect("tape requested")))
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    pub fn absorb_batch_stats(&mut self, tape: &EncoderTape<T>) {
        self.meta_norm.update_running(&tape.bn);
    }

    fn forward_encoder(&self, x: &[T], m: &[T], rows: usize, steps: usize, mode: Mode<'_>, keep_tape: bool) -> (Embedding<T>, Option<EncoderTape<T>>) {
        let h2 = 2 * self.cfg.recurrent_units;
        let mut inputs = Vec::new();
        let mut tapes = Vec::new();
        let mut cur = x.to_vec();
        for layer in &self.rnn {
            let (out, tape) = layer.forward(&cur, rows, steps, keep_tape);
            if keep_tape {
                inputs.push(std::mem::replace(&mut cur, out));
                tapes.push(tape.expect("tape requested"));
            } else {
                cur = out;
            }
        }
        let inv_t = T::one() / T::of_usize(steps);
        let mut pooled = vec![T::zero(); rows * h2];
        for b in 0..rows {
            for s in 0..steps {
                let src = &cur[(b * steps + s) * h2..(b * steps + s + 1) * h2];
                for (p, &v) in pooled[b * h2..(b + 1) * h2].iter_mut().zip(src) {
                    *p += v;
                }
            }
        }
        pooled.iter_mut().for_each(|p| *p *= inv_t);

        let train = matches!(mode, Mode::Train(_));
        let (normed, bn_tape) = if train {
            let (y, t) = self.meta_norm.forward_train(m, rows);
            (y, Some(t))
        } else {
            (self.meta_norm.forward_eval(m), None)
        };
        let mut act = self.meta_dense.forward(&normed, rows);
        relu(&mut act);

        let d = self.emb_dim();
        let mut data = Vec::with_capacity(rows * d);
        for b in 0..rows {
            data.extend_from_slice(&pooled[b * h2..(b + 1) * h2]);
            data.extend_from_slice(&act[b * self.cfg.meta_hidden..(b + 1) * self.cfg.meta_hidden]);
        }
        let mut mask = None;
        if let Mode::Train(rng) = mode {
            if self.cfg.dropout > 0.0 {
                let keep = 1.0 - self.cfg.dropout;
                let scale = T::of(1.0 / keep);
                let mk: Vec<T> = (0..data.len())
                    .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                data.iter_mut().zip(&mk).for_each(|(v, &s)| *v *= s);
                mask = Some(mk);
            }
        }
        let emb = Embedding { rows, dim: d, data };
        let tape = keep_tape.then(|| EncoderTape {
            rows,
            steps,
            inputs,
            rnn: tapes,
            bn: bn_tape.expect("tapes are only kept in train mode"),
            meta_norm_out: normed,
            meta_act: act,
            mask,
        });
        (emb, tape)
    }

    /// Accumulates encoder gradients for `d_emb` into `grads`. Layers that are
    /// frozen and have no trainable layer beneath them are skipped entirely.
    pub fn encoder_backward(&self, tape: &EncoderTape<T>, d_emb: &[T], grads: &mut Self) {
        let (rows, steps) = (tape.rows, tape.steps);
        let h2 = 2 * self.cfg.recurrent_units;
        let mh = self.cfg.meta_hidden;
        let d = self.emb_dim();
        let mut g = d_emb.to_vec();
        if let Some(mask) = &tape.mask {
            g.iter_mut().zip(mask).for_each(|(v, &s)| *v *= s);
        }

        let lowest_trainable = (0..self.rnn.len()).find(|&l| self.is_trainable(LayerId::Recurrent(l)));
        if let Some(lowest) = lowest_trainable {
            let inv_t = T::one() / T::of_usize(steps);
            let mut d_out = vec![T::zero(); rows * steps * h2];
            for b in 0..rows {
                let gp = &g[b * d..b * d + h2];
                for s in 0..steps {
                    for (o, &v) in d_out[(b * steps + s) * h2..(b * steps + s + 1) * h2].iter_mut().zip(gp) {
                        *o = v * inv_t;
                    }
                }
            }
            for l in (lowest..self.rnn.len()).rev() {
                let want_dx = l > lowest;
                let dx = self.rnn[l].backward(&tape.inputs[l], &tape.rnn[l], &d_out, rows, steps, &mut grads.rnn[l], want_dx);
                match dx {
                    Some(v) => d_out = v,
                    None => break,
                }
            }
        }

        let norm_trainable = self.is_trainable(LayerId::MetaNorm);
        if self.is_trainable(LayerId::MetaDense) || norm_trainable {
            let mut dm = Vec::with_capacity(rows * mh);
            for b in 0..rows {
                dm.extend_from_slice(&g[b * d + h2..(b + 1) * d]);
            }
            relu_backward(&tape.meta_act, &mut dm);
            let dn = self.meta_dense.backward(&tape.meta_norm_out, &dm, rows, &mut grads.meta_dense, norm_trainable);
            if let Some(dn) = dn {
                self.meta_norm.backward(&tape.bn, &dn, rows, &mut grads.meta_norm);
            }
        }
    }

    /// Affine regression head.
    pub fn predict(&self, emb: &Embedding<T>) -> Vec<T> {
        self.predictor.forward(&emb.data, emb.rows)
    }

    /// Probability that each row comes from the target domain.
    pub fn disc_coarse(&self, emb: &Embedding<T>) -> Vec<T> {
        self.coarse.forward(&emb.data, emb.rows).0.into_iter().map(sigmoid).collect()
    }

    /// Per-row label-distribution mean and floored variance.
    pub fn disc_fine(&self, emb: &Embedding<T>) -> (Vec<T>, Vec<T>) {
        let out = self.fine.forward(&emb.data, emb.rows).0;
        let floor = T::of(self.cfg.variance_floor);
        let mu = out.iter().step_by(2).copied().collect();
        let var = out.iter().skip(1).step_by(2).map(|&lv| lv.exp() + floor).collect();
        (mu, var)
    }

    /// Freezes the first recurrent layer and the metadata dense layer; all
    /// other layers become trainable.
    pub fn freeze_plan(mut self) -> Self {
        for (layer, on) in self.trainable.iter_mut() {
            *on = !matches!(layer, LayerId::Recurrent(0) | LayerId::MetaDense);
        }
        self
    }

    pub fn unfreeze_all(mut self) -> Self {
        self.trainable.values_mut().for_each(|v| *v = true);
        self
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::init(&self.cfg, 0).expect("config already validated");
        for (dst, src) in out.slots_mut().into_iter().zip(self.slots()) {
            for (a, &b) in dst.data.iter_mut().zip(src.data) {
                *a = U::of(b.f64());
            }
        }
        out.trainable = self.trainable.clone();
        out
    }

    pub(crate) fn trainable_map(&self) -> &BTreeMap<LayerId, bool> {
        &self.trainable
    }

    pub(crate) fn set_trainable_map(&mut self, map: BTreeMap<LayerId, bool>) -> Result<()> {
        let expected: Vec<LayerId> = self.layer_ids();
        let got: Vec<LayerId> = map.keys().copied().collect();
        let mut sorted = expected.clone();
        sorted.sort();
        if got != sorted {
            return Err(Error::Parse("trainable flags do not cover every layer".into()));
        }
        self.trainable = map;
        Ok(())
    }
}
