//! Layers with explicit forward tapes and hand-derived backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{gemm_ab, gemm_abt, gemm_atb};
use crate::scalar::{sigmoid, Scalar};

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
}

fn add_row_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn sum_rows<T: Scalar>(dy: &[T], width: usize, acc: &mut [T]) {
    for row in dy.chunks_exact(width) {
        for (a, &g) in acc.iter_mut().zip(row) {
            *a += g;
        }
    }
}

/// `y = x Wᵀ + b`, `W` stored `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    /// Uniform `±1/√n_in` weights, zero bias.
    pub fn init(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        Self { n_in, n_out, w: uniform(rng, n_in * n_out, bound), b: vec![T::zero(); n_out] }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, w: vec![T::zero(); n_in * n_out], b: vec![T::zero(); n_out] }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let mut out = vec![T::zero(); rows * self.n_out];
        gemm_abt(x, &self.w, rows, self.n_in, self.n_out, &mut out);
        add_row_bias(&mut out, &self.b);
        out
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when asked.
    pub fn backward(&self, x: &[T], dy: &[T], rows: usize, grad: &mut Self, want_dx: bool) -> Option<Vec<T>> {
        gemm_atb(dy, x, rows, self.n_out, self.n_in, &mut grad.w);
        sum_rows(dy, self.n_out, &mut grad.b);
        want_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.n_in];
            gemm_ab(dy, &self.w, rows, self.n_out, self.n_in, &mut dx);
            dx
        })
    }
}

pub fn relu<T: Scalar>(v: &mut [T]) {
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes gradient entries whose forward activation was clipped by ReLU.
pub fn relu_backward<T: Scalar>(activated: &[T], dy: &mut [T]) {
    for (g, &a) in dy.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2<T> {
    pub hidden: Dense<T>,
    pub out: Dense<T>,
}

pub struct Mlp2Tape<T> {
    hidden: Vec<T>,
}

impl<T: Scalar> Mlp2<T> {
    pub fn init(n_in: usize, n_hidden: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { hidden: Dense::init(n_in, n_hidden, rng), out: Dense::init(n_hidden, n_out, rng) }
    }

    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self { hidden: Dense::zeros(n_in, n_hidden), out: Dense::zeros(n_hidden, n_out) }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, Mlp2Tape<T>) {
        let mut h = self.hidden.forward(x, rows);
        relu(&mut h);
        let y = self.out.forward(&h, rows);
        (y, Mlp2Tape { hidden: h })
    }

    pub fn backward(&self, x: &[T], tape: &Mlp2Tape<T>, dy: &[T], rows: usize, grad: &mut Self, want_dx: bool) -> Option<Vec<T>> {
        let mut dh = self.out.backward(&tape.hidden, dy, rows, &mut grad.out, true).expect("requested");
        relu_backward(&tape.hidden, &mut dh);
        self.hidden.backward(x, &dh, rows, &mut grad.hidden, want_dx)
    }

    /// Gradient of the scalar output with respect to the input row `x`, for a
    /// single-output network.
    pub fn input_gradient(&self, x: &[T]) -> (Vec<T>, Vec<bool>) {
        debug_assert_eq!(self.out.n_out, 1);
        let mut pre = self.hidden.forward(x, 1);
        let mask: Vec<bool> = pre.iter().map(|&v| v > T::zero()).collect();
        relu(&mut pre);
        let mut g = vec![T::zero(); self.hidden.n_in];
        for (i, &on) in mask.iter().enumerate() {
            if on {
                let w2 = self.out.w[i];
                for (gj, &w1) in g.iter_mut().zip(&self.hidden.w[i * self.hidden.n_in..(i + 1) * self.hidden.n_in]) {
                    *gj += w2 * w1;
                }
            }
        }
        (g, mask)
    }
}

/// Single-direction GRU with reset gate applied after the recurrent projection.
///
/// Gate blocks are ordered `[reset, update, candidate]` in every `3H` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<T> {
    pub n_in: usize,
    pub hidden: usize,
    pub w_ih: Vec<T>,
    pub w_hh: Vec<T>,
    pub b_ih: Vec<T>,
    pub b_hh: Vec<T>,
}

pub struct GruTape<T> {
    h_prev: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    ghn: Vec<T>,
}

impl<T: Scalar> GruCell<T> {
    /// Uniform `±1/√hidden` weights, zero biases.
    pub fn init(n_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            n_in,
            hidden,
            w_ih: uniform(rng, 3 * hidden * n_in, bound),
            w_hh: uniform(rng, 3 * hidden * hidden, bound),
            b_ih: vec![T::zero(); 3 * hidden],
            b_hh: vec![T::zero(); 3 * hidden],
        }
    }

    pub fn zeros(n_in: usize, hidden: usize) -> Self {
        Self {
            n_in,
            hidden,
            w_ih: vec![T::zero(); 3 * hidden * n_in],
            w_hh: vec![T::zero(); 3 * hidden * hidden],
            b_ih: vec![T::zero(); 3 * hidden],
            b_hh: vec![T::zero(); 3 * hidden],
        }
    }

    /// Runs over `x` (`rows×steps×n_in`); returns hidden states `rows×steps×hidden`
    /// indexed by input position, so a reversed pass is already re-aligned.
    pub fn forward(&self, x: &[T], rows: usize, steps: usize, reverse: bool, keep_tape: bool) -> (Vec<T>, Option<GruTape<T>>) {
        let h = self.hidden;
        let g3 = 3 * h;
        let mut gi = vec![T::zero(); rows * steps * g3];
        gemm_abt(x, &self.w_ih, rows * steps, self.n_in, g3, &mut gi);
        add_row_bias(&mut gi, &self.b_ih);

        let mut out = vec![T::zero(); rows * steps * h];
        let mut state = vec![T::zero(); rows * h];
        let mut gh = vec![T::zero(); rows * g3];
        let tape_len = if keep_tape { steps * rows * h } else { 0 };
        let mut tape = GruTape {
            h_prev: Vec::with_capacity(tape_len),
            r: Vec::with_capacity(tape_len),
            z: Vec::with_capacity(tape_len),
            n: Vec::with_capacity(tape_len),
            ghn: Vec::with_capacity(tape_len),
        };
        for s in 0..steps {
            let tt = if reverse { steps - 1 - s } else { s };
            gh.iter_mut().for_each(|v| *v = T::zero());
            gemm_abt(&state, &self.w_hh, rows, h, g3, &mut gh);
            add_row_bias(&mut gh, &self.b_hh);
            if keep_tape {
                tape.h_prev.extend_from_slice(&state);
            }
            for b in 0..rows {
                let gi_row = &gi[(b * steps + tt) * g3..(b * steps + tt + 1) * g3];
                let gh_row = &gh[b * g3..(b + 1) * g3];
                for j in 0..h {
                    let r = sigmoid(gi_row[j] + gh_row[j]);
                    let z = sigmoid(gi_row[h + j] + gh_row[h + j]);
                    let ghn = gh_row[2 * h + j];
                    let n = (gi_row[2 * h + j] + r * ghn).tanh();
                    let hp = state[b * h + j];
                    let hn = (T::one() - z) * n + z * hp;
                    state[b * h + j] = hn;
                    out[(b * steps + tt) * h + j] = hn;
                    if keep_tape {
                        tape.r.push(r);
                        tape.z.push(z);
                        tape.n.push(n);
                        tape.ghn.push(ghn);
                    }
                }
            }
        }
        (out, keep_tape.then_some(tape))
    }

    /// Backpropagation through time. `d_out` is aligned with `forward`'s output.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[T],
        tape: &GruTape<T>,
        d_out: &[T],
        rows: usize,
        steps: usize,
        reverse: bool,
        grad: &mut Self,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let h = self.hidden;
        let g3 = 3 * h;
        let mut dgi = vec![T::zero(); rows * steps * g3];
        let mut dh = vec![T::zero(); rows * h];
        let mut dgh = vec![T::zero(); rows * g3];
        for s in (0..steps).rev() {
            let tt = if reverse { steps - 1 - s } else { s };
            let base = s * rows * h;
            for b in 0..rows {
                for j in 0..h {
                    let k = base + b * h + j;
                    let d = dh[b * h + j] + d_out[(b * steps + tt) * h + j];
                    let (r, z, n, ghn, hp) = (tape.r[k], tape.z[k], tape.n[k], tape.ghn[k], tape.h_prev[k]);
                    let dn = d * (T::one() - z);
                    let dz = d * (hp - n);
                    let dn_pre = dn * (T::one() - n * n);
                    let dr_pre = dn_pre * ghn * r * (T::one() - r);
                    let dz_pre = dz * z * (T::one() - z);
                    let gi_row = &mut dgi[(b * steps + tt) * g3..(b * steps + tt + 1) * g3];
                    gi_row[j] = dr_pre;
                    gi_row[h + j] = dz_pre;
                    gi_row[2 * h + j] = dn_pre;
                    let gh_row = &mut dgh[b * g3..(b + 1) * g3];
                    gh_row[j] = dr_pre;
                    gh_row[h + j] = dz_pre;
                    gh_row[2 * h + j] = dn_pre * r;
                    dh[b * h + j] = d * z;
                }
            }
            let h_prev = &tape.h_prev[base..base + rows * h];
            gemm_atb(&dgh, h_prev, rows, g3, h, &mut grad.w_hh);
            sum_rows(&dgh, g3, &mut grad.b_hh);
            gemm_ab(&dgh, &self.w_hh, rows, g3, h, &mut dh);
        }
        gemm_atb(&dgi, x, rows * steps, g3, self.n_in, &mut grad.w_ih);
        sum_rows(&dgi, g3, &mut grad.b_ih);
        want_dx.then(|| {
            let mut dx = vec![T::zero(); rows * steps * self.n_in];
            gemm_ab(&dgi, &self.w_ih, rows * steps, g3, self.n_in, &mut dx);
            dx
        })
    }
}

/// Forward and backward GRUs whose outputs are concatenated per step.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGru<T> {
    pub fwd: GruCell<T>,
    pub bwd: GruCell<T>,
}

pub struct BiGruTape<T> {
    fwd: GruTape<T>,
    bwd: GruTape<T>,
}

impl<T: Scalar> BiGru<T> {
    pub fn init(n_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { fwd: GruCell::init(n_in, hidden, rng), bwd: GruCell::init(n_in, hidden, rng) }
    }

    pub fn zeros(n_in: usize, hidden: usize) -> Self {
        Self { fwd: GruCell::zeros(n_in, hidden), bwd: GruCell::zeros(n_in, hidden) }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    /// Output `rows×steps×2H`, forward direction first in every step.
    pub fn forward(&self, x: &[T], rows: usize, steps: usize, keep_tape: bool) -> (Vec<T>, Option<BiGruTape<T>>) {
        let h = self.fwd.hidden;
        let (of, tf) = self.fwd.forward(x, rows, steps, false, keep_tape);
        let (ob, tb) = self.bwd.forward(x, rows, steps, true, keep_tape);
        let mut out = Vec::with_capacity(rows * steps * 2 * h);
        for (a, b) in of.chunks_exact(h).zip(ob.chunks_exact(h)) {
            out.extend_from_slice(a);
            out.extend_from_slice(b);
        }
        let tape = match (tf, tb) {
            (Some(fwd), Some(bwd)) => Some(BiGruTape { fwd, bwd }),
            _ => None,
        };
        (out, tape)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(&self, x: &[T], tape: &BiGruTape<T>, d_out: &[T], rows: usize, steps: usize, grad: &mut Self, want_dx: bool) -> Option<Vec<T>> {
        let h = self.fwd.hidden;
        let mut df = Vec::with_capacity(rows * steps * h);
        let mut db = Vec::with_capacity(rows * steps * h);
        for c in d_out.chunks_exact(2 * h) {
            df.extend_from_slice(&c[..h]);
            db.extend_from_slice(&c[h..]);
        }
        let dxf = self.fwd.backward(x, &tape.fwd, &df, rows, steps, false, &mut grad.fwd, want_dx);
        let dxb = self.bwd.backward(x, &tape.bwd, &db, rows, steps, true, &mut grad.bwd, want_dx);
        match (dxf, dxb) {
            (Some(mut a), Some(b)) => {
                for (u, v) in a.iter_mut().zip(b) {
                    *u += v;
                }
                Some(a)
            }
            _ => None,
        }
    }
}

/// Feature-wise batch normalization with running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

pub struct BatchNormTape<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            gamma: vec![T::zero(); width],
            beta: vec![T::zero(); width],
            running_mean: vec![T::zero(); width],
            running_var: vec![T::zero(); width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_eval(&self, x: &[T]) -> Vec<T> {
        let w = self.width();
        let eps = T::of(BN_EPS);
        x.iter()
            .enumerate()
            .map(|(k, &v)| {
                let c = k % w;
                self.gamma[c] * (v - self.running_mean[c]) / (self.running_var[c] + eps).sqrt() + self.beta[c]
            })
            .collect()
    }

    /// Normalizes with the batch's own (biased) statistics.
    pub fn forward_train(&self, x: &[T], rows: usize) -> (Vec<T>, BatchNormTape<T>) {
        let w = self.width();
        let n = T::of_usize(rows);
        let mut mean = vec![T::zero(); w];
        for row in x.chunks_exact(w) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); w];
        for row in x.chunks_exact(w) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for (k, &v) in x.iter().enumerate() {
            let c = k % w;
            let xh = (v - mean[c]) * inv_std[c];
            xhat.push(xh);
            y.push(self.gamma[c] * xh + self.beta[c]);
        }
        (y, BatchNormTape { xhat, inv_std, batch_mean: mean, batch_var: var })
    }

    pub fn update_running(&mut self, tape: &BatchNormTape<T>) {
        let mom = T::of(BN_MOMENTUM);
        let one = T::one();
        for c in 0..self.width() {
            self.running_mean[c] = mom * self.running_mean[c] + (one - mom) * tape.batch_mean[c];
            self.running_var[c] = mom * self.running_var[c] + (one - mom) * tape.batch_var[c];
        }
    }

    pub fn backward(&self, tape: &BatchNormTape<T>, dy: &[T], rows: usize, grad: &mut Self) -> Vec<T> {
        let w = self.width();
        let n = T::of_usize(rows);
        let mut sum_dxhat = vec![T::zero(); w];
        let mut sum_dxhat_xhat = vec![T::zero(); w];
        for (k, &g) in dy.iter().enumerate() {
            let c = k % w;
            grad.gamma[c] += g * tape.xhat[k];
            grad.beta[c] += g;
            let dxh = g * self.gamma[c];
            sum_dxhat[c] += dxh;
            sum_dxhat_xhat[c] += dxh * tape.xhat[k];
        }
        dy.iter()
            .enumerate()
            .map(|(k, &g)| {
                let c = k % w;
                let dxh = g * self.gamma[c];
                tape.inv_std[c] / n * (n * dxh - sum_dxhat[c] - tape.xhat[k] * sum_dxhat_xhat[c])
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn check(analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!((analytic - numeric).abs() / denom < 1e-4, "analytic {analytic} vs numeric {numeric}");
    }

    #[test]
    fn bigru_gradients_match_finite_differences() {
        let mut r = rng();
        let (rows, steps, n_in, h) = (3, 5, 2, 3);
        let layer = BiGru::<f64>::init(n_in, h, &mut r);
        let x = rand_vec(&mut r, rows * steps * n_in);
        let proj = rand_vec(&mut r, rows * steps * 2 * h);
        let loss = |l: &BiGru<f64>, x: &[f64]| dot(&l.forward(x, rows, steps, false).0, &proj);

        let (_, tape) = layer.forward(&x, rows, steps, true);
        let mut grad = BiGru::zeros(n_in, h);
        let dx = layer.backward(&x, &tape.unwrap(), &proj, rows, steps, &mut grad, true).unwrap();

        let eps = 1e-6;
        for k in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[k] += eps;
            b[k] -= eps;
            check(dx[k], (loss(&layer, &a) - loss(&layer, &b)) / (2.0 * eps));
        }
        for k in (0..layer.fwd.w_hh.len()).step_by(4) {
            let (mut a, mut b) = (layer.clone(), layer.clone());
            a.fwd.w_hh[k] += eps;
            b.fwd.w_hh[k] -= eps;
            check(grad.fwd.w_hh[k], (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps));
        }
        for k in (0..layer.bwd.w_ih.len()).step_by(3) {
            let (mut a, mut b) = (layer.clone(), layer.clone());
            a.bwd.w_ih[k] += eps;
            b.bwd.w_ih[k] -= eps;
            check(grad.bwd.w_ih[k], (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps));
        }
        for k in 0..3 * h {
            let (mut a, mut b) = (layer.clone(), layer.clone());
            a.bwd.b_hh[k] += eps;
            b.bwd.b_hh[k] -= eps;
            check(grad.bwd.b_hh[k], (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps));
        }
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut r = rng();
        let (rows, w) = (4, 3);
        let mut bn = BatchNorm::<f64>::new(w);
        bn.gamma = rand_vec(&mut r, w);
        bn.beta = rand_vec(&mut r, w);
        let x = rand_vec(&mut r, rows * w);
        let proj = rand_vec(&mut r, rows * w);
        let loss = |bn: &BatchNorm<f64>, x: &[f64]| dot(&bn.forward_train(x, rows).0, &proj);
        let (_, tape) = bn.forward_train(&x, rows);
        let mut grad = BatchNorm::zeros(w);
        let dx = bn.backward(&tape, &proj, rows, &mut grad);
        let eps = 1e-6;
        for k in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[k] += eps;
            b[k] -= eps;
            check(dx[k], (loss(&bn, &a) - loss(&bn, &b)) / (2.0 * eps));
        }
        for c in 0..w {
            let (mut a, mut b) = (bn.clone(), bn.clone());
            a.gamma[c] += eps;
            b.gamma[c] -= eps;
            check(grad.gamma[c], (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps));
        }
    }

    #[test]
    fn mlp_input_gradient_matches_backward() {
        let mut r = rng();
        let mlp = Mlp2::<f64>::init(5, 7, 1, &mut r);
        let x = rand_vec(&mut r, 5);
        let (g, _) = mlp.input_gradient(&x);
        let (_, tape) = mlp.forward(&x, 1);
        let mut grad = Mlp2::zeros(5, 7, 1);
        let dx = mlp.backward(&x, &tape, &[1.0], 1, &mut grad, true).unwrap();
        for (a, b) in g.iter().zip(&dx) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
