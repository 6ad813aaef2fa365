//! The self-attention graph decoder.
//!
//! Each layer mixes a degree-normalized graph convolution with an
//! attention branch gated by a learnable scalar `lambda` (starting at 0), and
//! adds a skip connection from the first-layer latent features:
//!
//! ```text
//! hidden: H' = tanh(lambda * Hbar + At H) W + At H1 What
//! last:   X  = act((lambda * Hbar + At H) W + At H1 What)
//! ```
//!
//! `Hbar = (alpha (H Wg)) Wf`, where `alpha` is a row softmax of
//! `(H Wl)(H Wr)^T` weighted by `V * (A + I)` and restricted to positive
//! weights.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Width of the latent node features fed to the first layer.
    pub input_width: usize,
    /// Hidden layer widths; may be empty.
    pub hidden: Vec<usize>,
    /// Reconstruction width per node.
    pub output_width: usize,
    /// Attention width per layer; `None` uses half the layer width, rounded up.
    pub attention_width: Option<usize>,
    pub output: OutputActivation,
    pub lambda_init: f64,
}

impl DecoderConfig {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width];
        w.extend(&self.hidden);
        w.push(self.output_width);
        w
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wl: ParamId,
    pub wr: ParamId,
    pub wg: ParamId,
    pub wf: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub w: ParamId,
    pub w_skip: ParamId,
    pub att: AttentionParams,
    pub lambda: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
}

fn gaussian(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
    let s = 1.0 / (rows.max(1) as f64).sqrt();
    let t = Tensor::from_fn(&[rows, cols], |_| s * rng.sample::<f64, _>(StandardNormal));
    store.add(name, t)
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut impl Rng) -> Self {
        let widths = cfg.widths();
        let d1 = cfg.input_width;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (din, dout) = (w[0], w[1]);
                let dbar = cfg.attention_width.unwrap_or(din.div_ceil(2)).max(1);
                let p = |s: &str| format!("dec.{l}.{s}");
                DecoderLayer {
                    w: gaussian(store, p("w"), din, dout, rng),
                    w_skip: gaussian(store, p("w_skip"), d1, dout, rng),
                    att: AttentionParams {
                        wl: gaussian(store, p("wl"), din, dbar, rng),
                        wr: gaussian(store, p("wr"), din, dbar, rng),
                        wg: gaussian(store, p("wg"), din, dbar, rng),
                        wf: gaussian(store, p("wf"), dbar, din, rng),
                    },
                    lambda: store.add(p("lambda"), Tensor::scalar(cfg.lambda_init)),
                }
            })
            .collect();
        Self { cfg, layers }
    }

    /// Pre-activation output `[m, n, output_width]` from first-layer
    /// features `h1` (`[m, n, input_width]`), normalized adjacency `a_norm`
    /// and attention weights `weights` (both `[n, n]`).
    pub fn decode_logits(&self, tape: &mut Tape<'_>, h1: Var, a_norm: Var, weights: Var) -> Result<Var> {
        let [_, n, d1] = *tape.shape(h1) else {
            return Err(Error::shape("decode", tape.shape(h1), &[0, 0, self.cfg.input_width]));
        };
        if d1 != self.cfg.input_width || tape.shape(a_norm) != [n, n] || tape.shape(weights) != [n, n] {
            return Err(Error::shape("decode", tape.shape(h1), tape.shape(a_norm)));
        }
        let skip_base = tape.matmul(a_norm, h1)?;
        let mut h = h1;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let alpha = attention_scores(tape, h, weights, layer.att.wl, layer.att.wr)?;
            let hbar = attention_apply(tape, alpha, h, layer.att.wg, layer.att.wf)?;
            let lam = tape.param(layer.lambda);
            let gated = tape.mul(hbar, lam)?;
            let conv = tape.matmul(a_norm, h)?;
            let mut pre = tape.add(gated, conv)?;
            if l < last {
                pre = tape.tanh(pre);
            }
            let w = tape.param(layer.w);
            let main = tape.matmul(pre, w)?;
            let ws = tape.param(layer.w_skip);
            let skip = tape.matmul(skip_base, ws)?;
            h = tape.add(main, skip)?;
        }
        Ok(h)
    }

    pub fn activate(&self, tape: &mut Tape<'_>, logits: Var) -> Var {
        match self.cfg.output {
            OutputActivation::Sigmoid => tape.sigmoid(logits),
            OutputActivation::Identity => logits,
        }
    }

    pub fn decode(&self, tape: &mut Tape<'_>, h1: Var, a_norm: Var, weights: Var) -> Result<Var> {
        let logits = self.decode_logits(tape, h1, a_norm, weights)?;
        Ok(self.activate(tape, logits))
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
pub fn normalize_adjacency(tape: &mut Tape<'_>, a_soft: Var) -> Result<Var> {
    let [n, n2] = *tape.shape(a_soft) else {
        return Err(Error::shape("normalize_adjacency", tape.shape(a_soft), &[0, 0]));
    };
    if n != n2 {
        return Err(Error::shape("normalize_adjacency", &[n, n2], &[n, n]));
    }
    let eye = tape.constant(Tensor::eye(n));
    let a_hat = tape.add(a_soft, eye)?;
    let deg = tape.sum_last(a_hat)?;
    let dinv = tape.powf(deg, -0.5)?;
    let scale = tape.outer(dinv, dinv)?;
    tape.mul(a_hat, scale)
}

/// Attention weights `V * (A + I)`; positions with zero weight are outside
/// the neighborhood.
pub fn attention_weights(tape: &mut Tape<'_>, a_soft: Var, v: Var) -> Result<Var> {
    let n = tape.shape(a_soft)[0];
    let eye = tape.constant(Tensor::eye(n));
    let a_hat = tape.add(a_soft, eye)?;
    tape.mul(v, a_hat)
}

/// Row softmax of `e_ij = (h_i Wl)(h_j Wr)^T` weighted by `weights`.
pub fn attention_scores(tape: &mut Tape<'_>, h: Var, weights: Var, wl: ParamId, wr: ParamId) -> Result<Var> {
    let wl = tape.param(wl);
    let wr = tape.param(wr);
    let left = tape.matmul(h, wl)?;
    let right = tape.matmul(h, wr)?;
    let right_t = tape.transpose(right)?;
    let e = tape.matmul(left, right_t)?;
    tape.weighted_softmax(e, weights)
}

/// `Hbar = (alpha (H Wg)) Wf`.
pub fn attention_apply(tape: &mut Tape<'_>, alpha: Var, h: Var, wg: ParamId, wf: ParamId) -> Result<Var> {
    let wg = tape.param(wg);
    let wf = tape.param(wf);
    let hg = tape.matmul(h, wg)?;
    let mixed = tape.matmul(alpha, hg)?;
    tape.matmul(mixed, wf)
}
