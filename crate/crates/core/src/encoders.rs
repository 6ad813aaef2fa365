//! Inference networks: the Gaussian encoder for Z and the amortized edge
//! network that produces per-pair class logits and the edge-weight head V.
//!
//! Edges are parameterized on the strict upper triangle only, in the pair
//! order of [`crate::autodiff::pair_index`], and mirrored when a full matrix
//! is needed. Symmetry is therefore exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{pair_count, pairs_matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::stochastic::GaussianPosterior;
use crate::tensor::Tensor;

/// Shape of the latent code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LatentMode {
    /// One Gaussian per node with `d_z` components: `z` is `[m, n, d_z]`.
    DimensionWise { d_z: usize },
    /// One Gaussian vector per sample: `z` is `[m, width]`.
    DataPointWise { width: usize },
}

impl LatentMode {
    pub fn flat_width(self, n: usize) -> usize {
        match self {
            LatentMode::DimensionWise { d_z } => n * d_z,
            LatentMode::DataPointWise { width } => width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: LatentMode,
    pub n: usize,
    pub d: usize,
    pub hidden: Vec<usize>,
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization for weight
/// and bias.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut u = || rng.random_range(-bound..bound);
        let w = store.add(format!("{name}.w"), Tensor::from_fn(&[fan_in, fan_out], |_| u()));
        let b = store.add(format!("{name}.b"), Tensor::from_fn(&[fan_out], |_| u()));
        Self { w, b }
    }

    /// Zero weights with the given bias.
    pub fn with_bias(store: &mut ParamStore, name: &str, fan_in: usize, bias: Tensor) -> Self {
        let fan_out = bias.numel();
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), bias);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Fully connected stack with `tanh` between layers. When `act_last` is set
/// the final layer is also followed by `tanh`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act_last: bool,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], act_last: bool, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, act_last }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last || self.act_last {
                x = tape.tanh(x);
            }
        }
        Ok(x)
    }
}

/// The Z inference network.
#[derive(Clone, Debug)]
pub struct ZEncoder {
    pub cfg: EncoderConfig,
    pub mlp: Mlp,
}

impl ZEncoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut widths = vec![cfg.n * cfg.d];
        widths.extend(&cfg.hidden);
        widths.push(2 * cfg.mode.flat_width(cfg.n));
        let mlp = Mlp::new(store, "enc_z", &widths, false, rng);
        Self { cfg, mlp }
    }

    /// Sets the output layer to zero so that `mu = logvar = 0` for any input.
    pub fn zero_output(&self, store: &mut ParamStore) {
        let last = self.mlp.layers.last().expect("encoder has layers");
        store.get_mut(last.w).data_mut().fill(0.0);
        store.get_mut(last.b).data_mut().fill(0.0);
    }

    pub fn encode_z(&self, tape: &mut Tape<'_>, x: Var) -> Result<GaussianPosterior> {
        let shape = tape.shape(x).to_vec();
        let want = self.cfg.n * self.cfg.d;
        if shape.len() != 2 || shape[1] != want || shape[0] == 0 {
            return Err(Error::shape("encode_z", &shape, &[0, want]));
        }
        let m = shape[0];
        let width = self.cfg.mode.flat_width(self.cfg.n);
        let out = self.mlp.forward(tape, x)?;
        let mut mu = tape.narrow_last(out, 0, width)?;
        let mut lv = tape.narrow_last(out, width, width)?;
        if let LatentMode::DimensionWise { d_z } = self.cfg.mode {
            mu = tape.reshape(mu, &[m, self.cfg.n, d_z])?;
            lv = tape.reshape(lv, &[m, self.cfg.n, d_z])?;
        }
        GaussianPosterior::new(tape, mu, lv)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeNetConfig {
    pub n: usize,
    pub d: usize,
    pub hidden: Vec<usize>,
    pub prior_p: f64,
}

/// Per-sample edge logits and the batch-averaged V weights.
#[derive(Clone, Copy, Debug)]
pub struct EdgeHeads {
    /// `[m, P, 2]`, class 0 = edge present.
    pub logits: Var,
    /// `[P]`, batch mean of the sigmoid head.
    pub v_pairs: Var,
}

/// Shared trunk with two distinct output heads.
#[derive(Clone, Debug)]
pub struct EdgeEncoder {
    pub cfg: EdgeNetConfig,
    pub trunk: Mlp,
    pub logit_head: Linear,
    pub v_head: Linear,
}

impl EdgeEncoder {
    /// Output heads start at zero weights: the logit bias encodes the prior
    /// and V starts at `sigmoid(0) = 0.5`.
    pub fn new(store: &mut ParamStore, cfg: EdgeNetConfig, rng: &mut impl Rng) -> Self {
        let mut widths = vec![cfg.n * cfg.d];
        widths.extend(&cfg.hidden);
        let trunk = Mlp::new(store, "enc_a.trunk", &widths, true, rng);
        let top = *widths.last().unwrap();
        let p = pair_count(cfg.n);
        let (lp, lq) = (cfg.prior_p.ln(), (1.0 - cfg.prior_p).ln());
        let bias = Tensor::from_fn(&[2 * p], |i| if i % 2 == 0 { lp } else { lq });
        let logit_head = Linear::with_bias(store, "enc_a.logits", top, bias);
        let v_head = Linear::with_bias(store, "enc_a.v", top, Tensor::zeros(&[p]));
        Self {
            cfg,
            trunk,
            logit_head,
            v_head,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<EdgeHeads> {
        let shape = tape.shape(x).to_vec();
        let want = self.cfg.n * self.cfg.d;
        if shape.len() != 2 || shape[1] != want || shape[0] == 0 {
            return Err(Error::shape("encode_edges", &shape, &[0, want]));
        }
        let p = pair_count(self.cfg.n);
        let h = self.trunk.forward(tape, x)?;
        let raw = self.logit_head.forward(tape, h)?;
        let logits = tape.reshape(raw, &[shape[0], p, 2])?;
        let v_raw = self.v_head.forward(tape, h)?;
        let v = tape.sigmoid(v_raw);
        let v_pairs = tape.mean_leading(v)?;
        Ok(EdgeHeads { logits, v_pairs })
    }

    /// Batch-averaged V as a full matrix with unit diagonal.
    pub fn encode_edge_weights(&self, tape: &mut Tape<'_>, x: Var) -> Result<Tensor> {
        let heads = self.forward(tape, x)?;
        Ok(pairs_matrix(tape.value(heads.v_pairs).data(), self.cfg.n, 1.0))
    }

    pub fn encode_edge_logits(&self, tape: &mut Tape<'_>, x: Var) -> Result<EdgePosterior> {
        let heads = self.forward(tape, x)?;
        EdgePosterior::from_pair_logits(tape.value(heads.logits), self.cfg.n, self.cfg.prior_p)
    }
}

/// Batch-averaged edge class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePosterior {
    pub n: usize,
    /// `[P, 2]`, mean over samples of `softmax(logits)`.
    pub class_probs: Tensor,
    /// `[n, n]` probability of an edge, symmetric, unit diagonal.
    pub probs: Tensor,
    pub prior_p: f64,
}

impl EdgePosterior {
    /// From per-sample pair logits `[m, P, 2]`.
    pub fn from_pair_logits(logits: &Tensor, n: usize, prior_p: f64) -> Result<Self> {
        let p = pair_count(n);
        let [m, pp, 2] = *logits.shape() else {
            return Err(Error::shape("edge posterior", logits.shape(), &[0, p, 2]));
        };
        if pp != p || m == 0 {
            return Err(Error::shape("edge posterior", logits.shape(), &[0, p, 2]));
        }
        let mut class = vec![0.0; 2 * p];
        for sample in logits.data().chunks(2 * p) {
            for (acc, l) in class.chunks_mut(2).zip(sample.chunks(2)) {
                let q0 = crate::autodiff::sigmoid(l[0] - l[1]);
                acc[0] += q0;
                acc[1] += 1.0 - q0;
            }
        }
        let inv = 1.0 / m as f64;
        class.iter_mut().for_each(|v| *v *= inv);
        Ok(Self::from_class_probs(Tensor::new(&[p, 2], class)?, n, prior_p))
    }

    pub fn from_class_probs(class_probs: Tensor, n: usize, prior_p: f64) -> Self {
        let present: Vec<f64> = class_probs.data().chunks(2).map(|c| c[0]).collect();
        let probs = pairs_matrix(&present, n, 1.0);
        Self {
            n,
            class_probs,
            probs,
            prior_p,
        }
    }

    /// From unconstrained per-sample logit matrices `[n, n, 2]`. Each pair
    /// uses the mean of its two orientations, so `L` and `L^T` agree.
    pub fn from_raw_logits(raw: &[Tensor], prior_p: f64) -> Result<Self> {
        let first = raw.first().ok_or_else(|| Error::Param("no samples".into()))?;
        let [n, n2, 2] = *first.shape() else {
            return Err(Error::shape("edge posterior", first.shape(), &[0, 0, 2]));
        };
        if n != n2 {
            return Err(Error::shape("edge posterior", first.shape(), &[n, n, 2]));
        }
        let p = pair_count(n);
        let mut flat = Vec::with_capacity(raw.len() * 2 * p);
        for l in raw {
            if l.shape() != first.shape() {
                return Err(Error::shape("edge posterior", l.shape(), first.shape()));
            }
            for s in 0..n {
                for t in s + 1..n {
                    for k in 0..2 {
                        flat.push(0.5 * (l.get(&[s, t, k]) + l.get(&[t, s, k])));
                    }
                }
            }
        }
        Self::from_pair_logits(&Tensor::new(&[raw.len(), p, 2], flat)?, n, prior_p)
    }

    /// Mean absolute gap between edge probabilities and the prior.
    pub fn mean_prior_gap(&self) -> f64 {
        let p = self.class_probs.numel() / 2;
        if p == 0 {
            return 0.0;
        }
        self.class_probs
            .data()
            .chunks(2)
            .map(|c| (c[0] - self.prior_p).abs())
            .sum::<f64>()
            / p as f64
    }
}
