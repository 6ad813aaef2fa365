//! The assembled generative model: Z encoder, edge encoder and decoder sharing
//! one parameter store.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{pair_count, pairs_matrix, Tape, Var};
use crate::decoder::{attention_weights, normalize_adjacency, Decoder, DecoderConfig, OutputActivation};
use crate::encoders::{EdgeEncoder, EdgeHeads, EdgeNetConfig, EdgePosterior, EncoderConfig, LatentMode, Linear, ZEncoder};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::stochastic::{gumbel_softmax_with, gumbel_uniforms, sample_gaussian_with, standard_normal, GaussianPosterior};
use crate::tensor::Tensor;

/// Where the decoder's graph comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    /// Inferred by the edge encoder.
    #[default]
    Learned,
    /// Self-loops only: every node decodes independently.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub d: usize,
    pub latent: LatentMode,
    pub enc_hidden: Vec<usize>,
    pub edge_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    #[serde(default)]
    pub attention_width: Option<usize>,
    pub output: OutputActivation,
    pub prior_p: f64,
    #[serde(default)]
    pub graph: GraphMode,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config("n and d must be positive".into()));
        }
        if !(self.prior_p > 0.0 && self.prior_p < 1.0) {
            return Err(Error::Config(format!("prior_p must be in (0, 1), got {}", self.prior_p)));
        }
        let w = match self.latent {
            LatentMode::DimensionWise { d_z } => d_z,
            LatentMode::DataPointWise { width } => width,
        };
        if w == 0 {
            return Err(Error::Config("latent width must be positive".into()));
        }
        Ok(())
    }

    /// `1 / (n^2 - n)`.
    pub fn default_beta_a(&self) -> f64 {
        1.0 / (self.n * self.n - self.n).max(1) as f64
    }
}

/// Noise consumed by one forward pass.
#[derive(Clone, Debug)]
pub struct Noise {
    pub eps: Tensor,
    pub uniforms: Option<Tensor>,
}

/// Tape handles produced by [`SagVae::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub post: GaussianPosterior,
    pub z: Var,
    /// Pre-activation reconstruction `[m, n * d]`.
    pub logits: Var,
    pub heads: Option<EdgeHeads>,
    /// Batch mean of the edge class probabilities `[P, 2]`.
    pub q_mean: Option<Var>,
}

/// A fixed graph for evaluation-time decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphContext {
    /// Off-diagonal edge weights, zero diagonal.
    pub a: Tensor,
    /// Attention edge weights, unit diagonal.
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct SagVae {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub enc_z: ZEncoder,
    pub enc_a: Option<EdgeEncoder>,
    pub expand: Option<Linear>,
    pub dec: Decoder,
}

const EVAL_CHUNK: usize = 100;

impl SagVae {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let enc_z = ZEncoder::new(
            &mut store,
            EncoderConfig {
                mode: cfg.latent,
                n: cfg.n,
                d: cfg.d,
                hidden: cfg.enc_hidden.clone(),
            },
            &mut rng,
        );
        let enc_a = (cfg.graph == GraphMode::Learned).then(|| {
            EdgeEncoder::new(
                &mut store,
                EdgeNetConfig {
                    n: cfg.n,
                    d: cfg.d,
                    hidden: cfg.edge_hidden.clone(),
                    prior_p: cfg.prior_p,
                },
                &mut rng,
            )
        });
        let (expand, input_width) = match cfg.latent {
            LatentMode::DimensionWise { d_z } => (None, d_z),
            LatentMode::DataPointWise { width } => (Some(Linear::new(&mut store, "expand", width, cfg.n, &mut rng)), 1),
        };
        let dec = Decoder::new(
            &mut store,
            DecoderConfig {
                input_width,
                hidden: cfg.dec_hidden.clone(),
                output_width: cfg.d,
                attention_width: cfg.attention_width,
                output: cfg.output,
                lambda_init: 0.0,
            },
            &mut rng,
        );
        Ok(Self {
            cfg,
            store,
            enc_z,
            enc_a,
            expand,
            dec,
        })
    }

    pub fn latent_width(&self) -> usize {
        self.cfg.latent.flat_width(self.cfg.n)
    }

    pub fn draw_noise(&self, m: usize, rng: &mut impl Rng) -> Noise {
        let eps_shape = match self.cfg.latent {
            LatentMode::DimensionWise { d_z } => vec![m, self.cfg.n, d_z],
            LatentMode::DataPointWise { width } => vec![m, width],
        };
        let eps = standard_normal(rng, &eps_shape);
        let uniforms = self
            .enc_a
            .is_some()
            .then(|| gumbel_uniforms(rng, &[m, pair_count(self.cfg.n), 2]));
        Noise { eps, uniforms }
    }

    /// Latent code to first-layer node features `[m, n, input_width]`.
    pub fn latent_to_nodes(&self, tape: &mut Tape<'_>, z: Var) -> Result<Var> {
        let m = tape.shape(z)[0];
        match (&self.expand, self.cfg.latent) {
            (Some(lin), _) => {
                let h = lin.forward(tape, z)?;
                tape.reshape(h, &[m, self.cfg.n, 1])
            }
            (None, LatentMode::DimensionWise { d_z }) => tape.reshape(z, &[m, self.cfg.n, d_z]),
            (None, _) => unreachable!(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, tau: f64, rng: &mut impl Rng) -> Result<ForwardPass> {
        let m = tape.shape(x)[0];
        let noise = self.draw_noise(m, rng);
        self.forward_with(tape, x, tau, &noise)
    }

    pub fn forward_with(&self, tape: &mut Tape<'_>, x: Var, tau: f64, noise: &Noise) -> Result<ForwardPass> {
        let m = tape.shape(x)[0];
        let n = self.cfg.n;
        let post = self.enc_z.encode_z(tape, x)?;
        let z = sample_gaussian_with(tape, &post, noise.eps.clone())?;
        let h1 = self.latent_to_nodes(tape, z)?;

        let (a_soft, v, heads, q_mean) = match &self.enc_a {
            Some(enc) => {
                let heads = enc.forward(tape, x)?;
                let u = noise
                    .uniforms
                    .as_ref()
                    .ok_or_else(|| Error::State("edge noise missing".into()))?;
                let sample = gumbel_softmax_with(tape, heads.logits, tau, u)?;
                let present = tape.narrow_last(sample.simplex, 0, 1)?;
                let present = tape.reshape(present, &[m, pair_count(n)])?;
                let mean = tape.mean_leading(present)?;
                let a_soft = tape.pairs_to_matrix(mean, n, 0.0)?;
                let v = tape.pairs_to_matrix(heads.v_pairs, n, 1.0)?;
                let probs = tape.softmax_last(heads.logits)?;
                let q = tape.mean_leading(probs)?;
                (a_soft, v, Some(heads), Some(q))
            }
            None => {
                let a = tape.constant(Tensor::zeros(&[n, n]));
                let v = tape.constant(Tensor::ones(&[n, n]));
                (a, v, None, None)
            }
        };
        let a_norm = normalize_adjacency(tape, a_soft)?;
        let weights = attention_weights(tape, a_soft, v)?;
        let out = self.dec.decode_logits(tape, h1, a_norm, weights)?;
        let logits = tape.reshape(out, &[m, n * self.cfg.d])?;
        Ok(ForwardPass {
            post,
            z,
            logits,
            heads,
            q_mean,
        })
    }

    /// Edge posterior averaged over every row of `x` (`[N, n * d]`).
    /// `None` for the identity-graph model.
    pub fn edge_posterior(&self, x: &Tensor) -> Result<Option<EdgePosterior>> {
        Ok(self.edge_stats(x)?.map(|(post, _)| post))
    }

    fn edge_stats(&self, x: &Tensor) -> Result<Option<(EdgePosterior, Vec<f64>)>> {
        let Some(enc) = &self.enc_a else { return Ok(None) };
        let total = x.shape()[0];
        if total == 0 {
            return Err(Error::Param("empty dataset".into()));
        }
        let p = pair_count(self.cfg.n);
        let mut class = vec![0.0; 2 * p];
        let mut v = vec![0.0; p];
        for rows in chunks(total) {
            let xb = x.select_rows(&rows);
            let mut tape = Tape::with_params(&self.store);
            let xv = tape.constant(xb);
            let heads = enc.forward(&mut tape, xv)?;
            let probs = tape.softmax_last(heads.logits)?;
            let q = tape.mean_leading(probs)?;
            let w = rows.len() as f64 / total as f64;
            for (acc, val) in class.iter_mut().zip(tape.value(q).data()) {
                *acc += w * val;
            }
            for (acc, val) in v.iter_mut().zip(tape.value(heads.v_pairs).data()) {
                *acc += w * val;
            }
        }
        let post = EdgePosterior::from_class_probs(Tensor::new(&[p, 2], class)?, self.cfg.n, self.cfg.prior_p);
        Ok(Some((post, v)))
    }

    /// Mean edge probabilities and V over `x`, for deterministic decoding.
    pub fn graph_context(&self, x: &Tensor) -> Result<GraphContext> {
        let n = self.cfg.n;
        match self.edge_stats(x)? {
            Some((post, v)) => {
                let present: Vec<f64> = post.class_probs.data().chunks(2).map(|c| c[0]).collect();
                Ok(GraphContext {
                    a: pairs_matrix(&present, n, 0.0),
                    v: pairs_matrix(&v, n, 1.0),
                })
            }
            None => Ok(GraphContext {
                a: Tensor::zeros(&[n, n]),
                v: Tensor::ones(&[n, n]),
            }),
        }
    }

    /// Posterior means and log-variances, each `[N, latent_width]`.
    pub fn encode_mean(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let total = x.shape()[0];
        let w = self.latent_width();
        let (mut mu, mut lv) = (Vec::with_capacity(total * w), Vec::with_capacity(total * w));
        for rows in chunks(total) {
            let mut tape = Tape::with_params(&self.store);
            let xv = tape.constant(x.select_rows(&rows));
            let post = self.enc_z.encode_z(&mut tape, xv)?;
            mu.extend_from_slice(tape.value(post.mu).data());
            lv.extend_from_slice(tape.value(post.logvar).data());
        }
        Ok((Tensor::new(&[total, w], mu)?, Tensor::new(&[total, w], lv)?))
    }

    /// Activated decoder output `[N, n * d]` for flat latent codes `[N, latent_width]`.
    pub fn decode_latent(&self, z: &Tensor, ctx: &GraphContext) -> Result<Tensor> {
        let total = z.shape()[0];
        let w = self.latent_width();
        if z.shape() != [total, w] {
            return Err(Error::shape("decode_latent", z.shape(), &[total, w]));
        }
        let width = self.cfg.n * self.cfg.d;
        let mut out = Vec::with_capacity(total * width);
        for rows in chunks(total) {
            let mut tape = Tape::with_params(&self.store);
            let zv = tape.constant(z.select_rows(&rows));
            let zv = match self.cfg.latent {
                LatentMode::DimensionWise { d_z } => tape.reshape(zv, &[rows.len(), self.cfg.n, d_z])?,
                LatentMode::DataPointWise { .. } => zv,
            };
            let h1 = self.latent_to_nodes(&mut tape, zv)?;
            let a = tape.constant(ctx.a.clone());
            let v = tape.constant(ctx.v.clone());
            let a_norm = normalize_adjacency(&mut tape, a)?;
            let weights = attention_weights(&mut tape, a, v)?;
            let y = self.dec.decode(&mut tape, h1, a_norm, weights)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Tensor::new(&[total, width], out)
    }

    /// Decodes posterior means under the posterior-mean graph of `x` itself.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let ctx = self.graph_context(x)?;
        self.reconstruct_with(x, &ctx)
    }

    pub fn reconstruct_with(&self, x: &Tensor, ctx: &GraphContext) -> Result<Tensor> {
        let (mu, _) = self.encode_mean(x)?;
        self.decode_latent(&mu, ctx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.cfg).expect("config serializes");
        self.store.to_bytes(&meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, store) = ParamStore::from_bytes(bytes)?;
        let cfg: ModelConfig =
            serde_json::from_str(&meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let mut model = Self::new(cfg)?;
        model.store.copy_from(&store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn chunks(total: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..total)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s..(s + EVAL_CHUNK).min(total)).collect())
}
