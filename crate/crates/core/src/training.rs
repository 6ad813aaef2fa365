//! Objective assembly and the optimization loop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::EdgePosterior;
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Noise, SagVae};
use crate::params::{Adam, ParamStore};
use crate::stochastic::{kl_edge, kl_gaussian_std};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconLoss {
    /// Bernoulli negative log-likelihood on the decoder logits.
    BernoulliCrossEntropy,
    /// Sum of squared errors on the activated output.
    MeanSquaredError,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_tau_start() -> f64 {
    1.0
}
fn default_tau_end() -> f64 {
    0.3
}
fn default_divergence() -> f64 {
    1e6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_tau_start")]
    pub tau_start: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    /// Defaults to 60% of `epochs`.
    #[serde(default)]
    pub tau_anneal_epochs: Option<usize>,
    /// Defaults to `1 / (n^2 - n)`.
    #[serde(default)]
    pub beta_a: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    pub recon: ReconLoss,
    /// Abort threshold on the data terms (reconstruction plus KL_Z).
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, recon: ReconLoss) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate: default_lr(),
            tau_start: default_tau_start(),
            tau_end: default_tau_end(),
            tau_anneal_epochs: None,
            beta_a: None,
            seed: 0,
            recon,
            divergence_threshold: default_divergence(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start && self.tau_start.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < tau_end <= tau_start, got {} and {}",
                self.tau_end, self.tau_start
            )));
        }
        if let Some(b) = self.beta_a {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("beta_a must be positive, got {b}")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn anneal_horizon(&self) -> usize {
        self.tau_anneal_epochs
            .unwrap_or_else(|| (self.epochs as f64 * 0.6).round() as usize)
    }
}

/// Geometric interpolation from `tau_start` to `tau_end` over the anneal
/// horizon, constant afterwards.
pub fn temperature_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let horizon = cfg.anneal_horizon();
    if step >= horizon {
        return cfg.tau_end;
    }
    let frac = step as f64 / horizon as f64;
    cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(frac)
}

/// The three loss terms and their sum. `kl_a` is already scaled by beta_A.
#[derive(Clone, Copy, Debug)]
pub struct Elbo {
    pub total: Var,
    pub recon: Var,
    pub kl_z: Var,
    pub kl_a: Var,
}

/// Negative ELBO for one forward pass of a batch `x` (`[m, n * d]`).
pub fn elbo_terms(
    tape: &mut Tape<'_>,
    model: &SagVae,
    x: Var,
    fwd: &ForwardPass,
    recon: ReconLoss,
    beta_a: f64,
) -> Result<Elbo> {
    let m = tape.shape(x)[0] as f64;
    let rec_sum = match recon {
        ReconLoss::BernoulliCrossEntropy => {
            // softplus(l) - x l
            let sp = tape.softplus(fwd.logits);
            let xl = tape.mul(fwd.logits, x)?;
            let nll = tape.sub(sp, xl)?;
            tape.sum(nll)
        }
        ReconLoss::MeanSquaredError => {
            let y = model.dec.activate(tape, fwd.logits);
            let r = tape.sub(y, x)?;
            let sq = tape.mul(r, r)?;
            tape.sum(sq)
        }
    };
    let recon_v = tape.scale(rec_sum, 1.0 / m);
    let kl_z_sum = kl_gaussian_std(tape, &fwd.post)?;
    let kl_z = tape.scale(kl_z_sum, 1.0 / m);
    let kl_a = match fwd.q_mean {
        Some(q) => {
            let p = model.cfg.prior_p;
            let half = kl_edge(tape, q, [p, 1.0 - p])?;
            tape.scale(half, 2.0 * beta_a)
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let data = tape.add(recon_v, kl_z)?;
    let total = tape.add(data, kl_a)?;
    Ok(Elbo {
        total,
        recon: recon_v,
        kl_z,
        kl_a,
    })
}

/// Samples noise, runs the model, and assembles the objective.
pub fn elbo_loss(
    tape: &mut Tape<'_>,
    model: &SagVae,
    x: Var,
    tau: f64,
    recon: ReconLoss,
    beta_a: f64,
    rng: &mut impl Rng,
) -> Result<Elbo> {
    let fwd = model.forward(tape, x, tau, rng)?;
    elbo_terms(tape, model, x, &fwd, recon, beta_a)
}

/// Objective with caller-supplied noise.
pub fn elbo_loss_with(
    tape: &mut Tape<'_>,
    model: &SagVae,
    x: Var,
    tau: f64,
    recon: ReconLoss,
    beta_a: f64,
    noise: &Noise,
) -> Result<Elbo> {
    let fwd = model.forward_with(tape, x, tau, noise)?;
    elbo_terms(tape, model, x, &fwd, recon, beta_a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_a: f64,
    pub total: f64,
    pub tau: f64,
    /// Mean |q(A) - prior| over pairs, averaged across the epoch's batches.
    pub prior_gap: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_gap: Option<f64>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// `epoch,recon,kl_z,kl_a,total`, values printed in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,recon,kl_z,kl_a,total\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.recon, e.kl_z, e.kl_a, e.total);
        }
        s
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

fn finite(v: f64, term: &'static str, epoch: usize, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, epoch, step })
    }
}

/// Epoch-at-a-time optimizer state: Adam moments, the shuffling RNG and
/// the last good parameters.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    beta_a: f64,
    rng: ChaCha8Rng,
    adam: Adam,
    good: ParamStore,
    order: Vec<usize>,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &SagVae, data: &Tensor, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let width = model.cfg.n * model.cfg.d;
        let [count, w] = *data.shape() else {
            return Err(Error::shape("train", data.shape(), &[0, width]));
        };
        if w != width {
            return Err(Error::shape("train", data.shape(), &[count, width]));
        }
        if count == 0 {
            return Err(Error::Param("empty dataset".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            beta_a: cfg.beta_a.unwrap_or_else(|| model.cfg.default_beta_a()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            adam: Adam::new(&model.store, cfg.learning_rate),
            good: model.store.clone(),
            order: (0..count).collect(),
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Runs one epoch over `data`, the tensor given to [`Trainer::new`].
    /// On a non-finite term or divergence, parameters are restored to the
    /// end of the previous epoch and the error is returned.
    pub fn epoch(&mut self, model: &mut SagVae, data: &Tensor) -> Result<EpochStats> {
        let epoch = self.epoch + 1;
        let cfg = &self.cfg;
        let tau = temperature_schedule(epoch - 1, cfg);
        let prior = model.cfg.prior_p;
        self.order.shuffle(&mut self.rng);
        let (mut rec, mut klz, mut kla, mut tot, mut gap) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (step, rows) in self.order.chunks(cfg.batch_size).enumerate() {
            let rng = &mut self.rng;
            let outcome = (|| {
                let xb = data.select_rows(rows);
                let mut tape = Tape::with_params(&model.store);
                let x = tape.constant(xb);
                let fwd = model.forward(&mut tape, x, tau, rng)?;
                let elbo = elbo_terms(&mut tape, model, x, &fwd, cfg.recon, self.beta_a)?;
                let r = finite(tape.value(elbo.recon).item()?, "reconstruction", epoch, step)?;
                let kz = finite(tape.value(elbo.kl_z).item()?, "kl_z", epoch, step)?;
                let ka = finite(tape.value(elbo.kl_a).item()?, "kl_a", epoch, step)?;
                let t = finite(tape.value(elbo.total).item()?, "total", epoch, step)?;
                if r + kz > cfg.divergence_threshold {
                    return Err(Error::Divergence {
                        epoch,
                        loss: r + kz,
                        restored: epoch - 1,
                    });
                }
                let g = fwd.q_mean.map_or(0.0, |q| {
                    let qv = tape.value(q);
                    qv.data().chunks(2).map(|c| (c[0] - prior).abs()).sum::<f64>() / (qv.numel() / 2) as f64
                });
                let grads = tape.backward(elbo.total)?;
                if !grads.is_finite() {
                    return Err(Error::NonFinite {
                        term: "gradient",
                        epoch,
                        step,
                    });
                }
                Ok(([r, kz, ka, t, g], grads))
            })();
            let ([r, kz, ka, t, g], grads) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    model.store.copy_from(&self.good)?;
                    return Err(e);
                }
            };
            self.adam.step(&mut model.store, &grads);
            rec += r;
            klz += kz;
            kla += ka;
            tot += t;
            gap += g;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        self.good.copy_from(&model.store)?;
        self.epoch = epoch;
        Ok(EpochStats {
            epoch,
            recon: rec / b,
            kl_z: klz / b,
            kl_a: kla / b,
            total: tot / b,
            tau,
            prior_gap: gap / b,
        })
    }
}

/// Trains `model` in place on the rows of `data` (`[N, n * d]`).
///
/// A checkpoint is written to `checkpoint` after every epoch. On a
/// non-finite term or divergence, parameters are restored to the end of the
/// last completed epoch and the error is returned.
pub fn train(model: &mut SagVae, data: &Tensor, cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<TrainReport> {
    let start = Instant::now();
    let mut trainer = Trainer::new(model, data, cfg)?;
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        report.epochs.push(trainer.epoch(model, data)?);
        if let Some(path) = checkpoint {
            model.save(path)?;
        }
    }
    report.final_gap = model.edge_posterior(data)?.as_ref().map(EdgePosterior::mean_prior_gap);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
