//! Reparameterized samplers and KL terms for the Gaussian latent code and the
//! two-class relaxed edge variables.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const U_EPS: f64 = 1e-10;

/// Diagonal Gaussian posterior recorded on a tape. `logvar` is already
/// clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianPosterior {
    /// Wraps raw encoder outputs, clamping the log-variance.
    pub fn new(tape: &mut Tape<'_>, mu: Var, raw_logvar: Var) -> Result<Self> {
        if tape.shape(mu) != tape.shape(raw_logvar) {
            return Err(Error::shape("gaussian posterior", tape.shape(mu), tape.shape(raw_logvar)));
        }
        let logvar = tape.clamp(raw_logvar, LOGVAR_MIN, LOGVAR_MAX);
        Ok(Self { mu, logvar })
    }
}

pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)`.
pub fn sample_gaussian(tape: &mut Tape<'_>, post: &GaussianPosterior, rng: &mut impl Rng) -> Result<Var> {
    let eps = standard_normal(rng, tape.shape(post.mu));
    sample_gaussian_with(tape, post, eps)
}

/// Reparameterized draw with caller-supplied standard-normal noise.
pub fn sample_gaussian_with(tape: &mut Tape<'_>, post: &GaussianPosterior, eps: Tensor) -> Result<Var> {
    let half = tape.scale(post.logvar, 0.5);
    let sigma = tape.exp(half)?;
    let eps = tape.constant(eps);
    let noise = tape.mul(sigma, eps)?;
    tape.add(post.mu, noise)
}

/// Analytic `KL(q || N(0, I))` summed over every entry.
pub fn kl_gaussian_std(tape: &mut Tape<'_>, post: &GaussianPosterior) -> Result<Var> {
    let mu2 = tape.mul(post.mu, post.mu)?;
    let var = tape.exp(post.logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, post.logvar)?;
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    let kl = tape.scale(s, 0.5);
    // rounding can leave -1e-16 near q = p
    Ok(tape.clamp(kl, 0.0, f64::INFINITY))
}

/// Plain-value version of [`kl_gaussian_std`].
pub fn kl_gaussian_value(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let lv = lv.clamp(LOGVAR_MIN, LOGVAR_MAX);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum()
}

/// A relaxed two-class draw.
#[derive(Clone, Copy, Debug)]
pub struct GumbelSoftmaxSample {
    pub simplex: Var,
    pub tau: f64,
}

/// Uniform draws clamped away from 0 and 1.
pub fn gumbel_uniforms(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>().clamp(U_EPS, 1.0 - U_EPS))
}

/// `softmax((log_alpha + G) / tau)` over the last axis, `G = -log(-log u)`.
pub fn sample_gumbel_softmax(
    tape: &mut Tape<'_>,
    log_alpha: Var,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<GumbelSoftmaxSample> {
    let u = gumbel_uniforms(rng, tape.shape(log_alpha));
    gumbel_softmax_with(tape, log_alpha, tau, &u)
}

/// Relaxed draw from caller-supplied uniforms.
pub fn gumbel_softmax_with(
    tape: &mut Tape<'_>,
    log_alpha: Var,
    tau: f64,
    uniforms: &Tensor,
) -> Result<GumbelSoftmaxSample> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    if uniforms.shape() != tape.shape(log_alpha) {
        return Err(Error::shape("gumbel_softmax", tape.shape(log_alpha), uniforms.shape()));
    }
    let g = tape.constant(uniforms.map(gumbel_from_uniform));
    let shifted = tape.add(log_alpha, g)?;
    let scaled = tape.scale(shifted, 1.0 / tau);
    let simplex = tape.softmax_last(scaled)?;
    Ok(GumbelSoftmaxSample { simplex, tau })
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.clamp(U_EPS, 1.0 - U_EPS).ln()).ln()
}

fn check_prior(p: [f64; 2]) -> Result<()> {
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (p[0] + p[1] - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!("prior {p:?} is not a simplex")));
    }
    Ok(())
}

/// `sum_k q_k log(q_k / p_k)` over every row of `q_probs` (`[..., 2]`).
/// Zero-probability posterior classes contribute nothing.
pub fn kl_edge(tape: &mut Tape<'_>, q_probs: Var, prior: [f64; 2]) -> Result<Var> {
    check_prior(prior)?;
    let q = tape.value(q_probs);
    if q.shape().last() != Some(&2) {
        return Err(Error::shape("kl_edge", q.shape(), &[2]));
    }
    for row in q.data().chunks(2) {
        for k in 0..2 {
            if prior[k] == 0.0 && row[k] > 0.0 {
                return Err(Error::InfiniteKl { class: k });
            }
        }
    }
    // q log q - q log p, with 0 log 0 = 0: clamp keeps log finite and the
    // factor q zeroes the term.
    let safe = tape.clamp(q_probs, f64::MIN_POSITIVE, 1.0);
    let log_q = tape.log(safe)?;
    let log_p = tape.constant(Tensor::new(&[2], prior.map(|p| p.max(f64::MIN_POSITIVE).ln()).to_vec())?);
    let diff = tape.sub(log_q, log_p)?;
    let terms = tape.mul(q_probs, diff)?;
    let kl = tape.sum(terms);
    Ok(tape.clamp(kl, 0.0, f64::INFINITY))
}

/// Plain-value KL between two discrete distributions.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (k, (&qk, &pk)) in q.iter().zip(p).enumerate() {
        if qk > 0.0 {
            if pk == 0.0 {
                return Err(Error::InfiniteKl { class: k });
            }
            kl += qk * (qk / pk).ln();
        }
    }
    Ok(kl)
}
