#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sagvae::decoder::OutputActivation;
use sagvae::encoders::LatentMode;
use sagvae::model::Noise;
use sagvae::training::elbo_loss_with;
use sagvae::{GraphMode, ModelConfig, ParamStore, ReconLoss, SagVae, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Worst relative error between the tape gradient of `sum(f(inputs) * r)`
/// and central differences, over every input entry. `r` is a fixed random
/// projection so that every output entry matters.
pub fn grad_check<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let proj = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        uniform(&mut rng, tape.shape(y), -1.0, 1.0)
    };
    let loss_of = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars);
        let r = tape.constant(proj.clone());
        let p = tape.mul(y, r).unwrap();
        let l = tape.sum(p);
        tape.value(l).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars);
    let r = tape.constant(proj.clone());
    let p = tape.mul(y, r).unwrap();
    let l = tape.sum(p);
    let grads = tape.backward(l).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let g = grads.wrt(*v).unwrap_or(&zeros);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[j], fd));
        }
    }
    worst
}

/// A 5-node, 3-feature model whose configuration varies with `seed`.
pub fn tiny_model(seed: u64) -> (SagVae, ReconLoss) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = if rng.random_bool(0.5) {
        LatentMode::DimensionWise { d_z: rng.random_range(1..=3) }
    } else {
        LatentMode::DataPointWise { width: rng.random_range(2..=4) }
    };
    let sigmoid = rng.random_bool(0.5);
    let hidden_layers = rng.random_range(0..=1);
    let cfg = ModelConfig {
        n: 5,
        d: 3,
        latent,
        enc_hidden: vec![6],
        edge_hidden: vec![6, 5],
        dec_hidden: vec![4; hidden_layers],
        attention_width: None,
        output: if sigmoid { OutputActivation::Sigmoid } else { OutputActivation::Identity },
        prior_p: rng.random_range(0.1..0.6),
        graph: GraphMode::Learned,
        init_seed: seed,
    };
    let mut model = SagVae::new(cfg).unwrap();
    // Open the attention gates and move the edge heads off their
    // initialization so that every parameter influences the loss.
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        if name.ends_with("lambda") || name.starts_with("enc_a.logits") || name.starts_with("enc_a.v") {
            let t = model.store.get_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.8..0.8));
        }
    }
    let recon = if sigmoid && rng.random_bool(0.5) {
        ReconLoss::BernoulliCrossEntropy
    } else {
        ReconLoss::MeanSquaredError
    };
    (model, recon)
}

fn loss_with(model: &SagVae, store: &ParamStore, x: &Tensor, noise: &Noise, recon: ReconLoss) -> f64 {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    let e = elbo_loss_with(&mut tape, model, xv, 0.7, recon, 0.05, noise).unwrap();
    tape.value(e.total).item().unwrap()
}

/// Worst relative error over every parameter of a tiny model on a batch of
/// 3 samples with frozen noise.
pub fn model_grad_check(seed: u64) -> f64 {
    let (model, recon) = tiny_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let x = uniform(&mut rng, &[3, 15], 0.05, 0.95);
    let noise = model.draw_noise(3, &mut rng);

    let grads = {
        let mut tape = Tape::with_params(&model.store);
        let xv = tape.constant(x.clone());
        let e = elbo_loss_with(&mut tape, &model, xv, 0.7, recon, 0.05, &noise).unwrap();
        tape.backward(e.total).unwrap()
    };
    let mut store = model.store.clone();
    let mut worst: f64 = 0.0;
    for id in model.store.ids() {
        let n = model.store.get(id).numel();
        let zeros = Tensor::zeros(model.store.get(id).shape());
        let g = grads.param(id).unwrap_or(&zeros).clone();
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + STEP;
            let lp = loss_with(&model, &store, &x, &noise, recon);
            store.get_mut(id).data_mut()[j] = orig - STEP;
            let lm = loss_with(&model, &store, &x, &noise, recon);
            store.get_mut(id).data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[j], fd));
        }
    }
    worst
}

/// Independent dense normalization, written with explicit loops.
pub fn normalize_oracle(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut hat = vec![vec![0.0; n]; n];
    for (s, row) in hat.iter_mut().enumerate() {
        for (t, v) in row.iter_mut().enumerate() {
            *v = a.get(&[s, t]) + if s == t { 1.0 } else { 0.0 };
        }
    }
    let deg: Vec<f64> = hat.iter().map(|r| r.iter().sum()).collect();
    let mut out = Tensor::zeros(&[n, n]);
    for s in 0..n {
        for t in 0..n {
            out.set(&[s, t], hat[s][t] / (deg[s] * deg[t]).sqrt());
        }
    }
    out
}

/// `Hbar_i = sum_j alpha_ij (h_j Wg) Wf`, node by node.
pub fn attention_apply_oracle(alpha: &Tensor, h: &Tensor, wg: &Tensor, wf: &Tensor) -> Tensor {
    let (n, d) = (h.shape()[0], h.shape()[1]);
    let dbar = wg.shape()[1];
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let mut mixed = vec![0.0; dbar];
        for j in 0..n {
            for (k, m) in mixed.iter_mut().enumerate() {
                let hg: f64 = (0..d).map(|c| h.get(&[j, c]) * wg.get(&[c, k])).sum();
                *m += alpha.get(&[i, j]) * hg;
            }
        }
        for c in 0..d {
            let v: f64 = (0..dbar).map(|k| mixed[k] * wf.get(&[k, c])).sum();
            out.set(&[i, c], v);
        }
    }
    out
}

/// `(tp, fp, fn)` by enumerating every unordered pair.
pub fn prf_oracle(pred: &Tensor, truth: &Tensor, threshold: f64) -> (usize, usize, usize) {
    let n = pred.shape()[0];
    let mut pairs = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s < t {
                pairs.push((pred.get(&[s, t]) > threshold, truth.get(&[s, t]) == 1.0));
            }
        }
    }
    let tp = pairs.iter().filter(|&&(p, y)| p && y).count();
    let fp = pairs.iter().filter(|&&(p, y)| p && !y).count();
    let fn_ = pairs.iter().filter(|&&(p, y)| !p && y).count();
    (tp, fp, fn_)
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, binary: bool) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    for s in 0..n {
        for t in s + 1..n {
            let v = if binary {
                f64::from(u8::from(rng.random_bool(0.4)))
            } else {
                rng.random::<f64>()
            };
            a.set(&[s, t], v);
            a.set(&[t, s], v);
        }
    }
    a
}

/// Away from zero by at least `gap`, for ops with a kink there.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Worst gradient error of every primitive on one random instance.
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let (p, q, k) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
    let b = r.random_range(1..3);

    let a = uniform(r, &[b, p, q], -1.5, 1.5);
    let full = uniform(r, &[b, p, q], -1.5, 1.5);
    let suffix = uniform(r, &[q], -1.5, 1.5);
    out.push(("add", grad_check(&[a.clone(), full.clone()], seed, |t, v| t.add(v[0], v[1]).unwrap())));
    out.push(("sub", grad_check(&[a.clone(), suffix.clone()], seed, |t, v| t.sub(v[0], v[1]).unwrap())));
    out.push(("mul", grad_check(&[a.clone(), full.clone()], seed, |t, v| t.mul(v[0], v[1]).unwrap())));
    out.push(("mul-broadcast", grad_check(&[a.clone(), suffix], seed, |t, v| t.mul(v[0], v[1]).unwrap())));
    let scalar = Tensor::scalar(r.random_range(-1.0..1.0));
    out.push(("mul-scalar", grad_check(&[a.clone(), scalar], seed, |t, v| t.mul(v[0], v[1]).unwrap())));

    out.push(("exp", grad_check(std::slice::from_ref(&a), seed, |t, v| t.exp(v[0]).unwrap())));
    let pos = uniform(r, &[p, q], 0.2, 3.0);
    out.push(("log", grad_check(std::slice::from_ref(&pos), seed, |t, v| t.log(v[0]).unwrap())));
    out.push(("sigmoid", grad_check(std::slice::from_ref(&a), seed, |t, v| t.sigmoid(v[0]))));
    out.push(("tanh", grad_check(std::slice::from_ref(&a), seed, |t, v| t.tanh(v[0]))));
    out.push(("relu", grad_check(&[off_kink(r, &[p, q], 1e-3)], seed, |t, v| t.relu(v[0]))));
    out.push(("softplus", grad_check(std::slice::from_ref(&a), seed, |t, v| t.softplus(v[0]))));
    let c = r.random_range(-2.0..2.0);
    out.push(("scale", grad_check(std::slice::from_ref(&a), seed, move |t, v| t.scale(v[0], c))));
    out.push(("add_scalar", grad_check(std::slice::from_ref(&a), seed, move |t, v| t.add_scalar(v[0], c))));
    let e = r.random_range(-1.5..2.5);
    out.push(("powf", grad_check(std::slice::from_ref(&pos), seed, move |t, v| t.powf(v[0], e).unwrap())));
    out.push(("clamp", grad_check(&[off_kink(r, &[p, q], 0.01)], seed, |t, v| {
        let s = t.add_scalar(v[0], 0.0);
        t.clamp(s, -1.0, 1.0)
    })));

    let m2a = uniform(r, &[p, q], -1.0, 1.0);
    let m2b = uniform(r, &[q, k], -1.0, 1.0);
    let m3a = uniform(r, &[b, p, q], -1.0, 1.0);
    let m3b = uniform(r, &[b, q, k], -1.0, 1.0);
    let mm = |t: &mut Tape<'_>, v: &[Var]| t.matmul(v[0], v[1]).unwrap();
    out.push(("matmul-2x2", grad_check(&[m2a.clone(), m2b.clone()], seed, mm)));
    out.push(("matmul-3x2", grad_check(&[m3a.clone(), m2b], seed, mm)));
    out.push(("matmul-2x3", grad_check(&[m2a.clone(), m3b.clone()], seed, mm)));
    out.push(("matmul-3x3", grad_check(&[m3a.clone(), m3b], seed, mm)));
    out.push(("transpose", grad_check(std::slice::from_ref(&m3a), seed, |t, v| t.transpose(v[0]).unwrap())));
    out.push(("reshape", grad_check(std::slice::from_ref(&m3a), seed, |t, v| {
        let n = t.shape(v[0]).iter().product::<usize>();
        t.reshape(v[0], &[n]).unwrap()
    })));
    out.push(("sum", grad_check(std::slice::from_ref(&m3a), seed, |t, v| t.sum(v[0]))));
    out.push(("sum_last", grad_check(std::slice::from_ref(&m3a), seed, |t, v| t.sum_last(v[0]).unwrap())));
    out.push(("mean_leading", grad_check(std::slice::from_ref(&m3a), seed, |t, v| t.mean_leading(v[0]).unwrap())));
    let u = uniform(r, &[p], -1.0, 1.0);
    let w = uniform(r, &[k], -1.0, 1.0);
    out.push(("outer", grad_check(&[u, w], seed, |t, v| t.outer(v[0], v[1]).unwrap())));
    out.push(("softmax_last", grad_check(std::slice::from_ref(&m3a), seed, |t, v| t.softmax_last(v[0]).unwrap())));
    out.push(("log_softmax_last", grad_check(std::slice::from_ref(&m3a), seed, |t, v| t.log_softmax_last(v[0]).unwrap())));
    out.push(("narrow_last", grad_check(&[m3a], seed, |t, v| {
        let k = t.shape(v[0])[2];
        t.narrow_last(v[0], k / 2, k - k / 2).unwrap()
    })));

    let n = r.random_range(2..6);
    let logits = uniform(r, &[b, n, n], -2.0, 2.0);
    let mut weights = uniform(r, &[n, n], 0.2, 2.0);
    let mut mask = Tensor::ones(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j && r.random_bool(0.3) {
                mask.set(&[i, j], 0.0);
            }
        }
    }
    out.push(("masked_softmax", {
        let mask = mask.clone();
        grad_check(std::slice::from_ref(&logits), seed, move |t, v| t.masked_softmax(v[0], &mask).unwrap())
    }));
    for (wv, mv) in weights.data_mut().iter_mut().zip(mask.data()) {
        *wv *= mv;
    }
    // zero weights mark non-neighbors; move only the admissible entries
    let admissible = mask.clone();
    out.push(("weighted_softmax", grad_check(&[logits, weights], seed, move |t, v| {
        let m = t.constant(admissible.clone());
        let w = t.mul(v[1], m).unwrap();
        t.weighted_softmax(v[0], w).unwrap()
    })));
    let pairs = uniform(r, &[n * (n - 1) / 2], -1.0, 1.0);
    out.push(("pairs_to_matrix", grad_check(&[pairs], seed, move |t, v| t.pairs_to_matrix(v[0], n, 1.0).unwrap())));
    out
}

pub mod suites;

/// The Karate benchmark setup: four training patterns, the fifth held out.
pub fn karate_setup(seed: u64, samples: usize) -> (sagvae::cli::Prepared, ModelConfig) {
    use sagvae::data::karate::{gen_karate_synthetic, KarateConfig};
    let sets = gen_karate_synthetic(
        seed,
        &KarateConfig {
            samples_per_pattern: samples,
            ..KarateConfig::default()
        },
    );
    let p = sagvae::cli::prepare_karate(&sets, 4).unwrap();
    let cfg = ModelConfig {
        n: 34,
        d: 8,
        latent: LatentMode::DimensionWise { d_z: 4 },
        enc_hidden: vec![256],
        edge_hidden: vec![256, 256],
        dec_hidden: vec![16],
        attention_width: None,
        output: OutputActivation::Identity,
        prior_p: p.density().unwrap(),
        graph: GraphMode::Learned,
        init_seed: seed,
    };
    (p, cfg)
}
