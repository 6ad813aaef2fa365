//! Named checks shared by the dedicated suites and the acceptance run.
//! Each returns `(label, passed, detail)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sagvae::decoder::{attention_apply, normalize_adjacency};
use sagvae::eval::edge_prf;
use sagvae::stochastic::{
    gumbel_softmax_with, gumbel_uniforms, kl_categorical, kl_edge, kl_gaussian_std, kl_gaussian_value,
    sample_gaussian, GaussianPosterior,
};
use sagvae::{ParamStore, Tape, Tensor};

use super::{attention_apply_oracle, normalize_oracle, prf_oracle, random_symmetric, uniform};

pub type Check = (String, bool, String);

fn check(label: impl Into<String>, passed: bool, detail: String) -> Check {
    (label.into(), passed, detail)
}

/// Mean and standard error of a sample.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Fraction of `draws` relaxed samples whose argmax is class 0, plus the
/// fraction whose largest component exceeds 0.95.
pub fn gumbel_stats(p0: f64, tau: f64, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let la = tape.constant(Tensor::from_fn(&[draws, 2], |i| if i % 2 == 0 { p0.ln() } else { (1.0 - p0).ln() }));
    let u = gumbel_uniforms(&mut rng, &[draws, 2]);
    let s = gumbel_softmax_with(&mut tape, la, tau, &u).unwrap();
    let y = tape.value(s.simplex);
    let rows: Vec<&[f64]> = y.data().chunks(2).collect();
    let first = rows.iter().filter(|r| r[0] > r[1]).count() as f64 / draws as f64;
    let sharp = rows.iter().filter(|r| r[0].max(r[1]) > 0.95).count() as f64 / draws as f64;
    (first, sharp)
}

pub fn distribution_suite() -> Vec<Check> {
    let mut out = Vec::new();

    for (i, (p0, tau)) in [(0.8, 0.5), (0.8, 2.0), (0.3, 1.0), (0.55, 0.1)].into_iter().enumerate() {
        let (freq, _) = gumbel_stats(p0, tau, 10_000, 100 + i as u64);
        out.push(check(
            format!("gumbel argmax p0={p0} tau={tau}"),
            (freq - p0).abs() <= 0.02,
            format!("frequency {freq:.4}"),
        ));
    }
    let (_, sharp) = gumbel_stats(0.8, 0.1, 10_000, 7);
    out.push(check("gumbel tau=0.1 near one-hot", sharp >= 0.9, format!("{sharp:.4} of draws above 0.95")));

    // reparameterized draws at mu = 1, logvar = 0
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::full(&[100_000], 1.0));
    let lv = tape.constant(Tensor::zeros(&[100_000]));
    let post = GaussianPosterior::new(&mut tape, mu, lv).unwrap();
    let z = sample_gaussian(&mut tape, &post, &mut rng).unwrap();
    let zs = tape.value(z).data().to_vec();
    let mean = zs.iter().sum::<f64>() / zs.len() as f64;
    let var = zs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (zs.len() - 1) as f64;
    out.push(check(
        "gaussian draw moments",
        (mean - 1.0).abs() <= 0.01 && (var - 1.0).abs() <= 0.02,
        format!("mean {mean:.4} variance {var:.4}"),
    ));

    // KL(N(0.7, e^0.4) || N(0, 1)) against E_q[log q - log p]
    let (m, lv) = (0.7f64, 0.4f64);
    let sd = (0.5 * lv).exp();
    let closed = kl_gaussian_value(&[m], &[lv]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let terms: Vec<f64> = (0..100_000)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            let z = m + sd * e;
            let log_q = -0.5 * e * e - sd.ln();
            let log_p = -0.5 * z * z;
            log_q - log_p
        })
        .collect();
    let (mc, se) = mean_se(&terms);
    out.push(check(
        "gaussian KL vs Monte-Carlo",
        (mc - closed).abs() <= 3.0 * se,
        format!("closed {closed:.5} MC {mc:.5} se {se:.5}"),
    ));

    // categorical KL against E_{k~q}[log q_k - log p_k]
    let mut all_in = true;
    let mut details = Vec::new();
    for (i, (q, p)) in [(0.9, 0.5), (0.5, 0.9), (0.2, 0.139)].into_iter().enumerate() {
        let closed = kl_categorical(&[q, 1.0 - q], &[p, 1.0 - p]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20 + i as u64);
        let terms: Vec<f64> = (0..100_000)
            .map(|_| if rng.random::<f64>() < q { (q / p).ln() } else { ((1.0 - q) / (1.0 - p)).ln() })
            .collect();
        let (mc, se) = mean_se(&terms);
        all_in &= (mc - closed).abs() <= 3.0 * se;
        details.push(format!("{closed:.4}/{mc:.4}"));
    }
    out.push(check("categorical KL vs Monte-Carlo", all_in, details.join(" ")));

    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::zeros(&[4]));
    let lv = tape.constant(Tensor::zeros(&[4]));
    let post = GaussianPosterior::new(&mut tape, mu, lv).unwrap();
    let kz = kl_gaussian_std(&mut tape, &post).unwrap();
    let q = tape.constant(Tensor::from_fn(&[3, 2], |i| if i % 2 == 0 { 0.3 } else { 0.7 }));
    let ka = kl_edge(&mut tape, q, [0.3, 0.7]).unwrap();
    let (kz, ka) = (tape.value(kz).item().unwrap(), tape.value(ka).item().unwrap());
    out.push(check("KL zero at q = p", kz.abs() <= 1e-12 && ka.abs() <= 1e-12, format!("gaussian {kz:e} edge {ka:e}")));
    out
}

pub fn oracle_suite(instances: u64) -> Vec<Check> {
    let mut worst_norm: f64 = 0.0;
    let mut worst_att: f64 = 0.0;
    let mut prf_mismatch = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=10);
        let binary = rng.random_bool(0.5);
        let a = random_symmetric(&mut rng, n, binary);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let got = normalize_adjacency(&mut tape, av).unwrap();
        let want = normalize_oracle(&a);
        for (x, y) in tape.value(got).data().iter().zip(want.data()) {
            worst_norm = worst_norm.max((x - y).abs());
        }

        let (d, dbar) = (rng.random_range(1..5), rng.random_range(1..4));
        let mut store = ParamStore::new();
        let wg = store.add("wg", uniform(&mut rng, &[d, dbar], -1.0, 1.0));
        let wf = store.add("wf", uniform(&mut rng, &[dbar, d], -1.0, 1.0));
        let mut alpha = uniform(&mut rng, &[n, n], 0.0, 1.0);
        for s in 0..n {
            let total: f64 = alpha.row(s).iter().sum();
            for t in 0..n {
                alpha.set(&[s, t], alpha.get(&[s, t]) / total);
            }
        }
        let h = uniform(&mut rng, &[n, d], -2.0, 2.0);
        let mut tape = Tape::with_params(&store);
        let (alv, hv) = (tape.constant(alpha.clone()), tape.constant(h.clone()));
        let got = attention_apply(&mut tape, alv, hv, wg, wf).unwrap();
        let want = attention_apply_oracle(&alpha, &h, store.get(wg), store.get(wf));
        for (x, y) in tape.value(got).data().iter().zip(want.data()) {
            worst_att = worst_att.max((x - y).abs());
        }

        let truth = random_symmetric(&mut rng, n, true);
        let pred = random_symmetric(&mut rng, n, false);
        let thr = rng.random_range(0.1..0.9);
        let m = edge_prf(&pred, &truth, thr).unwrap();
        if (m.tp, m.fp, m.fn_) != prf_oracle(&pred, &truth, thr) {
            prf_mismatch += 1;
        }
    }
    vec![
        check("normalize_adjacency oracle", worst_norm <= 1e-12, format!("max abs diff {worst_norm:e}")),
        check("attention_apply oracle", worst_att <= 1e-12, format!("max abs diff {worst_att:e}")),
        check("edge_prf oracle", prf_mismatch == 0, format!("{prf_mismatch} mismatches")),
    ]
}
