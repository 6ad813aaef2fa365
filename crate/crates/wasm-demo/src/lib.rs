//! wasm-bindgen bindings for the static page in `www/`.
//!
//! Build with
//!
//! ```sh
//! cargo build --release --target wasm32-unknown-unknown -p sagvae-wasm
//! wasm-bindgen --target web --out-dir crates/wasm-demo/www/pkg \
//!     target/wasm32-unknown-unknown/release/sagvae_wasm.wasm
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use sagvae::data::graph::global_std;
use sagvae::data::images::{decode_idx, perturb_mask, perturb_uniform, ImageDataset};
use sagvae::data::karate::{gen_karate_synthetic, KarateConfig};
use sagvae::decoder::OutputActivation;
use sagvae::encoders::LatentMode;
use sagvae::eval::{edge_prf, pairwise_product_baseline, EdgeMetrics};
use sagvae::stochastic::{gumbel_softmax_with, gumbel_uniforms};
use sagvae::{GraphMode, ModelConfig, ReconLoss, SagVae, Tape, Tensor, TrainConfig, Trainer};

const HIST_BINS: usize = 20;

fn js(e: sagvae::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Relaxed two-class draws at class-0 probability `p0`. Returns
/// `[argmax frequency of class 0, fraction with max > 0.95, histogram of a_0
/// over 20 bins...]`.
#[wasm_bindgen]
pub fn gumbel_explore(p0: f64, tau: f64, draws: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    if !(p0 > 0.0 && p0 < 1.0) || draws == 0 {
        return Err(JsError::new("need 0 < p0 < 1 and at least one draw"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let mut tape = Tape::new();
    let la = tape.constant(Tensor::from_fn(&[draws, 2], |i| if i % 2 == 0 { p0.ln() } else { (1.0 - p0).ln() }));
    let u = gumbel_uniforms(&mut rng, &[draws, 2]);
    let sample = gumbel_softmax_with(&mut tape, la, tau, &u).map_err(js)?;
    let rows: Vec<&[f64]> = tape.value(sample.simplex).data().chunks(2).collect();
    let n = draws as f64;
    let mut out = vec![
        rows.iter().filter(|r| r[0] > r[1]).count() as f64 / n,
        rows.iter().filter(|r| r[0].max(r[1]) > 0.95).count() as f64 / n,
    ];
    let mut hist = [0.0; HIST_BINS];
    for r in &rows {
        hist[((r[0] * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1.0 / n;
    }
    out.extend(hist);
    Ok(out)
}

/// The 200 bundled test digits at 28x28.
#[wasm_bindgen]
pub struct Digits {
    ds: ImageDataset,
}

#[wasm_bindgen]
impl Digits {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Digits, JsError> {
        let images = include_bytes!("../../core/data/mnist-test-200-images.idx3-ubyte");
        let labels = include_bytes!("../../core/data/mnist-test-200-labels.idx1-ubyte");
        Ok(Digits {
            ds: decode_idx(images, labels, &[]).map_err(js)?,
        })
    }

    pub fn count(&self) -> usize {
        self.ds.len()
    }

    pub fn side(&self) -> usize {
        self.ds.side
    }

    pub fn label(&self, index: usize) -> u8 {
        self.ds.labels[index % self.ds.len()]
    }

    pub fn image(&self, index: usize) -> Vec<f64> {
        self.ds.image(index % self.ds.len()).to_vec()
    }

    /// `noise` pixels replaced with uniform draws, then a white square of
    /// side `block` pasted at a random position.
    pub fn perturb(&self, index: usize, noise: usize, block: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
        let img = perturb_uniform(self.ds.image(index % self.ds.len()), noise, &mut rng).map_err(js)?;
        perturb_mask(&img, self.ds.side, block, &mut rng).map_err(js)
    }
}

/// A small SAG-VAE trained in the page on synthetic karate-club features.
#[wasm_bindgen]
pub struct KarateDemo {
    model: SagVae,
    trainer: Trainer,
    data: Tensor,
    truth: Tensor,
    baseline: EdgeMetrics,
    last_total: f64,
}

fn metrics_vec(m: &EdgeMetrics) -> Vec<f64> {
    vec![m.precision, m.recall, m.f1]
}

#[wasm_bindgen]
impl KarateDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, samples_per_pattern: usize, epochs: usize) -> Result<KarateDemo, JsError> {
        let seed = u64::from(seed);
        let sets = gen_karate_synthetic(
            seed,
            &KarateConfig {
                samples_per_pattern: samples_per_pattern.max(1),
                ..KarateConfig::default()
            },
        );
        let train_sets = &sets[..4];
        let scale = 1.0 / global_std(train_sets).max(f64::MIN_POSITIVE);
        let (n, d) = (train_sets[0].nodes(), train_sets[0].width());
        let feats: Vec<f64> = train_sets
            .iter()
            .flat_map(|s| s.features.data().iter().map(|v| v * scale))
            .collect();
        let m = feats.len() / (n * d);
        let stacked = Tensor::new(&[m, n, d], feats).map_err(js)?;
        let truth = sets[0].adjacency.clone();
        let baseline = edge_prf(&pairwise_product_baseline(&stacked).map_err(js)?, &truth, 0.5).map_err(js)?;
        let model = SagVae::new(ModelConfig {
            n,
            d,
            latent: LatentMode::DimensionWise { d_z: 4 },
            enc_hidden: vec![64],
            edge_hidden: vec![64, 64],
            dec_hidden: vec![16],
            attention_width: None,
            output: OutputActivation::Identity,
            prior_p: sets[0].density(),
            graph: GraphMode::Learned,
            init_seed: seed,
        })
        .map_err(js)?;
        let data = stacked.reshape(&[m, n * d]).map_err(js)?;
        let mut cfg = TrainConfig::new(epochs.max(1), 32, ReconLoss::MeanSquaredError);
        cfg.seed = seed;
        let trainer = Trainer::new(&model, &data, &cfg).map_err(js)?;
        Ok(KarateDemo {
            model,
            trainer,
            data,
            truth,
            baseline,
            last_total: f64::NAN,
        })
    }

    pub fn nodes(&self) -> usize {
        self.model.cfg.n
    }

    pub fn epochs_done(&self) -> usize {
        self.trainer.epochs_done()
    }

    /// Runs `count` more epochs and returns the last mean total loss.
    pub fn train(&mut self, count: usize) -> Result<f64, JsError> {
        for _ in 0..count {
            self.last_total = self.trainer.epoch(&mut self.model, &self.data).map_err(js)?.total;
        }
        Ok(self.last_total)
    }

    /// Posterior-mean edge probabilities, row-major `n x n`.
    pub fn adjacency(&self) -> Result<Vec<f64>, JsError> {
        let post = self.model.edge_posterior(&self.data).map_err(js)?.expect("learned graph");
        Ok(post.probs.data().to_vec())
    }

    pub fn truth(&self) -> Vec<f64> {
        self.truth.data().to_vec()
    }

    /// `[precision, recall, f1]` of the learned graph, then of the
    /// pairwise-product baseline.
    pub fn metrics(&self) -> Result<Vec<f64>, JsError> {
        let probs = Tensor::new(self.truth.shape(), self.adjacency()?).map_err(js)?;
        let mut out = metrics_vec(&edge_prf(&probs, &self.truth, 0.5).map_err(js)?);
        out.extend(metrics_vec(&self.baseline));
        Ok(out)
    }
}
