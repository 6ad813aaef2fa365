//! Learn the karate-club graph from synthetic node features and compare it
//! with the pairwise-product baseline.
//!
//! cargo run --release --example karate -- [seed] [epochs]

use sagvae::cli::prepare_karate;
use sagvae::data::karate::{gen_karate_synthetic, KarateConfig};
use sagvae::decoder::OutputActivation;
use sagvae::encoders::LatentMode;
use sagvae::eval::{edge_prf, pairwise_product_baseline};
use sagvae::{train, GraphMode, ModelConfig, ReconLoss, SagVae, TrainConfig};

fn main() -> sagvae::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let epochs: usize = args.next().map_or(100, |s| s.parse().expect("epochs"));

    let sets = gen_karate_synthetic(seed, &KarateConfig::default());
    let data = prepare_karate(&sets, 4)?;
    let truth = data.truth.clone().expect("karate has a known graph");
    let mut model = SagVae::new(ModelConfig {
        n: data.n,
        d: data.d,
        latent: LatentMode::DimensionWise { d_z: 4 },
        enc_hidden: vec![256],
        edge_hidden: vec![256, 256],
        dec_hidden: vec![16],
        attention_width: None,
        output: OutputActivation::Identity,
        prior_p: data.density().expect("known graph"),
        graph: GraphMode::Learned,
        init_seed: seed,
    })?;
    let mut cfg = TrainConfig::new(epochs, 64, ReconLoss::MeanSquaredError);
    cfg.seed = seed;
    let x = sagvae::cli::Prepared::flat(&data.train);
    let report = train(&mut model, &x, &cfg, None)?;
    print!("{}", report.to_csv());

    let learned = model.edge_posterior(&x)?.expect("learned graph");
    let ours = edge_prf(&learned.probs, &truth, 0.5)?;
    let base = edge_prf(&pairwise_product_baseline(&data.train)?, &truth, 0.5)?;
    eprintln!("sag-vae          P {:.3} R {:.3} F1 {:.3}", ours.precision, ours.recall, ours.f1);
    eprintln!("pairwise-product P {:.3} R {:.3} F1 {:.3}", base.precision, base.recall, base.f1);
    Ok(())
}
