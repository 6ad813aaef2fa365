//! The `sagvae` command line.
//!
//! Experiments are described by a TOML file with `[data]`, `[model]` and
//! `[train]` tables; relative paths resolve against the file's directory.
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! kind = "karate"          # or "graph", "images"
//! samples_per_pattern = 250
//!
//! [model]
//! latent = { kind = "dimension-wise", d_z = 4 }
//! enc_hidden = [256]
//! edge_hidden = [256, 256]
//! dec_hidden = [16]
//! output = "identity"
//!
//! [train]
//! epochs = 200
//! batch_size = 64
//! recon = "mean-squared-error"
//! ```

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::data::graph::{
    adjacency_from_edges, global_std, load_edge_list, load_matrix_csv, load_stack, perturb_graph_features,
    save_stack, write_edge_list, GraphDataset,
};
use crate::data::images::{
    fit_class_pixel_gaussians, load_idx_images, noisy_sample, perturb_all, perturb_mask, perturb_uniform,
    ImageDataset,
};
use crate::data::karate::{gen_karate_synthetic, KarateConfig};
use crate::decoder::OutputActivation;
use crate::encoders::LatentMode;
use crate::error::{Error, Result};
use crate::eval::{edge_prf, export_adjacency, image_grid, metrics_csv, mse, pairwise_product_baseline, write_pgm};
use crate::model::{GraphMode, ModelConfig, SagVae};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "sagvae", version, about = "Self-attention graph VAE: train, evaluate and sample")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment description (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Seed for data generation, initialization and training; overrides the file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint output path; rewritten after every epoch.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Edge precision/recall/F1 of a trained model.
    EvalEdges {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export the learned adjacency as <STEM>.csv and <STEM>.pgm.
        #[arg(long)]
        adj: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Edge metrics of the pairwise-product baseline.
    BaselineEdges {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Reconstruct perturbed images and report errors.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pixels replaced by uniform noise per image.
        #[arg(long, default_value_t = 0)]
        noise_pixels: usize,
        /// Side of a white square pasted at a random position (0 = none).
        #[arg(long, default_value_t = 0)]
        mask_block: usize,
        /// Images to process (from the test split when configured).
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Grid of original, perturbed and reconstructed rows.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// CSV `index,mse_to_original,mse_to_perturbed`; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode per-class latent samples with corrupted dimensions.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: u8,
        /// Latent dimensions overwritten with uniform noise.
        #[arg(long, default_value_t = 0)]
        corrupt: usize,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Write synthetic karate-club feature patterns.
    GenKarate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 250)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        patterns: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the learned adjacency as CSV and graymap.
    ExportAdj {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output stem; writes <STEM>.csv and <STEM>.pgm.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Karate {
        #[serde(default = "default_spp")]
        samples_per_pattern: usize,
        #[serde(default = "default_d")]
        d: usize,
        #[serde(default = "default_patterns")]
        patterns: usize,
        #[serde(default = "default_train_patterns")]
        train_patterns: usize,
    },
    Graph {
        edges: PathBuf,
        /// Feature CSV (one row per node) or stacked container.
        features: PathBuf,
        #[serde(default)]
        dropout: f64,
        #[serde(default)]
        noise_std: f64,
        #[serde(default = "default_copies")]
        copies: usize,
    },
    Images {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        #[serde(default)]
        classes: Vec<u8>,
        #[serde(default = "one")]
        downsample: usize,
        limit: Option<usize>,
    },
}

fn default_spp() -> usize {
    250
}
fn default_d() -> usize {
    8
}
fn default_patterns() -> usize {
    5
}
fn default_train_patterns() -> usize {
    4
}
fn default_copies() -> usize {
    400
}
fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub latent: LatentMode,
    pub enc_hidden: Vec<usize>,
    #[serde(default = "default_edge_hidden")]
    pub edge_hidden: Vec<usize>,
    #[serde(default)]
    pub dec_hidden: Vec<usize>,
    #[serde(default)]
    pub attention_width: Option<usize>,
    pub output: OutputActivation,
    /// Defaults to the true edge density when known, else 0.5.
    pub prior_p: Option<f64>,
    #[serde(default)]
    pub graph: GraphMode,
}

fn default_edge_hidden() -> Vec<usize> {
    vec![256, 256]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

/// Data ready for the model.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub n: usize,
    pub d: usize,
    /// `[m, n, d]` training features.
    pub train: Tensor,
    pub heldout: Option<Tensor>,
    pub truth: Option<Tensor>,
    pub images: Option<(ImageDataset, Option<ImageDataset>)>,
}

impl Prepared {
    pub fn flat(t: &Tensor) -> Tensor {
        let [m, n, d] = *t.shape() else { unreachable!() };
        t.clone().reshape(&[m, n * d]).expect("same numel")
    }

    pub fn density(&self) -> Option<f64> {
        self.truth.as_ref().map(|a| {
            let n = a.shape()[0];
            a.sum() / (n * (n - 1)) as f64
        })
    }
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut exp: Experiment = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut exp.data {
            DataSpec::Karate { .. } => {}
            DataSpec::Graph { edges, features, .. } => {
                fix(edges);
                fix(features);
            }
            DataSpec::Images {
                images,
                labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(images);
                fix(labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
        }
        Ok(exp)
    }

    pub fn prepare(&self, seed: u64) -> Result<Prepared> {
        match &self.data {
            DataSpec::Karate {
                samples_per_pattern,
                d,
                patterns,
                train_patterns,
            } => {
                let cfg = KarateConfig {
                    n_patterns: *patterns,
                    samples_per_pattern: *samples_per_pattern,
                    d: *d,
                    ..KarateConfig::default()
                };
                let sets = gen_karate_synthetic(seed, &cfg);
                prepare_karate(&sets, *train_patterns)
            }
            DataSpec::Graph {
                edges,
                features,
                dropout,
                noise_std,
                copies,
            } => {
                let feats = if features.extension().is_some_and(|e| e == "csv") {
                    let m = load_matrix_csv(features)?;
                    let (n, d) = (m.shape()[0], m.shape()[1]);
                    m.reshape(&[1, n, d])?
                } else {
                    load_stack(features)?
                };
                let n = feats.shape()[1];
                let adjacency = adjacency_from_edges(n, &load_edge_list(edges)?)?;
                let src = GraphDataset::new(feats, adjacency, None)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noisy = perturb_graph_features(&src, *dropout, *noise_std, *copies, &mut rng)?;
                Ok(Prepared {
                    n,
                    d: noisy.width(),
                    train: noisy.features,
                    heldout: None,
                    truth: Some(noisy.adjacency),
                    images: None,
                })
            }
            DataSpec::Images {
                images,
                labels,
                test_images,
                test_labels,
                classes,
                downsample,
                limit,
            } => {
                let shrink = |ds: ImageDataset| -> Result<ImageDataset> {
                    let ds = match limit {
                        Some(l) => ds.truncate(*l),
                        None => ds,
                    };
                    ds.downsample(*downsample)
                };
                let tr = shrink(load_idx_images(images, labels, classes)?)?;
                let te = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(load_idx_images(i, l, classes)?.downsample(*downsample)?),
                    (None, None) => None,
                    _ => return Err(Error::Config("test_images and test_labels go together".into())),
                };
                let px = tr.pixels();
                Ok(Prepared {
                    n: px,
                    d: 1,
                    train: tr.images.clone().reshape(&[tr.len(), px, 1])?,
                    heldout: None,
                    truth: None,
                    images: Some((tr, te)),
                })
            }
        }
    }

    pub fn model_config(&self, prepared: &Prepared, seed: u64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n: prepared.n,
            d: prepared.d,
            latent: m.latent,
            enc_hidden: m.enc_hidden.clone(),
            edge_hidden: m.edge_hidden.clone(),
            dec_hidden: m.dec_hidden.clone(),
            attention_width: m.attention_width,
            output: m.output,
            prior_p: m.prior_p.or(prepared.density()).unwrap_or(0.5),
            graph: m.graph,
            init_seed: seed,
        }
    }
}

/// Karate patterns scaled by the training patterns' global standard deviation.
pub fn prepare_karate(sets: &[GraphDataset], train_patterns: usize) -> Result<Prepared> {
    if train_patterns == 0 || train_patterns > sets.len() {
        return Err(Error::Config(format!("train_patterns must be in 1..={}", sets.len())));
    }
    let sd = global_std(&sets[..train_patterns]);
    let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
    let stack = |group: &[GraphDataset]| -> Result<Tensor> {
        let (n, d) = (group[0].nodes(), group[0].width());
        let mut data = Vec::new();
        for g in group {
            data.extend(g.features.data().iter().map(|v| v * scale));
        }
        let m = data.len() / (n * d);
        Tensor::new(&[m, n, d], data)
    };
    let train = stack(&sets[..train_patterns])?;
    let heldout = (train_patterns < sets.len())
        .then(|| stack(&sets[train_patterns..]))
        .transpose()?;
    Ok(Prepared {
        n: sets[0].nodes(),
        d: sets[0].width(),
        train,
        heldout,
        truth: Some(sets[0].adjacency.clone()),
        images: None,
    })
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn load_checked(checkpoint: &Path, prepared: &Prepared) -> Result<SagVae> {
    let model = SagVae::load(checkpoint)?;
    if model.cfg.n != prepared.n || model.cfg.d != prepared.d {
        return Err(Error::Config(format!(
            "checkpoint is for n={}, d={} but the data has n={}, d={}",
            model.cfg.n, model.cfg.d, prepared.n, prepared.d
        )));
    }
    Ok(model)
}

fn setup(common: &Common) -> Result<(Experiment, u64, Prepared)> {
    let exp = Experiment::load(&common.config)?;
    let seed = common.seed.unwrap_or(exp.seed);
    let prepared = exp.prepare(seed)?;
    Ok((exp, seed, prepared))
}

fn need_images(prepared: &Prepared) -> Result<&(ImageDataset, Option<ImageDataset>)> {
    prepared
        .images
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs an images dataset".into()))
}

fn need_truth(prepared: &Prepared) -> Result<&Tensor> {
    prepared
        .truth
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a dataset with a known graph".into()))
}

/// Runs one command.
pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            common,
            checkpoint,
            report,
            lr,
            epochs,
        } => {
            let (exp, seed, prepared) = setup(&common)?;
            let mut model = SagVae::new(exp.model_config(&prepared, seed))?;
            let mut cfg = exp.train.clone();
            cfg.seed = seed;
            if let Some(lr) = lr {
                cfg.learning_rate = lr;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let rep = train(&mut model, &Prepared::flat(&prepared.train), &cfg, Some(&checkpoint))?;
            model.save(&checkpoint)?;
            if let Some(r) = report {
                std::fs::write(&r, rep.to_csv()).map_err(|e| Error::io(&r, e))?;
            }
            if let Some(last) = rep.last() {
                eprintln!(
                    "trained {} epochs in {:.1}s: total {:.4}, recon {:.4}, kl_z {:.4}, kl_a {:.4}",
                    last.epoch, rep.wall_clock_secs, last.total, last.recon, last.kl_z, last.kl_a
                );
            }
            Ok(())
        }
        Command::EvalEdges {
            common,
            checkpoint,
            out,
            adj,
            threshold,
        } => {
            let (_, _, prepared) = setup(&common)?;
            let truth = need_truth(&prepared)?;
            let model = load_checked(&checkpoint, &prepared)?;
            let post = model
                .edge_posterior(&Prepared::flat(&prepared.train))?
                .ok_or_else(|| Error::Config("checkpoint has no edge network".into()))?;
            let mut rows = vec![("sag-vae", edge_prf(&post.probs, truth, threshold)?)];
            if let Some(h) = &prepared.heldout {
                let ph = model.edge_posterior(&Prepared::flat(h))?.expect("edge network present");
                rows.push(("sag-vae-heldout", edge_prf(&ph.probs, truth, threshold)?));
            }
            if let Some(stem) = adj {
                export_adjacency(&post.probs, &stem)?;
            }
            write_or_print(out.as_deref(), &metrics_csv(&rows))
        }
        Command::BaselineEdges { common, out, threshold } => {
            let (_, _, prepared) = setup(&common)?;
            let truth = need_truth(&prepared)?;
            let mut rows = vec![(
                "pairwise-product",
                edge_prf(&pairwise_product_baseline(&prepared.train)?, truth, threshold)?,
            )];
            if let Some(h) = &prepared.heldout {
                rows.push((
                    "pairwise-product-heldout",
                    edge_prf(&pairwise_product_baseline(h)?, truth, threshold)?,
                ));
            }
            write_or_print(out.as_deref(), &metrics_csv(&rows))
        }
        Command::Reconstruct {
            common,
            checkpoint,
            noise_pixels,
            mask_block,
            count,
            grid,
            report,
        } => {
            let (_, seed, prepared) = setup(&common)?;
            let (tr, te) = need_images(&prepared)?;
            let model = load_checked(&checkpoint, &prepared)?;
            let ctx = model.graph_context(&tr.images)?;
            let src = te.as_ref().unwrap_or(tr).truncate(count);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = perturb_all(&src, |img| {
                let img = perturb_uniform(img, noise_pixels, &mut rng)?;
                perturb_mask(&img, src.side, mask_block, &mut rng)
            })?;
            let rec = model.reconstruct_with(&noisy.images, &ctx)?;
            let mut csv = String::from("index,mse_to_original,mse_to_perturbed\n");
            for i in 0..src.len() {
                csv.push_str(&format!(
                    "{i},{},{}\n",
                    mse(rec.row(i), src.image(i)),
                    mse(rec.row(i), noisy.image(i))
                ));
            }
            if let Some(g) = grid {
                let k = src.len();
                let mut all = Vec::with_capacity(3 * k * src.pixels());
                for t in [&src.images, &noisy.images, &rec] {
                    all.extend_from_slice(t.data());
                }
                let stacked = Tensor::new(&[3 * k, src.pixels()], all)?;
                let (w, h, px) = image_grid(&stacked, src.side, k);
                write_pgm(&g, w, h, &px)?;
            }
            write_or_print(report.as_deref(), &csv)
        }
        Command::Sample {
            common,
            checkpoint,
            class,
            corrupt,
            count,
            grid,
        } => {
            let (_, seed, prepared) = setup(&common)?;
            let (tr, _) = need_images(&prepared)?;
            let model = load_checked(&checkpoint, &prepared)?;
            let stats = fit_class_pixel_gaussians(tr, &model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let imgs = noisy_sample(&model, &stats, class, count, corrupt, &mut rng)?;
            let (w, h, px) = image_grid(&imgs, tr.side, count);
            write_pgm(&grid, w, h, &px)
        }
        Command::GenKarate {
            out_dir,
            samples,
            patterns,
            d,
            seed,
        } => {
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let cfg = KarateConfig {
                n_patterns: patterns,
                samples_per_pattern: samples,
                d,
                ..KarateConfig::default()
            };
            let sets = gen_karate_synthetic(seed, &cfg);
            for (i, ds) in sets.iter().enumerate() {
                save_stack(&out_dir.join(format!("pattern-{i}.bin")), &ds.features)?;
            }
            write_edge_list(&out_dir.join("edges.csv"), &sets[0].adjacency)
        }
        Command::ExportAdj {
            common,
            checkpoint,
            out,
        } => {
            let (_, _, prepared) = setup(&common)?;
            let model = load_checked(&checkpoint, &prepared)?;
            let post = model
                .edge_posterior(&Prepared::flat(&prepared.train))?
                .ok_or_else(|| Error::Config("checkpoint has no edge network".into()))?;
            export_adjacency(&post.probs, &out)?;
            Ok(())
        }
    }
}

/// Parses `argv` and runs it. Returns the process exit code: 0 on success,
/// 2 for usage errors and missing files, 1 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}
