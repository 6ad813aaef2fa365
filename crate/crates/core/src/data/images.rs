//! IDX image archives, pixel perturbations, and per-class latent statistics
//! for noisy sampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{GraphContext, SagVae};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    /// `[m, side * side]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub side: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Keeps only the first `count` images.
    pub fn truncate(&self, count: usize) -> ImageDataset {
        let count = count.min(self.len());
        let rows: Vec<usize> = (0..count).collect();
        ImageDataset {
            images: self.images.select_rows(&rows),
            labels: self.labels[..count].to_vec(),
            side: self.side,
        }
    }

    /// Indices of images with label `class`.
    pub fn class_indices(&self, class: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Average pooling over `factor x factor` blocks.
    pub fn downsample(&self, factor: usize) -> Result<ImageDataset> {
        if factor == 0 || !self.side.is_multiple_of(factor) {
            return Err(Error::Param(format!("side {} not divisible by {factor}", self.side)));
        }
        let side = self.side / factor;
        let inv = 1.0 / (factor * factor) as f64;
        let mut data = Vec::with_capacity(self.len() * side * side);
        for i in 0..self.len() {
            let img = self.image(i);
            for r in 0..side {
                for c in 0..side {
                    let mut s = 0.0;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            s += img[(r * factor + dr) * self.side + c * factor + dc];
                        }
                    }
                    data.push(s * inv);
                }
            }
        }
        Ok(ImageDataset {
            images: Tensor::new(&[self.len(), side * side], data)?,
            labels: self.labels.clone(),
            side,
        })
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Format {
            offset,
            detail: "truncated header".into(),
        })
}

/// Parses an IDX3 image archive into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad image magic {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: 16 + body.len(),
            detail: format!("truncated: {need} pixel bytes declared, {} present", body.len()),
        });
    }
    Ok((count, rows, cols, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad label magic {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format {
            offset: 8 + body.len(),
            detail: format!("truncated: {count} labels declared, {} present", body.len()),
        });
    }
    Ok(body[..count].to_vec())
}

pub fn idx_images_bytes(side: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (side * side);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, side as u32, side as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn idx_labels_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Decodes an image/label archive pair. Pixels are scaled by 1/255; an empty
/// `classes` filter keeps everything.
pub fn decode_idx(images: &[u8], labels: &[u8], classes: &[u8]) -> Result<ImageDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    if rows != cols {
        return Err(Error::Format {
            offset: 8,
            detail: format!("non-square images {rows}x{cols}"),
        });
    }
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Format {
            offset: 4,
            detail: format!("{count} images but {} labels", labels.len()),
        });
    }
    let px = rows * cols;
    let keep: Vec<usize> = (0..count).filter(|&i| classes.is_empty() || classes.contains(&labels[i])).collect();
    let mut data = Vec::with_capacity(keep.len() * px);
    for &i in &keep {
        data.extend(pixels[i * px..(i + 1) * px].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(ImageDataset {
        images: Tensor::new(&[keep.len(), px], data)?,
        labels: keep.iter().map(|&i| labels[i]).collect(),
        side: rows,
    })
}

pub fn load_idx_images(images: &Path, labels: &Path, classes: &[u8]) -> Result<ImageDataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    decode_idx(&ib, &lb, classes)
}

/// Replaces `n_pixels` distinct positions with uniform draws.
pub fn perturb_uniform(img: &[f64], n_pixels: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if n_pixels > img.len() {
        return Err(Error::Param(format!("{n_pixels} pixels requested from an image of {}", img.len())));
    }
    let mut out = img.to_vec();
    for pos in index::sample(rng, img.len(), n_pixels) {
        out[pos] = rng.random::<f64>();
    }
    Ok(out)
}

/// Paints a `block x block` square of 1.0 at a uniformly random position
/// fully inside the image.
pub fn perturb_mask(img: &[f64], side: usize, block: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if side * side != img.len() {
        return Err(Error::shape("perturb_mask", &[img.len()], &[side * side]));
    }
    if block > side {
        return Err(Error::Param(format!("block {block} larger than image side {side}")));
    }
    let mut out = img.to_vec();
    if block == 0 {
        return Ok(out);
    }
    let r0 = rng.random_range(0..=side - block);
    let c0 = rng.random_range(0..=side - block);
    for r in r0..r0 + block {
        out[r * side + c0..r * side + c0 + block].fill(1.0);
    }
    Ok(out)
}

/// Applies a perturbation to every image of a dataset.
pub fn perturb_all(
    ds: &ImageDataset,
    mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<ImageDataset> {
    let mut data = Vec::with_capacity(ds.images.numel());
    for i in 0..ds.len() {
        data.extend(f(ds.image(i))?);
    }
    Ok(ImageDataset {
        images: Tensor::new(ds.images.shape(), data)?,
        labels: ds.labels.clone(),
        side: ds.side,
    })
}

/// Across-image Gaussian fit of one class's latent posterior parameters,
/// per latent dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGaussian {
    pub mu_mean: Vec<f64>,
    pub mu_std: Vec<f64>,
    pub sigma_mean: Vec<f64>,
    pub sigma_std: Vec<f64>,
    /// Mean image of the class, used as its template.
    pub template: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPixelStats {
    pub classes: BTreeMap<u8, PixelGaussian>,
    /// Graph used when decoding samples.
    pub graph: GraphContext,
}

fn mean_std(columns: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let k = columns.len() as f64;
    let mut mean = vec![0.0; width];
    for row in columns {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / k;
        }
    }
    let mut var = vec![0.0; width];
    for row in columns {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / k;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Fits per-class statistics of the encoder's means and standard deviations.
pub fn fit_class_pixel_gaussians(ds: &ImageDataset, model: &SagVae) -> Result<ClassPixelStats> {
    if ds.is_empty() {
        return Err(Error::Param("empty image dataset".into()));
    }
    let (mu, logvar) = model.encode_mean(&ds.images)?;
    let w = model.latent_width();
    let mut classes = BTreeMap::new();
    let mut labels: Vec<u8> = ds.labels.clone();
    labels.sort_unstable();
    labels.dedup();
    for class in labels {
        let idx = ds.class_indices(class);
        let mus: Vec<Vec<f64>> = idx.iter().map(|&i| mu.row(i).to_vec()).collect();
        let sig: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| logvar.row(i).iter().map(|lv| (0.5 * lv).exp()).collect())
            .collect();
        let px: Vec<Vec<f64>> = idx.iter().map(|&i| ds.image(i).to_vec()).collect();
        let (mu_mean, mu_std) = mean_std(&mus, w);
        let (sigma_mean, sigma_std) = mean_std(&sig, w);
        let (template, _) = mean_std(&px, ds.pixels());
        classes.insert(
            class,
            PixelGaussian {
                mu_mean,
                mu_std,
                sigma_mean,
                sigma_std,
                template,
            },
        );
    }
    Ok(ClassPixelStats {
        classes,
        graph: model.graph_context(&ds.images)?,
    })
}

/// Latent codes `[count, latent_width]` for `class`: per dimension a mean is
/// drawn from `N(mu_mean, mu_std^2)` and a scale from `|N(sigma_mean,
/// sigma_std^2)|`, then `z = mean + scale * eps`. Afterwards `n_corrupt`
/// distinct dimensions of each code are overwritten with `U(0, 1)`.
pub fn sample_class_latents(
    stats: &ClassPixelStats,
    class: u8,
    count: usize,
    n_corrupt: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let g = stats.classes.get(&class).ok_or(Error::MissingClass(class))?;
    let w = g.mu_mean.len();
    if n_corrupt > w {
        return Err(Error::Param(format!("{n_corrupt} corrupted dimensions exceed latent width {w}")));
    }
    let mut data = Vec::with_capacity(count * w);
    for _ in 0..count {
        let mut z: Vec<f64> = (0..w)
            .map(|j| {
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                let e3: f64 = rng.sample(StandardNormal);
                let mean = g.mu_mean[j] + g.mu_std[j] * e1;
                let scale = (g.sigma_mean[j] + g.sigma_std[j] * e2).abs();
                mean + scale * e3
            })
            .collect();
        for pos in index::sample(rng, w, n_corrupt) {
            z[pos] = rng.random::<f64>();
        }
        data.extend(z);
    }
    Tensor::new(&[count, w], data)
}

/// Decoded noisy samples `[count, n * d]` for `class`.
pub fn noisy_sample(
    model: &SagVae,
    stats: &ClassPixelStats,
    class: u8,
    count: usize,
    n_corrupt: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let z = sample_class_latents(stats, class, count, n_corrupt, rng)?;
    model.decode_latent(&z, &stats.graph)
}
