//! Edge-retrieval metrics, the pairwise-product baseline, and graymap/CSV
//! exports.

use std::path::{Path, PathBuf};

use crate::autodiff::sigmoid;
use crate::data::graph::{matrix_csv, parse_matrix_csv};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl EdgeMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, threshold: f64) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        let precision = ratio(tp, fp);
        let recall = ratio(tp, fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            threshold,
            tp,
            fp,
            fn_,
        }
    }
}

/// Counts over the strict upper triangle: a pair is predicted when its
/// probability exceeds `threshold`.
pub fn edge_prf(pred: &Tensor, truth: &Tensor, threshold: f64) -> Result<EdgeMetrics> {
    let [n, n2] = *pred.shape() else {
        return Err(Error::shape("edge_prf", pred.shape(), truth.shape()));
    };
    if n != n2 || truth.shape() != pred.shape() {
        return Err(Error::shape("edge_prf", pred.shape(), truth.shape()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in 0..n {
        for t in s + 1..n {
            let p = pred.get(&[s, t]) > threshold;
            let y = truth.get(&[s, t]) != 0.0;
            match (p, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(EdgeMetrics::from_counts(tp, fp, fn_, threshold))
}

/// `sigmoid(<xbar_s, xbar_t>)` with `xbar` the sample mean of node features
/// (`features` is `[m, n, d]`).
pub fn pairwise_product_baseline(features: &Tensor) -> Result<Tensor> {
    let [m, n, d] = *features.shape() else {
        return Err(Error::shape("pairwise baseline", features.shape(), &[0, 0, 0]));
    };
    let mut mean = vec![0.0; n * d];
    for i in 0..m {
        for (acc, v) in mean.iter_mut().zip(features.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut out = Tensor::zeros(&[n, n]);
    for s in 0..n {
        for t in s..n {
            let dot: f64 = (0..d).map(|k| mean[s * d + k] * mean[t * d + k]).sum();
            let p = sigmoid(dot);
            out.set(&[s, t], p);
            out.set(&[t, s], p);
        }
    }
    Ok(out)
}

/// `method,precision,recall,f1` rows.
pub fn metrics_csv(rows: &[(&str, EdgeMetrics)]) -> String {
    let mut s = String::from("method,precision,recall,f1\n");
    for (name, m) in rows {
        s.push_str(&format!("{name},{},{},{}\n", m.precision, m.recall, m.f1));
    }
    s
}

/// 8-bit binary graymap bytes.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Maps `[0, 1]` to `0..=255`, clamping outside values.
pub fn gray_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, pgm_bytes(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.csv` and `<stem>.pgm`, returning both paths.
pub fn export_adjacency(probs: &Tensor, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let [h, w] = *probs.shape() else {
        return Err(Error::shape("export_adjacency", probs.shape(), &[0, 0]));
    };
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    std::fs::write(&csv, matrix_csv(probs)).map_err(|e| Error::io(&csv, e))?;
    let px: Vec<u8> = probs.data().iter().map(|&v| gray_level(v)).collect();
    write_pgm(&pgm, w, h, &px)?;
    Ok((csv, pgm))
}

pub fn load_adjacency_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, &path.display().to_string())
}

/// Tiles square images (`[k, side * side]`) into a grid with one-pixel gaps.
pub fn image_grid(images: &Tensor, side: usize, cols: usize) -> (usize, usize, Vec<u8>) {
    let k = images.shape()[0];
    let cols = cols.clamp(1, k.max(1));
    let rows = k.div_ceil(cols);
    let (w, h) = (cols * (side + 1) + 1, rows * (side + 1) + 1);
    let mut px = vec![128u8; w * h];
    for i in 0..k {
        let (gr, gc) = (i / cols, i % cols);
        let (y0, x0) = (1 + gr * (side + 1), 1 + gc * (side + 1));
        for (j, &v) in images.row(i).iter().enumerate() {
            px[(y0 + j / side) * w + x0 + j % side] = gray_level(v);
        }
    }
    (w, h, px)
}

/// Mean squared error between two equal-length slices.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}
