//! Graph datasets, edge-list and feature CSV files, and the stacked feature
//! container.
//!
//! Stacked container layout, little-endian:
//!
//! ```text
//! magic  4 bytes "SAGF"
//! m, n, d  u32 each
//! values   f64 x m*n*d, row-major [m][n][d]
//! ```

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STACK_MAGIC: &[u8; 4] = b"SAGF";

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    /// `[m, n, d]`.
    pub features: Tensor,
    /// Binary `[n, n]`, symmetric, zero diagonal.
    pub adjacency: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl GraphDataset {
    pub fn new(features: Tensor, adjacency: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let [m, n, _] = *features.shape() else {
            return Err(Error::shape("graph dataset", features.shape(), &[0, 0, 0]));
        };
        if adjacency.shape() != [n, n] {
            return Err(Error::shape("graph dataset", adjacency.shape(), &[n, n]));
        }
        if m == 0 {
            return Err(Error::Param("graph dataset needs at least one sample".into()));
        }
        if !features.is_finite() {
            return Err(Error::Param("features must be finite".into()));
        }
        check_adjacency(&adjacency)?;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Param(format!("{} labels for {n} nodes", l.len())));
            }
        }
        Ok(Self {
            features,
            adjacency,
            labels,
        })
    }

    pub fn samples(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[2]
    }

    /// Features as `[m, n * d]` rows.
    pub fn flat(&self) -> Tensor {
        let (m, n, d) = (self.samples(), self.nodes(), self.width());
        self.features.clone().reshape(&[m, n * d]).expect("same numel")
    }

    pub fn scale(&mut self, factor: f64) {
        self.features.data_mut().iter_mut().for_each(|v| *v *= factor);
    }

    pub fn edge_count(&self) -> usize {
        let n = self.nodes();
        (0..n)
            .flat_map(|s| (s + 1..n).map(move |t| (s, t)))
            .filter(|&(s, t)| self.adjacency.get(&[s, t]) != 0.0)
            .count()
    }

    /// Fraction of node pairs that are edges.
    pub fn density(&self) -> f64 {
        let n = self.nodes();
        self.edge_count() as f64 / (n * (n - 1) / 2).max(1) as f64
    }
}

/// Population standard deviation over every feature value of `sets`.
pub fn global_std(sets: &[GraphDataset]) -> f64 {
    let (mut s, mut s2, mut c) = (0.0, 0.0, 0.0);
    for v in sets.iter().flat_map(|d| d.features.data()) {
        s += v;
        s2 += v * v;
        c += 1.0;
    }
    let mean = s / c;
    (s2 / c - mean * mean).max(0.0).sqrt()
}

fn check_adjacency(a: &Tensor) -> Result<()> {
    let n = a.shape()[0];
    for s in 0..n {
        if a.get(&[s, s]) != 0.0 {
            return Err(Error::Param(format!("adjacency has a self-loop at {s}")));
        }
        for t in 0..n {
            let v = a.get(&[s, t]);
            if v != a.get(&[t, s]) || (v != 0.0 && v != 1.0) {
                return Err(Error::Param(format!("adjacency not binary symmetric at ({s}, {t})")));
            }
        }
    }
    Ok(())
}

/// Binary symmetric adjacency from undirected edges.
pub fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Tensor> {
    let mut a = Tensor::zeros(&[n, n]);
    for &(s, t) in edges {
        if s >= n || t >= n || s == t {
            return Err(Error::Param(format!("edge ({s}, {t}) invalid for {n} nodes")));
        }
        a.set(&[s, t], 1.0);
        a.set(&[t, s], 1.0);
    }
    Ok(a)
}

/// Parses a `src,dst` edge list; a header line is optional.
pub fn parse_edge_list(text: &str, origin: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("src,dst")) {
            continue;
        }
        let err = |detail: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            detail,
        };
        let mut parts = line.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(format!("expected two fields, got {line:?}")));
        };
        let s = a.trim().parse().map_err(|e| err(format!("{e}")))?;
        let t = b.trim().parse().map_err(|e| err(format!("{e}")))?;
        edges.push((s, t));
    }
    Ok(edges)
}

pub fn load_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(&text, &path.display().to_string())
}

pub fn write_edge_list(path: &Path, adjacency: &Tensor) -> Result<()> {
    let n = adjacency.shape()[0];
    let mut s = String::from("src,dst\n");
    for i in 0..n {
        for j in i + 1..n {
            if adjacency.get(&[i, j]) != 0.0 {
                s.push_str(&format!("{i},{j}\n"));
            }
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parses a numeric CSV (no header) into an `[rows, cols]` matrix.
pub fn parse_matrix_csv(text: &str, origin: &str) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    detail: format!("{} fields, expected {first}", row.len()),
                });
            }
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

pub fn load_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, &path.display().to_string())
}

/// Writes a matrix as CSV in shortest round-trip form.
pub fn matrix_csv(m: &Tensor) -> String {
    let cols = m.shape()[1];
    let mut s = String::new();
    for row in m.data().chunks(cols.max(1)) {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    std::fs::write(path, matrix_csv(m)).map_err(|e| Error::io(path, e))
}

pub fn stack_to_bytes(features: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + features.numel() * 8);
    out.extend_from_slice(STACK_MAGIC);
    for &dim in features.shape() {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn stack_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != STACK_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a stacked feature file".into(),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let numel = shape.iter().product::<usize>();
    let body = &bytes[16..];
    if body.len() != numel * 8 {
        return Err(Error::Format {
            offset: 16 + body.len().min(numel * 8),
            detail: format!("expected {} value bytes, found {}", numel * 8, body.len()),
        });
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data)
}

pub fn save_stack(path: &Path, features: &Tensor) -> Result<()> {
    if features.ndim() != 3 {
        return Err(Error::shape("save_stack", features.shape(), &[0, 0, 0]));
    }
    std::fs::write(path, stack_to_bytes(features)).map_err(|e| Error::io(path, e))
}

pub fn load_stack(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    stack_from_bytes(&bytes)
}

/// `copies` noisy versions of the source samples (cycled): each copy zeroes
/// every node row independently with probability `dropout_rate` and adds
/// `N(0, noise_std^2)` to the rows it keeps.
pub fn perturb_graph_features(
    ds: &GraphDataset,
    dropout_rate: f64,
    noise_std: f64,
    copies: usize,
    rng: &mut impl Rng,
) -> Result<GraphDataset> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Param(format!("dropout rate must be in [0, 1), got {dropout_rate}")));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Param(format!("noise std: {e}")))?;
    let (m, n, d) = (ds.samples(), ds.nodes(), ds.width());
    let mut data = Vec::with_capacity(copies * n * d);
    for c in 0..copies {
        let src = ds.features.row(c % m);
        for row in src.chunks(d) {
            if rng.random::<f64>() < dropout_rate {
                data.extend(std::iter::repeat_n(0.0, d));
            } else if noise_std == 0.0 {
                data.extend_from_slice(row);
            } else {
                data.extend(row.iter().map(|&v| v + noise.sample(rng)));
            }
        }
    }
    GraphDataset::new(Tensor::new(&[copies, n, d], data)?, ds.adjacency.clone(), ds.labels.clone())
}
