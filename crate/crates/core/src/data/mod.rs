//! Dataset generation, ingestion and perturbation.

pub mod graph;
pub mod images;
pub mod karate;

pub use graph::{perturb_graph_features, GraphDataset};
pub use images::{ClassPixelStats, ImageDataset};
pub use karate::{gen_karate_synthetic, KarateConfig};
