//! Fixtures shared by the benchmarks.

use std::path::{Path, PathBuf};

use geomlens_core::synthetic::{generate, PlantedSpec};
use geomlens_core::tensor_io::{write_container, DType};
use geomlens_core::EmbeddingTensor;

/// Planted embeddings with a few clusters and residual noise.
pub fn planted(c: usize, t: usize, d: usize, seed: u64) -> EmbeddingTensor {
    let spec = PlantedSpec { n_clusters: 4, cluster_spread: 0.5, noise_sigma: 0.3, seed, ..PlantedSpec::new(c, t, d) };
    generate(&spec).expect("valid spec").embeddings
}

/// Writes `layers` planted layers as f64 containers into `dir`.
pub fn write_layers(dir: &Path, layers: usize, [c, t, d]: [usize; 3]) -> Vec<PathBuf> {
    (0..layers)
        .map(|layer| {
            let mut e = planted(c, t, d, layer as u64);
            e.layer = layer;
            let path = dir.join(format!("layer{layer:02}.gt"));
            write_container(&e.to_container(DType::F64).expect("finite"), &path).expect("writable");
            path
        })
        .collect()
}
