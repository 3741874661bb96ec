//! Shared fixtures for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taco_core::videodata::{sample_clip, SyntheticDatasetConfig};
use taco_core::{Clip, Dataset, ExperimentConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The default desk configuration with a small synthetic dataset.
pub fn setup(num_videos: usize) -> (ExperimentConfig, Dataset) {
    let cfg = ExperimentConfig::default();
    let data = SyntheticDatasetConfig {
        num_videos,
        ..Default::default()
    }
    .generate()
    .expect("synthetic dataset");
    (cfg, data)
}

pub fn clips(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Vec<Clip> {
    let mut r = rng(seed);
    data.videos()
        .iter()
        .map(|v| sample_clip(v, &cfg.clip, &mut r).expect("clip"))
        .collect()
}

/// `n` random unit vectors of length `dim`, concatenated.
pub fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}
