//! Shared fixtures for the benchmarks.

use defectgen_core::dataset::{synth_toy_dataset, Dataset, ToySpec};

pub fn toy(count: usize, resolution: usize, seed: u64) -> Dataset {
    synth_toy_dataset(&ToySpec::new(count, resolution, resolution, 1, seed)).expect("toy dataset")
}
