use std::path::Path;

use rpcl::harness::cli::gen_data;
use rpcl::harness::{GenDataConfig, TrainConfig};

/// Writes a small source/target dataset under `dir`.
pub fn tiny_data(dir: &Path) {
    let cfg = GenDataConfig {
        seed: Some(21),
        output_dir: dir.to_path_buf(),
        source_train: 12,
        source_test: 4,
        target_train: 12,
        target_test: 6,
        ..GenDataConfig::default()
    };
    gen_data(&cfg).unwrap();
}

/// A short run over the dataset written by [`tiny_data`].
pub fn tiny_config(data: &Path, out: &Path, steps: usize) -> TrainConfig {
    TrainConfig {
        source_train: data.join("source/train.json"),
        target_train: data.join("target/train.json"),
        target_test: data.join("target/test.json"),
        steps,
        eval_interval: 5,
        top_k: 16,
        seed: Some(3),
        output_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}
