#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ctn_core::pipeline::RunConfig;

/// Contents of every non-manifest file in `dir` (manifests carry wall time).
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && !p.to_string_lossy().ends_with("_manifest.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

pub fn small_config(dir: PathBuf, workers: usize) -> RunConfig {
    RunConfig {
        n_samples: 4000,
        batch_size: 700,
        efficiency_threshold: 0.5,
        robustness_trials: 16,
        layout_iterations: 50,
        workers,
        output_dir: dir,
        ..RunConfig::default()
    }
}
