//! File formats, datasets, experiment runners and the command-line front
//! end for `neurlog-core`.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod experiment;
pub mod idx;
pub mod metrics;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use neurlog_core::syntax::{parse_program, Program};

/// Environment variable naming the dataset root.
pub const DATA_DIR_VAR: &str = "NEURLOG_DATA_DIR";

/// Dataset root: `NEURLOG_DATA_DIR` if set, else `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// Parses a program file. Parse errors read `file:line:col: message`.
pub fn load_program(path: &Path) -> Result<Program> {
    let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_program(&src).map_err(|e| anyhow!("{}:{e}", path.display()))
}

/// Train and test MNIST splits under `root/mnist`, gzipped or not.
pub fn load_mnist(root: &Path) -> Result<(idx::LabeledImages, idx::LabeledImages)> {
    let dir = root.join("mnist");
    let find = |stem: &str| -> Result<PathBuf> {
        let plain = dir.join(stem);
        let gz = dir.join(format!("{stem}.gz"));
        [gz, plain]
            .into_iter()
            .find(|p| p.exists())
            .ok_or_else(|| anyhow!("{stem}(.gz) not found in {} (set {DATA_DIR_VAR})", dir.display()))
    };
    let train = idx::load_mnist_idx(&find("train-images-idx3-ubyte")?, &find("train-labels-idx1-ubyte")?)?;
    let test = idx::load_mnist_idx(&find("t10k-images-idx3-ubyte")?, &find("t10k-labels-idx1-ubyte")?)?;
    Ok((train, test))
}
