//! Parameter checkpoints: a flat little-endian `f64` file plus a JSON
//! manifest describing the blocks it holds.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use neurlog_core::neural::ParamBlock;
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub blocks: Vec<BlockEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    /// Offset into the value file, in values.
    pub offset: usize,
    pub len: usize,
}

/// Paths of the value file and the manifest for a checkpoint stem.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn save(stem: &Path, blocks: &[ParamBlock]) -> Result<()> {
    let (bin, json) = paths(stem);
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for b in blocks {
        bytes.extend(b.values.iter().flat_map(|v| v.to_le_bytes()));
        entries.push(BlockEntry { name: b.name.clone(), shapes: b.shapes.clone(), offset, len: b.values.len() });
        offset += b.values.len();
    }
    std::fs::write(&bin, bytes).with_context(|| format!("writing {}", bin.display()))?;
    let manifest = Manifest { version: FORMAT_VERSION, blocks: entries };
    std::fs::write(&json, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", json.display()))?;
    Ok(())
}

pub fn load(stem: &Path) -> Result<Vec<ParamBlock>> {
    let (bin, json) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&json).with_context(|| format!("reading {}", json.display()))?)
        .with_context(|| format!("parsing {}", json.display()))?;
    if manifest.version != FORMAT_VERSION {
        bail!("{}: checkpoint version {} is not supported", json.display(), manifest.version);
    }
    let bytes = std::fs::read(&bin).with_context(|| format!("reading {}", bin.display()))?;
    if bytes.len() % 8 != 0 {
        bail!("{}: length {} is not a multiple of 8", bin.display(), bytes.len());
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    manifest
        .blocks
        .into_iter()
        .map(|e| {
            let expected: usize = e.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
            if expected != e.len {
                bail!("block {}: shapes hold {expected} values, manifest says {}", e.name, e.len);
            }
            let Some(slice) = values.get(e.offset..e.offset + e.len) else {
                bail!("block {} extends past the end of {}", e.name, bin.display());
            };
            Ok(ParamBlock { name: e.name, shapes: e.shapes, values: slice.to_vec() })
        })
        .collect()
}
