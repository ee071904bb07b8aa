//! Reader for the IDX files MNIST is distributed in. Gzipped files are
//! detected by their magic bytes and decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: file ends after {actual} bytes, header promises {expected}")]
    TruncatedFile { path: PathBuf, expected: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// Images flattened row-major and scaled to `[0, 1]`, with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io { path: path.to_path_buf(), source };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(IdxError::TruncatedFile { path: path.to_path_buf(), expected: need, actual: bytes.len() });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(IdxError::BadMagic { path: path.to_path_buf(), found: word(0), expected: magic });
    }
    let sizes: Vec<usize> = (1..=dims).map(|i| word(i) as usize).collect();
    let expected = need + sizes.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(IdxError::TruncatedFile { path: path.to_path_buf(), expected, actual: bytes.len() });
    }
    Ok(sizes)
}

/// Parses an image file held in memory.
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>), IdxError> {
    let dims = header(path, bytes, IMAGE_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = &bytes[16..16 + n * rows * cols];
    let images = pixels
        .chunks_exact(rows * cols)
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

/// Parses a label file held in memory.
pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let dims = header(path, bytes, LABEL_MAGIC, 1)?;
    Ok(bytes[8..8 + dims[0]].to_vec())
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<LabeledImages, IdxError> {
    let (rows, cols, images) = parse_images(images, &read_bytes(images)?)?;
    let labels = parse_labels(labels, &read_bytes(labels)?)?;
    if images.len() != labels.len() {
        return Err(IdxError::CountMismatch { images: images.len(), labels: labels.len() });
    }
    Ok(LabeledImages { rows, cols, images, labels })
}

/// Serializes images in IDX form. Pixels are rounded back to bytes.
pub fn encode_images(rows: usize, cols: usize, images: &[Vec<f64>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for w in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    for img in images {
        out.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("mem")
    }

    #[test]
    fn round_trip_and_scaling() {
        let imgs = vec![vec![0.0, 1.0, 0.5, 0.25], vec![1.0; 4]];
        let bytes = encode_images(2, 2, &imgs);
        let (r, c, back) = parse_images(&p(), &bytes).unwrap();
        assert_eq!((r, c), (2, 2));
        assert_eq!(back[0][1], 1.0);
        assert_eq!(back[1], vec![1.0; 4]);
        assert!((back[0][2] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(parse_labels(&p(), &encode_labels(&[3, 9])).unwrap(), vec![3, 9]);
    }

    #[test]
    fn errors() {
        let bytes = encode_images(2, 2, &[vec![0.0; 4]]);
        assert!(matches!(parse_labels(&p(), &bytes), Err(IdxError::BadMagic { .. })));
        assert!(matches!(
            parse_images(&p(), &bytes[..bytes.len() - 1]),
            Err(IdxError::TruncatedFile { .. })
        ));
        assert!(matches!(parse_images(&p(), &bytes[..6]), Err(IdxError::TruncatedFile { .. })));
    }
}
