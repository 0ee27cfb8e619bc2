//! Binary image-batch ingestion: one label byte followed by channel-major
//! pixel bytes per record, the classic CIFAR batch layout, described by a
//! manifest file.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{Dataset, SplitTag};
use crate::error::{MatError, Result};
use crate::model::InputShape;

/// `manifest.toml` inside a batch directory.
#[derive(Debug, Deserialize)]
pub struct ImageManifest {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub records: usize,
    /// Hex SHA-256 over all `*.bin` payloads concatenated in sorted filename
    /// order.
    pub digest: String,
}

/// Load every `*.bin` batch under `dir` according to its manifest. Pixels are
/// scaled to `[0, 1]` by division with 255.
pub fn load_image_batches(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.toml");
    let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| {
        MatError::Config(format!("cannot read manifest {}: {e}", manifest_path.display()))
    })?;
    let manifest: ImageManifest = toml::from_str(&manifest_text)
        .map_err(|e| MatError::Config(format!("bad manifest {}: {e}", manifest_path.display())))?;

    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(MatError::Config(format!("no .bin batch files under {}", dir.display())));
    }

    let mut raw = Vec::new();
    for f in &files {
        raw.extend_from_slice(&fs::read(f)?);
    }
    let record_len = 1 + manifest.channels * manifest.height * manifest.width;
    if raw.len() != manifest.records * record_len {
        return Err(MatError::CorruptData(format!(
            "batch data under {} holds {} bytes, expected {} records of {} bytes",
            dir.display(),
            raw.len(),
            manifest.records,
            record_len
        )));
    }
    let digest = hex(&Sha256::digest(&raw));
    if !digest.eq_ignore_ascii_case(&manifest.digest) {
        return Err(MatError::CorruptData(format!(
            "batch data under {} failed digest verification",
            dir.display()
        )));
    }

    let dim = record_len - 1;
    let mut inputs = Array2::<f64>::zeros((manifest.records, dim));
    let mut labels = Vec::with_capacity(manifest.records);
    for (i, record) in raw.chunks_exact(record_len).enumerate() {
        labels.push(record[0] as usize);
        for (j, &b) in record[1..].iter().enumerate() {
            inputs[[i, j]] = b as f64 / 255.0;
        }
    }
    let shape = InputShape::image(manifest.channels, manifest.height, manifest.width);
    let mut data = Dataset::new(inputs, labels, manifest.classes, shape, dir.display().to_string())?;
    data.split = SplitTag::Train;
    Ok(data)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
