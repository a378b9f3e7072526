//! IDX files on disk; the byte-level format lives in the core crate.

use std::fs;
use std::path::{Path, PathBuf};

use tinydistill_core::data::{dataset_from_idx, dataset_to_idx, Dataset};

use crate::{CliError, CliResult};

pub fn load_idx(images: &Path, labels: &Path) -> CliResult<Dataset> {
    let image_bytes = fs::read(images)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", images.display())))?;
    let label_bytes = fs::read(labels)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", labels.display())))?;
    dataset_from_idx(&image_bytes, &label_bytes).map_err(CliError::from)
}

/// Writes `<prefix>-images.idx` and `<prefix>-labels.idx`.
pub fn write_idx(ds: &Dataset, prefix: &Path) -> CliResult<(PathBuf, PathBuf)> {
    let (image_bytes, label_bytes) = dataset_to_idx(ds)?;
    let mut images = prefix.as_os_str().to_owned();
    images.push("-images.idx");
    let images = PathBuf::from(images);
    let mut labels = prefix.as_os_str().to_owned();
    labels.push("-labels.idx");
    let labels = PathBuf::from(labels);
    crate::checkpoint::atomic_write(&images, &image_bytes)?;
    crate::checkpoint::atomic_write(&labels, &label_bytes)?;
    Ok((images, labels))
}
