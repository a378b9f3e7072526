//! Precomputed external-teacher logits: a JSON document whose header
//! records the row/class counts and the fingerprint of the dataset the
//! rows were computed for. Row `i` holds the logits of dataset sample `i`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tinydistill_core::autodiff::{Tape, Tensor};
use tinydistill_core::data::Dataset;
use tinydistill_core::distill::ExternalLogits;
use tinydistill_core::nn::{BnMode, Network};

use crate::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalLogitsFile {
    pub n: usize,
    pub c: usize,
    pub fingerprint: String,
    pub logits: Vec<Vec<f64>>,
}

pub fn load_external(path: &Path) -> CliResult<ExternalLogits> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let file: ExternalLogitsFile = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Io(format!("corrupt logits file {}: {e}", path.display())))?;
    if file.logits.len() != file.n || file.logits.iter().any(|r| r.len() != file.c) {
        return Err(CliError::Io(format!(
            "logits file {}: payload does not match the declared {}x{} header",
            path.display(),
            file.n,
            file.c
        )));
    }
    let flat: Vec<f64> = file.logits.into_iter().flatten().collect();
    let rows = Tensor::new(&[file.n, file.c], flat).map_err(|e| CliError::Io(e.to_string()))?;
    ExternalLogits::new(rows, file.fingerprint).map_err(CliError::from)
}

pub fn save_external(path: &Path, ext: &ExternalLogits) -> CliResult<()> {
    let c = ext.class_count();
    let file = ExternalLogitsFile {
        n: ext.len(),
        c,
        fingerprint: ext.fingerprint().to_string(),
        logits: ext
            .rows()
            .data()
            .chunks_exact(c)
            .map(|r| r.to_vec())
            .collect(),
    };
    let bytes = serde_json::to_vec(&file).map_err(|e| CliError::Io(e.to_string()))?;
    crate::checkpoint::atomic_write(path, &bytes)
}

/// Runs a frozen network over the dataset in order (batch norm in eval
/// mode) and packages its logits for reuse as an external teacher.
pub fn precompute_from_network(
    net: &mut Network,
    ds: &Dataset,
    batch_size: usize,
) -> CliResult<ExternalLogits> {
    let n = ds.len();
    let classes = net
        .spec()
        .class_count()
        .ok_or_else(|| CliError::Config("teacher network has no classifier output".into()))?;
    let mut flat = Vec::with_capacity(n * classes);
    let mut at = 0usize;
    while at < n {
        let end = (at + batch_size).min(n);
        let idx: Vec<usize> = (at..end).collect();
        let batch = ds.gather(&idx)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let logits = net.forward(&mut tape, x, BnMode::Eval)?;
        flat.extend_from_slice(tape.value(logits).data());
        at = end;
    }
    let rows = Tensor::new(&[n, classes], flat).map_err(CliError::from)?;
    ExternalLogits::new(rows, ds.fingerprint().to_string()).map_err(CliError::from)
}
