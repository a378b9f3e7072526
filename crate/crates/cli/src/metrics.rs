//! Metrics streaming (JSONL, one object per epoch with fixed keys) and the
//! per-epoch checkpointing observer.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use tinydistill_core::train::{Clock, EpochObserver, EpochRecord, ModelRef};

use crate::checkpoint;
use crate::CliResult;

/// Wall clock measured from construction.
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        StdClock::new()
    }
}

impl Clock for StdClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// One metrics line; field order is the on-disk key order.
#[derive(Serialize)]
struct MetricsLine {
    epoch: usize,
    lr: f64,
    loss_teacher: Option<f64>,
    loss_student: f64,
    acc_student_eval: f64,
    acc_teacher_eval: Option<f64>,
    conflict_ratio: Option<f64>,
    kl_fraction: Option<f64>,
    seconds: f64,
}

impl From<&EpochRecord> for MetricsLine {
    fn from(r: &EpochRecord) -> Self {
        MetricsLine {
            epoch: r.epoch,
            lr: r.lr,
            loss_teacher: r.loss_teacher,
            loss_student: r.loss_student,
            acc_student_eval: r.acc_student_eval,
            acc_teacher_eval: r.acc_teacher_eval,
            conflict_ratio: r.conflict_ratio,
            kl_fraction: r.kl_fraction,
            seconds: r.seconds,
        }
    }
}

pub fn record_to_json(record: &EpochRecord) -> String {
    serde_json::to_string(&MetricsLine::from(record)).expect("metrics serialize")
}

/// Streams metrics.jsonl and keeps `final.ckpt` current after every epoch,
/// so an interrupted run still leaves a loadable checkpoint behind.
pub struct RunObserver {
    metrics: File,
    final_ckpt: PathBuf,
    quiet: bool,
}

impl RunObserver {
    pub fn new(out_dir: &Path, quiet: bool) -> CliResult<Self> {
        let metrics_path = out_dir.join("metrics.jsonl");
        let metrics = File::create(&metrics_path).map_err(|e| {
            crate::CliError::Io(format!("cannot create {}: {e}", metrics_path.display()))
        })?;
        Ok(RunObserver {
            metrics,
            final_ckpt: out_dir.join("final.ckpt"),
            quiet,
        })
    }
}

impl EpochObserver for RunObserver {
    fn on_epoch(&mut self, record: &EpochRecord, model: ModelRef<'_>) -> Result<(), String> {
        let line = record_to_json(record);
        writeln!(self.metrics, "{line}").map_err(|e| e.to_string())?;
        self.metrics.flush().map_err(|e| e.to_string())?;
        let file = match model {
            ModelRef::Supernet(store) => checkpoint::store_to_file(store),
            ModelRef::Network(net) => checkpoint::network_to_file(net),
        };
        checkpoint::save(&self.final_ckpt, &file).map_err(|e| e.to_string())?;
        if !self.quiet {
            eprintln!("{line}");
        }
        Ok(())
    }
}

/// Creates the run directory if needed and truncates stale outputs.
pub fn prepare_out_dir(out_dir: &Path) -> CliResult<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| crate::CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    Ok(())
}
