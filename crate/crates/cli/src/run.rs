//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tinydistill_core::data::{gen_synthetic, Dataset, SyntheticSpec};
use tinydistill_core::distill::ExternalLogits;
use tinydistill_core::supernet::ModelView;
use tinydistill_core::train::{
    evaluate_network, evaluate_store, measure_conflicts, train, train_baseline, train_standard_kd,
    EpochRecord, RunMetrics, StudentLossMode, TrainConfig,
};

use crate::checkpoint::{self, CheckpointFile};
use crate::config::{DatasetSection, RunConfigFile, RunMode, StudentLossSection};
use crate::external;
use crate::idx_io;
use crate::metrics::{prepare_out_dir, RunObserver, StdClock};
use crate::{CliError, CliResult};

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub last: Option<EpochRecord>,
}

fn load_datasets(cfg: &RunConfigFile) -> CliResult<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSection::Synthetic(s) => Ok((
            gen_synthetic(&s.train_spec())?,
            gen_synthetic(&s.eval_spec())?,
        )),
        DatasetSection::Idx(paths) => Ok((
            idx_io::load_idx(&paths.train_images, &paths.train_labels)?,
            idx_io::load_idx(&paths.eval_images, &paths.eval_labels)?,
        )),
    }
}

fn resolve_external(
    cfg: &RunConfigFile,
    train_cfg: &TrainConfig,
    train_ds: &Dataset,
) -> CliResult<Option<ExternalLogits>> {
    let Some(section) = &cfg.train.external_kd else {
        return Ok(None);
    };
    if cfg.mode == RunMode::Baseline {
        return Ok(None);
    }
    let ext = if let Some(path) = &section.logits_file {
        external::load_external(path)?
    } else if let Some(path) = &section.teacher_checkpoint {
        let mut teacher = checkpoint::load(path)?.to_network()?;
        external::precompute_from_network(&mut teacher, train_ds, train_cfg.batch_size)?
    } else {
        return Err(CliError::Config(
            "external_kd needs a logits_file or a teacher_checkpoint".into(),
        ));
    };
    if ext.fingerprint() != train_ds.fingerprint() {
        return Err(CliError::Config(
            "external logits were computed for a different dataset (fingerprint mismatch)".into(),
        ));
    }
    if ext.class_count() != train_ds.class_count() {
        return Err(CliError::Config(format!(
            "external logits have {} classes, dataset has {}",
            ext.class_count(),
            train_ds.class_count()
        )));
    }
    Ok(Some(ext))
}

/// Runs one configured training job, writing `metrics.jsonl`, `final.ckpt`
/// and `student_export.ckpt` into the output directory.
pub fn run_training(cfg: &RunConfigFile, quiet: bool) -> CliResult<RunOutcome> {
    cfg.validate()?;
    let train_cfg = cfg.to_train_config()?;
    let (train_ds, eval_ds) = load_datasets(cfg)?;
    prepare_out_dir(&cfg.output_dir)?;
    let external = resolve_external(cfg, &train_cfg, &train_ds)?;
    let mut observer = RunObserver::new(&cfg.output_dir, quiet)?;
    let clock = StdClock::new();

    let (final_file, export_file, metrics) = match cfg.mode {
        RunMode::Distilled => {
            let (store, metrics) = train(
                &cfg.network,
                &train_cfg,
                &train_ds,
                &eval_ds,
                external.as_ref(),
                &clock,
                &mut observer,
            )?;
            let export = store.export_student()?;
            (
                checkpoint::store_to_file(&store),
                checkpoint::network_to_file(&export),
                metrics,
            )
        }
        RunMode::Baseline => {
            let (net, metrics) =
                train_baseline(&cfg.network, &train_cfg, &train_ds, &eval_ds, &clock, &mut observer)?;
            let file = checkpoint::network_to_file(&net);
            (file.clone(), file, metrics)
        }
        RunMode::StandardKd => {
            let ext = external.as_ref().ok_or_else(|| {
                CliError::Config("standard_kd mode requires an external teacher".into())
            })?;
            let (net, metrics) = train_standard_kd(
                &cfg.network,
                &train_cfg,
                &train_ds,
                &eval_ds,
                ext,
                &clock,
                &mut observer,
            )?;
            let file = checkpoint::network_to_file(&net);
            (file.clone(), file, metrics)
        }
    };

    checkpoint::save(&cfg.output_dir.join("final.ckpt"), &final_file)?;
    checkpoint::save(&cfg.output_dir.join("student_export.ckpt"), &export_file)?;
    summarize(&metrics, cfg, quiet);
    Ok(RunOutcome {
        out_dir: cfg.output_dir.clone(),
        last: metrics.last().cloned(),
    })
}

fn summarize(metrics: &RunMetrics, cfg: &RunConfigFile, quiet: bool) {
    if quiet {
        return;
    }
    if let Some(last) = metrics.last() {
        eprintln!(
            "{} run finished: {} epochs, student eval accuracy {:.4}",
            cfg.mode.name(),
            metrics.epochs.len(),
            last.acc_student_eval
        );
    } else {
        eprintln!("{} run finished: 0 epochs", cfg.mode.name());
    }
}

pub fn cmd_train(config_path: &Path) -> CliResult<()> {
    let cfg = RunConfigFile::load(config_path)?;
    run_training(&cfg, false)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalView {
    Teacher,
    Student,
}

pub struct DatasetArgs {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub synthetic: Option<String>,
}

impl DatasetArgs {
    pub fn resolve(&self) -> CliResult<Dataset> {
        match (&self.images, &self.labels, &self.synthetic) {
            (Some(i), Some(l), None) => idx_io::load_idx(i, l),
            (None, None, Some(s)) => Ok(gen_synthetic(&parse_synthetic_arg(s)?)?),
            _ => Err(CliError::Config(
                "dataset: pass either --images and --labels, or --synthetic".into(),
            )),
        }
    }
}

/// Parses `classes=10,per_class=100,size=12,seed=5[,channels=3][,sigma=0.25]`.
pub fn parse_synthetic_arg(s: &str) -> CliResult<SyntheticSpec> {
    let mut map = BTreeMap::new();
    for part in s.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("synthetic spec: expected key=value, got {part:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let take = |map: &mut BTreeMap<String, String>, key: &str| -> CliResult<String> {
        map.remove(key)
            .ok_or_else(|| CliError::Config(format!("synthetic spec: missing {key}")))
    };
    let parse_usize = |v: &str, key: &str| -> CliResult<usize> {
        v.parse()
            .map_err(|_| CliError::Config(format!("synthetic spec: bad {key}={v}")))
    };
    let classes = parse_usize(&take(&mut map, "classes")?, "classes")?;
    let per_class = parse_usize(&take(&mut map, "per_class")?, "per_class")?;
    let size = parse_usize(&take(&mut map, "size")?, "size")?;
    let seed: u64 = take(&mut map, "seed")?
        .parse()
        .map_err(|_| CliError::Config("synthetic spec: bad seed".into()))?;
    let mut spec = SyntheticSpec::new(classes, per_class, size, seed);
    if let Some(v) = map.remove("channels") {
        spec.channels = parse_usize(&v, "channels")?;
    }
    if let Some(v) = map.remove("sigma") {
        spec.noise_sigma = v
            .parse()
            .map_err(|_| CliError::Config("synthetic spec: bad sigma".into()))?;
    }
    if let Some(v) = map.remove("noise_seed") {
        spec.noise_seed = v
            .parse()
            .map_err(|_| CliError::Config("synthetic spec: bad noise_seed".into()))?;
    }
    if let Some(unknown) = map.keys().next() {
        return Err(CliError::Config(format!(
            "synthetic spec: unknown key {unknown}"
        )));
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Serialize)]
struct EvalOut {
    accuracy: f64,
    n: usize,
}

pub fn cmd_eval(
    ckpt_path: &Path,
    dataset: &DatasetArgs,
    view: EvalView,
    batch_size: usize,
) -> CliResult<()> {
    let file = checkpoint::load(ckpt_path)?;
    let ds = dataset.resolve()?;
    let accuracy = match (&file, view) {
        (CheckpointFile::Supernet { .. }, EvalView::Teacher) => {
            let mut store = file.to_store()?;
            evaluate_store(&mut store, ModelView::Teacher, &ds, batch_size)?
        }
        (CheckpointFile::Supernet { .. }, EvalView::Student) => {
            let mut store = file.to_store()?;
            evaluate_store(&mut store, ModelView::Student, &ds, batch_size)?
        }
        (CheckpointFile::Network { .. }, EvalView::Student) => {
            let mut net = file.to_network()?;
            evaluate_network(&mut net, &ds, batch_size)?
        }
        (CheckpointFile::Network { .. }, EvalView::Teacher) => {
            return Err(CliError::Config(
                "a standalone network checkpoint has no teacher view".into(),
            ))
        }
    };
    let out = EvalOut {
        accuracy,
        n: ds.len(),
    };
    println!("{}", serde_json::to_string(&out).expect("serialize"));
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

enum SweepAxis {
    ExpansionRate,
    Threshold,
}

fn parse_grid(grid: &str) -> CliResult<(SweepAxis, Vec<String>)> {
    let (axis, values) = grid
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("grid: expected axis=v1,v2,..., got {grid:?}")))?;
    let tokens: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(CliError::Config("grid: no values given".into()));
    }
    match axis.trim() {
        "k" => Ok((SweepAxis::ExpansionRate, tokens)),
        "T" => Ok((SweepAxis::Threshold, tokens)),
        other => Err(CliError::Config(format!(
            "grid: unknown axis {other:?} (use k or T)"
        ))),
    }
}

fn cell_config(
    base: &RunConfigFile,
    axis: &SweepAxis,
    token: &str,
) -> CliResult<(String, RunConfigFile)> {
    let mut cfg = base.clone();
    let label = match axis {
        SweepAxis::ExpansionRate => {
            let k: usize = token
                .parse()
                .map_err(|_| CliError::Config(format!("grid: bad expansion rate {token:?}")))?;
            cfg.train.expansion_rate = k;
            format!("k-{token}")
        }
        SweepAxis::Threshold => {
            let t: f64 = token
                .parse()
                .map_err(|_| CliError::Config(format!("grid: bad threshold {token:?}")))?;
            match &mut cfg.train.student_loss {
                StudentLossSection::Uncertainty { threshold, .. } => *threshold = t,
                _ => {
                    return Err(CliError::Config(
                        "a T sweep needs an uncertainty student loss in the base config".into(),
                    ))
                }
            }
            format!("T-{token}")
        }
    };
    cfg.output_dir = base.output_dir.join(format!("cell-{label}"));
    Ok((label, cfg))
}

fn sweep_workers() -> usize {
    std::env::var("TINYDISTILL_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1)
}

pub fn cmd_sweep(config_path: &Path, grid: &str) -> CliResult<()> {
    let base = RunConfigFile::load(config_path)?;
    let (axis, tokens) = parse_grid(grid)?;
    let axis_name = match axis {
        SweepAxis::ExpansionRate => "k",
        SweepAxis::Threshold => "T",
    };
    let cells: Vec<(String, RunConfigFile)> = tokens
        .iter()
        .map(|t| cell_config(&base, &axis, t))
        .collect::<CliResult<_>>()?;
    prepare_out_dir(&base.output_dir)?;

    let workers = sweep_workers();
    let mut results: Vec<Option<Result<RunOutcome, CliError>>> =
        (0..cells.len()).map(|_| None).collect();
    for group in (0..cells.len()).collect::<Vec<_>>().chunks(workers.max(1)) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &i in group {
                let cfg = &cells[i].1;
                handles.push((i, scope.spawn(move || run_training(cfg, true))));
            }
            for (i, h) in handles {
                results[i] = Some(h.join().unwrap_or_else(|_| {
                    Err(CliError::Config("sweep cell thread panicked".into()))
                }));
            }
        });
    }

    let mut csv = String::from("axis,value,status,acc_student_eval\n");
    for ((token, _), result) in cells.iter().zip(&results) {
        let token = token.trim_start_matches(&format!("{axis_name}-")).to_string();
        match result.as_ref().expect("every cell ran") {
            Ok(outcome) => {
                let acc = outcome
                    .last
                    .as_ref()
                    .map(|r| r.acc_student_eval.to_string())
                    .unwrap_or_default();
                csv.push_str(&format!("{axis_name},{token},ok,{acc}\n"));
                eprintln!("cell {axis_name}={token}: ok");
            }
            Err(e) => {
                csv.push_str(&format!("{axis_name},{token},error,\n"));
                eprintln!("cell {axis_name}={token}: {e}");
            }
        }
    }
    checkpoint::atomic_write(&base.output_dir.join("summary.csv"), csv.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze-conflicts
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LayerOut {
    layer: usize,
    role: &'static str,
    conflict_fraction: f64,
    mean_cosine: Option<f64>,
    cosines: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct ConflictOut {
    steps: usize,
    aggregate_conflict_ratio: f64,
    layers: Vec<LayerOut>,
}

pub fn cmd_analyze_conflicts(
    ckpt_path: &Path,
    dataset: &DatasetArgs,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> CliResult<()> {
    let mut store = checkpoint::load(ckpt_path)?.to_store()?;
    let ds = dataset.resolve()?;
    let mut cfg = TrainConfig::desk_default();
    cfg.batch_size = batch_size;
    cfg.seed = seed;
    cfg.surgery_enabled = false;
    cfg.student_loss = StudentLossMode::AlwaysKl;
    cfg.augment = false;
    let report = measure_conflicts(&mut store, &cfg, &ds, steps)?;
    let out = ConflictOut {
        steps: report.steps,
        aggregate_conflict_ratio: report.aggregate_ratio,
        layers: report
            .layers
            .into_iter()
            .map(|l| LayerOut {
                layer: l.key.layer,
                role: l.key.role.name(),
                conflict_fraction: l.conflict_fraction,
                mean_cosine: l.mean_cosine,
                cosines: l.cosines,
            })
            .collect(),
    };
    println!("{}", serde_json::to_string(&out).expect("serialize"));
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GenDataOut {
    images: PathBuf,
    labels: PathBuf,
    n: usize,
    classes: usize,
    fingerprint: String,
}

pub fn cmd_gen_data(spec: &SyntheticSpec, out_prefix: &Path) -> CliResult<()> {
    let ds = gen_synthetic(spec)?;
    if let Some(dir) = out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    let (images, labels) = idx_io::write_idx(&ds, out_prefix)?;
    let out = GenDataOut {
        images,
        labels,
        n: ds.len(),
        classes: ds.class_count(),
        fingerprint: ds.fingerprint().to_string(),
    };
    println!("{}", serde_json::to_string(&out).expect("serialize"));
    Ok(())
}
