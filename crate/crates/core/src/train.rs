//! Training loops: the in-situ distillation recipe over the shared store,
//! plus the plain-CE baseline and standard external-teacher KD for
//! comparison runs.
//!
//! One distillation step runs the teacher forward and backward on the
//! ground-truth loss, then the student forward and backward on its gated
//! loss (the teacher's logits from the same batch serve as detached
//! targets), applies gradient surgery to the teacher set, combines both
//! sets, clips the global norm and takes one SGD-with-momentum step. The
//! learning rate follows linear warmup into a cosine decay.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::data::{augment_batch, batches, Batch, Dataset};
use crate::distill::{
    combine_gradients, conflict_ratio, cross_entropy_smoothed, external_distill_loss,
    kl_divergence, layer_cosines, project_gradients, select_student_loss, ExternalLogits,
    GradientSet, ParamKey, ParamRole, ParamScope, UncertaintyPolicy,
};
use crate::error::{Error, Result};
use crate::nn::{build_network, BnMode, LayerParams, LeasedLayer, Network, NetworkSpec};
use crate::supernet::{build_shared, ModelView, SharedParameterStore, SupernetConfig};
use crate::rng::Rng;

/// Objective for the student branch.
#[derive(Clone, Debug, PartialEq)]
pub enum StudentLossMode {
    /// Per-sample gate between KL distillation and smoothed CE.
    Uncertainty(UncertaintyPolicy),
    /// Vanilla in-situ distillation: every sample takes the KL branch.
    AlwaysKl,
    /// No distillation signal: every sample trains on the label.
    AlwaysCe,
}

/// External frozen-teacher composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExternalKdMode {
    /// When the student branch is `AlwaysKl`, replace the in-situ target
    /// with the external teacher instead of adding both terms.
    pub replace_insitu: bool,
}

/// Full hyperparameter record for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    /// Global L2 clip; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub expansion_rate: usize,
    pub student_loss: StudentLossMode,
    pub surgery_enabled: bool,
    /// Scale on the student loss term (ablation knob).
    pub student_loss_weight: f64,
    /// Treat the teacher's logits as constants in the student loss.
    pub detach_teacher_logits: bool,
    pub external_kd: Option<ExternalKdMode>,
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: the full recipe (surgery plus the uncertainty
    /// gate, which doubles the epoch budget relative to plain runs).
    pub fn desk_default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 128,
            base_lr: 0.05,
            momentum: 0.9,
            warmup_epochs: 3,
            clip_norm: 1.0,
            label_smoothing: 0.1,
            expansion_rate: 3,
            student_loss: StudentLossMode::Uncertainty(UncertaintyPolicy::desk_default()),
            surgery_enabled: true,
            student_loss_weight: 1.0,
            detach_teacher_logits: true,
            external_kd: None,
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(
                "warmup epochs must be smaller than total epochs".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must be in [0,1)".into()));
        }
        if self.expansion_rate < 1 {
            return Err(Error::Config("expansion rate must be at least 1".into()));
        }
        if !(self.student_loss_weight >= 0.0) || !self.student_loss_weight.is_finite() {
            return Err(Error::Config("student loss weight must be finite and >= 0".into()));
        }
        if let StudentLossMode::Uncertainty(policy) = &self.student_loss {
            policy.validate()?;
            if self.external_kd.is_some() {
                return Err(Error::Config(
                    "uncertainty-gated selection must be disabled when an external teacher is used"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// Wall-clock source, injected so the core stays free of platform time.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// Clock that always reads zero (tests, deterministic fixtures).
pub struct NullClock;

impl Clock for NullClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// One epoch of instrumentation. Teacher-side fields are `None` for
/// single-network runs (baseline, standard KD).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_teacher: Option<f64>,
    pub loss_student: f64,
    pub acc_student_train: f64,
    pub acc_teacher_train: Option<f64>,
    pub acc_student_eval: f64,
    pub acc_teacher_eval: Option<f64>,
    pub conflict_ratio: Option<f64>,
    pub kl_fraction: Option<f64>,
    pub seconds: f64,
}

/// Per-epoch records of a whole run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Borrowed view of the model a run is training, for observers that
/// checkpoint per epoch.
pub enum ModelRef<'a> {
    Supernet(&'a SharedParameterStore),
    Network(&'a Network),
}

/// Called after every completed epoch (metrics streaming, checkpoints).
pub trait EpochObserver {
    fn on_epoch(&mut self, record: &EpochRecord, model: ModelRef<'_>)
        -> core::result::Result<(), String>;
}

/// Observer that does nothing.
pub struct NoopObserver;

impl EpochObserver for NoopObserver {
    fn on_epoch(&mut self, _: &EpochRecord, _: ModelRef<'_>) -> core::result::Result<(), String> {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Schedule, clipping, optimizer
// ---------------------------------------------------------------------------

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`. Both sides of the junction equal `base_lr`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!(
            "warmup {warmup_steps} must be shorter than the schedule {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}

/// Rescales the whole set so its global L2 norm is at most `max_norm`;
/// a set already within the bound passes through bit-for-bit. Returns the
/// pre-clip norm.
pub fn clip(g: &mut GradientSet, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config("clip norm must be positive".into()));
    }
    let norm = g.global_norm();
    if norm > max_norm {
        g.scale_all(max_norm / norm);
    }
    Ok(norm)
}

/// Mutable access to parameters by key; implemented by the shared store and
/// by standalone networks.
pub trait ParameterSet {
    fn param_keys(&self) -> Vec<ParamKey>;
    fn param(&self, key: &ParamKey) -> Option<&Tensor>;
    fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor>;
}

impl ParameterSet for SharedParameterStore {
    fn param_keys(&self) -> Vec<ParamKey> {
        self.all_keys()
    }

    fn param(&self, key: &ParamKey) -> Option<&Tensor> {
        self.tensor(key)
    }

    fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        self.tensor_mut(key)
    }
}

fn network_key(layer: usize, role: ParamRole) -> ParamKey {
    ParamKey::new(layer, ParamScope::Student, role)
}

impl ParameterSet for Network {
    fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, lp) in self.layers().iter().enumerate() {
            match lp {
                LayerParams::Conv { .. } | LayerParams::Dense { .. } => {
                    keys.push(network_key(i, ParamRole::Weight));
                    keys.push(network_key(i, ParamRole::Bias));
                }
                LayerParams::Norm(_) => {
                    keys.push(network_key(i, ParamRole::Gamma));
                    keys.push(network_key(i, ParamRole::Beta));
                }
                LayerParams::Passive => {}
            }
        }
        keys
    }

    fn param(&self, key: &ParamKey) -> Option<&Tensor> {
        if key.scope != ParamScope::Student {
            return None;
        }
        match (self.layers().get(key.layer)?, key.role) {
            (LayerParams::Conv { weight, .. }, ParamRole::Weight)
            | (LayerParams::Dense { weight, .. }, ParamRole::Weight) => Some(weight),
            (LayerParams::Conv { bias, .. }, ParamRole::Bias)
            | (LayerParams::Dense { bias, .. }, ParamRole::Bias) => Some(bias),
            (LayerParams::Norm(state), ParamRole::Gamma) => Some(&state.gamma),
            (LayerParams::Norm(state), ParamRole::Beta) => Some(&state.beta),
            _ => None,
        }
    }

    fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        if key.scope != ParamScope::Student {
            return None;
        }
        match (self.layers_mut().get_mut(key.layer)?, key.role) {
            (LayerParams::Conv { weight, .. }, ParamRole::Weight)
            | (LayerParams::Dense { weight, .. }, ParamRole::Weight) => Some(weight),
            (LayerParams::Conv { bias, .. }, ParamRole::Bias)
            | (LayerParams::Dense { bias, .. }, ParamRole::Bias) => Some(bias),
            (LayerParams::Norm(state), ParamRole::Gamma) => Some(&mut state.gamma),
            (LayerParams::Norm(state), ParamRole::Beta) => Some(&mut state.beta),
            _ => None,
        }
    }
}

/// Per-parameter momentum buffers, created lazily at zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    buffers: alloc::collections::BTreeMap<ParamKey, Tensor>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }
}

/// `buffer <- momentum * buffer + g; param <- param - lr * buffer`.
pub fn sgd_step(
    params: &mut dyn ParameterSet,
    g: &GradientSet,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (key, grad) in g.iter() {
        let param = params
            .param_mut(key)
            .ok_or(Error::State("gradient key does not name a parameter"))?;
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let buffer = state
            .buffers
            .entry(*key)
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        if buffer.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: buffer.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for ((b, g), p) in buffer
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(param.data_mut())
        {
            *b = momentum * *b + g;
            *p -= lr * *b;
        }
    }
    Ok(())
}

/// Surgery, combination, clipping and the SGD step in one call; the tail of
/// a training step once both gradient sets exist.
pub fn apply_combined_update(
    params: &mut dyn ParameterSet,
    g_tea: &GradientSet,
    g_stu: &GradientSet,
    surgery_enabled: bool,
    clip_norm: f64,
    opt: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let g_tea_final = if surgery_enabled {
        project_gradients(g_tea, &g_stu.shared_only())?
    } else {
        g_tea.clone()
    };
    let mut g = combine_gradients(g_stu, &g_tea_final)?;
    clip(&mut g, clip_norm)?;
    if !g.all_finite() {
        return Err(Error::NonFinite("combined gradient".into()));
    }
    sgd_step(params, &g, opt, lr, momentum)
}

// ---------------------------------------------------------------------------
// Distillation training
// ---------------------------------------------------------------------------

/// What one step reports back to the epoch loop.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub loss_teacher: f64,
    pub loss_student: f64,
    pub conflict_ratio: f64,
    pub kl_selected: usize,
    pub teacher_correct: usize,
    pub student_correct: usize,
    pub batch_len: usize,
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let pred = logits.max_index(1)?;
    Ok(pred
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count())
}

fn check_finite(value: f64, step: usize, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("step {step}: {what} is not finite")));
    }
    Ok(())
}

/// One full distillation step on `store`: dual forward/backward, surgery,
/// combine, clip, SGD.
pub fn train_step(
    store: &mut SharedParameterStore,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
    external: Option<&ExternalLogits>,
    step: usize,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let lease = store.lease(&mut tape)?;

    // Teacher pass on ground truth (plus the external teacher if present).
    let t_logits = store.forward_leased(&mut tape, &lease, ModelView::Teacher, x, BnMode::Train)?;
    let mut l_tea = cross_entropy_smoothed(&mut tape, t_logits, &batch.labels, cfg.label_smoothing)?;
    let ext_rows = match (cfg.external_kd, external) {
        (Some(_), Some(ext)) => Some(ext.gather(&batch.indices)?),
        (Some(_), None) => {
            return Err(Error::Config(
                "external mode is on but no external logits were supplied".into(),
            ))
        }
        _ => None,
    };
    if let Some(rows) = &ext_rows {
        let ext_kl = external_distill_loss(&mut tape, t_logits, rows)?;
        l_tea = tape.add(l_tea, ext_kl)?;
    }
    let loss_teacher = tape.value(l_tea).item()?;
    check_finite(loss_teacher, step, "teacher loss")?;
    tape.backward(l_tea)?;
    let g_tea = store.extract_teacher_grads(&tape, &lease)?;
    tape.reset_grads();

    // Student pass against the gated objective.
    let s_logits = store.forward_leased(&mut tape, &lease, ModelView::Student, x, BnMode::Train)?;
    let teacher_target = if cfg.detach_teacher_logits {
        tape.detach(t_logits)
    } else {
        t_logits
    };
    let (mut l_stu, kl_selected) = match &cfg.student_loss {
        StudentLossMode::Uncertainty(policy) => {
            let sel = select_student_loss(&mut tape, s_logits, teacher_target, &batch.labels, policy)?;
            let n = sel.kl_mask.iter().filter(|&&b| b).count();
            (sel.loss, n)
        }
        StudentLossMode::AlwaysKl => (
            kl_divergence(&mut tape, s_logits, teacher_target)?,
            batch.len(),
        ),
        StudentLossMode::AlwaysCe => (
            cross_entropy_smoothed(&mut tape, s_logits, &batch.labels, cfg.label_smoothing)?,
            0,
        ),
    };
    if let Some(rows) = &ext_rows {
        let ext_kl = external_distill_loss(&mut tape, s_logits, rows)?;
        let replace = cfg.external_kd.map(|m| m.replace_insitu).unwrap_or(false);
        l_stu = if replace && matches!(cfg.student_loss, StudentLossMode::AlwaysKl) {
            ext_kl
        } else {
            tape.add(l_stu, ext_kl)?
        };
    }
    if cfg.student_loss_weight != 1.0 {
        l_stu = tape.scale(l_stu, cfg.student_loss_weight)?;
    }
    let loss_student = tape.value(l_stu).item()?;
    check_finite(loss_student, step, "student loss")?;
    tape.backward(l_stu)?;
    let g_stu = store.extract_student_grads(&tape, &lease, !cfg.detach_teacher_logits)?;

    if let Some(key) = g_tea.first_non_finite().or(g_stu.first_non_finite()) {
        return Err(Error::NonFinite(format!(
            "step {step}: gradient for {key} is not finite"
        )));
    }

    // Conflict instrumentation always reads the raw (pre-surgery) sets.
    let conflict = conflict_ratio(&g_tea, &g_stu.shared_only())?;

    let teacher_correct = count_correct(tape.value(t_logits), &batch.labels)?;
    let student_correct = count_correct(tape.value(s_logits), &batch.labels)?;

    apply_combined_update(
        store,
        &g_tea,
        &g_stu,
        cfg.surgery_enabled,
        cfg.clip_norm,
        opt,
        lr,
        cfg.momentum,
    )?;

    Ok(StepStats {
        loss_teacher,
        loss_student,
        conflict_ratio: conflict,
        kl_selected,
        teacher_correct,
        student_correct,
        batch_len: batch.len(),
    })
}

fn check_dataset_against_spec(spec: &NetworkSpec, ds: &Dataset, name: &str) -> Result<()> {
    let (c, _, _) = ds.image_dims();
    if let Some(expect) = spec.input_channels() {
        if expect != c {
            return Err(Error::Config(format!(
                "{name} dataset has {c} channels but the network expects {expect}"
            )));
        }
    }
    if let Some(classes) = spec.class_count() {
        if ds.class_count() > classes {
            return Err(Error::Config(format!(
                "{name} dataset has {} classes but the network outputs {classes}",
                ds.class_count()
            )));
        }
    }
    Ok(())
}

fn check_external(cfg: &TrainConfig, train_ds: &Dataset, external: Option<&ExternalLogits>) -> Result<()> {
    if cfg.external_kd.is_none() {
        return Ok(());
    }
    let ext = external.ok_or_else(|| {
        Error::Config("external mode is on but no external logits were supplied".into())
    })?;
    if ext.len() != train_ds.len() {
        return Err(Error::Config(format!(
            "external logits cover {} samples but the dataset has {}",
            ext.len(),
            train_ds.len()
        )));
    }
    if ext.class_count() != train_ds.class_count() {
        return Err(Error::Config(format!(
            "external logits have {} classes but the dataset has {}",
            ext.class_count(),
            train_ds.class_count()
        )));
    }
    if ext.fingerprint() != train_ds.fingerprint() {
        return Err(Error::Config(
            "external logits were computed for a different dataset (fingerprint mismatch)".into(),
        ));
    }
    Ok(())
}

fn observe(
    observer: &mut dyn EpochObserver,
    record: &EpochRecord,
    model: ModelRef<'_>,
) -> Result<()> {
    observer
        .on_epoch(record, model)
        .map_err(|e| Error::Data(format!("epoch observer failed: {e}")))
}

/// Trains the full recipe and returns the final store plus per-epoch
/// metrics. Deterministic given the config seed (single-threaded).
pub fn train(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    external: Option<&ExternalLogits>,
    clock: &dyn Clock,
    observer: &mut dyn EpochObserver,
) -> Result<(SharedParameterStore, RunMetrics)> {
    cfg.validate()?;
    check_dataset_against_spec(spec, train_ds, "train")?;
    check_dataset_against_spec(spec, eval_ds, "eval")?;
    check_external(cfg, train_ds, external)?;

    let mut store = build_shared(
        &SupernetConfig::new(spec.clone(), cfg.expansion_rate),
        cfg.seed,
    )?;
    let mut opt = OptimizerState::new();
    let mut metrics = RunMetrics::default();
    let steps_per_epoch = train_ds.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    for epoch in 0..cfg.epochs {
        let started = clock.seconds();
        let mut aug_rng = Rng::seeded(cfg.seed, &[0xa07, epoch as u64]);
        let mut loss_tea_sum = 0.0;
        let mut loss_stu_sum = 0.0;
        let mut conflict_sum = 0.0;
        let mut kl_count = 0usize;
        let mut tea_correct = 0usize;
        let mut stu_correct = 0usize;
        let mut samples = 0usize;
        let mut step_count = 0usize;
        let epoch_lr = lr_at(epoch * steps_per_epoch, total_steps, warmup_steps, cfg.base_lr)?;

        for (bi, mut batch) in batches(train_ds, cfg.batch_size, cfg.seed, epoch)?.enumerate() {
            if cfg.augment {
                batch.images = augment_batch(&batch.images, &mut aug_rng)?;
            }
            let step = epoch * steps_per_epoch + bi;
            let lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr)?;
            let stats = train_step(&mut store, &batch, cfg, &mut opt, lr, external, step)?;
            let n = stats.batch_len as f64;
            loss_tea_sum += stats.loss_teacher * n;
            loss_stu_sum += stats.loss_student * n;
            conflict_sum += stats.conflict_ratio;
            kl_count += stats.kl_selected;
            tea_correct += stats.teacher_correct;
            stu_correct += stats.student_correct;
            samples += stats.batch_len;
            step_count += 1;
        }

        let acc_student_eval =
            evaluate_store(&mut store, ModelView::Student, eval_ds, cfg.batch_size)?;
        let acc_teacher_eval =
            evaluate_store(&mut store, ModelView::Teacher, eval_ds, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            loss_teacher: Some(loss_tea_sum / samples as f64),
            loss_student: loss_stu_sum / samples as f64,
            acc_student_train: stu_correct as f64 / samples as f64,
            acc_teacher_train: Some(tea_correct as f64 / samples as f64),
            acc_student_eval,
            acc_teacher_eval: Some(acc_teacher_eval),
            conflict_ratio: Some(conflict_sum / step_count as f64),
            kl_fraction: Some(kl_count as f64 / samples as f64),
            seconds: clock.seconds() - started,
        };
        observe(observer, &record, ModelRef::Supernet(&store))?;
        metrics.epochs.push(record);
    }
    Ok((store, metrics))
}

/// Per-layer cosine record from conflict measurement.
#[derive(Clone, Debug)]
pub struct LayerConflict {
    pub key: ParamKey,
    /// One cosine per measured step; `None` where a norm was zero.
    pub cosines: Vec<Option<f64>>,
    pub conflict_fraction: f64,
    pub mean_cosine: Option<f64>,
}

/// Aggregate conflict measurement over a number of steps.
#[derive(Clone, Debug)]
pub struct ConflictReport {
    pub steps: usize,
    pub aggregate_ratio: f64,
    pub layers: Vec<LayerConflict>,
}

/// Measures teacher/student gradient conflicts for `steps` batches without
/// updating any parameter (surgery is irrelevant here since nothing is
/// applied). Batch-norm running statistics advance in memory only.
pub fn measure_conflicts(
    store: &mut SharedParameterStore,
    cfg: &TrainConfig,
    ds: &Dataset,
    steps: usize,
) -> Result<ConflictReport> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Config("need at least one measurement step".into()));
    }
    let mut per_layer: alloc::collections::BTreeMap<ParamKey, Vec<Option<f64>>> =
        alloc::collections::BTreeMap::new();
    let mut ratio_sum = 0.0;
    let mut measured = 0usize;
    let mut epoch = 0usize;
    'outer: loop {
        for batch in batches(ds, cfg.batch_size, cfg.seed, epoch)? {
            if measured == steps {
                break 'outer;
            }
            let mut tape = Tape::new();
            let x = tape.constant(batch.images.clone());
            let lease = store.lease(&mut tape)?;
            let t_logits =
                store.forward_leased(&mut tape, &lease, ModelView::Teacher, x, BnMode::Train)?;
            let l_tea =
                cross_entropy_smoothed(&mut tape, t_logits, &batch.labels, cfg.label_smoothing)?;
            tape.backward(l_tea)?;
            let g_tea = store.extract_teacher_grads(&tape, &lease)?;
            tape.reset_grads();
            let s_logits =
                store.forward_leased(&mut tape, &lease, ModelView::Student, x, BnMode::Train)?;
            let target = tape.detach(t_logits);
            let l_stu = match &cfg.student_loss {
                StudentLossMode::Uncertainty(policy) => {
                    select_student_loss(&mut tape, s_logits, target, &batch.labels, policy)?.loss
                }
                StudentLossMode::AlwaysKl => kl_divergence(&mut tape, s_logits, target)?,
                StudentLossMode::AlwaysCe => {
                    cross_entropy_smoothed(&mut tape, s_logits, &batch.labels, cfg.label_smoothing)?
                }
            };
            tape.backward(l_stu)?;
            let g_stu = store.extract_student_grads(&tape, &lease, false)?;
            let shared = g_stu.shared_only();
            ratio_sum += conflict_ratio(&g_tea, &shared)?;
            for (key, cos) in layer_cosines(&g_tea, &shared)? {
                per_layer.entry(key).or_default().push(cos);
            }
            measured += 1;
        }
        epoch += 1;
    }
    let layers = per_layer
        .into_iter()
        .map(|(key, cosines)| {
            let known: Vec<f64> = cosines.iter().filter_map(|c| *c).collect();
            let conflict_fraction = if known.is_empty() {
                0.0
            } else {
                known.iter().filter(|&&c| c < 0.0).count() as f64 / known.len() as f64
            };
            let mean_cosine = if known.is_empty() {
                None
            } else {
                Some(known.iter().sum::<f64>() / known.len() as f64)
            };
            LayerConflict {
                key,
                cosines,
                conflict_fraction,
                mean_cosine,
            }
        })
        .collect();
    Ok(ConflictReport {
        steps,
        aggregate_ratio: ratio_sum / measured as f64,
        layers,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Top-1 accuracy of one model of the store, batch norm in eval mode.
pub fn evaluate_store(
    store: &mut SharedParameterStore,
    view: ModelView,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    evaluate_with(ds, batch_size, |images| {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let logits = store.forward(&mut tape, view, x, BnMode::Eval)?;
        Ok(tape.value(logits).clone())
    })
}

/// Top-1 accuracy of a standalone network, batch norm in eval mode.
pub fn evaluate_network(net: &mut Network, ds: &Dataset, batch_size: usize) -> Result<f64> {
    evaluate_with(ds, batch_size, |images| {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let logits = net.forward(&mut tape, x, BnMode::Eval)?;
        Ok(tape.value(logits).clone())
    })
}

fn evaluate_with(
    ds: &Dataset,
    batch_size: usize,
    mut forward: impl FnMut(Tensor) -> Result<Tensor>,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let n = ds.len();
    let mut correct = 0usize;
    let mut at = 0usize;
    while at < n {
        let end = (at + batch_size).min(n);
        let idx: Vec<usize> = (at..end).collect();
        let batch = ds.gather(&idx)?;
        let logits = forward(batch.images)?;
        correct += count_correct(&logits, &batch.labels)?;
        at = end;
    }
    Ok(correct as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Baseline and standard-KD trainers
// ---------------------------------------------------------------------------

fn network_lease_keys(leased: &[LeasedLayer]) -> Vec<(ParamKey, TensorId)> {
    let mut out = Vec::new();
    for (i, ll) in leased.iter().enumerate() {
        match ll {
            LeasedLayer::Conv { w, b } | LeasedLayer::Dense { w, b } => {
                out.push((network_key(i, ParamRole::Weight), *w));
                out.push((network_key(i, ParamRole::Bias), *b));
            }
            LeasedLayer::Norm { gamma, beta } => {
                out.push((network_key(i, ParamRole::Gamma), *gamma));
                out.push((network_key(i, ParamRole::Beta), *beta));
            }
            LeasedLayer::Passive => {}
        }
    }
    out
}

/// Shared epoch loop for single-network runs; `loss` builds the training
/// objective from the logits.
fn train_single_network(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    clock: &dyn Clock,
    observer: &mut dyn EpochObserver,
    mut loss: impl FnMut(&mut Tape, TensorId, &Batch) -> Result<TensorId>,
) -> Result<(Network, RunMetrics)> {
    cfg.validate()?;
    check_dataset_against_spec(spec, train_ds, "train")?;
    check_dataset_against_spec(spec, eval_ds, "eval")?;
    let mut net = build_network(spec, cfg.seed)?;
    let mut opt = OptimizerState::new();
    let mut metrics = RunMetrics::default();
    let steps_per_epoch = train_ds.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    for epoch in 0..cfg.epochs {
        let started = clock.seconds();
        let mut aug_rng = Rng::seeded(cfg.seed, &[0xa07, epoch as u64]);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut samples = 0usize;
        let epoch_lr = lr_at(epoch * steps_per_epoch, total_steps, warmup_steps, cfg.base_lr)?;

        for (bi, mut batch) in batches(train_ds, cfg.batch_size, cfg.seed, epoch)?.enumerate() {
            if cfg.augment {
                batch.images = augment_batch(&batch.images, &mut aug_rng)?;
            }
            let step = epoch * steps_per_epoch + bi;
            let lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr)?;

            let mut tape = Tape::new();
            let x = tape.constant(batch.images.clone());
            let leased = net.lease(&mut tape);
            let spec_clone = net.spec().clone();
            let mut bn: Vec<&mut crate::nn::BatchNormState> = net
                .layers_mut()
                .iter_mut()
                .filter_map(|lp| match lp {
                    LayerParams::Norm(state) => Some(state),
                    _ => None,
                })
                .collect();
            let logits =
                crate::nn::forward_layers(&mut tape, &spec_clone, &leased, &mut bn, x, BnMode::Train)?;
            drop(bn);
            let l = loss(&mut tape, logits, &batch)?;
            let loss_value = tape.value(l).item()?;
            check_finite(loss_value, step, "loss")?;
            tape.backward(l)?;
            let mut g = GradientSet::new();
            for (key, id) in network_lease_keys(&leased) {
                match tape.grad(id) {
                    Some(grad) => g.insert(key, grad),
                    None => g.insert(key, Tensor::zeros(tape.value(id).shape())),
                }
            }
            clip(&mut g, cfg.clip_norm)?;
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("step {step}: gradient")));
            }
            sgd_step(&mut net, &g, &mut opt, lr, cfg.momentum)?;

            correct += count_correct(tape.value(logits), &batch.labels)?;
            loss_sum += loss_value * batch.len() as f64;
            samples += batch.len();
        }

        let acc_eval = evaluate_network(&mut net, eval_ds, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            loss_teacher: None,
            loss_student: loss_sum / samples as f64,
            acc_student_train: correct as f64 / samples as f64,
            acc_teacher_train: None,
            acc_student_eval: acc_eval,
            acc_teacher_eval: None,
            conflict_ratio: None,
            kl_fraction: None,
            seconds: clock.seconds() - started,
        };
        observe(observer, &record, ModelRef::Network(&net))?;
        metrics.epochs.push(record);
    }
    Ok((net, metrics))
}

/// Plain smoothed-CE training of the target architecture alone.
pub fn train_baseline(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    clock: &dyn Clock,
    observer: &mut dyn EpochObserver,
) -> Result<(Network, RunMetrics)> {
    let smoothing = cfg.label_smoothing;
    train_single_network(spec, cfg, train_ds, eval_ds, clock, observer, |tape, logits, batch| {
        cross_entropy_smoothed(tape, logits, &batch.labels, smoothing)
    })
}

/// Standard knowledge distillation from a frozen external teacher: smoothed
/// CE plus a KL term toward the precomputed logits.
pub fn train_standard_kd(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    external: &ExternalLogits,
    clock: &dyn Clock,
    observer: &mut dyn EpochObserver,
) -> Result<(Network, RunMetrics)> {
    if external.len() != train_ds.len() || external.class_count() != train_ds.class_count() {
        return Err(Error::Config(
            "external logits do not match the training dataset".into(),
        ));
    }
    if external.fingerprint() != train_ds.fingerprint() {
        return Err(Error::Config(
            "external logits were computed for a different dataset (fingerprint mismatch)".into(),
        ));
    }
    let smoothing = cfg.label_smoothing;
    train_single_network(spec, cfg, train_ds, eval_ds, clock, observer, |tape, logits, batch| {
        let ce = cross_entropy_smoothed(tape, logits, &batch.labels, smoothing)?;
        let rows = external.gather(&batch.indices)?;
        let kl = external_distill_loss(tape, logits, &rows)?;
        tape.add(ce, kl)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::nn::LayerSpec;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::BatchNorm2d { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense {
                in_channels: 4,
                out_channels: 3,
            },
        ])
    }

    fn tiny_data(seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec::new(3, 8, 8, seed)).unwrap()
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            base_lr: 0.05,
            momentum: 0.9,
            warmup_epochs: 1,
            clip_norm: 1.0,
            label_smoothing: 0.1,
            expansion_rate: 2,
            student_loss: StudentLossMode::Uncertainty(UncertaintyPolicy::desk_default()),
            surgery_enabled: true,
            student_loss_weight: 1.0,
            detach_teacher_logits: true,
            external_kd: None,
            augment: true,
            seed: 7,
        }
    }

    #[test]
    fn lr_warmup_end_is_exactly_base() {
        assert_eq!(lr_at(100, 2000, 100, 0.4).unwrap(), 0.4);
    }

    #[test]
    fn lr_final_step_is_tiny() {
        let lr = lr_at(1999, 2000, 100, 0.4).unwrap();
        assert!(lr < 1e-3 * 0.4, "final lr {lr}");
    }

    #[test]
    fn lr_warmup_midpoint_is_half_base() {
        assert!((lr_at(50, 2000, 100, 0.4).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn lr_rejects_domain_violations() {
        assert!(lr_at(5, 5, 1, 0.1).is_err());
        assert!(lr_at(0, 10, 10, 0.1).is_err());
    }

    #[test]
    fn clip_rescales_to_unit_norm() {
        let key = ParamKey::new(0, ParamScope::Shared, ParamRole::Weight);
        let mut g: GradientSet = [(key, Tensor::from_vec(vec![3.0, 4.0]))].into_iter().collect();
        let norm = clip(&mut g, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        let d = g.get(&key).unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_untouched() {
        let key = ParamKey::new(0, ParamScope::Shared, ParamRole::Weight);
        let g0: GradientSet = [(key, Tensor::from_vec(vec![0.1, 0.2]))].into_iter().collect();
        let mut g = g0.clone();
        clip(&mut g, 1.0).unwrap();
        assert_eq!(g, g0);
    }

    #[test]
    fn clip_bounds_hold_for_random_sets() {
        let mut rng = Rng::new(40);
        for _ in 0..200 {
            let mut g = GradientSet::new();
            for l in 0..4 {
                let v: Vec<f64> = (0..8).map(|_| rng.next_normal() * 3.0).collect();
                g.insert(ParamKey::new(l, ParamScope::Shared, ParamRole::Weight), Tensor::from_vec(v));
            }
            clip(&mut g, 1.0).unwrap();
            assert!(g.global_norm() <= 1.0 + 1e-9);
        }
    }

    /// Minimal parameter holder for update-rule tests.
    struct Flat(Tensor);

    impl ParameterSet for Flat {
        fn param_keys(&self) -> Vec<ParamKey> {
            alloc::vec![ParamKey::new(0, ParamScope::Shared, ParamRole::Weight)]
        }
        fn param(&self, key: &ParamKey) -> Option<&Tensor> {
            (key.layer == 0).then_some(&self.0)
        }
        fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
            (key.layer == 0).then_some(&mut self.0)
        }
    }

    fn flat_key() -> ParamKey {
        ParamKey::new(0, ParamScope::Shared, ParamRole::Weight)
    }

    #[test]
    fn sgd_without_momentum_hand_value() {
        let mut p = Flat(Tensor::from_vec(vec![1.0]));
        let g: GradientSet = [(flat_key(), Tensor::from_vec(vec![0.5]))].into_iter().collect();
        let mut opt = OptimizerState::new();
        sgd_step(&mut p, &g, &mut opt, 0.1, 0.0).unwrap();
        assert!((p.0.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_freezes_parameters() {
        let mut p = Flat(Tensor::from_vec(vec![2.5]));
        let g: GradientSet = [(flat_key(), Tensor::from_vec(vec![0.0]))].into_iter().collect();
        let mut opt = OptimizerState::new();
        for _ in 0..10 {
            sgd_step(&mut p, &g, &mut opt, 0.3, 0.9).unwrap();
        }
        assert_eq!(p.0.data()[0], 2.5);
    }

    #[test]
    fn sgd_two_step_momentum_hand_value() {
        let mut p = Flat(Tensor::from_vec(vec![0.0]));
        let g: GradientSet = [(flat_key(), Tensor::from_vec(vec![1.0]))].into_iter().collect();
        let mut opt = OptimizerState::new();
        sgd_step(&mut p, &g, &mut opt, 1.0, 0.9).unwrap();
        sgd_step(&mut p, &g, &mut opt, 1.0, 0.9).unwrap();
        assert!((p.0.data()[0] - (-2.9)).abs() < 1e-12);
    }

    #[test]
    fn one_step_toy_update_direction() {
        // Teacher gradient (-1, 1), student (1, 0); surgery turns the
        // teacher into (0, 1), the combined update is -(1, 1).
        let mut p = Flat(Tensor::from_vec(vec![0.0, 0.0]));
        let g_tea: GradientSet = [(flat_key(), Tensor::from_vec(vec![-1.0, 1.0]))]
            .into_iter()
            .collect();
        let g_stu: GradientSet = [(flat_key(), Tensor::from_vec(vec![1.0, 0.0]))]
            .into_iter()
            .collect();
        let mut opt = OptimizerState::new();
        apply_combined_update(&mut p, &g_tea, &g_stu, true, f64::INFINITY, &mut opt, 1.0, 0.0)
            .unwrap();
        assert_eq!(p.0.data(), &[-1.0, -1.0]);
    }

    #[test]
    fn teacher_exclusive_coords_freeze_under_zero_teacher_loss() {
        let mut p = Flat(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let g_tea: GradientSet = [(flat_key(), Tensor::from_vec(vec![0.0, 0.0, 0.0, 0.0]))]
            .into_iter()
            .collect();
        let g_stu: GradientSet = [(flat_key(), Tensor::from_vec(vec![0.5, 0.5]))]
            .into_iter()
            .collect();
        let mut opt = OptimizerState::new();
        for _ in 0..3 {
            apply_combined_update(
                &mut p, &g_tea, &g_stu, true, f64::INFINITY, &mut opt, 0.1, 0.9,
            )
            .unwrap();
        }
        assert_eq!(&p.0.data()[2..], &[3.0, 4.0], "tail never received gradient");
        assert!(p.0.data()[0] < 1.0);
    }

    #[test]
    fn train_step_is_deterministic() {
        let ds = tiny_data(1);
        let cfg = fast_cfg();
        let spec = tiny_spec();
        let batch = ds.gather(&(0..8).collect::<Vec<_>>()).unwrap();
        let build = || {
            build_shared(&SupernetConfig::new(spec.clone(), cfg.expansion_rate), cfg.seed).unwrap()
        };
        let mut a = build();
        let mut b = build();
        let mut oa = OptimizerState::new();
        let mut ob = OptimizerState::new();
        train_step(&mut a, &batch, &cfg, &mut oa, 0.01, None, 0).unwrap();
        train_step(&mut b, &batch, &cfg, &mut ob, 0.01, None, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn surgery_is_inert_without_conflicts() {
        // k = 1 with a pure-CE student makes both gradients identical, so
        // cos = +1 everywhere and surgery must change nothing.
        let ds = tiny_data(2);
        let spec = tiny_spec();
        let mut cfg = fast_cfg();
        cfg.expansion_rate = 1;
        cfg.student_loss = StudentLossMode::AlwaysCe;
        cfg.augment = false;
        let batch = ds.gather(&(0..8).collect::<Vec<_>>()).unwrap();
        let build = || build_shared(&SupernetConfig::new(spec.clone(), 1), cfg.seed).unwrap();

        let mut with = build();
        let mut without = build();
        let mut ow = OptimizerState::new();
        let mut oo = OptimizerState::new();
        let mut cfg_off = cfg.clone();
        cfg_off.surgery_enabled = false;
        let s1 = train_step(&mut with, &batch, &cfg, &mut ow, 0.01, None, 0).unwrap();
        let s2 = train_step(&mut without, &batch, &cfg_off, &mut oo, 0.01, None, 0).unwrap();
        assert_eq!(with, without);
        assert_eq!(s1.conflict_ratio, 0.0);
        assert_eq!(s2.conflict_ratio, 0.0);
    }

    #[test]
    fn k1_pure_ce_follows_doubled_plain_descent() {
        let ds = tiny_data(3);
        let spec = tiny_spec();
        let mut cfg = fast_cfg();
        cfg.expansion_rate = 1;
        cfg.student_loss = StudentLossMode::AlwaysCe;
        cfg.surgery_enabled = false;
        cfg.augment = false;
        cfg.momentum = 0.0;
        cfg.clip_norm = f64::INFINITY;
        let lr = 0.01;
        let batch = ds.gather(&(0..8).collect::<Vec<_>>()).unwrap();

        let mut store =
            build_shared(&SupernetConfig::new(spec.clone(), 1), cfg.seed).unwrap();
        let before = store.clone();
        let mut opt = OptimizerState::new();
        train_step(&mut store, &batch, &cfg, &mut opt, lr, None, 0).unwrap();

        // Reference: one plain CE step on an identically-built network.
        let mut net = build_network(&spec, cfg.seed).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let leased = net.lease(&mut tape);
        let spec_c = net.spec().clone();
        let mut bn: Vec<&mut crate::nn::BatchNormState> = net
            .layers_mut()
            .iter_mut()
            .filter_map(|lp| match lp {
                LayerParams::Norm(s) => Some(s),
                _ => None,
            })
            .collect();
        let logits =
            crate::nn::forward_layers(&mut tape, &spec_c, &leased, &mut bn, x, BnMode::Train)
                .unwrap();
        drop(bn);
        let l = cross_entropy_smoothed(&mut tape, logits, &batch.labels, cfg.label_smoothing)
            .unwrap();
        tape.backward(l).unwrap();

        for (key, id) in network_lease_keys(&leased) {
            if key.role != ParamRole::Weight && key.role != ParamRole::Bias {
                continue;
            }
            let g = tape.grad(id).unwrap();
            let shared_key = ParamKey::new(key.layer, ParamScope::Shared, key.role);
            let now = store.tensor(&shared_key).unwrap();
            let was = before.tensor(&shared_key).unwrap();
            for ((n, w), gv) in now.data().iter().zip(was.data()).zip(g.data()) {
                let expect = w - lr * 2.0 * gv;
                assert!(
                    (n - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                    "{shared_key}: {n} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn train_zero_epochs_returns_initial_store() {
        let ds = tiny_data(4);
        let spec = tiny_spec();
        let mut cfg = fast_cfg();
        cfg.epochs = 0;
        cfg.warmup_epochs = 0;
        let (store, metrics) =
            train(&spec, &cfg, &ds, &ds, None, &NullClock, &mut NoopObserver).unwrap();
        assert!(metrics.epochs.is_empty());
        let fresh =
            build_shared(&SupernetConfig::new(spec, cfg.expansion_rate), cfg.seed).unwrap();
        assert_eq!(store, fresh);
    }

    #[test]
    fn train_same_seed_is_bit_identical() {
        let ds = tiny_data(5);
        let eval = tiny_data(6);
        let spec = tiny_spec();
        let cfg = fast_cfg();
        let (a, ma) = train(&spec, &cfg, &ds, &eval, None, &NullClock, &mut NoopObserver).unwrap();
        let (b, mb) = train(&spec, &cfg, &ds, &eval, None, &NullClock, &mut NoopObserver).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn train_records_expected_metrics_shape() {
        let ds = tiny_data(7);
        let eval = tiny_data(8);
        let spec = tiny_spec();
        let cfg = fast_cfg();
        let (_, metrics) =
            train(&spec, &cfg, &ds, &eval, None, &NullClock, &mut NoopObserver).unwrap();
        assert_eq!(metrics.epochs.len(), cfg.epochs);
        for (i, rec) in metrics.epochs.iter().enumerate() {
            assert_eq!(rec.epoch, i);
            assert!(rec.loss_teacher.unwrap() > 0.0);
            assert!(rec.conflict_ratio.unwrap() >= 0.0 && rec.conflict_ratio.unwrap() <= 1.0);
            assert!(rec.kl_fraction.unwrap() >= 0.0 && rec.kl_fraction.unwrap() <= 1.0);
        }
    }

    #[test]
    fn poisoned_parameters_abort_with_step_diagnostic() {
        let ds = tiny_data(9);
        let spec = tiny_spec();
        let cfg = fast_cfg();
        let mut store =
            build_shared(&SupernetConfig::new(spec, cfg.expansion_rate), cfg.seed).unwrap();
        // Poison the classifier weight so the teacher loss itself goes NaN.
        let key = ParamKey::new(4, ParamScope::Shared, ParamRole::Weight);
        store.tensor_mut(&key).unwrap().data_mut()[0] = f64::NAN;
        let batch = ds.gather(&[0, 1, 2, 3]).unwrap();
        let mut opt = OptimizerState::new();
        match train_step(&mut store, &batch, &cfg, &mut opt, 0.01, None, 17) {
            Err(Error::NonFinite(msg)) => {
                assert!(msg.contains("step 17"), "{msg}");
                assert!(msg.contains("loss"), "{msg}");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_constant_logits_hits_class_zero_frequency() {
        // All-zero parameters in a BN-free net give constant zero logits,
        // so argmax ties toward class 0 everywhere.
        let spec = NetworkSpec::new(vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense {
                in_channels: 4,
                out_channels: 3,
            },
        ]);
        let mut net = build_network(&spec, 0).unwrap();
        for lp in net.layers_mut() {
            match lp {
                LayerParams::Conv { weight, bias } | LayerParams::Dense { weight, bias } => {
                    weight.data_mut().fill(0.0);
                    bias.data_mut().fill(0.0);
                }
                _ => {}
            }
        }
        let ds = tiny_data(10);
        let acc = evaluate_network(&mut net, &ds, 16).unwrap();
        let freq0 = ds.labels().iter().filter(|&&l| l == 0).count() as f64 / ds.len() as f64;
        assert_eq!(acc, freq0);
    }

    #[test]
    fn count_correct_hand_cases() {
        let logits = Tensor::new(&[2, 3], vec![0.0, 5.0, 1.0, 9.0, 0.0, 0.0]).unwrap();
        assert_eq!(count_correct(&logits, &[1, 0]).unwrap(), 2);
        assert_eq!(count_correct(&logits, &[2, 1]).unwrap(), 0);
    }

    #[test]
    fn baseline_equals_k1_surgery_off_student_disabled() {
        // Degenerate distillation config against the plain trainer: same
        // loss surface up to the doubled gradient, so both must learn; this
        // checks the baseline path runs and improves over chance.
        let train_ds = tiny_data(11);
        let eval_ds = tiny_data(12);
        let spec = tiny_spec();
        let mut cfg = fast_cfg();
        cfg.epochs = 3;
        cfg.warmup_epochs = 1;
        let (_, metrics) = train_baseline(
            &spec,
            &cfg,
            &train_ds,
            &eval_ds,
            &NullClock,
            &mut NoopObserver,
        )
        .unwrap();
        assert_eq!(metrics.epochs.len(), 3);
        assert!(metrics.last().unwrap().loss_teacher.is_none());
        assert!(metrics.last().unwrap().kl_fraction.is_none());
    }

    #[test]
    fn standard_kd_near_onehot_teacher_tracks_ce() {
        // External logits that are sharply peaked at the ground truth act
        // like a second CE term; training still converges.
        let train_ds = tiny_data(13);
        let eval_ds = tiny_data(14);
        let spec = tiny_spec();
        let mut cfg = fast_cfg();
        cfg.epochs = 2;
        cfg.warmup_epochs = 1;
        cfg.student_loss = StudentLossMode::AlwaysCe;
        let mut rows = alloc::vec![0.0; train_ds.len() * 3];
        for (i, &l) in train_ds.labels().iter().enumerate() {
            rows[i * 3 + l] = 25.0;
        }
        let ext = ExternalLogits::new(
            Tensor::new(&[train_ds.len(), 3], rows).unwrap(),
            train_ds.fingerprint().into(),
        )
        .unwrap();
        let (_, metrics) = train_standard_kd(
            &spec,
            &cfg,
            &train_ds,
            &eval_ds,
            &ext,
            &NullClock,
            &mut NoopObserver,
        )
        .unwrap();
        assert_eq!(metrics.epochs.len(), 2);
    }

    #[test]
    fn external_mode_off_is_bit_identical_to_vanilla() {
        let ds = tiny_data(15);
        let spec = tiny_spec();
        let mut cfg = fast_cfg();
        cfg.student_loss = StudentLossMode::AlwaysKl;
        let batch = ds.gather(&(0..8).collect::<Vec<_>>()).unwrap();
        let build = || {
            build_shared(&SupernetConfig::new(spec.clone(), cfg.expansion_rate), cfg.seed).unwrap()
        };
        let mut a = build();
        let mut b = build();
        let mut oa = OptimizerState::new();
        let mut ob = OptimizerState::new();
        let sa = train_step(&mut a, &batch, &cfg, &mut oa, 0.01, None, 0).unwrap();
        // Supplying external data while the mode is off must change nothing.
        let ext = ExternalLogits::new(
            Tensor::new(&[ds.len(), 3], alloc::vec![1.0; ds.len() * 3]).unwrap(),
            ds.fingerprint().into(),
        )
        .unwrap();
        let sb = train_step(&mut b, &batch, &cfg, &mut ob, 0.01, Some(&ext), 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.loss_student.to_bits(), sb.loss_student.to_bits());
    }

    #[test]
    fn uncertainty_with_external_is_rejected() {
        let mut cfg = fast_cfg();
        cfg.external_kd = Some(ExternalKdMode {
            replace_insitu: false,
        });
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn measure_conflicts_reports_all_shared_tensors() {
        let ds = tiny_data(16);
        let spec = tiny_spec();
        let mut cfg = fast_cfg();
        cfg.student_loss = StudentLossMode::AlwaysKl;
        let mut store = build_shared(
            &SupernetConfig::new(spec.clone(), cfg.expansion_rate),
            cfg.seed,
        )
        .unwrap();
        let report = measure_conflicts(&mut store, &cfg, &ds, 3).unwrap();
        assert_eq!(report.steps, 3);
        assert!(report.aggregate_ratio >= 0.0 && report.aggregate_ratio <= 1.0);
        assert_eq!(report.layers.len(), store.shared_keys().len());
        for layer in &report.layers {
            assert_eq!(layer.cosines.len(), 3);
        }
    }
}
