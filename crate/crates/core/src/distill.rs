//! Distillation losses, uncertainty-gated loss selection, and gradient
//! surgery.
//!
//! The functions here come in two flavors. Loss builders append nodes to a
//! [`Tape`] and return the loss id, so gradients flow through them during
//! training. Gradient-set operations are plain math over [`GradientSet`]s
//! extracted after backward passes: projecting conflicting teacher
//! gradients onto the normal plane of the student gradients, combining the
//! two sets into the final update, and measuring the conflict ratio.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::kernels::{row_log_softmax, row_softmax};
use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Which tensor of a layer a gradient belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamRole {
    pub fn name(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
        }
    }
}

/// Ownership of a parameter tensor. Conv/dense tensors are `Shared`
/// between teacher and student; each model keeps its own batch-norm
/// parameters (`Teacher` / `Student`). Standalone networks use `Student`
/// for everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamScope {
    Shared,
    Teacher,
    Student,
}

impl ParamScope {
    pub fn name(self) -> &'static str {
        match self {
            ParamScope::Shared => "shared",
            ParamScope::Teacher => "teacher",
            ParamScope::Student => "student",
        }
    }
}

/// Stable identifier of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamKey {
    pub layer: usize,
    pub scope: ParamScope,
    pub role: ParamRole,
}

impl ParamKey {
    pub fn new(layer: usize, scope: ParamScope, role: ParamRole) -> Self {
        ParamKey { layer, scope, role }
    }
}

impl core::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "layer{}.{}.{}",
            self.layer,
            self.scope.name(),
            self.role.name()
        )
    }
}

/// Per-parameter-tensor gradients of one loss, keyed deterministically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    entries: BTreeMap<ParamKey, Tensor>,
}

impl GradientSet {
    pub fn new() -> Self {
        GradientSet::default()
    }

    pub fn insert(&mut self, key: ParamKey, grad: Tensor) {
        self.entries.insert(key, grad);
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &ParamKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps only entries whose scope is `Shared`.
    pub fn shared_only(&self) -> GradientSet {
        GradientSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.scope == ParamScope::Shared)
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }

    /// Global L2 norm over every tensor in the set.
    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .entries
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        libm::sqrt(sq)
    }

    pub fn scale_all(&mut self, factor: f64) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    /// First key whose gradient contains a non-finite value.
    pub fn first_non_finite(&self) -> Option<&ParamKey> {
        self.entries
            .iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(k, _)| k)
    }
}

impl FromIterator<(ParamKey, Tensor)> for GradientSet {
    fn from_iter<I: IntoIterator<Item = (ParamKey, Tensor)>>(iter: I) -> Self {
        GradientSet {
            entries: iter.into_iter().collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Probabilities and entropy (value level)
// ---------------------------------------------------------------------------

/// Row-wise softmax of `[N,C]` logits as plain values.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::BadShape {
            op: "softmax_rows",
            shape: shape.to_vec(),
            reason: "expected [N,C] with C >= 2",
        });
    }
    let c = shape[1];
    let mut data = vec![0.0; logits.len()];
    for (row, out) in logits.data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
        row_softmax(row, out);
    }
    Tensor::new(shape, data)
}

/// Per-sample entropy (natural log) of the softmax of each row; the result
/// lives in `[0, ln C]`.
pub fn entropy(logits: &Tensor) -> Result<Vec<f64>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::BadShape {
            op: "entropy",
            shape: shape.to_vec(),
            reason: "expected [N,C] with C >= 2",
        });
    }
    let c = shape[1];
    let mut p = vec![0.0; c];
    let mut lp = vec![0.0; c];
    let mut out = Vec::with_capacity(shape[0]);
    for row in logits.data().chunks_exact(c) {
        row_softmax(row, &mut p);
        row_log_softmax(row, &mut lp);
        let h: f64 = -p.iter().zip(&lp).map(|(pv, lv)| pv * lv).sum::<f64>();
        out.push(h.max(0.0));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loss builders (tape level)
// ---------------------------------------------------------------------------

fn check_logits(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "expected [N,C] logits with C >= 2",
        });
    }
    Ok((shape[0], shape[1]))
}

/// Smoothed one-hot targets `(1 - eps) * onehot + eps / C`.
fn smoothed_targets(n: usize, c: usize, labels: &[usize], eps: f64) -> Result<Tensor> {
    if labels.len() != n {
        return Err(Error::Data(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    let mut q = vec![eps / c as f64; n * c];
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Data(format!(
                "label {label} out of range for {c} classes at sample {i}"
            )));
        }
        q[i * c + label] += 1.0 - eps;
    }
    Tensor::new(&[n, c], q)
}

/// Per-sample label-smoothed cross entropy, `[N]`.
fn ce_vec(tape: &mut Tape, logits: TensorId, labels: &[usize], eps: f64) -> Result<TensorId> {
    let (n, c) = check_logits("cross_entropy_smoothed", tape.value(logits).shape())?;
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} not in [0,1)")));
    }
    let q = tape.constant(smoothed_targets(n, c, labels, eps)?);
    let lp = tape.log_softmax(logits)?;
    let dot = tape.mul(q, lp)?;
    let per_row = tape.row_sum(dot)?;
    tape.scale(per_row, -1.0)
}

/// Label-smoothed cross entropy, averaged over the batch.
pub fn cross_entropy_smoothed(
    tape: &mut Tape,
    logits: TensorId,
    labels: &[usize],
    eps: f64,
) -> Result<TensorId> {
    let v = ce_vec(tape, logits, labels, eps)?;
    tape.mean(v)
}

/// Per-sample `KL(softmax(teacher) || softmax(student))`, `[N]`.
///
/// Differentiable through both arguments; pass a detached teacher id to
/// treat the teacher distribution as a fixed target.
fn kl_vec(tape: &mut Tape, student_logits: TensorId, teacher_logits: TensorId) -> Result<TensorId> {
    let ss = tape.value(student_logits).shape().to_vec();
    let ts = tape.value(teacher_logits).shape().to_vec();
    if ss != ts {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs: ts,
            rhs: ss,
        });
    }
    check_logits("kl_divergence", &ss)?;
    let p_t = tape.softmax(teacher_logits)?;
    let lp_t = tape.log_softmax(teacher_logits)?;
    let lp_s = tape.log_softmax(student_logits)?;
    let diff = tape.sub(lp_t, lp_s)?;
    let prod = tape.mul(p_t, diff)?;
    tape.row_sum(prod)
}

/// `KL(teacher || student)` averaged over the batch. Non-negative up to
/// rounding.
pub fn kl_divergence(
    tape: &mut Tape,
    student_logits: TensorId,
    teacher_logits: TensorId,
) -> Result<TensorId> {
    let v = kl_vec(tape, student_logits, teacher_logits)?;
    tape.mean(v)
}

/// How the uncertainty threshold is interpreted.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ThresholdMode {
    /// Compare entropy against the threshold directly.
    Absolute,
    /// Threshold is a fraction of `ln C`, so the gate adapts to the class
    /// count.
    Normalized,
}

/// Gate for per-sample loss selection: distill (KL) when the student's
/// output entropy is at least the effective threshold, otherwise train on
/// the ground-truth label (smoothed CE).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyPolicy {
    pub threshold: f64,
    pub mode: ThresholdMode,
    pub label_smoothing: f64,
}

/// The absolute threshold 3.75 was tuned against 1000-way classification;
/// expressed as a fraction of the maximum entropy it carries over to any
/// class count.
pub fn default_normalized_threshold() -> f64 {
    3.75 / libm::log(1000.0)
}

impl UncertaintyPolicy {
    pub fn absolute(threshold: f64, label_smoothing: f64) -> Self {
        UncertaintyPolicy {
            threshold,
            mode: ThresholdMode::Absolute,
            label_smoothing,
        }
    }

    pub fn normalized(threshold: f64, label_smoothing: f64) -> Self {
        UncertaintyPolicy {
            threshold,
            mode: ThresholdMode::Normalized,
            label_smoothing,
        }
    }

    /// Default gate for small class counts.
    pub fn desk_default() -> Self {
        UncertaintyPolicy::normalized(default_normalized_threshold(), 0.1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!(
                "uncertainty threshold {} must be positive",
                self.threshold
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} not in [0,1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn effective_threshold(&self, classes: usize) -> f64 {
        match self.mode {
            ThresholdMode::Absolute => self.threshold,
            ThresholdMode::Normalized => self.threshold * libm::log(classes as f64),
        }
    }
}

/// Result of per-sample loss selection.
#[derive(Debug)]
pub struct StudentLossSelection {
    pub loss: TensorId,
    /// `true` where the sample took the KL branch.
    pub kl_mask: Vec<bool>,
}

impl StudentLossSelection {
    pub fn kl_fraction(&self) -> f64 {
        if self.kl_mask.is_empty() {
            return 0.0;
        }
        self.kl_mask.iter().filter(|&&b| b).count() as f64 / self.kl_mask.len() as f64
    }
}

/// Per-sample choice between distillation and ground truth, gated on the
/// entropy of the student's own output; the returned loss is the batch
/// mean of the chosen per-sample terms.
pub fn select_student_loss(
    tape: &mut Tape,
    student_logits: TensorId,
    teacher_logits: TensorId,
    labels: &[usize],
    policy: &UncertaintyPolicy,
) -> Result<StudentLossSelection> {
    policy.validate()?;
    let (n, c) = check_logits("select_student_loss", tape.value(student_logits).shape())?;
    let t_eff = policy.effective_threshold(c);
    let h = entropy(tape.value(student_logits))?;
    let kl_mask: Vec<bool> = h.iter().map(|&hi| hi >= t_eff).collect();

    let kl = kl_vec(tape, student_logits, teacher_logits)?;
    let ce = ce_vec(tape, student_logits, labels, policy.label_smoothing)?;
    let mask: Vec<f64> = kl_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let mask_id = tape.constant(Tensor::new(&[n], mask)?);
    let inv_id = tape.constant(Tensor::new(&[n], inv)?);
    let kl_part = tape.mul(mask_id, kl)?;
    let ce_part = tape.mul(inv_id, ce)?;
    let per_sample = tape.add(kl_part, ce_part)?;
    let loss = tape.mean(per_sample)?;
    Ok(StudentLossSelection { loss, kl_mask })
}

/// `KL(softmax(external) || softmax(model))` averaged over the batch, with
/// the external rows treated as fixed targets.
pub fn external_distill_loss(
    tape: &mut Tape,
    model_logits: TensorId,
    external_logits: &Tensor,
) -> Result<TensorId> {
    let (n, c) = check_logits("external_distill_loss", tape.value(model_logits).shape())?;
    let es = external_logits.shape();
    if es != [n, c] {
        return Err(Error::Config(format!(
            "external logits shape {es:?} does not match model logits [{n}, {c}]"
        )));
    }
    // Constant side: p_ext and its per-row sum of p*log(p).
    let mut p = vec![0.0; n * c];
    let mut lp = vec![0.0; c];
    let mut const_term = Vec::with_capacity(n);
    for (row, p_row) in external_logits
        .data()
        .chunks_exact(c)
        .zip(p.chunks_exact_mut(c))
    {
        row_softmax(row, p_row);
        row_log_softmax(row, &mut lp);
        const_term.push(p_row.iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>());
    }
    let p_ext = tape.constant(Tensor::new(&[n, c], p)?);
    let c_vec = tape.constant(Tensor::new(&[n], const_term)?);
    let lp_model = tape.log_softmax(model_logits)?;
    let cross = tape.mul(p_ext, lp_model)?;
    let cross_rows = tape.row_sum(cross)?;
    let kl_rows = tape.sub(c_vec, cross_rows)?;
    tape.mean(kl_rows)
}

/// Precomputed logits of a frozen external teacher, one row per dataset
/// sample in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalLogits {
    rows: Tensor,
    fingerprint: String,
}

impl ExternalLogits {
    pub fn new(rows: Tensor, fingerprint: String) -> Result<Self> {
        check_logits("external_logits", rows.shape())?;
        if !rows.all_finite() {
            return Err(Error::Data(
                "external logits contain non-finite values".into(),
            ));
        }
        Ok(ExternalLogits { rows, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Rows for the given dataset indices, as a `[B, C]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let c = self.class_count();
        let n = self.len();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= n {
                return Err(Error::Data(format!(
                    "sample index {i} outside external logits of length {n}"
                )));
            }
            data.extend_from_slice(&self.rows.data()[i * c..(i + 1) * c]);
        }
        Tensor::new(&[indices.len(), c], data)
    }
}

// ---------------------------------------------------------------------------
// Gradient surgery
// ---------------------------------------------------------------------------

/// Projects conflicting teacher gradients onto the normal plane of the
/// student gradients, per parameter tensor.
///
/// For each key in `g_stu` (which must exist in `g_tea`), the comparison is
/// restricted to the leading block of the teacher tensor matching the
/// student tensor's shape. When the dot product is negative the teacher
/// block becomes `t - (t.s / |s|^2) s`; otherwise the tensor passes through
/// bit-for-bit. Teacher-only keys always pass through.
pub fn project_gradients(g_tea: &GradientSet, g_stu: &GradientSet) -> Result<GradientSet> {
    let mut out = GradientSet::new();
    for (key, t) in g_tea.iter() {
        out.insert(*key, t.clone());
    }
    for (key, s) in g_stu.iter() {
        let t = g_tea
            .get(key)
            .ok_or(Error::State("student gradient key missing from teacher set"))?;
        let block = t.lead_block(s.shape())?;
        let dot: f64 = block.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
        if dot < 0.0 {
            let ss: f64 = s.data().iter().map(|v| v * v).sum();
            if ss > 0.0 {
                let coef = dot / ss;
                let mut projected = block;
                for (b, sv) in projected.data_mut().iter_mut().zip(s.data()) {
                    *b -= coef * sv;
                }
                let mut t_new = t.clone();
                t_new.write_lead_block(&projected)?;
                out.insert(*key, t_new);
            }
        }
    }
    Ok(out)
}

/// Final update gradient: student gradients scattered onto the shared
/// leading blocks plus the (projected) teacher gradients; keys present only
/// in one set pass through unchanged.
pub fn combine_gradients(
    g_stu: &GradientSet,
    g_tea_projected: &GradientSet,
) -> Result<GradientSet> {
    let mut out = GradientSet::new();
    for (key, t) in g_tea_projected.iter() {
        out.insert(*key, t.clone());
    }
    for (key, s) in g_stu.iter() {
        match out.entries.get_mut(key) {
            Some(t) => t.add_lead_block(s)?,
            None => out.insert(*key, s.clone()),
        }
    }
    Ok(out)
}

/// Cosine similarity per overlapping key, `None` where either side has zero
/// norm. The teacher side is restricted to the shared leading block.
pub fn layer_cosines(
    g_tea: &GradientSet,
    g_stu: &GradientSet,
) -> Result<Vec<(ParamKey, Option<f64>)>> {
    let mut out = Vec::new();
    for (key, s) in g_stu.iter() {
        let Some(t) = g_tea.get(key) else { continue };
        let block = t.lead_block(s.shape())?;
        let dot: f64 = block.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
        let tn = block.l2_norm();
        let sn = s.l2_norm();
        let cos = if tn == 0.0 || sn == 0.0 {
            None
        } else {
            Some(dot / (tn * sn))
        };
        out.push((*key, cos));
    }
    if out.is_empty() {
        return Err(Error::State("gradient sets have no overlapping keys"));
    }
    Ok(out)
}

/// Fraction of overlapping parameter tensors with negative cosine
/// similarity. Tensors where either gradient has zero norm are excluded
/// from both numerator and denominator.
pub fn conflict_ratio(g_tea: &GradientSet, g_stu: &GradientSet) -> Result<f64> {
    let cosines = layer_cosines(g_tea, g_stu)?;
    let mut counted = 0usize;
    let mut conflicts = 0usize;
    for (_, cos) in cosines {
        if let Some(c) = cos {
            counted += 1;
            if c < 0.0 {
                conflicts += 1;
            }
        }
    }
    if counted == 0 {
        return Ok(0.0);
    }
    Ok(conflicts as f64 / counted as f64)
}
