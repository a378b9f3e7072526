//! Weight-sharing teacher construction and the shared parameter store.
//!
//! The teacher is the student network with every hidden channel width
//! multiplied by the expansion rate; the student lives inside it as the
//! leading slice of every conv/dense tensor. There is exactly one storage
//! for the shared tensors (the teacher-shaped ones), so a write through the
//! student view is immediately visible to the teacher. Batch-norm layers
//! are not shared at all: teacher and student each keep their own affine
//! parameters and running statistics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::distill::{GradientSet, ParamKey, ParamRole, ParamScope};
use crate::error::{Error, Result};
use crate::nn::{
    build_network, BatchNormState, BnMode, LayerParams, LayerSpec, LeasedLayer, NetworkSpec,
    Network,
};

/// Expansion factor plus the target architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupernetConfig {
    pub expansion_rate: usize,
    pub student_spec: NetworkSpec,
}

impl SupernetConfig {
    pub fn new(student_spec: NetworkSpec, expansion_rate: usize) -> Self {
        SupernetConfig {
            expansion_rate,
            student_spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.expansion_rate < 1 {
            return Err(Error::Config("expansion rate must be at least 1".into()));
        }
        self.student_spec.validate()
    }
}

/// Multiplies every hidden channel width by `k`. The network input (image
/// channels) and the final logit dimension stay unchanged so teacher and
/// student consume the same data and produce comparable logits.
pub fn expand(student: &NetworkSpec, k: usize) -> Result<NetworkSpec> {
    if k < 1 {
        return Err(Error::Config("expansion rate must be at least 1".into()));
    }
    student.validate()?;
    let param_positions: Vec<usize> = student
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }))
        .map(|(i, _)| i)
        .collect();
    let first = *param_positions.first().expect("validated spec has layers");
    let last = *param_positions.last().expect("validated spec has layers");

    // Factor applied to the feature width flowing between layers.
    let mut cur_factor = 1usize;
    let layers = student
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| match layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let in_f = if i == first { 1 } else { k };
                let out_f = if i == last { 1 } else { k };
                cur_factor = out_f;
                LayerSpec::Conv2d {
                    in_channels: in_channels * in_f,
                    out_channels: out_channels * out_f,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerSpec::Dense {
                in_channels,
                out_channels,
            } => {
                let in_f = if i == first { 1 } else { k };
                let out_f = if i == last { 1 } else { k };
                cur_factor = out_f;
                LayerSpec::Dense {
                    in_channels: in_channels * in_f,
                    out_channels: out_channels * out_f,
                }
            }
            LayerSpec::BatchNorm2d { channels } => LayerSpec::BatchNorm2d {
                channels: channels * cur_factor,
            },
            LayerSpec::Relu => LayerSpec::Relu,
            LayerSpec::GlobalAvgPool => LayerSpec::GlobalAvgPool,
        })
        .collect();
    let spec = NetworkSpec::new(layers);
    spec.validate()?;
    Ok(spec)
}

/// Which model a forward pass or evaluation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelView {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq)]
enum Slot {
    Conv {
        weight: Tensor,
        bias: Tensor,
    },
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    Norm {
        teacher: BatchNormState,
        student: BatchNormState,
    },
    Passive,
}

/// Teacher-shaped parameter tensors plus both models' batch-norm states.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedParameterStore {
    student_spec: NetworkSpec,
    teacher_spec: NetworkSpec,
    expansion_rate: usize,
    seed: u64,
    slots: Vec<Slot>,
}

/// Write-through view of the student's block of one shared tensor.
pub struct StudentViewMut<'a> {
    tensor: &'a mut Tensor,
    keep: Vec<usize>,
}

impl StudentViewMut<'_> {
    pub fn shape(&self) -> &[usize] {
        &self.keep
    }

    fn check(&self, idx: &[usize]) {
        assert_eq!(idx.len(), self.keep.len(), "index rank mismatch");
        for (i, k) in idx.iter().zip(&self.keep) {
            assert!(i < k, "index outside the student block");
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.check(idx);
        self.tensor.at(idx)
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        self.check(idx);
        self.tensor.set(idx, value);
    }
}

/// Parameter ids for one training step: the shared leaves, the student's
/// slice nodes over them, and both models' batch-norm leaves.
pub struct StoreLease {
    teacher_layers: Vec<LeasedLayer>,
    student_layers: Vec<LeasedLayer>,
    shared: Vec<(ParamKey, TensorId)>,
    student_slices: Vec<(ParamKey, TensorId)>,
    teacher_bn: Vec<(ParamKey, TensorId)>,
    student_bn: Vec<(ParamKey, TensorId)>,
}

/// Builds the store: teacher parameters seeded exactly like a standalone
/// network of the expanded spec, student batch norm initialized
/// independently of (but identically to) the teacher's.
pub fn build_shared(config: &SupernetConfig, seed: u64) -> Result<SharedParameterStore> {
    config.validate()?;
    let teacher_spec = expand(&config.student_spec, config.expansion_rate)?;
    let teacher = build_network(&teacher_spec, seed)?;
    let mut slots = Vec::with_capacity(teacher_spec.layers.len());
    for (layer_spec, params) in config.student_spec.layers.iter().zip(teacher.layers()) {
        let slot = match (layer_spec, params) {
            (LayerSpec::Conv2d { .. }, LayerParams::Conv { weight, bias }) => Slot::Conv {
                weight: weight.clone(),
                bias: bias.clone(),
            },
            (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => Slot::Dense {
                weight: weight.clone(),
                bias: bias.clone(),
            },
            (LayerSpec::BatchNorm2d { channels }, LayerParams::Norm(teacher_state)) => {
                Slot::Norm {
                    teacher: teacher_state.clone(),
                    student: BatchNormState::new(*channels),
                }
            }
            _ => Slot::Passive,
        };
        slots.push(slot);
    }
    Ok(SharedParameterStore {
        student_spec: config.student_spec.clone(),
        teacher_spec,
        expansion_rate: config.expansion_rate,
        seed,
        slots,
    })
}

impl SharedParameterStore {
    pub fn student_spec(&self) -> &NetworkSpec {
        &self.student_spec
    }

    pub fn teacher_spec(&self) -> &NetworkSpec {
        &self.teacher_spec
    }

    pub fn expansion_rate(&self) -> usize {
        self.expansion_rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn class_count(&self) -> usize {
        self.student_spec.class_count().unwrap_or(0)
    }

    /// Student-side shape of the shared tensor at `layer` with `role`.
    fn student_keep(&self, layer: usize, role: ParamRole) -> Option<Vec<usize>> {
        match (&self.student_spec.layers.get(layer)?, role) {
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                },
                ParamRole::Weight,
            ) => Some(vec![*out_channels, *in_channels, *kernel, *kernel]),
            (LayerSpec::Conv2d { out_channels, .. }, ParamRole::Bias) => Some(vec![*out_channels]),
            (
                LayerSpec::Dense {
                    in_channels,
                    out_channels,
                },
                ParamRole::Weight,
            ) => Some(vec![*in_channels, *out_channels]),
            (LayerSpec::Dense { out_channels, .. }, ParamRole::Bias) => Some(vec![*out_channels]),
            _ => None,
        }
    }

    /// Keys of the shared conv/dense tensors, in deterministic order.
    pub fn shared_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            if matches!(slot, Slot::Conv { .. } | Slot::Dense { .. }) {
                keys.push(ParamKey::new(i, ParamScope::Shared, ParamRole::Weight));
                keys.push(ParamKey::new(i, ParamScope::Shared, ParamRole::Bias));
            }
        }
        keys
    }

    /// Every parameter key the optimizer updates.
    pub fn all_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            match slot {
                Slot::Conv { .. } | Slot::Dense { .. } => {
                    keys.push(ParamKey::new(i, ParamScope::Shared, ParamRole::Weight));
                    keys.push(ParamKey::new(i, ParamScope::Shared, ParamRole::Bias));
                }
                Slot::Norm { .. } => {
                    for scope in [ParamScope::Teacher, ParamScope::Student] {
                        keys.push(ParamKey::new(i, scope, ParamRole::Gamma));
                        keys.push(ParamKey::new(i, scope, ParamRole::Beta));
                    }
                }
                Slot::Passive => {}
            }
        }
        keys
    }

    pub fn tensor(&self, key: &ParamKey) -> Option<&Tensor> {
        match (self.slots.get(key.layer)?, key.scope, key.role) {
            (Slot::Conv { weight, .. }, ParamScope::Shared, ParamRole::Weight)
            | (Slot::Dense { weight, .. }, ParamScope::Shared, ParamRole::Weight) => Some(weight),
            (Slot::Conv { bias, .. }, ParamScope::Shared, ParamRole::Bias)
            | (Slot::Dense { bias, .. }, ParamScope::Shared, ParamRole::Bias) => Some(bias),
            (Slot::Norm { teacher, .. }, ParamScope::Teacher, ParamRole::Gamma) => {
                Some(&teacher.gamma)
            }
            (Slot::Norm { teacher, .. }, ParamScope::Teacher, ParamRole::Beta) => {
                Some(&teacher.beta)
            }
            (Slot::Norm { student, .. }, ParamScope::Student, ParamRole::Gamma) => {
                Some(&student.gamma)
            }
            (Slot::Norm { student, .. }, ParamScope::Student, ParamRole::Beta) => {
                Some(&student.beta)
            }
            _ => None,
        }
    }

    pub fn tensor_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        match (self.slots.get_mut(key.layer)?, key.scope, key.role) {
            (Slot::Conv { weight, .. }, ParamScope::Shared, ParamRole::Weight)
            | (Slot::Dense { weight, .. }, ParamScope::Shared, ParamRole::Weight) => Some(weight),
            (Slot::Conv { bias, .. }, ParamScope::Shared, ParamRole::Bias)
            | (Slot::Dense { bias, .. }, ParamScope::Shared, ParamRole::Bias) => Some(bias),
            (Slot::Norm { teacher, .. }, ParamScope::Teacher, ParamRole::Gamma) => {
                Some(&mut teacher.gamma)
            }
            (Slot::Norm { teacher, .. }, ParamScope::Teacher, ParamRole::Beta) => {
                Some(&mut teacher.beta)
            }
            (Slot::Norm { student, .. }, ParamScope::Student, ParamRole::Gamma) => {
                Some(&mut student.gamma)
            }
            (Slot::Norm { student, .. }, ParamScope::Student, ParamRole::Beta) => {
                Some(&mut student.beta)
            }
            _ => None,
        }
    }

    /// Snapshot of the student's block of a shared tensor.
    pub fn student_view(&self, layer: usize, role: ParamRole) -> Result<Tensor> {
        let key = ParamKey::new(layer, ParamScope::Shared, role);
        let keep = self
            .student_keep(layer, role)
            .ok_or(Error::State("layer has no shared tensor with that role"))?;
        self.tensor(&key)
            .ok_or(Error::State("layer has no shared tensor with that role"))?
            .lead_block(&keep)
    }

    /// Mutable write-through view of the student's block; writes land in
    /// the teacher's storage.
    pub fn student_view_mut(&mut self, layer: usize, role: ParamRole) -> Result<StudentViewMut<'_>> {
        let keep = self
            .student_keep(layer, role)
            .ok_or(Error::State("layer has no shared tensor with that role"))?;
        let key = ParamKey::new(layer, ParamScope::Shared, role);
        let tensor = self
            .tensor_mut(&key)
            .ok_or(Error::State("layer has no shared tensor with that role"))?;
        Ok(StudentViewMut { tensor, keep })
    }

    pub fn bn_state(&self, layer: usize, view: ModelView) -> Option<&BatchNormState> {
        match (self.slots.get(layer)?, view) {
            (Slot::Norm { teacher, .. }, ModelView::Teacher) => Some(teacher),
            (Slot::Norm { student, .. }, ModelView::Student) => Some(student),
            _ => None,
        }
    }

    /// Places everything on the tape and wires the student's slice nodes.
    pub fn lease(&self, tape: &mut Tape) -> Result<StoreLease> {
        let mut teacher_layers = Vec::with_capacity(self.slots.len());
        let mut student_layers = Vec::with_capacity(self.slots.len());
        let mut shared = Vec::new();
        let mut student_slices = Vec::new();
        let mut teacher_bn = Vec::new();
        let mut student_bn = Vec::new();

        for (i, slot) in self.slots.iter().enumerate() {
            match slot {
                Slot::Conv { weight, bias } | Slot::Dense { weight, bias } => {
                    let is_conv = matches!(slot, Slot::Conv { .. });
                    let w_key = ParamKey::new(i, ParamScope::Shared, ParamRole::Weight);
                    let b_key = ParamKey::new(i, ParamScope::Shared, ParamRole::Bias);
                    let w_id = tape.variable(weight.clone());
                    let b_id = tape.variable(bias.clone());
                    shared.push((w_key, w_id));
                    shared.push((b_key, b_id));
                    let w_keep = self.student_keep(i, ParamRole::Weight).expect("param layer");
                    let b_keep = self.student_keep(i, ParamRole::Bias).expect("param layer");
                    let w_slice = tape.slice_lead(w_id, &w_keep)?;
                    let b_slice = tape.slice_lead(b_id, &b_keep)?;
                    student_slices.push((w_key, w_slice));
                    student_slices.push((b_key, b_slice));
                    if is_conv {
                        teacher_layers.push(LeasedLayer::Conv { w: w_id, b: b_id });
                        student_layers.push(LeasedLayer::Conv {
                            w: w_slice,
                            b: b_slice,
                        });
                    } else {
                        teacher_layers.push(LeasedLayer::Dense { w: w_id, b: b_id });
                        student_layers.push(LeasedLayer::Dense {
                            w: w_slice,
                            b: b_slice,
                        });
                    }
                }
                Slot::Norm { teacher, student } => {
                    let t_gamma = tape.variable(teacher.gamma.clone());
                    let t_beta = tape.variable(teacher.beta.clone());
                    let s_gamma = tape.variable(student.gamma.clone());
                    let s_beta = tape.variable(student.beta.clone());
                    teacher_bn.push((ParamKey::new(i, ParamScope::Teacher, ParamRole::Gamma), t_gamma));
                    teacher_bn.push((ParamKey::new(i, ParamScope::Teacher, ParamRole::Beta), t_beta));
                    student_bn.push((ParamKey::new(i, ParamScope::Student, ParamRole::Gamma), s_gamma));
                    student_bn.push((ParamKey::new(i, ParamScope::Student, ParamRole::Beta), s_beta));
                    teacher_layers.push(LeasedLayer::Norm {
                        gamma: t_gamma,
                        beta: t_beta,
                    });
                    student_layers.push(LeasedLayer::Norm {
                        gamma: s_gamma,
                        beta: s_beta,
                    });
                }
                Slot::Passive => {
                    teacher_layers.push(LeasedLayer::Passive);
                    student_layers.push(LeasedLayer::Passive);
                }
            }
        }
        Ok(StoreLease {
            teacher_layers,
            student_layers,
            shared,
            student_slices,
            teacher_bn,
            student_bn,
        })
    }

    /// Forward pass of one model over an existing lease. Train-mode batch
    /// norm updates the running statistics of that model only.
    pub fn forward_leased(
        &mut self,
        tape: &mut Tape,
        lease: &StoreLease,
        view: ModelView,
        x: TensorId,
        mode: BnMode,
    ) -> Result<TensorId> {
        let (spec, layers) = match view {
            ModelView::Teacher => (self.teacher_spec.clone(), &lease.teacher_layers),
            ModelView::Student => (self.student_spec.clone(), &lease.student_layers),
        };
        let mut bn: Vec<&mut BatchNormState> = self
            .slots
            .iter_mut()
            .filter_map(|slot| match slot {
                Slot::Norm { teacher, student } => Some(match view {
                    ModelView::Teacher => teacher,
                    ModelView::Student => student,
                }),
                _ => None,
            })
            .collect();
        crate::nn::forward_layers(tape, &spec, layers, &mut bn, x, mode)
    }

    /// Convenience single-model forward (leases internally).
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        view: ModelView,
        x: TensorId,
        mode: BnMode,
    ) -> Result<TensorId> {
        let lease = self.lease(tape)?;
        self.forward_leased(tape, &lease, view, x, mode)
    }

    /// Teacher-side gradients after a backward pass: full shared tensors
    /// plus the teacher's batch-norm parameters. Parameters the loss never
    /// reached come back as zeros; if nothing was reached at all the
    /// backward pass is assumed missing.
    pub fn extract_teacher_grads(&self, tape: &Tape, lease: &StoreLease) -> Result<GradientSet> {
        extract(tape, lease.shared.iter().chain(&lease.teacher_bn))
    }

    /// Student-side gradients after a backward pass, over the shared slice
    /// coordinates (`full_coords = false`, the detached-teacher default) or
    /// over the full teacher coordinates (`true`, for the variant where the
    /// student loss also flows through the teacher's logits).
    pub fn extract_student_grads(
        &self,
        tape: &Tape,
        lease: &StoreLease,
        full_coords: bool,
    ) -> Result<GradientSet> {
        if full_coords {
            extract(tape, lease.shared.iter().chain(&lease.student_bn))
        } else {
            extract(tape, lease.student_slices.iter().chain(&lease.student_bn))
        }
    }

    /// Standalone copy of the student: sliced weights plus the student's
    /// batch-norm states. This is the deployable network; nothing of the
    /// teacher survives in it.
    pub fn export_student(&self) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.slots.len());
        for (i, slot) in self.slots.iter().enumerate() {
            let params = match slot {
                Slot::Conv { .. } => LayerParams::Conv {
                    weight: self.student_view(i, ParamRole::Weight)?,
                    bias: self.student_view(i, ParamRole::Bias)?,
                },
                Slot::Dense { .. } => LayerParams::Dense {
                    weight: self.student_view(i, ParamRole::Weight)?,
                    bias: self.student_view(i, ParamRole::Bias)?,
                },
                Slot::Norm { student, .. } => LayerParams::Norm(student.clone()),
                Slot::Passive => LayerParams::Passive,
            };
            layers.push(params);
        }
        Network::from_parts(self.student_spec.clone(), layers)
    }

    /// Rebuilds a store from checkpointed parts, revalidating every shape
    /// against the expanded spec.
    pub fn from_parts(
        student_spec: NetworkSpec,
        expansion_rate: usize,
        seed: u64,
        mut shared: BTreeMap<ParamKey, Tensor>,
        mut teacher_bn: BTreeMap<usize, BatchNormState>,
        mut student_bn: BTreeMap<usize, BatchNormState>,
    ) -> Result<Self> {
        let config = SupernetConfig::new(student_spec, expansion_rate);
        config.validate()?;
        let teacher_spec = expand(&config.student_spec, expansion_rate)?;
        let mut slots = Vec::with_capacity(teacher_spec.layers.len());
        for (i, layer) in teacher_spec.layers.iter().enumerate() {
            let slot = match layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let weight = take_shared(&mut shared, i, ParamRole::Weight)?;
                    let bias = take_shared(&mut shared, i, ParamRole::Bias)?;
                    if weight.shape() != [*out_channels, *in_channels, *kernel, *kernel]
                        || bias.shape() != [*out_channels]
                    {
                        return Err(Error::Data(format!(
                            "layer {i}: conv tensor shapes do not match the expanded spec"
                        )));
                    }
                    Slot::Conv { weight, bias }
                }
                LayerSpec::Dense {
                    in_channels,
                    out_channels,
                } => {
                    let weight = take_shared(&mut shared, i, ParamRole::Weight)?;
                    let bias = take_shared(&mut shared, i, ParamRole::Bias)?;
                    if weight.shape() != [*in_channels, *out_channels]
                        || bias.shape() != [*out_channels]
                    {
                        return Err(Error::Data(format!(
                            "layer {i}: dense tensor shapes do not match the expanded spec"
                        )));
                    }
                    Slot::Dense { weight, bias }
                }
                LayerSpec::BatchNorm2d { channels } => {
                    let teacher = teacher_bn
                        .remove(&i)
                        .ok_or_else(|| Error::Data(format!("missing teacher bn for layer {i}")))?;
                    let student = student_bn
                        .remove(&i)
                        .ok_or_else(|| Error::Data(format!("missing student bn for layer {i}")))?;
                    let student_channels = match config.student_spec.layers[i] {
                        LayerSpec::BatchNorm2d { channels } => channels,
                        _ => unreachable!("expansion preserves layer kinds"),
                    };
                    if teacher.channels() != *channels || student.channels() != student_channels {
                        return Err(Error::Data(format!(
                            "layer {i}: batch-norm widths do not match the spec"
                        )));
                    }
                    Slot::Norm { teacher, student }
                }
                LayerSpec::Relu | LayerSpec::GlobalAvgPool => Slot::Passive,
            };
            slots.push(slot);
        }
        if !shared.is_empty() {
            return Err(Error::Data("checkpoint has extra shared tensors".into()));
        }
        if !teacher_bn.is_empty() || !student_bn.is_empty() {
            return Err(Error::Data("checkpoint has extra batch-norm states".into()));
        }
        Ok(SharedParameterStore {
            student_spec: config.student_spec,
            teacher_spec,
            expansion_rate,
            seed,
            slots,
        })
    }

    /// Iterates `(key, tensor)` over every parameter, for serialization.
    pub fn shared_tensors(&self) -> Vec<(ParamKey, &Tensor)> {
        self.shared_keys()
            .into_iter()
            .map(|k| (k, self.tensor(&k).expect("key enumerated from slots")))
            .collect()
    }

    /// Batch-norm states per layer index for one model.
    pub fn bn_states(&self, view: ModelView) -> Vec<(usize, &BatchNormState)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, slot)| match slot {
                Slot::Norm { teacher, student } => Some((
                    i,
                    match view {
                        ModelView::Teacher => teacher,
                        ModelView::Student => student,
                    },
                )),
                _ => None,
            })
            .collect()
    }
}

fn take_shared(
    shared: &mut BTreeMap<ParamKey, Tensor>,
    layer: usize,
    role: ParamRole,
) -> Result<Tensor> {
    shared
        .remove(&ParamKey::new(layer, ParamScope::Shared, role))
        .ok_or_else(|| Error::Data(format!("missing shared {} for layer {layer}", role.name())))
}

/// Reads leaf gradients for the given ids, zero-filling parameters the loss
/// never reached. Errors if no id received any gradient (no backward pass).
fn extract<'a>(
    tape: &Tape,
    ids: impl Iterator<Item = &'a (ParamKey, TensorId)>,
) -> Result<GradientSet> {
    let mut set = GradientSet::new();
    let mut any = false;
    for (key, id) in ids {
        match tape.grad(*id) {
            Some(g) => {
                any = true;
                set.insert(*key, g);
            }
            None => set.insert(*key, Tensor::zeros(tape.value(*id).shape())),
        }
    }
    if !any {
        return Err(Error::State(
            "no gradients present; run backward before extracting",
        ));
    }
    Ok(set)
}
