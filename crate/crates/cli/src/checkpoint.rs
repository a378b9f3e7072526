//! Checkpoint files.
//!
//! One JSON document per checkpoint, either the full weight-sharing store
//! (`supernet-v1`: spec, expansion rate, seed, all teacher-shaped tensors
//! and both batch-norm states) or a standalone network (`network-v1`, the
//! deployable student export). Serialization is deterministic, so two runs
//! with the same seed produce byte-identical files. Writes go through a
//! temp file plus rename.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tinydistill_core::autodiff::Tensor;
use tinydistill_core::distill::{ParamKey, ParamRole, ParamScope};
use tinydistill_core::nn::{BatchNormState, LayerParams, LayerSpec, Network, NetworkSpec};
use tinydistill_core::supernet::{ModelView, SharedParameterStore};

use crate::{CliError, CliResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorData {
    fn from(t: &Tensor) -> Self {
        TensorData {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl TensorData {
    fn to_tensor(&self) -> CliResult<Tensor> {
        Tensor::new(&self.shape, self.data.clone()).map_err(|e| CliError::Io(e.to_string()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub layer: usize,
    pub role: String,
    pub tensor: TensorData,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnEntry {
    pub layer: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnEntry {
    fn from_state(layer: usize, s: &BatchNormState) -> Self {
        BnEntry {
            layer,
            gamma: s.gamma.data().to_vec(),
            beta: s.beta.data().to_vec(),
            running_mean: s.running_mean.clone(),
            running_var: s.running_var.clone(),
            momentum: s.momentum,
            eps: s.eps,
        }
    }

    fn to_state(&self) -> CliResult<BatchNormState> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(CliError::Io(format!(
                "batch-norm entry for layer {} has inconsistent lengths",
                self.layer
            )));
        }
        Ok(BatchNormState {
            gamma: Tensor::from_vec(self.gamma.clone()),
            beta: Tensor::from_vec(self.beta.clone()),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            momentum: self.momentum,
            eps: self.eps,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "format")]
pub enum CheckpointFile {
    #[serde(rename = "supernet-v1")]
    Supernet {
        student_spec: NetworkSpec,
        expansion_rate: usize,
        seed: u64,
        shared: Vec<ParamEntry>,
        teacher_bn: Vec<BnEntry>,
        student_bn: Vec<BnEntry>,
    },
    #[serde(rename = "network-v1")]
    Network {
        spec: NetworkSpec,
        params: Vec<ParamEntry>,
        bn: Vec<BnEntry>,
    },
}

fn role_name(role: ParamRole) -> &'static str {
    role.name()
}

fn role_from_name(name: &str) -> CliResult<ParamRole> {
    match name {
        "weight" => Ok(ParamRole::Weight),
        "bias" => Ok(ParamRole::Bias),
        other => Err(CliError::Io(format!("unknown parameter role {other:?}"))),
    }
}

pub fn store_to_file(store: &SharedParameterStore) -> CheckpointFile {
    CheckpointFile::Supernet {
        student_spec: store.student_spec().clone(),
        expansion_rate: store.expansion_rate(),
        seed: store.seed(),
        shared: store
            .shared_tensors()
            .into_iter()
            .map(|(key, t)| ParamEntry {
                layer: key.layer,
                role: role_name(key.role).to_string(),
                tensor: t.into(),
            })
            .collect(),
        teacher_bn: store
            .bn_states(ModelView::Teacher)
            .into_iter()
            .map(|(i, s)| BnEntry::from_state(i, s))
            .collect(),
        student_bn: store
            .bn_states(ModelView::Student)
            .into_iter()
            .map(|(i, s)| BnEntry::from_state(i, s))
            .collect(),
    }
}

pub fn network_to_file(net: &Network) -> CheckpointFile {
    let mut params = Vec::new();
    let mut bn = Vec::new();
    for (i, lp) in net.layers().iter().enumerate() {
        match lp {
            LayerParams::Conv { weight, bias } | LayerParams::Dense { weight, bias } => {
                params.push(ParamEntry {
                    layer: i,
                    role: "weight".into(),
                    tensor: weight.into(),
                });
                params.push(ParamEntry {
                    layer: i,
                    role: "bias".into(),
                    tensor: bias.into(),
                });
            }
            LayerParams::Norm(state) => bn.push(BnEntry::from_state(i, state)),
            LayerParams::Passive => {}
        }
    }
    CheckpointFile::Network {
        spec: net.spec().clone(),
        params,
        bn,
    }
}

impl CheckpointFile {
    pub fn to_store(&self) -> CliResult<SharedParameterStore> {
        match self {
            CheckpointFile::Supernet {
                student_spec,
                expansion_rate,
                seed,
                shared,
                teacher_bn,
                student_bn,
            } => {
                let mut tensors: BTreeMap<ParamKey, Tensor> = BTreeMap::new();
                for entry in shared {
                    let key = ParamKey::new(
                        entry.layer,
                        ParamScope::Shared,
                        role_from_name(&entry.role)?,
                    );
                    tensors.insert(key, entry.tensor.to_tensor()?);
                }
                let mut t_bn = BTreeMap::new();
                for e in teacher_bn {
                    t_bn.insert(e.layer, e.to_state()?);
                }
                let mut s_bn = BTreeMap::new();
                for e in student_bn {
                    s_bn.insert(e.layer, e.to_state()?);
                }
                SharedParameterStore::from_parts(
                    student_spec.clone(),
                    *expansion_rate,
                    *seed,
                    tensors,
                    t_bn,
                    s_bn,
                )
                .map_err(|e| CliError::Io(format!("corrupt supernet checkpoint: {e}")))
            }
            CheckpointFile::Network { .. } => Err(CliError::Config(
                "expected a supernet checkpoint, found a standalone network".into(),
            )),
        }
    }

    pub fn to_network(&self) -> CliResult<Network> {
        match self {
            CheckpointFile::Network { spec, params, bn } => {
                let mut by_key: BTreeMap<(usize, String), Tensor> = BTreeMap::new();
                for p in params {
                    by_key.insert((p.layer, p.role.clone()), p.tensor.to_tensor()?);
                }
                let mut bn_by_layer: BTreeMap<usize, BatchNormState> = BTreeMap::new();
                for e in bn {
                    bn_by_layer.insert(e.layer, e.to_state()?);
                }
                let mut layers = Vec::with_capacity(spec.layers.len());
                for (i, layer) in spec.layers.iter().enumerate() {
                    let take = |role: &str, by_key: &mut BTreeMap<(usize, String), Tensor>| {
                        by_key.remove(&(i, role.to_string())).ok_or_else(|| {
                            CliError::Io(format!("checkpoint missing {role} for layer {i}"))
                        })
                    };
                    let lp = match layer {
                        LayerSpec::Conv2d { .. } => LayerParams::Conv {
                            weight: take("weight", &mut by_key)?,
                            bias: take("bias", &mut by_key)?,
                        },
                        LayerSpec::Dense { .. } => LayerParams::Dense {
                            weight: take("weight", &mut by_key)?,
                            bias: take("bias", &mut by_key)?,
                        },
                        LayerSpec::BatchNorm2d { .. } => {
                            LayerParams::Norm(bn_by_layer.remove(&i).ok_or_else(|| {
                                CliError::Io(format!("checkpoint missing batch norm for layer {i}"))
                            })?)
                        }
                        LayerSpec::Relu | LayerSpec::GlobalAvgPool => LayerParams::Passive,
                    };
                    layers.push(lp);
                }
                Network::from_parts(spec.clone(), layers)
                    .map_err(|e| CliError::Io(format!("corrupt network checkpoint: {e}")))
            }
            CheckpointFile::Supernet { .. } => Err(CliError::Config(
                "expected a network checkpoint, found a supernet".into(),
            )),
        }
    }

    pub fn is_supernet(&self) -> bool {
        matches!(self, CheckpointFile::Supernet { .. })
    }
}

/// Writes bytes through a temp file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Io(format!("cannot rename into {}: {e}", path.display())))?;
    Ok(())
}

pub fn save(path: &Path, file: &CheckpointFile) -> CliResult<()> {
    let bytes =
        serde_json::to_vec(file).map_err(|e| CliError::Io(format!("serialize checkpoint: {e}")))?;
    atomic_write(path, &bytes)
}

pub fn load(path: &Path) -> CliResult<CheckpointFile> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot read checkpoint {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Io(format!("corrupt checkpoint {}: {e}", path.display())))
}
