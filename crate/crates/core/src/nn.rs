//! Network layers composed from autodiff ops.
//!
//! A network is described declaratively by a [`NetworkSpec`] (a list of
//! [`LayerSpec`]s) and realized as a [`Network`] holding parameter tensors.
//! The forward pass is an interpreter over the spec; the same interpreter
//! drives both standalone networks and the weight-sharing store in
//! [`crate::supernet`], which only differs in where the parameter tensors
//! on the tape come from.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// One layer of a network description.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        in_channels: usize,
        out_channels: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    GlobalAvgPool,
}

/// Ordered layer list. Channel counts must chain from one parameterized
/// layer to the next; [`NetworkSpec::validate`] checks that.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

enum Stage {
    Start,
    Spatial(usize),
    Flat(usize),
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { layers }
    }

    /// The reference tiny CNN used throughout the desk-scale experiments:
    /// three conv-BN-relu blocks (widths 8, 16, 16), global average pooling
    /// and a dense classifier head.
    pub fn tiny_cnn(num_classes: usize) -> Self {
        NetworkSpec::new(vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::BatchNorm2d { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: 8,
                out_channels: 16,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::BatchNorm2d { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: 16,
                out_channels: 16,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::BatchNorm2d { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense {
                in_channels: 16,
                out_channels: num_classes,
            },
        ])
    }

    /// Checks layer-to-layer channel chaining, naming the first offending
    /// layer index.
    pub fn validate(&self) -> Result<()> {
        use alloc::format;
        if self.layers.is_empty() {
            return Err(Error::Config("network spec has no layers".into()));
        }
        let mut stage = Stage::Start;
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |why: &str| Err(Error::Config(format!("layer {i}: {why}")));
            match layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if *in_channels == 0 || *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return fail("conv dimensions must be positive");
                    }
                    match stage {
                        Stage::Start => {}
                        Stage::Spatial(c) if c == *in_channels => {}
                        Stage::Spatial(c) => {
                            return Err(Error::Config(format!(
                                "layer {i}: conv expects {in_channels} input channels but gets {c}"
                            )))
                        }
                        Stage::Flat(_) => return fail("conv after pooling"),
                    }
                    stage = Stage::Spatial(*out_channels);
                }
                LayerSpec::BatchNorm2d { channels } => match stage {
                    Stage::Spatial(c) if c == *channels => {}
                    _ => {
                        return fail("batch norm channels do not match the running feature width")
                    }
                },
                LayerSpec::Relu => {}
                LayerSpec::GlobalAvgPool => match stage {
                    Stage::Spatial(c) => stage = Stage::Flat(c),
                    _ => return fail("global pooling needs spatial features"),
                },
                LayerSpec::Dense {
                    in_channels,
                    out_channels,
                } => {
                    if *in_channels == 0 || *out_channels == 0 {
                        return fail("dense dimensions must be positive");
                    }
                    match stage {
                        Stage::Start => {}
                        Stage::Flat(c) if c == *in_channels => {}
                        Stage::Flat(c) => {
                            return Err(Error::Config(format!(
                                "layer {i}: dense expects {in_channels} input features but gets {c}"
                            )))
                        }
                        Stage::Spatial(_) => return fail("dense on spatial features (pool first)"),
                    }
                    stage = Stage::Flat(*out_channels);
                }
            }
        }
        Ok(())
    }

    /// Channels the first parameterized layer consumes.
    pub fn input_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            LayerSpec::Conv2d { in_channels, .. } | LayerSpec::Dense { in_channels, .. } => {
                Some(*in_channels)
            }
            _ => None,
        })
    }

    /// Width of the final parameterized layer (the logit dimension).
    pub fn class_count(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::Conv2d { out_channels, .. } | LayerSpec::Dense { out_channels, .. } => {
                Some(*out_channels)
            }
            _ => None,
        })
    }
}

/// Per-model batch-normalization state: affine parameters plus running
/// statistics. Teacher and student each keep their own copy even where the
/// convolution weights are shared.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Whether batch norm uses batch statistics (and updates running stats) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// `x[N,d_in] * w[d_in,d_out] + b[d_out]`.
pub fn dense_forward(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let y = tape.matmul(x, w)?;
    tape.add_bias_row(y, b)
}

/// Batch normalization with already-leased affine parameters. In train mode
/// the running statistics of `state` are updated from the batch.
pub fn batchnorm_forward(
    tape: &mut Tape,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<TensorId> {
    match mode {
        BnMode::Train => {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, state.eps)?;
            state.update_running(&mean, &var);
            Ok(y)
        }
        BnMode::Eval => tape.batch_norm_eval(
            x,
            gamma,
            beta,
            &state.running_mean,
            &state.running_var,
            state.eps,
        ),
    }
}

/// Parameters for one layer of a realized [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Conv { weight: Tensor, bias: Tensor },
    Dense { weight: Tensor, bias: Tensor },
    Norm(BatchNormState),
    Passive,
}

/// Layer parameters already placed on a tape.
#[derive(Clone, Copy, Debug)]
pub(crate) enum LeasedLayer {
    Conv { w: TensorId, b: TensorId },
    Dense { w: TensorId, b: TensorId },
    Norm { gamma: TensorId, beta: TensorId },
    Passive,
}

/// Runs `spec` over the tape. `leased` must align with the spec's layers;
/// `bn_states` holds one entry per `BatchNorm2d` layer, in order.
pub(crate) fn forward_layers(
    tape: &mut Tape,
    spec: &NetworkSpec,
    leased: &[LeasedLayer],
    bn_states: &mut [&mut BatchNormState],
    x: TensorId,
    mode: BnMode,
) -> Result<TensorId> {
    debug_assert_eq!(spec.layers.len(), leased.len());
    let mut cur = x;
    let mut bn_idx = 0;
    for (layer, lease) in spec.layers.iter().zip(leased) {
        cur = match (layer, lease) {
            (
                LayerSpec::Conv2d {
                    stride, padding, ..
                },
                LeasedLayer::Conv { w, b },
            ) => {
                let y = tape.conv2d(cur, *w, *stride, *padding)?;
                tape.add_bias_channel(y, *b)?
            }
            (LayerSpec::Dense { .. }, LeasedLayer::Dense { w, b }) => {
                dense_forward(tape, cur, *w, *b)?
            }
            (LayerSpec::BatchNorm2d { .. }, LeasedLayer::Norm { gamma, beta }) => {
                let state = &mut bn_states[bn_idx];
                bn_idx += 1;
                batchnorm_forward(tape, cur, *gamma, *beta, state, mode)?
            }
            (LayerSpec::Relu, LeasedLayer::Passive) => tape.relu(cur)?,
            (LayerSpec::GlobalAvgPool, LeasedLayer::Passive) => tape.global_avg_pool(cur)?,
            _ => return Err(Error::State("leased layers do not match the network spec")),
        };
    }
    Ok(cur)
}

/// A realized network: spec plus parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerParams>,
}

/// Kaiming fan-in initialization for a weight tensor.
fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.next_normal() * std).collect();
    Tensor::new(shape, data).expect("shape/product agree")
}

/// Builds parameters for `spec`, deterministically from `seed`.
///
/// Conv and dense weights get fan-in-scaled normal init, biases and beta
/// start at zero, gamma at one, running stats at mean 0 / var 1.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = Rng::seeded(seed, &[0x1217]);
    let layers = spec
        .layers
        .iter()
        .map(|layer| match layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => LayerParams::Conv {
                weight: kaiming_normal(
                    &[*out_channels, *in_channels, *kernel, *kernel],
                    in_channels * kernel * kernel,
                    &mut rng,
                ),
                bias: Tensor::zeros(&[*out_channels]),
            },
            LayerSpec::Dense {
                in_channels,
                out_channels,
            } => LayerParams::Dense {
                weight: kaiming_normal(&[*in_channels, *out_channels], *in_channels, &mut rng),
                bias: Tensor::zeros(&[*out_channels]),
            },
            LayerSpec::BatchNorm2d { channels } => {
                LayerParams::Norm(BatchNormState::new(*channels))
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool => LayerParams::Passive,
        })
        .collect();
    Ok(Network {
        spec: spec.clone(),
        layers,
    })
}

impl Network {
    /// Reassembles a network from its parts, revalidating shapes.
    pub fn from_parts(spec: NetworkSpec, layers: Vec<LayerParams>) -> Result<Self> {
        spec.validate()?;
        if spec.layers.len() != layers.len() {
            return Err(Error::Data("layer count does not match spec".into()));
        }
        for (ls, lp) in spec.layers.iter().zip(&layers) {
            let ok = match (ls, lp) {
                (
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    },
                    LayerParams::Conv { weight, bias },
                ) => {
                    weight.shape() == [*out_channels, *in_channels, *kernel, *kernel]
                        && bias.shape() == [*out_channels]
                }
                (
                    LayerSpec::Dense {
                        in_channels,
                        out_channels,
                    },
                    LayerParams::Dense { weight, bias },
                ) => weight.shape() == [*in_channels, *out_channels] && bias.shape() == [*out_channels],
                (LayerSpec::BatchNorm2d { channels }, LayerParams::Norm(state)) => {
                    state.channels() == *channels
                        && state.running_mean.len() == *channels
                        && state.running_var.len() == *channels
                }
                (LayerSpec::Relu, LayerParams::Passive) => true,
                (LayerSpec::GlobalAvgPool, LayerParams::Passive) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Data("layer parameters do not match spec".into()));
            }
        }
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub(crate) fn lease(&self, tape: &mut Tape) -> Vec<LeasedLayer> {
        self.layers
            .iter()
            .map(|lp| match lp {
                LayerParams::Conv { weight, bias } => LeasedLayer::Conv {
                    w: tape.variable(weight.clone()),
                    b: tape.variable(bias.clone()),
                },
                LayerParams::Dense { weight, bias } => LeasedLayer::Dense {
                    w: tape.variable(weight.clone()),
                    b: tape.variable(bias.clone()),
                },
                LayerParams::Norm(state) => LeasedLayer::Norm {
                    gamma: tape.variable(state.gamma.clone()),
                    beta: tape.variable(state.beta.clone()),
                },
                LayerParams::Passive => LeasedLayer::Passive,
            })
            .collect()
    }

    /// Forward pass; leases parameters onto the tape internally. For
    /// training loops that need the leased ids, use `lease` +
    /// `forward_layers` instead.
    pub fn forward(&mut self, tape: &mut Tape, x: TensorId, mode: BnMode) -> Result<TensorId> {
        let leased = self.lease(tape);
        let spec = self.spec.clone();
        let mut bn: Vec<&mut BatchNormState> = self
            .layers
            .iter_mut()
            .filter_map(|lp| match lp {
                LayerParams::Norm(state) => Some(state),
                _ => None,
            })
            .collect();
        forward_layers(tape, &spec, &leased, &mut bn, x, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_zero_weights_yields_bias_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.constant(Tensor::from_vec(vec![0.5, -0.5]));
        let y = dense_forward(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn dense_identity_weights_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = dense_forward(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn dense_matches_matmul_plus_bias_composition() {
        let mut rng = Rng::new(2);
        let xv = Tensor::new(&[3, 4], (0..12).map(|_| rng.next_normal()).collect()).unwrap();
        let wv = Tensor::new(&[4, 2], (0..8).map(|_| rng.next_normal()).collect()).unwrap();
        let bv = Tensor::from_vec(vec![0.1, -0.2]);

        let mut tape = Tape::new();
        let (x, w, b) = (
            tape.constant(xv.clone()),
            tape.constant(wv.clone()),
            tape.constant(bv.clone()),
        );
        let y1 = dense_forward(&mut tape, x, w, b).unwrap();
        let (x2, w2, b2) = (tape.constant(xv), tape.constant(wv), tape.constant(bv));
        let mm = tape.matmul(x2, w2).unwrap();
        let y2 = tape.add_bias_row(mm, b2).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(y2).data());
    }

    #[test]
    fn batchnorm_constant_input_normalizes_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 5.0));
        let gamma = tape.constant(Tensor::ones(&[1]));
        let beta = tape.constant(Tensor::zeros(&[1]));
        let mut state = BatchNormState::new(1);
        let y = batchnorm_forward(&mut tape, x, gamma, beta, &mut state, BnMode::Train).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn batchnorm_eval_identity_stats_is_near_identity() {
        let mut tape = Tape::new();
        let xv = Tensor::new(&[1, 2, 1, 2], vec![0.3, -1.0, 2.0, 0.7]).unwrap();
        let x = tape.constant(xv.clone());
        let gamma = tape.constant(Tensor::ones(&[2]));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let mut state = BatchNormState::new(2);
        let y = batchnorm_forward(&mut tape, x, gamma, beta, &mut state, BnMode::Eval).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(xv.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_running_mean_update_hand_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let gamma = tape.constant(Tensor::ones(&[1]));
        let beta = tape.constant(Tensor::zeros(&[1]));
        let mut state = BatchNormState::new(1);
        batchnorm_forward(&mut tape, x, gamma, beta, &mut state, BnMode::Train).unwrap();
        assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = Rng::new(17);
        let x = Tensor::new(&[4, 3, 5, 5], (0..300).map(|_| rng.next_normal() * 2.0 + 0.5).collect())
            .unwrap();
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let gamma = tape.constant(Tensor::ones(&[3]));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let mut state = BatchNormState::new(3);
        let y = batchnorm_forward(&mut tape, xi, gamma, beta, &mut state, BnMode::Train).unwrap();
        let yd = tape.value(y).data();
        let (c, hw, n0) = (3, 25, 4);
        for ch in 0..c {
            let mut vals = Vec::new();
            for img in 0..n0 {
                let base = (img * c + ch) * hw;
                vals.extend_from_slice(&yd[base..base + hw]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-8, "channel mean {m}");
            assert!((var - 1.0).abs() < 1e-4, "channel var {var}");
        }
    }

    #[test]
    fn running_stats_converge_monotonically() {
        let mut state = BatchNormState::new(1);
        let batch_mean = [4.0];
        let batch_var = [0.5];
        let mut prev_gap = (state.running_mean[0] - 4.0).abs();
        for _ in 0..10 {
            state.update_running(&batch_mean, &batch_var);
            let gap = (state.running_mean[0] - 4.0).abs();
            assert!(gap < prev_gap);
            prev_gap = gap;
        }
        assert!(state.running_var[0] > 0.0);
    }

    #[test]
    fn build_network_dense_only_shapes() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense {
            in_channels: 4,
            out_channels: 3,
        }]);
        let net = build_network(&spec, 0).unwrap();
        match &net.layers()[0] {
            LayerParams::Dense { weight, bias } => {
                assert_eq!(weight.shape(), &[4, 3]);
                assert_eq!(bias.shape(), &[3]);
            }
            other => panic!("unexpected params {other:?}"),
        }
    }

    #[test]
    fn build_network_is_deterministic_in_seed() {
        let spec = NetworkSpec::tiny_cnn(10);
        let a = build_network(&spec, 42).unwrap();
        let b = build_network(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = build_network(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_cnn_forward_shape_is_batch_by_classes() {
        let spec = NetworkSpec::tiny_cnn(10);
        let mut net = build_network(&spec, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let y = net.forward(&mut tape, x, BnMode::Eval).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 10]);
    }

    #[test]
    fn broken_chain_names_layer_index() {
        let spec = NetworkSpec::new(vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Conv2d {
                in_channels: 9,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
        ]);
        match spec.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("layer 1"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
