//! Central finite-difference gradient checker.
//!
//! The numeric side only ever calls the forward pass, so it stays
//! independent of the backward rules it is checking. Relative error uses
//! `max(|analytic|, |numeric|, 1e-8)` as the denominator.

use tinydistill_core::autodiff::{Tape, Tensor, TensorId};
use tinydistill_core::nn::{BatchNormState, LayerSpec, NetworkSpec};
use tinydistill_core::rng::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of an O(1) loss carry cancellation noise of about
/// `|f| * eps / (2h) ~ 1e-11`, so gradients below this floor cannot be
/// measured by FD at all. When both the analytic and the numeric value sit
/// under the floor they agree that the derivative is zero (e.g. a conv
/// bias that a following batch norm cancels exactly) and the element is
/// skipped; a genuinely wrong gradient on either side clears the floor and
/// is still caught.
pub const FD_NOISE_FLOOR: f64 = 1e-9;

/// Largest relative error between the analytic gradients of `build`'s
/// scalar output and central finite differences over every input scalar.
pub fn max_rel_err(
    inputs: &[Tensor],
    build: &mut dyn FnMut(&mut Tape, &[TensorId]) -> TensorId,
) -> f64 {
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = xs.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item().expect("scalar loss")
    };

    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let ana = analytic[ti].data()[j];
            if ana.abs() < FD_NOISE_FLOOR && numeric.abs() < FD_NOISE_FLOOR {
                continue;
            }
            let denom = ana.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((ana - numeric).abs() / denom);
        }
    }
    worst
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect()).unwrap()
}

/// Scalarizes a tensor as `sum(out * w)` with fixed random weights, so
/// every output element gets a distinct upstream gradient. Catches
/// transposition mistakes a plain sum would mask.
pub fn weighted_sum(tape: &mut Tape, out: TensorId, seed: u64) -> TensorId {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = Rng::seeded(seed, &[0xf00d]);
    let w = random_tensor(&shape, &mut rng);
    let wid = tape.constant(w);
    let prod = tape.mul(out, wid).unwrap();
    tape.sum(prod).unwrap()
}

/// Leased-layer wiring for a whole network from a flat leaf list, paired
/// with the number of leaves each layer consumes.
pub struct SpecHarness {
    pub spec: NetworkSpec,
    pub param_shapes: Vec<Vec<usize>>,
    /// Scale per parameter tensor. Fan-in scaling keeps pre-normalization
    /// variances near 1; without it, near-zero batch variances inflate the
    /// curvature and with it the finite-difference truncation error.
    scales: Vec<f64>,
}

impl SpecHarness {
    pub fn new(spec: NetworkSpec) -> Self {
        let mut param_shapes = Vec::new();
        let mut scales = Vec::new();
        for layer in &spec.layers {
            match layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    param_shapes.push(vec![*out_channels, *in_channels, *kernel, *kernel]);
                    scales.push((6.0 / (in_channels * kernel * kernel) as f64).sqrt());
                    param_shapes.push(vec![*out_channels]);
                    scales.push(0.1);
                }
                LayerSpec::Dense {
                    in_channels,
                    out_channels,
                } => {
                    param_shapes.push(vec![*in_channels, *out_channels]);
                    scales.push((6.0 / *in_channels as f64).sqrt());
                    param_shapes.push(vec![*out_channels]);
                    scales.push(0.1);
                }
                LayerSpec::BatchNorm2d { channels } => {
                    param_shapes.push(vec![*channels]);
                    scales.push(1.0);
                    param_shapes.push(vec![*channels]);
                    scales.push(1.0);
                }
                LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
            }
        }
        SpecHarness {
            spec,
            param_shapes,
            scales,
        }
    }

    pub fn random_params(&self, rng: &mut Rng) -> Vec<Tensor> {
        self.param_shapes
            .iter()
            .zip(&self.scales)
            .map(|(s, scale)| {
                let mut t = random_tensor(s, rng);
                for v in t.data_mut() {
                    *v *= scale;
                }
                t
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Forward over leased leaves: `leaves[0..]` are the parameters in
    /// declaration order, the input batch is appended by the caller.
    pub fn forward(&self, tape: &mut Tape, leaves: &[TensorId], x: TensorId) -> TensorId {
        let mut cur = x;
        let mut li = 0usize;
        for layer in &self.spec.layers {
            cur = match layer {
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let w = leaves[li];
                    let b = leaves[li + 1];
                    li += 2;
                    let y = tape.conv2d(cur, w, *stride, *padding).unwrap();
                    tape.add_bias_channel(y, b).unwrap()
                }
                LayerSpec::Dense { .. } => {
                    let w = leaves[li];
                    let b = leaves[li + 1];
                    li += 2;
                    let y = tape.matmul(cur, w).unwrap();
                    tape.add_bias_row(y, b).unwrap()
                }
                LayerSpec::BatchNorm2d { channels } => {
                    let gamma = leaves[li];
                    let beta = leaves[li + 1];
                    li += 2;
                    let mut state = BatchNormState::new(*channels);
                    tinydistill_core::nn::batchnorm_forward(
                        tape,
                        cur,
                        gamma,
                        beta,
                        &mut state,
                        tinydistill_core::nn::BnMode::Train,
                    )
                    .unwrap()
                }
                LayerSpec::Relu => tape.relu(cur).unwrap(),
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(cur).unwrap(),
            };
        }
        cur
    }
}
