//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its input ids and whatever the
//! backward rule needs, so the tape is topologically ordered by
//! construction. `backward` walks it once in reverse and accumulates
//! gradients into per-node buffers; repeated calls keep accumulating until
//! [`Tape::reset_grads`] is called, which is what lets a training step run
//! two independent backward passes (teacher loss, then student loss) over
//! one recorded graph.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Node {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        factor: f64,
    },
    AddBiasRow {
        x: TensorId,
        bias: TensorId,
    },
    AddBiasChannel {
        x: TensorId,
        bias: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        padding: usize,
    },
    SliceLead {
        x: TensorId,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    Sum {
        x: TensorId,
    },
    Mean {
        x: TensorId,
    },
    RowSum {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
    },
    LogSoftmax {
        x: TensorId,
    },
    Detach {
        // Kept so the tape still records where the value came from.
        #[allow(dead_code)]
        x: TensorId,
    },
}

/// Recorded computation. Owns every tensor produced since `new()`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node, value: Tensor, needs_grad: bool) -> TensorId {
        self.nodes.push(node);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.needs_grad[id.0]
    }

    /// Records a leaf that never receives a gradient (inputs, targets,
    /// detached teacher outputs that were never on this tape, ...).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(Node::Leaf, value, false)
    }

    /// Records a differentiable leaf (a parameter).
    pub fn variable(&mut self, value: Tensor) -> TensorId {
        self.push(Node::Leaf, value, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient accumulated for `id` by previous `backward` calls, shaped
    /// like its value. `None` if nothing reached it yet.
    pub fn grad(&self, id: TensorId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[id.0].shape(), g.clone()).expect("grad shape"))
    }

    /// Clears all gradient buffers, keeping values and recorded nodes.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.values[id.0].shape()
    }

    fn binary_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Node::Add { a, b }, out, needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Node::Sub { a, b }, out, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Node::Mul { a, b }, out, needs))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let data = self.values[a.0].data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a);
        Ok(self.push(Node::Scale { a, factor }, out, needs))
    }

    /// `x[N,D] + bias[D]`, bias broadcast over the batch dimension.
    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let d = xs[1];
        let mut data = self.values[x.0].data().to_vec();
        let b = self.values[bias.0].data();
        for row in data.chunks_exact_mut(d) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let out = Tensor::new(xs, data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Node::AddBiasRow { x, bias }, out, needs))
    }

    /// `x[N,C,H,W] + bias[C]`, bias broadcast per channel.
    pub fn add_bias_channel(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 4 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_channel",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let mut data = self.values[x.0].data().to_vec();
        let b = self.values[bias.0].data();
        for img in data.chunks_exact_mut(c * hw) {
            for (ch, bv) in b.iter().enumerate() {
                for v in &mut img[ch * hw..(ch + 1) * hw] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::new(xs, data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Node::AddBiasChannel { x, bias }, out, needs))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data = self.values[x.0].data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        Ok(self.push(Node::Relu { x }, out, needs))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.values[a.0].data(), self.values[b.0].data(), &mut data);
        let out = Tensor::new(&[m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Node::Matmul { a, b }, out, needs))
    }

    /// Cross-correlation (no kernel flip) of `x[N,Cin,H,W]` with
    /// `w[Cout,Cin,k,k]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: ws,
                reason: "stride must be positive",
            });
        }
        let (n0, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        let oh = kernels::conv_out_dim(h, k, stride, padding);
        let ow = kernels::conv_out_dim(wd, k, stride, padding);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::BadShape {
                    op: "conv2d",
                    shape: xs,
                    reason: "non-positive output spatial size",
                })
            }
        };
        let row_len = c_in * k * k;
        let cols = kernels::im2col(
            self.values[x.0].data(),
            n0,
            c_in,
            h,
            wd,
            k,
            stride,
            padding,
            oh,
            ow,
        );
        // cols: [n0*oh*ow, row_len]; weight rows have the same layout, so the
        // product is one dot per (pixel, out-channel) pair.
        let rows = n0 * oh * ow;
        let mut flat = vec![0.0; rows * c_out];
        kernels::gemm_nt(rows, row_len, c_out, &cols, self.values[w.0].data(), &mut flat);
        // Permute [n, oy, ox, co] -> [n, co, oy, ox].
        let mut data = vec![0.0; n0 * c_out * oh * ow];
        for img in 0..n0 {
            for s in 0..oh * ow {
                let src = &flat[(img * oh * ow + s) * c_out..][..c_out];
                for (co, &v) in src.iter().enumerate() {
                    data[(img * c_out + co) * oh * ow + s] = v;
                }
            }
        }
        let out = Tensor::new(&[n0, c_out, oh, ow], data)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            Node::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            out,
            needs,
        ))
    }

    /// Keeps the leading `keep[d]` indices of every dimension.
    pub fn slice_lead(&mut self, x: TensorId, keep: &[usize]) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if keep.len() != xs.len() || keep.iter().zip(&xs).any(|(&k, &s)| k == 0 || k > s) {
            return Err(Error::ShapeMismatch {
                op: "slice_lead",
                lhs: xs,
                rhs: keep.to_vec(),
            });
        }
        let mut data = vec![0.0; keep.iter().product()];
        copy_lead_block(self.values[x.0].data(), &xs, keep, &mut data, CopyDir::Gather);
        let out = Tensor::new(keep, data)?;
        let needs = self.needs(x);
        Ok(self.push(Node::SliceLead { x }, out, needs))
    }

    /// Batch normalization over `(N, H, W)` per channel using batch
    /// statistics (biased variance). Returns the output id plus the batch
    /// mean and variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let xs = self.shape(x).to_vec();
        check_bn_shapes("batch_norm_train", &xs, self.shape(gamma), self.shape(beta))?;
        let (n0, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = n0 * h * w;
        if m < 2 {
            return Err(Error::BadShape {
                op: "batch_norm_train",
                shape: xs,
                reason: "batch variance undefined for fewer than 2 values per channel",
            });
        }
        let hw = h * w;
        let xd = self.values[x.0].data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for img in 0..n0 {
                let base = (img * c + ch) * hw;
                for v in &xd[base..base + hw] {
                    s += v;
                }
            }
            let mu = s / m as f64;
            let mut sq = 0.0;
            for img in 0..n0 {
                let base = (img * c + ch) * hw;
                for v in &xd[base..base + hw] {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = sq / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut data = vec![0.0; xd.len()];
        for img in 0..n0 {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (mu, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in 0..hw {
                    data[base + i] = (xd[base + i] - mu) * is * gc + bc;
                }
            }
        }
        let out = Tensor::new(&xs, data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            Node::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
            out,
            needs,
        );
        Ok((id, mean, var))
    }

    /// Batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        check_bn_shapes("batch_norm_eval", &xs, self.shape(gamma), self.shape(beta))?;
        let (n0, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::BadShape {
                op: "batch_norm_eval",
                shape: xs,
                reason: "running statistics length does not match channels",
            });
        }
        let hw = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let xd = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut data = vec![0.0; xd.len()];
        for img in 0..n0 {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (mu, is, gc, bc) = (running_mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in 0..hw {
                    data[base + i] = (xd[base + i] - mu) * is * gc + bc;
                }
            }
        }
        let out = Tensor::new(&xs, data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Node::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            out,
            needs,
        ))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] * xs[3] == 0 {
            return Err(Error::BadShape {
                op: "global_avg_pool",
                shape: xs,
                reason: "expected [N,C,H,W] with H*W >= 1",
            });
        }
        let (n0, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.values[x.0].data();
        let mut data = vec![0.0; n0 * c];
        for (i, out) in data.iter_mut().enumerate() {
            let base = i * hw;
            *out = xd[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
        let out = Tensor::new(&[n0, c], data)?;
        let needs = self.needs(x);
        Ok(self.push(Node::GlobalAvgPool { x }, out, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.values[x.0].data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Node::Sum { x }, Tensor::scalar(s), needs))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.values[x.0].len();
        if n == 0 {
            return Err(Error::BadShape {
                op: "mean",
                shape: self.shape(x).to_vec(),
                reason: "mean of an empty tensor",
            });
        }
        let s: f64 = self.values[x.0].data().iter().sum::<f64>() / n as f64;
        let needs = self.needs(x);
        Ok(self.push(Node::Mean { x }, Tensor::scalar(s), needs))
    }

    /// `[N,C] -> [N]`, summing each row.
    pub fn row_sum(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::BadShape {
                op: "row_sum",
                shape: xs,
                reason: "expected a rank-2 tensor",
            });
        }
        let data: Vec<f64> = self.values[x.0]
            .data()
            .chunks_exact(xs[1])
            .map(|row| row.iter().sum())
            .collect();
        let out = Tensor::new(&[xs[0]], data)?;
        let needs = self.needs(x);
        Ok(self.push(Node::RowSum { x }, out, needs))
    }

    /// Row-wise softmax of `[N,C]`, max-subtracted for stability.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] < 2 {
            return Err(Error::BadShape {
                op: "softmax",
                shape: xs,
                reason: "expected [N,C] with C >= 2",
            });
        }
        let c = xs[1];
        let mut data = vec![0.0; self.values[x.0].len()];
        for (row, out) in self.values[x.0].data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            kernels::row_softmax(row, out);
        }
        let out = Tensor::new(&xs, data)?;
        let needs = self.needs(x);
        Ok(self.push(Node::Softmax { x }, out, needs))
    }

    /// Row-wise log-softmax of `[N,C]`.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] < 2 {
            return Err(Error::BadShape {
                op: "log_softmax",
                shape: xs,
                reason: "expected [N,C] with C >= 2",
            });
        }
        let c = xs[1];
        let mut data = vec![0.0; self.values[x.0].len()];
        for (row, out) in self.values[x.0].data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            kernels::row_log_softmax(row, out);
        }
        let out = Tensor::new(&xs, data)?;
        let needs = self.needs(x);
        Ok(self.push(Node::LogSoftmax { x }, out, needs))
    }

    /// Copies the value and blocks gradient flow into `x`.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let v = self.values[x.0].clone();
        self.push(Node::Detach { x }, v, false)
    }

    /// Accumulates `d loss / d node` into every node reachable from `loss`
    /// that wants a gradient. `loss` must be scalar.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                shape: self.values[loss.0].shape().to_vec(),
                reason: "loss must be scalar",
            });
        }
        // Local seed buffers so this pass accumulates on top of grads left
        // by earlier passes only at the end of each node visit.
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match local[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if self.needs_grad[idx] {
                match &mut self.grads[idx] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g.clone()),
                }
            }
            self.propagate(idx, &g, &mut local);
        }
        Ok(())
    }

    /// Sends `g` (gradient of node `idx`'s output) to the node's inputs.
    fn propagate(&self, idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let mut send = |id: TensorId, contrib: Vec<f64>| {
            debug_assert_eq!(contrib.len(), self.values[id.0].len());
            match &mut local[id.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        let wants = |id: TensorId|

            // A node participates if it or anything below it is a variable.
            self.needs_grad[id.0];

        match &self.nodes[idx] {
            Node::Leaf => {}
            Node::Detach { .. } => {}
            Node::Add { a, b } => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Node::Sub { a, b } => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    send(*b, g.iter().map(|v| -v).collect());
                }
            }
            Node::Mul { a, b } => {
                if wants(*a) {
                    let bd = self.values[b.0].data();
                    send(*a, g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect());
                }
                if wants(*b) {
                    let ad = self.values[a.0].data();
                    send(*b, g.iter().zip(ad).map(|(gv, av)| gv * av).collect());
                }
            }
            Node::Scale { a, factor } => {
                if wants(*a) {
                    send(*a, g.iter().map(|v| v * factor).collect());
                }
            }
            Node::AddBiasRow { x, bias } => {
                if wants(*x) {
                    send(*x, g.to_vec());
                }
                if wants(*bias) {
                    let d = self.values[bias.0].len();
                    let mut db = vec![0.0; d];
                    for row in g.chunks_exact(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*bias, db);
                }
            }
            Node::AddBiasChannel { x, bias } => {
                if wants(*x) {
                    send(*x, g.to_vec());
                }
                if wants(*bias) {
                    let xs = self.values[x.0].shape();
                    let (c, hw) = (xs[1], xs[2] * xs[3]);
                    let mut db = vec![0.0; c];
                    for img in g.chunks_exact(c * hw) {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            *acc += img[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    send(*bias, db);
                }
            }
            Node::Relu { x } => {
                if wants(*x) {
                    let xd = self.values[x.0].data();
                    send(
                        *x,
                        g.iter()
                            .zip(xd)
                            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Node::Matmul { a, b } => {
                let sa = self.values[a.0].shape();
                let sb = self.values[b.0].shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, g, self.values[b.0].data(), &mut da);
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(m, k, n, self.values[a.0].data(), g, &mut db);
                    send(*b, db);
                }
            }
            Node::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let xs = self.values[x.0].shape().to_vec();
                let ws = self.values[w.0].shape().to_vec();
                let (n0, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (c_out, k) = (ws[0], ws[2]);
                let oh = kernels::conv_out_dim(h, k, *stride, *padding).unwrap();
                let ow = kernels::conv_out_dim(wd, k, *stride, *padding).unwrap();
                let rows = n0 * oh * ow;
                let row_len = c_in * k * k;
                // Un-permute the upstream gradient to [rows, c_out].
                let mut gt = vec![0.0; rows * c_out];
                for img in 0..n0 {
                    for co in 0..c_out {
                        let base = (img * c_out + co) * oh * ow;
                        for s in 0..oh * ow {
                            gt[(img * oh * ow + s) * c_out + co] = g[base + s];
                        }
                    }
                }
                let need_w = wants(*w);
                let need_x = wants(*x);
                if need_w || need_x {
                    if need_w {
                        let cols = kernels::im2col(
                            self.values[x.0].data(),
                            n0,
                            c_in,
                            h,
                            wd,
                            k,
                            *stride,
                            *padding,
                            oh,
                            ow,
                        );
                        let mut dw = vec![0.0; c_out * row_len];
                        kernels::gemm_tn(rows, c_out, row_len, &gt, &cols, &mut dw);
                        send(*w, dw);
                    }
                    if need_x {
                        let mut dcols = vec![0.0; rows * row_len];
                        kernels::gemm_nn(rows, c_out, row_len, &gt, self.values[w.0].data(), &mut dcols);
                        let mut dx = vec![0.0; n0 * c_in * h * wd];
                        kernels::col2im_add(
                            &dcols, &mut dx, n0, c_in, h, wd, k, *stride, *padding, oh, ow,
                        );
                        send(*x, dx);
                    }
                }
            }
            Node::SliceLead { x } => {
                if wants(*x) {
                    let xs = self.values[x.0].shape().to_vec();
                    let keep = self.values[idx].shape().to_vec();
                    let mut dx = vec![0.0; self.values[x.0].len()];
                    copy_lead_block(g, &xs, &keep, &mut dx, CopyDir::Scatter);
                    send(*x, dx);
                }
            }
            Node::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = self.values[x.0].shape();
                let (n0, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = (n0 * hw) as f64;
                let xd = self.values[x.0].data();
                let gam = self.values[gamma.0].data();
                // Per-channel reductions over the upstream gradient.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for img in 0..n0 {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        let (mu, is) = (mean[ch], inv_std[ch]);
                        let mut s = 0.0;
                        let mut sx = 0.0;
                        for i in 0..hw {
                            let dy = g[base + i];
                            s += dy;
                            sx += dy * (xd[base + i] - mu) * is;
                        }
                        sum_dy[ch] += s;
                        sum_dy_xhat[ch] += sx;
                    }
                }
                if wants(*beta) {
                    send(*beta, sum_dy.clone());
                }
                if wants(*gamma) {
                    send(*gamma, sum_dy_xhat.clone());
                }
                if wants(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for img in 0..n0 {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let (mu, is, gc) = (mean[ch], inv_std[ch], gam[ch]);
                            let coeff = gc * is / m;
                            for i in 0..hw {
                                let xhat = (xd[base + i] - mu) * is;
                                dx[base + i] = coeff
                                    * (m * g[base + i] - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    send(*x, dx);
                }
            }
            Node::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = self.values[x.0].shape();
                let (n0, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let xd = self.values[x.0].data();
                let gam = self.values[gamma.0].data();
                if wants(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for img in 0..n0 {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let coeff = gam[ch] * inv_std[ch];
                            for i in 0..hw {
                                dx[base + i] = g[base + i] * coeff;
                            }
                        }
                    }
                    send(*x, dx);
                }
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for img in 0..n0 {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            for i in 0..hw {
                                let dy = g[base + i];
                                db[ch] += dy;
                                dg[ch] += dy * (xd[base + i] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    if wants(*gamma) {
                        send(*gamma, dg);
                    }
                    if wants(*beta) {
                        send(*beta, db);
                    }
                }
            }
            Node::GlobalAvgPool { x } => {
                if wants(*x) {
                    let xs = self.values[x.0].shape();
                    let hw = xs[2] * xs[3];
                    let inv = 1.0 / hw as f64;
                    let mut dx = vec![0.0; self.values[x.0].len()];
                    for (i, gv) in g.iter().enumerate() {
                        let base = i * hw;
                        for v in &mut dx[base..base + hw] {
                            *v = gv * inv;
                        }
                    }
                    send(*x, dx);
                }
            }
            Node::Sum { x } => {
                if wants(*x) {
                    send(*x, vec![g[0]; self.values[x.0].len()]);
                }
            }
            Node::Mean { x } => {
                if wants(*x) {
                    let n = self.values[x.0].len();
                    send(*x, vec![g[0] / n as f64; n]);
                }
            }
            Node::RowSum { x } => {
                if wants(*x) {
                    let c = self.values[x.0].shape()[1];
                    let mut dx = Vec::with_capacity(self.values[x.0].len());
                    for gv in g {
                        dx.extend(core::iter::repeat_n(*gv, c));
                    }
                    send(*x, dx);
                }
            }
            Node::Softmax { x } => {
                if wants(*x) {
                    let c = self.values[idx].shape()[1];
                    let y = self.values[idx].data();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in
                        y.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            dr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    send(*x, dx);
                }
            }
            Node::LogSoftmax { x } => {
                if wants(*x) {
                    let c = self.values[idx].shape()[1];
                    let y = self.values[idx].data(); // log-probabilities
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in
                        y.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for i in 0..c {
                            dr[i] = gr[i] - libm::exp(yr[i]) * gsum;
                        }
                    }
                    send(*x, dx);
                }
            }
        }
    }
}

fn check_bn_shapes(op: &'static str, xs: &[usize], gs: &[usize], bs: &[usize]) -> Result<()> {
    if xs.len() != 4 {
        return Err(Error::BadShape {
            op,
            shape: xs.to_vec(),
            reason: "expected [N,C,H,W]",
        });
    }
    if gs != [xs[1]] || bs != [xs[1]] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: xs.to_vec(),
            rhs: gs.to_vec(),
        });
    }
    Ok(())
}

enum CopyDir {
    /// `small[i] = big[i]` over the leading block.
    Gather,
    /// `big[i] = small[i]` over the leading block (rest untouched).
    Scatter,
}

/// Walks the leading `keep` block of a tensor with shape `big_shape`,
/// copying between the block (row-major in `small`) and the full buffer.
fn copy_lead_block(src: &[f64], big_shape: &[usize], keep: &[usize], dst: &mut [f64], dir: CopyDir) {
    let rank = big_shape.len();
    if rank == 0 {
        match dir {
            CopyDir::Gather => dst[0] = src[0],
            CopyDir::Scatter => dst[0] = src[0],
        }
        return;
    }
    let mut big_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        big_strides[i] = big_strides[i + 1] * big_shape[i + 1];
    }
    let small_len: usize = keep.iter().product();
    let mut idx = vec![0usize; rank];
    for flat_small in 0..small_len {
        // Decode row-major index in the small block.
        let mut rem = flat_small;
        for d in (0..rank).rev() {
            idx[d] = rem % keep[d];
            rem /= keep[d];
        }
        let flat_big: usize = idx.iter().zip(&big_strides).map(|(i, s)| i * s).sum();
        match dir {
            CopyDir::Gather => dst[flat_small] = src[flat_big],
            CopyDir::Scatter => dst[flat_big] = src[flat_small],
        }
    }
}
