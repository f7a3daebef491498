//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each operation appends a node holding its output value; `backward` walks
//! the tape in reverse accumulating gradients. Graphs are built per step and
//! discarded; parameters enter as leaves tied to a [`ParamStore`] slot.

use crate::error::{Error, Result};
use crate::nn::adam::ParamStore;
use crate::nn::real::Real;
use crate::nn::tensor::Tensor;

pub type NodeId = usize;

/// Convolution geometry shared by `conv2d` and `conv2d_transpose`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl Default for ConvCfg {
    fn default() -> Self {
        ConvCfg {
            stride: 1,
            dilation: 1,
            pad: 0,
        }
    }
}

/// Batch statistics captured by a training-mode batch norm, for the caller to
/// fold into the running buffers after the step.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub running_mean_param: usize,
    pub running_var_param: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, T, T),
    MulMask(NodeId, Vec<T>),
    Matmul(NodeId, NodeId),
    Transpose2d(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Tanh(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Log1p(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    RowBias(NodeId, NodeId),
    ChanBias(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        cfg: ConvCfg,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        cfg: ConvCfg,
    },
    WeightNorm {
        v: NodeId,
        g: NodeId,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropyLogits {
        logits: NodeId,
        labels: Vec<usize>,
        softmax: Vec<T>,
    },
    Unfold1d {
        x: NodeId,
        frame: usize,
        hop: usize,
    },
    ReflectPad1d {
        x: NodeId,
        left: usize,
        right: usize,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    /// `(store id, entry index)` for parameter leaves.
    param: Option<(u64, usize)>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bn_updates: Vec<BnBatchStats<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out_dim(input: usize, k: usize, cfg: ConvCfg) -> Option<usize> {
    let span = cfg.dilation * (k - 1) + 1;
    (input + 2 * cfg.pad).checked_sub(span).map(|v| v / cfg.stride + 1)
}

fn convt_out_dim(input: usize, k: usize, cfg: ConvCfg) -> Option<usize> {
    ((input - 1) * cfg.stride + cfg.dilation * (k - 1) + 1).checked_sub(2 * cfg.pad)
}

/// Reflect index with bouncing, shared with the DSP reflect padding.
fn reflect_index(i: isize, len: isize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut j = i.rem_euclid(period);
    if j >= len {
        j = period - j;
    }
    j as usize
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, param: Option<(u64, usize)>) -> NodeId {
        self.nodes.push(Node { op, value, param });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    /// Gradient buffer of a node after `backward`, if it received any.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    /// Batch-norm statistics recorded by training-mode forwards since the
    /// last call.
    pub fn take_bn_updates(&mut self) -> Vec<BnBatchStats<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Smallest distance of any recorded kinked-activation input (relu,
    /// leaky relu, abs) from its kink. Finite-difference gradient oracles
    /// are only valid when this exceeds the probe step.
    pub fn kink_margin(&self) -> Option<T> {
        let mut margin: Option<T> = None;
        for node in &self.nodes {
            let src = match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Abs(x) => *x,
                _ => continue,
            };
            for &v in &self.nodes[src].value.data {
                let d = v.abs();
                margin = Some(match margin {
                    Some(m) if m < d => m,
                    _ => d,
                });
            }
        }
        margin
    }

    // ---- leaves ----

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t, None)
    }

    pub fn param(&mut self, store: &ParamStore<T>, idx: usize) -> NodeId {
        self.push(Op::Leaf, store.value(idx).clone(), Some((store.id(), idx)))
    }

    // ---- elementwise and reductions ----

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Domain(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape.clone();
        Ok(self.push(Op::Add(a, b), Tensor::from_vec(&shape, data), None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a].value.shape.clone();
        Ok(self.push(Op::Sub(a, b), Tensor::from_vec(&shape, data), None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape.clone();
        Ok(self.push(Op::Mul(a, b), Tensor::from_vec(&shape, data), None))
    }

    /// Elementwise `scale * x + offset`.
    pub fn affine(&mut self, x: NodeId, scale: T, offset: T) -> NodeId {
        let t = Tensor {
            shape: self.nodes[x].value.shape.clone(),
            data: self.nodes[x]
                .value
                .data
                .iter()
                .map(|&v| scale * v + offset)
                .collect(),
        };
        self.push(Op::Affine(x, scale, offset), t, None)
    }

    /// Elementwise product with a constant mask.
    pub fn mul_mask(&mut self, x: NodeId, mask: &Tensor<T>) -> Result<NodeId> {
        if self.shape(x) != mask.shape.as_slice() {
            return Err(Error::Domain("mask shape mismatch".into()));
        }
        let t = Tensor {
            shape: mask.shape.clone(),
            data: self.nodes[x]
                .value
                .data
                .iter()
                .zip(&mask.data)
                .map(|(&a, &m)| a * m)
                .collect(),
        };
        Ok(self.push(Op::MulMask(x, mask.data.clone()), t, None))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let t = Tensor {
            shape: self.nodes[x].value.shape.clone(),
            data: self.nodes[x].value.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(op, t, None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn log1p(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.ln_1p(), Op::Log1p(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: T = self.nodes[x].value.data.iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = T::from_usize(self.nodes[x].value.numel()).unwrap();
        let s: T = self.nodes[x].value.data.iter().copied().sum();
        self.push(Op::Mean(x), Tensor::scalar(s / n), None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.nodes[x].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), t, None))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Domain(format!(
                "matmul shapes incompatible: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.nodes[a].value.data,
            &self.nodes[b].value.data,
            T::zero(),
            &mut out,
        );
        Ok(self.push(Op::Matmul(a, b), Tensor::from_vec(&[m, n], out), None))
    }

    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Domain(format!("transpose expects 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[x].value.data;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose2d(x), Tensor::from_vec(&[c, r], out), None))
    }

    /// `x (N, M) + b (M)` broadcast over rows.
    pub fn row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::Domain(format!(
                "row_bias shapes incompatible: {sx:?} + {sb:?}"
            )));
        }
        let m = sx[1];
        let data = self.nodes[x]
            .value
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + self.nodes[b].value.data[i % m])
            .collect();
        Ok(self.push(Op::RowBias(x, b), Tensor::from_vec(&sx, data), None))
    }

    /// `x (N, C, H, W) + b (C)` broadcast over batch and space.
    pub fn chan_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(Error::Domain(format!(
                "chan_bias shapes incompatible: {sx:?} + {sb:?}"
            )));
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let data = self.nodes[x]
            .value
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + self.nodes[b].value.data[(i / hw) % c])
            .collect();
        Ok(self.push(Op::ChanBias(x, b), Tensor::from_vec(&sx, data), None))
    }

    // ---- convolutions ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, cfg: ConvCfg) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Domain(format!(
                "conv2d shapes incompatible: x {sx:?}, w {sw:?}"
            )));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = match (conv_out_dim(h, kh, cfg), conv_out_dim(wd, kw, cfg)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::Domain(format!(
                    "conv2d kernel {kh}x{kw} does not fit input {h}x{wd}"
                )))
            }
        };
        let ckk = c * kh * kw;
        let mut out = vec![T::zero(); n * o * oh * ow];
        let mut cols = vec![T::zero(); ckk * oh * ow];
        for s in 0..n {
            im2col(
                &self.nodes[x].value.data[s * c * h * wd..(s + 1) * c * h * wd],
                c,
                h,
                wd,
                kh,
                kw,
                cfg,
                oh,
                ow,
                &mut cols,
            );
            T::gemm(
                o,
                ckk,
                oh * ow,
                T::one(),
                &self.nodes[w].value.data,
                &cols,
                T::zero(),
                &mut out[s * o * oh * ow..(s + 1) * o * oh * ow],
            );
        }
        Ok(self.push(
            Op::Conv2d { x, w, cfg },
            Tensor::from_vec(&[n, o, oh, ow], out),
            None,
        ))
    }

    pub fn conv2d_transpose(&mut self, x: NodeId, w: NodeId, cfg: ConvCfg) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::Domain(format!(
                "conv2d_transpose shapes incompatible: x {sx:?}, w {sw:?} (weight is I,O,kh,kw)"
            )));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[1], sw[2], sw[3]);
        let (oh, ow) = match (convt_out_dim(h, kh, cfg), convt_out_dim(wd, kw, cfg)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(Error::Domain("conv2d_transpose output would be empty".into())),
        };
        let mut out = vec![T::zero(); n * o * oh * ow];
        let xv = &self.nodes[x].value.data;
        let wv = &self.nodes[w].value.data;
        for s in 0..n {
            for ci in 0..c {
                for iy in 0..h {
                    for ix in 0..wd {
                        let v = xv[((s * c + ci) * h + iy) * wd + ix];
                        if v == T::zero() {
                            continue;
                        }
                        for oc in 0..o {
                            let wbase = ((ci * o + oc) * kh) * kw;
                            let obase = ((s * o + oc) * oh) * ow;
                            for ky in 0..kh {
                                let oy = (iy * cfg.stride + ky * cfg.dilation) as isize
                                    - cfg.pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ox = (ix * cfg.stride + kx * cfg.dilation) as isize
                                        - cfg.pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    out[obase + oy as usize * ow + ox as usize] +=
                                        v * wv[wbase + ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::ConvT2d { x, w, cfg },
            Tensor::from_vec(&[n, o, oh, ow], out),
            None,
        ))
    }

    // ---- normalization ----

    /// Weight normalization `w[o,:] = g[o] * v[o,:] / ||v[o,:]||`; `v`'s
    /// leading dimension indexes output rows.
    pub fn weight_norm(&mut self, v: NodeId, g: NodeId) -> Result<NodeId> {
        let sv = self.shape(v).to_vec();
        let o = sv.first().copied().unwrap_or(0);
        if o == 0 || self.shape(g) != [o] {
            return Err(Error::Domain(format!(
                "weight_norm expects v ({sv:?}) with leading dim matching g {:?}",
                self.shape(g)
            )));
        }
        let k: usize = sv[1..].iter().product();
        let mut out = vec![T::zero(); o * k];
        for row in 0..o {
            let vals = &self.nodes[v].value.data[row * k..(row + 1) * k];
            let norm = vals.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::of_f64(1e-12));
            let scale = self.nodes[g].value.data[row] / norm;
            for i in 0..k {
                out[row * k + i] = vals[i] * scale;
            }
        }
        Ok(self.push(Op::WeightNorm { v, g }, Tensor::from_vec(&sv, out), None))
    }

    /// Channel dims for batch norm: 2-D input is (N, C), 4-D is (N, C, H, W).
    fn bn_dims(&self, x: NodeId) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        match s.len() {
            2 => Ok((s[0], s[1], 1)),
            4 => Ok((s[0], s[1], s[2] * s[3])),
            _ => Err(Error::Domain(format!("batch_norm expects 2-D or 4-D, got {s:?}"))),
        }
    }

    /// Training-mode batch norm using batch statistics. Records the batch
    /// mean/var for the caller to fold into the running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        running_mean_param: usize,
        running_var_param: usize,
    ) -> Result<NodeId> {
        let (n, c, hw) = self.bn_dims(x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Domain("batch_norm gamma/beta must have C entries".into()));
        }
        let m = T::from_usize(n * hw).unwrap();
        let xv = &self.nodes[x].value.data;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for s in 0..n {
                for p in 0..hw {
                    acc += xv[(s * c + ci) * hw + p];
                }
            }
            mean[ci] = acc / m;
            let mut vacc = T::zero();
            for s in 0..n {
                for p in 0..hw {
                    let d = xv[(s * c + ci) * hw + p] - mean[ci];
                    vacc += d * d;
                }
            }
            var[ci] = vacc / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ci in 0..c {
            let (ga, be) = (self.nodes[gamma].value.data[ci], self.nodes[beta].value.data[ci]);
            for s in 0..n {
                for p in 0..hw {
                    let i = (s * c + ci) * hw + p;
                    xhat[i] = (xv[i] - mean[ci]) * inv_std[ci];
                    out[i] = ga * xhat[i] + be;
                }
            }
        }
        self.bn_updates.push(BnBatchStats {
            running_mean_param,
            running_var_param,
            mean,
            var,
        });
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Tensor::from_vec(&shape, out),
            None,
        ))
    }

    /// Inference-mode batch norm: a deterministic affine map from the running
    /// statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<NodeId> {
        let (n, c, hw) = self.bn_dims(x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c {
            return Err(Error::Domain("batch_norm buffers must have C entries".into()));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = &self.nodes[x].value.data;
        let mut out = vec![T::zero(); xv.len()];
        for ci in 0..c {
            let (ga, be) = (self.nodes[gamma].value.data[ci], self.nodes[beta].value.data[ci]);
            for s in 0..n {
                for p in 0..hw {
                    let i = (s * c + ci) * hw + p;
                    out[i] = ga * (xv[i] - running_mean[ci]) * inv_std[ci] + be;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            Tensor::from_vec(&shape, out),
            None,
        ))
    }

    // ---- losses and feature ops ----

    /// Mean negative log-likelihood of `labels` under softmax of `logits`.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Domain(format!(
                "cross_entropy expects (N, K) logits with N labels, got {s:?} / {}",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        let lv = &self.nodes[logits].value.data;
        let mut softmax = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            if labels[i] >= k {
                return Err(Error::Domain(format!("label {} out of range", labels[i])));
            }
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..k {
                let e = (row[j] - mx).exp();
                softmax[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                softmax[i * k + j] /= z;
            }
            loss -= (softmax[i * k + labels[i]]).max(T::of_f64(1e-300)).ln();
        }
        loss /= T::from_usize(n).unwrap();
        Ok(self.push(
            Op::CrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
            Tensor::scalar(loss),
            None,
        ))
    }

    /// Slice a 1-D signal into overlapping frames: `(T, frame)` where
    /// `T = (len - frame) / hop + 1`.
    pub fn unfold1d(&mut self, x: NodeId, frame: usize, hop: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 1 || s[0] < frame || frame == 0 || hop == 0 {
            return Err(Error::Domain(format!(
                "unfold1d needs a 1-D signal of at least {frame} samples"
            )));
        }
        let t = (s[0] - frame) / hop + 1;
        let xv = &self.nodes[x].value.data;
        let mut out = vec![T::zero(); t * frame];
        for ti in 0..t {
            out[ti * frame..(ti + 1) * frame].copy_from_slice(&xv[ti * hop..ti * hop + frame]);
        }
        Ok(self.push(
            Op::Unfold1d { x, frame, hop },
            Tensor::from_vec(&[t, frame], out),
            None,
        ))
    }

    /// Reflect-pad a 1-D signal (edge not repeated).
    pub fn reflect_pad1d(&mut self, x: NodeId, left: usize, right: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::Domain("reflect_pad1d needs a nonempty 1-D signal".into()));
        }
        let len = s[0];
        let xv = &self.nodes[x].value.data;
        let out: Vec<T> = (0..left + len + right)
            .map(|p| xv[reflect_index(p as isize - left as isize, len as isize)])
            .collect();
        Ok(self.push(
            Op::ReflectPad1d { x, left, right },
            Tensor::from_vec(&[left + len + right], out),
            None,
        ))
    }

    // ---- backward ----

    fn add_grad(&mut self, id: NodeId, contrib: &[T]) {
        let slot = &mut self.grads[id];
        match slot {
            Some(buf) => {
                for (b, &c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Accumulate gradients from `root` scaled by `seed`. May be called
    /// repeatedly; gradients add up across calls.
    pub fn backward(&mut self, root: NodeId, seed: &Tensor<T>) -> Result<()> {
        if root >= self.nodes.len() {
            return Err(Error::State("backward called with an unknown node id".into()));
        }
        if seed.shape != self.nodes[root].value.shape {
            return Err(Error::Domain(format!(
                "output grad shape {:?} does not match node shape {:?}",
                seed.shape, self.nodes[root].value.shape
            )));
        }
        // fresh pass buffer so repeated backward calls accumulate cleanly
        let mut pass: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        pass[root] = Some(seed.data.clone());

        for id in (0..=root).rev() {
            let Some(gout) = pass[id].take() else { continue };
            self.add_grad(id, &gout);
            self.backprop_node(id, &gout, &mut pass);
        }
        Ok(())
    }

    fn pass_add(pass: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>) {
        match &mut pass[id] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, id: NodeId, gout: &[T], pass: &mut [Option<Vec<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::pass_add(pass, *a, gout.to_vec());
                Self::pass_add(pass, *b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                Self::pass_add(pass, *a, gout.to_vec());
                Self::pass_add(pass, *b, gout.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value.data;
                let bv = &self.nodes[*b].value.data;
                Self::pass_add(pass, *a, gout.iter().zip(bv).map(|(&g, &v)| g * v).collect());
                Self::pass_add(pass, *b, gout.iter().zip(av).map(|(&g, &v)| g * v).collect());
            }
            Op::Affine(x, scale, _) => {
                Self::pass_add(pass, *x, gout.iter().map(|&g| g * *scale).collect());
            }
            Op::MulMask(x, mask) => {
                Self::pass_add(pass, *x, gout.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = &self.nodes[*a].value.data;
                let bv = &self.nodes[*b].value.data;
                // dA = dC * B^T
                let mut da = vec![T::zero(); m * k];
                gemm_nt(m, n, k, gout, bv, &mut da);
                Self::pass_add(pass, *a, da);
                // dB = A^T * dC
                let mut db = vec![T::zero(); k * n];
                gemm_tn(k, m, n, av, gout, &mut db);
                Self::pass_add(pass, *b, db);
            }
            Op::Transpose2d(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gout[j * r + i];
                    }
                }
                Self::pass_add(pass, *x, dx);
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value.data;
                Self::pass_add(
                    pass,
                    *x,
                    gout.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.nodes[*x].value.data;
                Self::pass_add(
                    pass,
                    *x,
                    gout.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                        .collect(),
                );
            }
            Op::Tanh(x) => {
                let yv = &self.nodes[id].value.data;
                Self::pass_add(
                    pass,
                    *x,
                    gout.iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect(),
                );
            }
            Op::Square(x) => {
                let xv = &self.nodes[*x].value.data;
                let two = T::of_f64(2.0);
                Self::pass_add(
                    pass,
                    *x,
                    gout.iter().zip(xv).map(|(&g, &v)| g * two * v).collect(),
                );
            }
            Op::Abs(x) => {
                let xv = &self.nodes[*x].value.data;
                Self::pass_add(
                    pass,
                    *x,
                    gout.iter()
                        .zip(xv)
                        .map(|(&g, &v)| {
                            if v > T::zero() {
                                g
                            } else if v < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Log1p(x) => {
                let xv = &self.nodes[*x].value.data;
                Self::pass_add(
                    pass,
                    *x,
                    gout.iter().zip(xv).map(|(&g, &v)| g / (T::one() + v)).collect(),
                );
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.numel();
                Self::pass_add(pass, *x, vec![gout[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel();
                let g = gout[0] / T::from_usize(n).unwrap();
                Self::pass_add(pass, *x, vec![g; n]);
            }
            Op::Reshape(x) => {
                Self::pass_add(pass, *x, gout.to_vec());
            }
            Op::RowBias(x, b) => {
                Self::pass_add(pass, *x, gout.to_vec());
                let m = self.shape(*b)[0];
                let mut db = vec![T::zero(); m];
                for (i, &g) in gout.iter().enumerate() {
                    db[i % m] += g;
                }
                Self::pass_add(pass, *b, db);
            }
            Op::ChanBias(x, b) => {
                Self::pass_add(pass, *x, gout.to_vec());
                let sx = self.shape(*x);
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                let mut db = vec![T::zero(); c];
                for (i, &g) in gout.iter().enumerate() {
                    db[(i / hw) % c] += g;
                }
                Self::pass_add(pass, *b, db);
            }
            Op::Conv2d { x, w, cfg } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                let (oh, ow) = (
                    conv_out_dim(h, kh, *cfg).unwrap(),
                    conv_out_dim(wd, kw, *cfg).unwrap(),
                );
                let ckk = c * kh * kw;
                let xv = &self.nodes[*x].value.data;
                let wv = &self.nodes[*w].value.data;
                let mut dw = vec![T::zero(); o * ckk];
                let mut dx = vec![T::zero(); n * c * h * wd];
                let mut cols = vec![T::zero(); ckk * oh * ow];
                let mut dcols = vec![T::zero(); ckk * oh * ow];
                for s in 0..n {
                    let gslice = &gout[s * o * oh * ow..(s + 1) * o * oh * ow];
                    im2col(
                        &xv[s * c * h * wd..(s + 1) * c * h * wd],
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        *cfg,
                        oh,
                        ow,
                        &mut cols,
                    );
                    // dW += g * cols^T
                    gemm_nt_acc(o, oh * ow, ckk, gslice, &cols, &mut dw);
                    // dcols = W^T * g
                    gemm_tn(ckk, o, oh * ow, wv, gslice, &mut dcols);
                    col2im_add(
                        &dcols,
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        *cfg,
                        oh,
                        ow,
                        &mut dx[s * c * h * wd..(s + 1) * c * h * wd],
                    );
                }
                Self::pass_add(pass, *x, dx);
                Self::pass_add(pass, *w, dw);
            }
            Op::ConvT2d { x, w, cfg } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh, kw) = (sw[1], sw[2], sw[3]);
                let (oh, ow) = (
                    convt_out_dim(h, kh, *cfg).unwrap(),
                    convt_out_dim(wd, kw, *cfg).unwrap(),
                );
                let xv = &self.nodes[*x].value.data;
                let wv = &self.nodes[*w].value.data;
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for s in 0..n {
                    for ci in 0..c {
                        for iy in 0..h {
                            for ix in 0..wd {
                                let xi = ((s * c + ci) * h + iy) * wd + ix;
                                let mut acc = T::zero();
                                for oc in 0..o {
                                    let wbase = ((ci * o + oc) * kh) * kw;
                                    let obase = ((s * o + oc) * oh) * ow;
                                    for ky in 0..kh {
                                        let oy = (iy * cfg.stride + ky * cfg.dilation) as isize
                                            - cfg.pad as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ox = (ix * cfg.stride + kx * cfg.dilation) as isize
                                                - cfg.pad as isize;
                                            if ox < 0 || ox >= ow as isize {
                                                continue;
                                            }
                                            let go = gout[obase + oy as usize * ow + ox as usize];
                                            acc += go * wv[wbase + ky * kw + kx];
                                            dw[wbase + ky * kw + kx] += xv[xi] * go;
                                        }
                                    }
                                }
                                dx[xi] += acc;
                            }
                        }
                    }
                }
                Self::pass_add(pass, *x, dx);
                Self::pass_add(pass, *w, dw);
            }
            Op::WeightNorm { v, g } => {
                let sv = self.shape(*v);
                let o = sv[0];
                let k: usize = sv[1..].iter().product();
                let vv = &self.nodes[*v].value.data;
                let gv = &self.nodes[*g].value.data;
                let mut dv = vec![T::zero(); o * k];
                let mut dg = vec![T::zero(); o];
                for row in 0..o {
                    let vals = &vv[row * k..(row + 1) * k];
                    let norm = vals
                        .iter()
                        .map(|&x| x * x)
                        .sum::<T>()
                        .sqrt()
                        .max(T::of_f64(1e-12));
                    let gw = &gout[row * k..(row + 1) * k];
                    let dot: T = gw.iter().zip(vals).map(|(&a, &b)| a * b).sum();
                    dg[row] = dot / norm;
                    let scale = gv[row] / norm;
                    let corr = gv[row] * dot / (norm * norm * norm);
                    for i in 0..k {
                        dv[row * k + i] = scale * gw[i] - corr * vals[i];
                    }
                }
                Self::pass_add(pass, *v, dv);
                Self::pass_add(pass, *g, dg);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, hw) = self.bn_dims(*x).expect("shape validated at build");
                let m = T::from_usize(n * hw).unwrap();
                let gv = &self.nodes[*gamma].value.data;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xhat.len()];
                for ci in 0..c {
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for s in 0..n {
                        for p in 0..hw {
                            let i = (s * c + ci) * hw + p;
                            sum_dy += gout[i];
                            sum_dy_xhat += gout[i] * xhat[i];
                        }
                    }
                    dgamma[ci] = sum_dy_xhat;
                    dbeta[ci] = sum_dy;
                    let k = gv[ci] * inv_std[ci] / m;
                    for s in 0..n {
                        for p in 0..hw {
                            let i = (s * c + ci) * hw + p;
                            dx[i] = k * (m * gout[i] - sum_dy - xhat[i] * sum_dy_xhat);
                        }
                    }
                }
                Self::pass_add(pass, *x, dx);
                Self::pass_add(pass, *gamma, dgamma);
                Self::pass_add(pass, *beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, hw) = self.bn_dims(*x).expect("shape validated at build");
                let gv = &self.nodes[*gamma].value.data;
                let xv = &self.nodes[*x].value.data;
                let mut dx = vec![T::zero(); gout.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ci in 0..c {
                    let k = gv[ci] * inv_std[ci];
                    for s in 0..n {
                        for p in 0..hw {
                            let i = (s * c + ci) * hw + p;
                            dx[i] = gout[i] * k;
                            dgamma[ci] += gout[i] * (xv[i] - mean[ci]) * inv_std[ci];
                            dbeta[ci] += gout[i];
                        }
                    }
                }
                Self::pass_add(pass, *x, dx);
                Self::pass_add(pass, *gamma, dgamma);
                Self::pass_add(pass, *beta, dbeta);
            }
            Op::CrossEntropyLogits {
                logits,
                labels,
                softmax,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let inv_n = T::one() / T::from_usize(n).unwrap();
                let mut dl = vec![T::zero(); n * k];
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if labels[i] == j { T::one() } else { T::zero() };
                        dl[i * k + j] = (softmax[i * k + j] - onehot) * inv_n * gout[0];
                    }
                }
                Self::pass_add(pass, *logits, dl);
            }
            Op::Unfold1d { x, frame, hop } => {
                let len = self.shape(*x)[0];
                let t = (len - frame) / hop + 1;
                let mut dx = vec![T::zero(); len];
                for ti in 0..t {
                    for i in 0..*frame {
                        dx[ti * hop + i] += gout[ti * frame + i];
                    }
                }
                Self::pass_add(pass, *x, dx);
            }
            Op::ReflectPad1d { x, left, right } => {
                let len = self.shape(*x)[0];
                let mut dx = vec![T::zero(); len];
                for p in 0..(*left + len + *right) {
                    dx[reflect_index(p as isize - *left as isize, len as isize)] += gout[p];
                }
                Self::pass_add(pass, *x, dx);
            }
        }
    }

    /// Fold accumulated leaf gradients into the slots of `store`, skipping
    /// leaves tied to other stores.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some((sid, pidx)), Some(grad)) = (node.param, self.grads[id].as_ref()) {
                if sid == store.id() {
                    store.add_grad(pidx, grad);
                }
            }
        }
    }

    /// Extract the gradients belonging to `store` as `(entry index, grad)`
    /// pairs, for callers that defer the store mutation.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<(usize, Vec<T>)> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some((sid, pidx)), Some(grad)) = (node.param, self.grads[id].as_ref()) {
                if sid == store.id() {
                    out.push((pidx, grad.clone()));
                }
            }
        }
        out
    }
}

// ---- GEMM helpers on plain slices ----

/// c(m x n) = a(m x k) * b(n x k)^T
fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_strided(m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, T::zero(), c);
}

/// c(m x n) += a(m x k) * b(n x k)^T
fn gemm_nt_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_strided(m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, T::one(), c);
}

/// c(m x n) = a(k x m)^T * b(k x n)
fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_strided(m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, T::zero(), c);
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: ConvCfg,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let mut row = 0usize;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + ky * cfg.dilation) as isize - cfg.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..ow {
                            cols[base + oy * ow + ox] = T::zero();
                        }
                        continue;
                    }
                    let xrow = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * cfg.stride + kx * cfg.dilation) as isize - cfg.pad as isize;
                        cols[base + oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: ConvCfg,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let mut row = 0usize;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + ky * cfg.dilation) as isize - cfg.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * cfg.stride + kx * cfg.dilation) as isize - cfg.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci * h + iy as usize) * w + ix as usize] += cols[base + oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}
