//! Layer specifications and sequential networks.

use crate::error::{Error, Result};
use crate::nn::adam::ParamStore;
use crate::nn::graph::{ConvCfg, Graph, NodeId};
use crate::nn::real::Real;
use crate::nn::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Layer kinds available to network definitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    FullyConnected,
    Conv2d,
    DilatedConv2d,
    TransposedConv2d,
    ResidualBlock,
    BatchNorm,
    /// Modifier: reparameterize the previous layer's weight as
    /// `g * v / ||v||`.
    WeightNorm,
    Relu,
    LeakyRelu,
    Tanh,
}

/// Declarative description of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_filters: usize,
    pub out_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub lrelu_slope: f64,
}

impl LayerSpec {
    fn base(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            in_filters: 0,
            out_filters: 0,
            kernel: 1,
            stride: 1,
            dilation: 1,
            lrelu_slope: 0.2,
        }
    }

    pub fn fully_connected(inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            in_filters: inputs,
            out_filters: outputs,
            ..Self::base(LayerKind::FullyConnected)
        }
    }

    pub fn conv2d(in_filters: usize, out_filters: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            in_filters,
            out_filters,
            kernel,
            stride,
            ..Self::base(LayerKind::Conv2d)
        }
    }

    pub fn dilated_conv2d(in_filters: usize, out_filters: usize, kernel: usize, dilation: usize) -> Self {
        LayerSpec {
            in_filters,
            out_filters,
            kernel,
            dilation,
            ..Self::base(LayerKind::DilatedConv2d)
        }
    }

    pub fn transposed_conv2d(in_filters: usize, out_filters: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            in_filters,
            out_filters,
            kernel,
            stride,
            ..Self::base(LayerKind::TransposedConv2d)
        }
    }

    /// Residual block: `x + dilated_conv(relu(x))` with identical input and
    /// output filter counts.
    pub fn residual_block(filters: usize, kernel: usize, dilation: usize) -> Self {
        LayerSpec {
            in_filters: filters,
            out_filters: filters,
            kernel,
            dilation,
            ..Self::base(LayerKind::ResidualBlock)
        }
    }

    pub fn batch_norm(filters: usize) -> Self {
        LayerSpec {
            in_filters: filters,
            out_filters: filters,
            ..Self::base(LayerKind::BatchNorm)
        }
    }

    pub fn weight_norm() -> Self {
        Self::base(LayerKind::WeightNorm)
    }

    pub fn relu() -> Self {
        Self::base(LayerKind::Relu)
    }

    pub fn leaky_relu(slope: f64) -> Self {
        LayerSpec {
            lrelu_slope: slope,
            ..Self::base(LayerKind::LeakyRelu)
        }
    }

    pub fn tanh() -> Self {
        Self::base(LayerKind::Tanh)
    }

    fn validate(&self) -> Result<()> {
        let needs_dims = matches!(
            self.kind,
            LayerKind::FullyConnected
                | LayerKind::Conv2d
                | LayerKind::DilatedConv2d
                | LayerKind::TransposedConv2d
                | LayerKind::ResidualBlock
                | LayerKind::BatchNorm
        );
        if needs_dims && (self.in_filters == 0 || self.out_filters == 0) {
            return Err(Error::Domain(format!("layer {:?} needs positive sizes", self.kind)));
        }
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Domain(format!("layer {:?} needs positive geometry", self.kind)));
        }
        if self.kind == LayerKind::ResidualBlock && self.in_filters != self.out_filters {
            return Err(Error::Domain(
                "residual blocks need identical input/output filter counts".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted layer parameters: a direct weight, or `(v, g)` under weight
/// normalization.
struct WeightParams {
    v: usize,
    g: Option<usize>,
    bias: usize,
}

enum Layer<T> {
    FullyConnected {
        w: WeightParams,
        in_dim: usize,
        out_dim: usize,
    },
    Conv {
        w: WeightParams,
        cfg: ConvCfg,
        transposed: bool,
    },
    Residual {
        w: WeightParams,
        cfg: ConvCfg,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        run_mean: usize,
        run_var: usize,
        eps: T,
    },
    Relu,
    LeakyRelu(T),
    Tanh,
}

/// A sequential network whose parameters live in its own [`ParamStore`].
pub struct Network<T: Real> {
    pub store: ParamStore<T>,
    layers: Vec<Layer<T>>,
    specs: Vec<LayerSpec>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

fn he_normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape.iter().product())
            .map(|_| T::of_f64(dist.sample(rng)))
            .collect(),
    }
}

fn row_norms<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let o = t.shape[0];
    let k: usize = t.shape[1..].iter().product();
    Tensor {
        shape: vec![o],
        data: (0..o)
            .map(|r| {
                t.data[r * k..(r + 1) * k]
                    .iter()
                    .map(|&x| x * x)
                    .sum::<T>()
                    .sqrt()
            })
            .collect(),
    }
}

impl<T: Real> Network<T> {
    /// Instantiate a layer sequence with seeded initialization. A
    /// `WeightNorm` spec reparameterizes the preceding weighted layer;
    /// the gain starts at `||v||` so normalization begins as the identity.
    pub fn build(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut layers: Vec<Layer<T>> = Vec::new();
        for (li, spec) in specs.iter().enumerate() {
            spec.validate()
                .map_err(|e| Error::Domain(format!("layer {li}: {e}")))?;
            let name = |what: &str| format!("l{li}.{what}");
            match spec.kind {
                LayerKind::FullyConnected => {
                    let v = store.add(
                        name("w"),
                        he_normal(rng, &[spec.out_filters, spec.in_filters], spec.in_filters),
                        true,
                    );
                    let bias = store.add(name("b"), Tensor::zeros(&[spec.out_filters]), true);
                    layers.push(Layer::FullyConnected {
                        w: WeightParams { v, g: None, bias },
                        in_dim: spec.in_filters,
                        out_dim: spec.out_filters,
                    });
                }
                LayerKind::Conv2d | LayerKind::DilatedConv2d => {
                    let k = spec.kernel;
                    let fan_in = spec.in_filters * k * k;
                    let v = store.add(
                        name("w"),
                        he_normal(rng, &[spec.out_filters, spec.in_filters, k, k], fan_in),
                        true,
                    );
                    let bias = store.add(name("b"), Tensor::zeros(&[spec.out_filters]), true);
                    layers.push(Layer::Conv {
                        w: WeightParams { v, g: None, bias },
                        cfg: ConvCfg {
                            stride: spec.stride,
                            dilation: spec.dilation,
                            pad: spec.dilation * (k - 1) / 2,
                        },
                        transposed: false,
                    });
                }
                LayerKind::TransposedConv2d => {
                    let k = spec.kernel;
                    let fan_in = spec.in_filters * k * k;
                    let v = store.add(
                        name("w"),
                        he_normal(rng, &[spec.in_filters, spec.out_filters, k, k], fan_in),
                        true,
                    );
                    let bias = store.add(name("b"), Tensor::zeros(&[spec.out_filters]), true);
                    layers.push(Layer::Conv {
                        w: WeightParams { v, g: None, bias },
                        cfg: ConvCfg {
                            stride: spec.stride,
                            dilation: spec.dilation,
                            pad: spec.dilation * (k - 1) / 2,
                        },
                        transposed: true,
                    });
                }
                LayerKind::ResidualBlock => {
                    let k = spec.kernel;
                    let fan_in = spec.in_filters * k * k;
                    let v = store.add(
                        name("w"),
                        he_normal(rng, &[spec.out_filters, spec.in_filters, k, k], fan_in),
                        true,
                    );
                    let bias = store.add(name("b"), Tensor::zeros(&[spec.out_filters]), true);
                    layers.push(Layer::Residual {
                        w: WeightParams { v, g: None, bias },
                        cfg: ConvCfg {
                            stride: 1,
                            dilation: spec.dilation,
                            pad: spec.dilation * (k - 1) / 2,
                        },
                    });
                }
                LayerKind::BatchNorm => {
                    let c = spec.in_filters;
                    let mut ones = Tensor::zeros(&[c]);
                    for x in &mut ones.data {
                        *x = T::one();
                    }
                    let gamma = store.add(name("bn_gamma"), ones.clone(), true);
                    let beta = store.add(name("bn_beta"), Tensor::zeros(&[c]), true);
                    let run_mean = store.add(name("bn_mean"), Tensor::zeros(&[c]), false);
                    let run_var = store.add(name("bn_var"), ones, false);
                    layers.push(Layer::BatchNorm {
                        gamma,
                        beta,
                        run_mean,
                        run_var,
                        eps: T::of_f64(BN_EPS),
                    });
                }
                LayerKind::WeightNorm => {
                    let Some(last) = layers.last_mut() else {
                        return Err(Error::Domain(
                            "weight_norm must follow a weighted layer".into(),
                        ));
                    };
                    let w = match last {
                        Layer::FullyConnected { w, .. } => w,
                        Layer::Conv { w, .. } => w,
                        Layer::Residual { w, .. } => w,
                        _ => {
                            return Err(Error::Domain(
                                "weight_norm must follow a weighted layer".into(),
                            ))
                        }
                    };
                    if w.g.is_some() {
                        return Err(Error::Domain("weight_norm applied twice".into()));
                    }
                    let gains = row_norms(store.value(w.v));
                    let g = store.add(format!("l{li}.wn_g"), gains, true);
                    w.g = Some(g);
                }
                LayerKind::Relu => layers.push(Layer::Relu),
                LayerKind::LeakyRelu => {
                    layers.push(Layer::LeakyRelu(T::of_f64(spec.lrelu_slope)))
                }
                LayerKind::Tanh => layers.push(Layer::Tanh),
            }
        }
        Ok(Network {
            store,
            layers,
            specs: specs.to_vec(),
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    fn weight_node(&self, graph: &mut Graph<T>, w: &WeightParams) -> Result<NodeId> {
        let v = graph.param(&self.store, w.v);
        match w.g {
            Some(g) => {
                let gn = graph.param(&self.store, g);
                graph.weight_norm(v, gn)
            }
            None => Ok(v),
        }
    }

    /// Run the network, recording onto `graph`. Convolutions lift 2-D input
    /// `(N, M)` to `(N, C, s, s)` when `M = C * s * s` for square `s`;
    /// fully-connected layers flatten 4-D input.
    pub fn forward(&self, graph: &mut Graph<T>, input: NodeId, train: bool) -> Result<NodeId> {
        let mut x = input;
        for (li, layer) in self.layers.iter().enumerate() {
            x = self
                .forward_layer(graph, layer, x, train)
                .map_err(|e| Error::Domain(format!("layer {li}: {e}")))?;
        }
        Ok(x)
    }

    fn forward_layer(
        &self,
        graph: &mut Graph<T>,
        layer: &Layer<T>,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        match layer {
            Layer::FullyConnected { w, in_dim, out_dim } => {
                let shape = graph.shape(x).to_vec();
                let n = shape.first().copied().unwrap_or(0);
                let flat: usize = shape[1..].iter().product();
                if flat != *in_dim {
                    return Err(Error::Domain(format!(
                        "fully_connected expects {in_dim} inputs, got {flat}"
                    )));
                }
                let x2 = if shape.len() == 2 {
                    x
                } else {
                    graph.reshape(x, &[n, flat])?
                };
                let wn = self.weight_node(graph, w)?;
                let wt = graph.transpose2d(wn)?;
                let y = graph.matmul(x2, wt)?;
                let b = graph.param(&self.store, w.bias);
                let _ = out_dim;
                graph.row_bias(y, b)
            }
            Layer::Conv { w, cfg, transposed } => {
                let x4 = self.lift_to_4d(graph, x, w, *transposed)?;
                let wn = self.weight_node(graph, w)?;
                let y = if *transposed {
                    graph.conv2d_transpose(x4, wn, *cfg)?
                } else {
                    graph.conv2d(x4, wn, *cfg)?
                };
                let b = graph.param(&self.store, w.bias);
                graph.chan_bias(y, b)
            }
            Layer::Residual { w, cfg } => {
                let x4 = self.lift_to_4d(graph, x, w, false)?;
                let a = graph.relu(x4);
                let wn = self.weight_node(graph, w)?;
                let y = graph.conv2d(a, wn, *cfg)?;
                let b = graph.param(&self.store, w.bias);
                let y = graph.chan_bias(y, b)?;
                graph.add(x4, y)
            }
            Layer::BatchNorm {
                gamma,
                beta,
                run_mean,
                run_var,
                eps,
            } => {
                let g = graph.param(&self.store, *gamma);
                let b = graph.param(&self.store, *beta);
                if train {
                    graph.batch_norm_train(x, g, b, *eps, *run_mean, *run_var)
                } else {
                    let rm = self.store.value(*run_mean).data.clone();
                    let rv = self.store.value(*run_var).data.clone();
                    graph.batch_norm_eval(x, g, b, *eps, &rm, &rv)
                }
            }
            Layer::Relu => Ok(graph.relu(x)),
            Layer::LeakyRelu(slope) => Ok(graph.leaky_relu(x, *slope)),
            Layer::Tanh => Ok(graph.tanh(x)),
        }
    }

    fn lift_to_4d(
        &self,
        graph: &mut Graph<T>,
        x: NodeId,
        w: &WeightParams,
        transposed: bool,
    ) -> Result<NodeId> {
        let shape = graph.shape(x).to_vec();
        match shape.len() {
            4 => Ok(x),
            2 => {
                let wshape = &self.store.value(w.v).shape;
                let c = if transposed { wshape[0] } else { wshape[1] };
                let per = shape[1]
                    .checked_div(c)
                    .filter(|&p| p * c == shape[1])
                    .ok_or_else(|| {
                        Error::Domain(format!(
                            "cannot lift width {} to {} channels",
                            shape[1], c
                        ))
                    })?;
                let s = (per as f64).sqrt().round() as usize;
                if s * s != per {
                    return Err(Error::Domain(format!(
                        "cannot lift width {} to a square {c}-channel map",
                        shape[1]
                    )));
                }
                graph.reshape(x, &[shape[0], c, s, s])
            }
            _ => Err(Error::Domain(format!(
                "convolution expects 2-D or 4-D input, got {shape:?}"
            ))),
        }
    }

    /// Indices of batch-norm running-stat buffers, for checkpoint plumbing.
    pub fn bn_buffers(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm {
                    run_mean, run_var, ..
                } => Some((*run_mean, *run_var)),
                _ => None,
            })
            .collect()
    }

    /// Indices of the effective weight parameters of weighted layers
    /// (`v` when weight-normalized), used by spectral normalization.
    pub fn weight_params(&self) -> Vec<(usize, Option<usize>)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::FullyConnected { w, .. } | Layer::Conv { w, .. } | Layer::Residual { w, .. } => {
                    Some((w.v, w.g))
                }
                _ => None,
            })
            .collect()
    }
}
