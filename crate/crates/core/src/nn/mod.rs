//! Minimal tensor and reverse-mode autodiff engine with the layer set needed
//! by the GAN and the toy victim, Adam, weight/spectral normalization, and
//! portable checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod real;
pub mod spectral;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, ParamStore};
pub use checkpoint::Checkpoint;
pub use graph::{BnBatchStats, ConvCfg, Graph, NodeId};
pub use layers::{LayerKind, LayerSpec, Network, BN_EPS, BN_MOMENTUM};
pub use real::Real;
pub use spectral::spectral_normalize;
pub use tensor::Tensor;
