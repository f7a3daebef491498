//! Generator + five-critic GAN trained under the Sobolev IPM Lagrangian,
//! with orthogonal regularization, spectral weight constraints, and an
//! optional Hölder-bound hinge on the gradient-norm constraint (the star
//! variant).

mod train;

pub use train::{train, TrainOptions, TrainOutcome, TrainingLog};

use crate::error::{Error, Result};
use crate::nn::{
    spectral_normalize, AdamConfig, Checkpoint, Graph, LayerSpec, Network, NodeId, Tensor,
};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::path::Path;

pub const N_DISCRIMINATORS: usize = 5;
/// Paper-scale filter baselines; the width factor divides these.
const BASE_GEN_FILTERS: usize = 16;
const BASE_DISC_FILTERS: usize = 4;

/// Hyperparameters of the Sobolev GAN.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SobolevConfig {
    /// Latent dimension.
    pub d_z: usize,
    /// Interpolation scale for the mixture samples.
    pub alpha_theta: f64,
    /// Augmented-Lagrangian penalty weight (rho > 0).
    pub rho: f64,
    /// Initial Lagrange multiplier per discriminator.
    pub lagrange_init: f64,
    /// Hölder exponent (eta >= 1) of the gradient-bound estimate.
    pub eta: f64,
    /// Initial Hölder bound; refined per batch by exponential moving average.
    pub c_upsilon: f64,
    /// EMA decay for the Hölder bound.
    pub c_upsilon_decay: f64,
    /// Orthogonal-regularization coefficient.
    pub varpi: f64,
    /// Random directions per sample in the gradient-norm estimator.
    pub n_dirs: usize,
    /// Probe step as a fraction of the batch RMS.
    pub eps_scale: f64,
    /// Initial expected generator steps per iteration.
    pub gen_steps: f64,
    /// Per-epoch decay of the expected generator steps.
    pub step_decay: f64,
    /// Critic order bookkeeping (fixed).
    pub k_s: usize,
    /// Sobolev exponent (fixed).
    pub p_s: usize,
    /// Evaluate the gradient norms on real and fake batches instead of the
    /// interpolated batch.
    pub omega_two_batch: bool,
    /// Optional symmetric clamp on critic outputs.
    pub critic_clamp: Option<f64>,
    /// Apply spectral normalization to discriminator weights after each step.
    pub spectral_norm: bool,
    pub batch_size: usize,
    pub width_factor: usize,
    pub square_size: usize,
    pub adam: AdamConfig,
    /// Iterations between mode-coverage evaluations and rollback snapshots.
    pub eval_interval: usize,
    /// Latent draws per mode evaluation.
    pub mode_samples: usize,
    /// Cosine-similarity threshold for mode assignment.
    pub mode_threshold: f64,
    /// Trailing window of |gap| medians for the instability detector.
    pub instability_window: usize,
    /// Moving-average width for the instability detector.
    pub instability_ma: usize,
    /// Trip when the moving average exceeds this multiple of the median.
    pub instability_factor: f64,
}

impl Default for SobolevConfig {
    fn default() -> Self {
        SobolevConfig {
            d_z: 64,
            alpha_theta: 0.9,
            rho: 1.0,
            lagrange_init: 0.0,
            eta: 2.0,
            c_upsilon: 1.0,
            c_upsilon_decay: 0.99,
            varpi: 1e-5,
            n_dirs: 4,
            eps_scale: 1e-3,
            gen_steps: 2.0,
            step_decay: 0.99,
            k_s: 1,
            p_s: 2,
            omega_two_batch: false,
            critic_clamp: None,
            spectral_norm: true,
            batch_size: 8,
            width_factor: 4,
            square_size: 64,
            adam: AdamConfig::default(),
            eval_interval: 250,
            mode_samples: 256,
            mode_threshold: 0.85,
            instability_window: 500,
            instability_ma: 20,
            instability_factor: 10.0,
        }
    }
}

impl SobolevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho <= 0.0 {
            return Err(Error::Config("rho must be positive".into()));
        }
        if !(self.alpha_theta > 0.0 && self.alpha_theta <= 1.0) {
            return Err(Error::Config("alpha_theta must be in (0, 1]".into()));
        }
        if self.c_upsilon <= 0.0 {
            return Err(Error::Config("c_upsilon must be positive".into()));
        }
        if self.eta < 1.0 {
            return Err(Error::Config("eta must be at least 1".into()));
        }
        if self.varpi < 0.0 {
            return Err(Error::Config("varpi must be nonnegative".into()));
        }
        if self.n_dirs == 0 || self.batch_size == 0 || self.d_z == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.k_s != 1 || self.p_s != 2 {
            return Err(Error::Config("only k_s = 1, p_s = 2 is implemented".into()));
        }
        Ok(())
    }

    fn gen_filters(&self) -> usize {
        (BASE_GEN_FILTERS / self.width_factor).max(1)
    }

    fn disc_filters(&self, i: usize) -> usize {
        ((BASE_DISC_FILTERS << i) / self.width_factor).max(1)
    }
}

/// Generator layer sequence: a fully connected lift to the full spectrogram
/// resolution, two 5x5 convolution blocks, three dilated residual blocks,
/// and a transposed-convolution output head.
fn generator_specs(cfg: &SobolevConfig) -> Vec<LayerSpec> {
    let s = cfg.square_size;
    let gf = cfg.gen_filters();
    vec![
        LayerSpec::fully_connected(cfg.d_z, s * s),
        LayerSpec::batch_norm(s * s),
        LayerSpec::relu(),
        LayerSpec::conv2d(1, gf, 5, 1),
        LayerSpec::weight_norm(),
        LayerSpec::relu(),
        LayerSpec::conv2d(gf, gf, 5, 1),
        LayerSpec::weight_norm(),
        LayerSpec::relu(),
        LayerSpec::residual_block(gf, 3, 1),
        LayerSpec::weight_norm(),
        LayerSpec::residual_block(gf, 3, 2),
        LayerSpec::weight_norm(),
        LayerSpec::residual_block(gf, 3, 4),
        LayerSpec::weight_norm(),
        LayerSpec::transposed_conv2d(gf, 1, 5, 1),
        LayerSpec::weight_norm(),
        LayerSpec::tanh(),
    ]
}

/// Discriminator `i`: plain strided conv stack with leaky ReLU and a scalar
/// critic head. First-layer filter counts escalate by a factor of two
/// across the five critics.
fn discriminator_specs(cfg: &SobolevConfig, i: usize) -> Vec<LayerSpec> {
    let f = cfg.disc_filters(i);
    let s = cfg.square_size;
    let head = 4 * f * (s / 16) * (s / 16);
    vec![
        LayerSpec::conv2d(1, f, 5, 2),
        LayerSpec::weight_norm(),
        LayerSpec::leaky_relu(0.2),
        LayerSpec::conv2d(f, 2 * f, 5, 2),
        LayerSpec::weight_norm(),
        LayerSpec::leaky_relu(0.2),
        LayerSpec::conv2d(2 * f, 4 * f, 5, 2),
        LayerSpec::weight_norm(),
        LayerSpec::leaky_relu(0.2),
        LayerSpec::conv2d(4 * f, 4 * f, 5, 2),
        LayerSpec::weight_norm(),
        LayerSpec::leaky_relu(0.2),
        LayerSpec::fully_connected(head, 1),
        LayerSpec::weight_norm(),
    ]
}

/// Generator plus five critics with Sobolev/Lagrangian training state.
pub struct GanModel {
    pub config: SobolevConfig,
    pub generator: Network<f32>,
    pub discriminators: Vec<Network<f32>>,
    /// Lagrange multipliers, one per critic; clamped nonnegative.
    pub lagrange: Vec<f32>,
    /// EMA of the per-batch Hölder bound estimate.
    pub c_upsilon_ema: f32,
    /// Persistent power-iteration vectors per critic and weighted layer.
    sn_state: Vec<Vec<Vec<f32>>>,
    pub seed: u64,
    pub iteration: u64,
}

impl GanModel {
    pub fn new(config: SobolevConfig, seed: u64) -> Result<GanModel> {
        config.validate()?;
        let generator = Network::build(&generator_specs(&config), &mut rng::stream(seed, "gan.gen", 0))?;
        let mut discriminators = Vec::with_capacity(N_DISCRIMINATORS);
        for i in 0..N_DISCRIMINATORS {
            discriminators.push(Network::build(
                &discriminator_specs(&config, i),
                &mut rng::stream(seed, "gan.disc", i as u64),
            )?);
        }
        let sn_state = discriminators
            .iter()
            .map(|d| vec![Vec::new(); d.weight_params().len()])
            .collect();
        Ok(GanModel {
            lagrange: vec![config.lagrange_init as f32; N_DISCRIMINATORS],
            c_upsilon_ema: config.c_upsilon as f32,
            sn_state,
            config,
            generator,
            discriminators,
            seed,
            iteration: 0,
        })
    }

    /// Run the generator on a latent batch `(N, d_z)`, mapping the tanh
    /// output to `[0, 1]`. Returns the output node `(N, 1, s, s)`.
    pub fn generator_forward(
        &self,
        graph: &mut Graph<f32>,
        z: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let t = self.generator.forward(graph, z, train)?;
        Ok(graph.affine(t, 0.5, 0.5))
    }

    /// Generate spectrograms for a latent batch without keeping the graph.
    pub fn generate(&self, z: &Tensor<f32>, train: bool) -> Result<Tensor<f32>> {
        let mut graph = Graph::new();
        let zn = graph.input(z.clone());
        let out = self.generator_forward(&mut graph, zn, train)?;
        Ok(graph.value(out).clone())
    }

    /// Critic forward with the optional symmetric output clamp.
    pub fn critic_forward(
        &self,
        graph: &mut Graph<f32>,
        disc: usize,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let scores = self.discriminators[disc].forward(graph, x, train)?;
        Ok(match self.config.critic_clamp {
            Some(c) => clamp_node(graph, scores, c as f32),
            None => scores,
        })
    }

    /// Draw a standard-normal latent batch from a derived stream.
    pub fn sample_latents(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[n, self.config.d_z]);
        for v in &mut t.data {
            *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) as f32;
        }
        t
    }

    /// Fold a fresh per-batch Hölder bound estimate into the EMA.
    pub fn update_c_upsilon(&mut self, c_batch: f32) {
        if c_batch.is_finite() && c_batch > 0.0 {
            let d = self.config.c_upsilon_decay as f32;
            self.c_upsilon_ema = d * self.c_upsilon_ema + (1.0 - d) * c_batch;
        }
    }

    /// Renormalize discriminator weights so their largest singular value is
    /// approximately one (one power iteration per step, persistent vectors).
    pub fn enforce_spectral_norm(&mut self, disc: usize) {
        if !self.config.spectral_norm {
            return;
        }
        let weights = self.discriminators[disc].weight_params();
        for (j, (v_idx, g_idx)) in weights.into_iter().enumerate() {
            let u = &mut self.sn_state[disc][j];
            let store = &mut self.discriminators[disc].store;
            match g_idx {
                Some(g) => {
                    // effective weight is g * v / ||v||; scale the gains
                    let v = store.value(v_idx);
                    let o = v.shape[0];
                    let k: usize = v.shape[1..].iter().product();
                    let gv = store.value(g).data.clone();
                    let mut eff = v.clone();
                    for row in 0..o {
                        let norm = eff.data[row * k..(row + 1) * k]
                            .iter()
                            .map(|&x| x * x)
                            .sum::<f32>()
                            .sqrt()
                            .max(1e-12);
                        let s = gv[row] / norm;
                        for x in &mut eff.data[row * k..(row + 1) * k] {
                            *x *= s;
                        }
                    }
                    let normed = spectral_normalize(&eff, 1, u);
                    let sigma = if normed.data.iter().any(|x| *x != 0.0) {
                        // recover sigma from one representative entry
                        let mut s = 0.0f32;
                        for (a, b) in eff.data.iter().zip(&normed.data) {
                            if b.abs() > 1e-20 {
                                s = a / b;
                                break;
                            }
                        }
                        s
                    } else {
                        1.0
                    };
                    if sigma > 1e-6 && sigma.is_finite() {
                        for x in &mut store.value_mut(g).data {
                            *x /= sigma;
                        }
                    }
                }
                None => {
                    let normed = spectral_normalize(store.value(v_idx), 1, u);
                    *store.value_mut(v_idx) = normed;
                }
            }
        }
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    /// Serialize the full model (networks, optimizer state, Lagrangian
    /// state, spectral vectors, config echo).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.add_store("gen", &self.generator.store);
        for (i, d) in self.discriminators.iter().enumerate() {
            ck.add_store(&format!("disc{i}"), &d.store);
        }
        ck.add_tensor("lagrange", &[self.lagrange.len()], self.lagrange.clone());
        ck.add_tensor("c_upsilon_ema", &[1], vec![self.c_upsilon_ema]);
        for (i, per_disc) in self.sn_state.iter().enumerate() {
            for (j, u) in per_disc.iter().enumerate() {
                ck.add_tensor(format!("sn_u.{i}.{j}"), &[u.len()], u.clone());
            }
        }
        ck.add_u64("meta.rng_seed", self.seed);
        ck.add_u64("meta.iteration", self.iteration);
        ck.add_text("meta.config", &self.config_json());
        ck
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    /// Restore a model from a checkpoint previously written by [`save`].
    pub fn load(path: impl AsRef<Path>) -> Result<GanModel> {
        let ck = Checkpoint::read(path)?;
        Self::from_checkpoint(&ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<GanModel> {
        let cfg_text = ck
            .get_text("meta.config")
            .ok_or_else(|| Error::State("checkpoint missing config echo".into()))?;
        let config: SobolevConfig = serde_json::from_str(&cfg_text)
            .map_err(|e| Error::Config(format!("bad config echo: {e}")))?;
        let seed = ck
            .get_u64("meta.rng_seed")
            .ok_or_else(|| Error::State("checkpoint missing rng seed".into()))?;
        let mut model = GanModel::new(config, seed)?;
        ck.load_store("gen", &mut model.generator.store)?;
        for (i, d) in model.discriminators.iter_mut().enumerate() {
            ck.load_store(&format!("disc{i}"), &mut d.store)?;
        }
        if let Some((_, lag)) = ck.tensor("lagrange") {
            model.lagrange = lag.to_vec();
        }
        if let Some((_, c)) = ck.tensor("c_upsilon_ema") {
            model.c_upsilon_ema = c[0];
        }
        for (i, per_disc) in model.sn_state.iter_mut().enumerate() {
            for (j, u) in per_disc.iter_mut().enumerate() {
                if let Some((_, data)) = ck.tensor(&format!("sn_u.{i}.{j}")) {
                    *u = data.to_vec();
                }
            }
        }
        model.iteration = ck.get_u64("meta.iteration").unwrap_or(0);
        Ok(model)
    }
}

/// Symmetric clamp `[-c, c]` built from relu pieces (unit gradient inside,
/// zero outside).
fn clamp_node(graph: &mut Graph<f32>, x: NodeId, c: f32) -> NodeId {
    let over = graph.affine(x, 1.0, -c);
    let over = graph.relu(over);
    let under = graph.affine(x, -1.0, -c);
    let under = graph.relu(under);
    let t = graph.sub(x, over).expect("same shape");
    graph.add(t, under).expect("same shape")
}

/// Mixture samples `x~_i = alpha * (u_i * real_i + (1 - u_i) * fake_i)` with
/// per-sample `u_i ~ U[0, 1]`.
pub fn interpolate_with(real: &Tensor<f32>, fake: &Tensor<f32>, alpha: f64, u: &[f32]) -> Tensor<f32> {
    assert_eq!(real.shape, fake.shape, "interpolation batch shapes differ");
    let n = real.shape[0];
    assert_eq!(u.len(), n);
    let per = real.numel() / n;
    let mut out = Tensor::zeros(&real.shape);
    let a = alpha as f32;
    for i in 0..n {
        let ui = u[i];
        for p in 0..per {
            let idx = i * per + p;
            out.data[idx] = a * (ui * real.data[idx] + (1.0 - ui) * fake.data[idx]);
        }
    }
    out
}

pub fn interpolate_samples(
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let n = real.shape[0];
    let u: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    interpolate_with(real, fake, alpha, &u)
}

/// Gradient-norm estimate of one critic over a batch.
pub struct OmegaEstimate {
    /// Scalar node: `(1 / 2N) * sum_i ||grad f(x_i)||^2` (estimated).
    pub node: NodeId,
    /// Per-sample squared-gradient-norm estimates (values, not nodes).
    pub per_sample: Vec<f32>,
}

/// Random-direction finite-difference estimate of a critic's mean squared
/// input-gradient norm over `batch`, differentiable through the critic
/// evaluations.
///
/// Per sample: `(d / n_dirs) * sum_k ((f(x + eps u_k) - f(x - eps u_k)) /
/// (2 eps))^2` with `u_k` uniform unit directions; the returned node is
/// `1/(2N)` times the per-sample sum.
pub fn estimate_omega_with<F>(
    graph: &mut Graph<f32>,
    mut critic: F,
    batch: &Tensor<f32>,
    n_dirs: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<OmegaEstimate>
where
    F: FnMut(&mut Graph<f32>, NodeId) -> Result<NodeId>,
{
    let n = batch.shape[0];
    let d: usize = batch.shape[1..].iter().product();
    if n == 0 || d == 0 || eps <= 0.0 || n_dirs == 0 {
        return Err(Error::Domain("estimate_omega needs a nonempty batch and eps > 0".into()));
    }
    let eps = eps as f32;
    let normal = Normal::new(0.0f64, 1.0).unwrap();

    let mut acc: Option<NodeId> = None;
    for _ in 0..n_dirs {
        // unit direction per sample
        let mut up = batch.clone();
        let mut um = batch.clone();
        for i in 0..n {
            let mut dir: Vec<f32> = (0..d).map(|_| normal.sample(rng) as f32).collect();
            let norm = dir.iter().map(|&x| x * x).sum::<f32>().sqrt().max(1e-12);
            for x in &mut dir {
                *x /= norm;
            }
            for p in 0..d {
                up.data[i * d + p] = batch.data[i * d + p] + eps * dir[p];
                um.data[i * d + p] = batch.data[i * d + p] - eps * dir[p];
            }
        }
        let up_n = graph.input(up);
        let um_n = graph.input(um);
        let fp = critic(graph, up_n)?;
        let fm = critic(graph, um_n)?;
        let diff = graph.sub(fp, fm)?;
        let slope = graph.affine(diff, 1.0 / (2.0 * eps), 0.0);
        let sq = graph.square(slope);
        acc = Some(match acc {
            Some(a) => graph.add(a, sq)?,
            None => sq,
        });
    }
    let acc = acc.expect("n_dirs >= 1");
    let scale = d as f32 / n_dirs as f32;
    let per_sample: Vec<f32> = graph.value(acc).data.iter().map(|v| v * scale).collect();
    let total = graph.sum(acc);
    let node = graph.affine(total, scale / (2.0 * n as f32), 0.0);
    Ok(OmegaEstimate { node, per_sample })
}

/// [`estimate_omega_with`] against one of the model's critics.
pub fn estimate_omega(
    graph: &mut Graph<f32>,
    model: &GanModel,
    disc: usize,
    batch: &Tensor<f32>,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<OmegaEstimate> {
    estimate_omega_with(
        graph,
        |g, x| model.critic_forward(g, disc, x, false),
        batch,
        model.config.n_dirs,
        eps,
        rng,
    )
}

/// Critic gap `E(f, G) = mean f(fake) - mean f(real)` for an arbitrary
/// critic.
pub fn critic_gap_with<F>(
    graph: &mut Graph<f32>,
    mut critic: F,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
) -> Result<NodeId>
where
    F: FnMut(&mut Graph<f32>, NodeId) -> Result<NodeId>,
{
    let rn = graph.input(real.clone());
    let fn_ = graph.input(fake.clone());
    let fr = critic(graph, rn)?;
    let ff = critic(graph, fn_)?;
    let mr = graph.mean(fr);
    let mf = graph.mean(ff);
    graph.sub(mf, mr)
}

/// Critic gap against one of the model's critics.
pub fn critic_gap(
    graph: &mut Graph<f32>,
    model: &GanModel,
    disc: usize,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
) -> Result<NodeId> {
    critic_gap_with(graph, |g, x| model.critic_forward(g, disc, x, false), real, fake)
}

/// Orthogonal regularization over a set of 2-D weights:
/// `varpi * sum_w ||w^T w (x) (1 - I)||_F^2`.
pub fn orthogonal_reg(weights: &[Tensor<f32>], varpi: f64) -> f64 {
    let mut total = 0.0f64;
    for w in weights {
        assert_eq!(w.shape.len(), 2, "orthogonal_reg expects 2-D weights");
        let (r, c) = (w.shape[0], w.shape[1]);
        for i in 0..c {
            for j in 0..c {
                if i == j {
                    continue;
                }
                let mut dot = 0.0f64;
                for k in 0..r {
                    dot += f64::from(w.data[k * c + i]) * f64::from(w.data[k * c + j]);
                }
                total += dot * dot;
            }
        }
    }
    varpi * total
}

/// In-graph orthogonal regularization over a critic's weighted layers.
/// Weights are reshaped with filters as columns so the Gram matrix stays
/// `filters x filters`.
pub fn orthogonal_reg_node(
    graph: &mut Graph<f32>,
    model: &GanModel,
    disc: usize,
    varpi: f64,
) -> Result<NodeId> {
    let net = &model.discriminators[disc];
    let mut acc: Option<NodeId> = None;
    for (v_idx, g_idx) in net.weight_params() {
        let v = graph.param(&net.store, v_idx);
        let w = match g_idx {
            Some(g) => {
                let gn = graph.param(&net.store, g);
                graph.weight_norm(v, gn)?
            }
            None => v,
        };
        let shape = graph.shape(w).to_vec();
        let o = shape[0];
        let k: usize = shape[1..].iter().product();
        // filters as columns of the (k, o) view, so the Gram stays (o, o)
        let w2 = graph.reshape(w, &[o, k])?;
        let wt = graph.transpose2d(w2)?;
        let gram = graph.matmul(w2, wt)?;
        let mut mask = Tensor::zeros(&[o, o]);
        for i in 0..o {
            for j in 0..o {
                mask.data[i * o + j] = if i == j { 0.0 } else { 1.0 };
            }
        }
        let masked = graph.mul_mask(gram, &mask)?;
        let sq = graph.square(masked);
        let s = graph.sum(sq);
        acc = Some(match acc {
            Some(a) => graph.add(a, s)?,
            None => s,
        });
    }
    let acc = acc.ok_or_else(|| Error::Domain("critic has no weighted layers".into()))?;
    Ok(graph.affine(acc, varpi as f32, 0.0))
}

/// The augmented-Lagrangian penalty `lagrange * (target - omega) - (rho/2) *
/// (omega - target)^2`.
pub fn lagrangian_penalty(omega: f64, target: f64, lagrange: f64, rho: f64) -> f64 {
    lagrange * (target - omega) - 0.5 * rho * (omega - target) * (omega - target)
}

/// Everything the training loop needs from one discriminator objective
/// evaluation.
pub struct DiscObjective {
    pub loss: NodeId,
    pub gap: f32,
    pub omega_hat: f32,
    /// Fresh per-batch Hölder bound estimate (star variant only).
    pub c_upsilon_batch: Option<f32>,
    /// Whether the star hinge was inactive for this batch.
    pub hinge_inactive: bool,
}

/// Hölder product bound from per-sample squared-gradient estimates and the
/// 0.5/0.5 mixture weights: `||g||_eta * ||(0.5, 0.5)||_eta'`.
pub fn holder_bound(per_sample: &[f32], eta: f64) -> f32 {
    if per_sample.is_empty() {
        return f32::INFINITY;
    }
    let n = per_sample.len() as f64;
    let grad_norm = (per_sample
        .iter()
        .map(|&g| f64::from(g).abs().powf(eta))
        .sum::<f64>()
        / n)
        .powf(1.0 / eta);
    let eta_conj = if eta <= 1.0 { f64::INFINITY } else { eta / (eta - 1.0) };
    let mu_norm = if eta_conj.is_infinite() {
        0.5
    } else {
        (2.0 * 0.5f64.powf(eta_conj)).powf(1.0 / eta_conj)
    };
    (grad_norm * mu_norm) as f32
}

/// Build discriminator `i`'s loss (to minimize):
/// `-[E + lagrange (target - omega) - rho/2 (omega - target)^2] + R`.
///
/// Plain variant: `target = 1`, always active. Star variant: the Lagrangian
/// terms apply only while `omega > c_upsilon` (one-sided hinge at the
/// Hölder bound) with `target = min(1, c_upsilon)`.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_objective(
    graph: &mut Graph<f32>,
    model: &GanModel,
    disc: usize,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    x_tilde: &Tensor<f32>,
    star: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DiscObjective> {
    if disc >= N_DISCRIMINATORS {
        return Err(Error::Domain(format!("discriminator index {disc} out of range")));
    }
    let cfg = &model.config;
    let gap_node = critic_gap(graph, model, disc, real, fake)?;

    let rms = {
        let s: f64 = x_tilde.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        (s / x_tilde.numel() as f64).sqrt()
    };
    let eps = (cfg.eps_scale * rms).max(1e-6);

    let (omega, per_sample) = if cfg.omega_two_batch {
        let half_r = estimate_omega(graph, model, disc, real, eps, rng)?;
        let half_f = estimate_omega(graph, model, disc, fake, eps, rng)?;
        let node = graph.add(half_r.node, half_f.node)?;
        let mut per = half_r.per_sample;
        per.extend(half_f.per_sample);
        (node, per)
    } else {
        let est = estimate_omega(graph, model, disc, x_tilde, eps, rng)?;
        (est.node, est.per_sample)
    };
    let omega_value = graph.value(omega).item();

    let reg = orthogonal_reg_node(graph, model, disc, cfg.varpi)?;

    let (c_batch, hinge_inactive, target) = if star {
        let cb = holder_bound(&per_sample, cfg.eta);
        let c_now = model.c_upsilon_ema;
        let inactive = omega_value <= c_now;
        (Some(cb), inactive, f64::min(1.0, f64::from(c_now)))
    } else {
        (None, false, 1.0)
    };

    let loss = if hinge_inactive {
        // constraint satisfied under the Hölder bound: train the plain IPM
        // gap with regularization only (no rho or lagrange dependence)
        let neg = graph.affine(gap_node, -1.0, 0.0);
        graph.add(neg, reg)?
    } else {
        let t = target as f32;
        let lag = model.lagrange[disc];
        // lagrange * (t - omega)
        let lin = graph.affine(omega, -lag, lag * t);
        // (rho/2) * (omega - t)^2
        let resid = graph.affine(omega, 1.0, -t);
        let quad_raw = graph.square(resid);
        let quad = graph.affine(quad_raw, 0.5 * cfg.rho as f32, 0.0);
        let inner = graph.add(gap_node, lin)?;
        let inner = graph.sub(inner, quad)?;
        let neg = graph.affine(inner, -1.0, 0.0);
        graph.add(neg, reg)?
    };

    let loss_value = graph.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Training(format!(
            "discriminator {disc} produced a non-finite loss"
        )));
    }

    Ok(DiscObjective {
        loss,
        gap: graph.value(gap_node).item(),
        omega_hat: omega_value,
        c_upsilon_batch: c_batch,
        hinge_inactive,
    })
}

/// Lagrange multiplier update `l <- max(0, l - rho (omega - target))`.
/// Star variant: skipped while the hinge is inactive, with
/// `target = min(1, c_upsilon)` otherwise.
pub fn lagrange_update(model: &mut GanModel, disc: usize, omega_hat: f64, star: bool) {
    let (target, active) = if star {
        let c = f64::from(model.c_upsilon_ema);
        (f64::min(1.0, c), omega_hat > c)
    } else {
        (1.0, true)
    };
    if !active {
        return;
    }
    let rho = model.config.rho;
    let next = f64::from(model.lagrange[disc]) - rho * (omega_hat - target);
    model.lagrange[disc] = next.max(0.0) as f32;
}

/// Generator loss: mean over the five critics of `-(1/N) sum f_i(G(z))`.
/// Discriminator parameters participate as constants (their gradients are
/// simply not harvested).
pub fn generator_objective(
    graph: &mut Graph<f32>,
    model: &GanModel,
    z: &Tensor<f32>,
) -> Result<NodeId> {
    let zn = graph.input(z.clone());
    let fake = model.generator_forward(graph, zn, true)?;
    generator_loss_over(graph, model, fake)
}

/// Generator loss given an already-built fake batch node.
pub fn generator_loss_over(
    graph: &mut Graph<f32>,
    model: &GanModel,
    fake: NodeId,
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for i in 0..model.discriminators.len() {
        let f = model.critic_forward(graph, i, fake, false)?;
        let m = graph.mean(f);
        acc = Some(match acc {
            Some(a) => graph.add(a, m)?,
            None => m,
        });
    }
    let acc = acc.expect("at least one critic");
    Ok(graph.affine(acc, -1.0 / model.discriminators.len() as f32, 0.0))
}

/// Count how many template modes the generator covers: draw latents,
/// generate, assign each sample to its nearest centroid by cosine
/// similarity when the similarity clears `threshold`.
pub fn count_modes(
    model: &GanModel,
    centroids: &[Tensor<f32>],
    n_samples: usize,
    threshold: f64,
    seed: u64,
) -> Result<usize> {
    if centroids.is_empty() {
        return Ok(0);
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Domain("mode threshold must be in (0, 1)".into()));
    }
    let mut rng = rng::stream(seed, "gan.modes", 0);
    let mut hit = vec![false; centroids.len()];
    let batch = model.config.batch_size.max(1);
    let mut remaining = n_samples;
    let cnorm: Vec<f64> = centroids
        .iter()
        .map(|c| c.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .collect();
    while remaining > 0 {
        let n = remaining.min(batch);
        remaining -= n;
        let z = model.sample_latents(n, &mut rng);
        let out = model.generate(&z, false)?;
        let per = out.numel() / n;
        for i in 0..n {
            let sample = &out.data[i * per..(i + 1) * per];
            let snorm = sample.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if snorm < 1e-12 {
                continue;
            }
            let mut best = (0usize, f64::MIN);
            for (ci, c) in centroids.iter().enumerate() {
                if c.numel() != per || cnorm[ci] < 1e-12 {
                    continue;
                }
                let dot: f64 = sample
                    .iter()
                    .zip(&c.data)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                let sim = dot / (snorm * cnorm[ci]);
                if sim > best.1 {
                    best = (ci, sim);
                }
            }
            if best.1 >= threshold {
                hit[best.0] = true;
            }
        }
    }
    Ok(hit.iter().filter(|&&h| h).count())
}

#[cfg(test)]
mod tests;
