//! Training loop: per-iteration critic updates with Lagrange refreshes,
//! stochastically realized generator steps with per-epoch decay, an
//! instability detector with snapshot rollback, and a CSV training log.

use crate::error::{Error, Result};
use crate::gan::{
    count_modes, discriminator_objective, generator_objective, lagrange_update, GanModel,
    N_DISCRIMINATORS,
};
use crate::nn::{adam_step, Checkpoint, Graph, Tensor, BN_MOMENTUM};
use crate::rng;
use rand::Rng;
use rayon::prelude::*;
use std::collections::VecDeque;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iters: u64,
    /// Enable the Hölder-bound hinge (the star variant).
    pub star: bool,
    /// Serialize critic updates and zero the wall-clock column.
    pub deterministic: bool,
    /// Template spectrograms for mode counting; empty disables the modes
    /// column.
    pub centroids: Vec<Tensor<f32>>,
    /// When set, checkpoints are written here at every evaluation interval.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iters: 0,
            star: true,
            deterministic: true,
            centroids: Vec::new(),
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub gap: [f32; N_DISCRIMINATORS],
    pub omega: [f32; N_DISCRIMINATORS],
    pub lagrange: [f32; N_DISCRIMINATORS],
    pub gen_loss: Option<f32>,
    pub modes: Option<usize>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub tripped: bool,
    pub trip_iteration: Option<u64>,
}

impl TrainingLog {
    pub fn csv_header() -> String {
        let mut cols = vec!["iteration".to_string()];
        for i in 1..=N_DISCRIMINATORS {
            cols.push(format!("gap_{i}"));
        }
        for i in 1..=N_DISCRIMINATORS {
            cols.push(format!("omega_{i}"));
        }
        for i in 1..=N_DISCRIMINATORS {
            cols.push(format!("lagrange_{i}"));
        }
        cols.push("gen_loss".into());
        cols.push("modes".into());
        cols.push("wall_ms".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for r in &self.rows {
            let mut cols = vec![r.iteration.to_string()];
            for v in r.gap.iter().chain(&r.omega).chain(&r.lagrange) {
                cols.push(format!("{v}"));
            }
            cols.push(r.gen_loss.map(|v| format!("{v}")).unwrap_or_default());
            cols.push(r.modes.map(|m| m.to_string()).unwrap_or_default());
            cols.push(r.wall_ms.to_string());
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<TrainingLog> {
        let mut rows = Vec::new();
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Domain("empty training log".into()))?;
        if header != Self::csv_header() {
            return Err(Error::Domain("training log header mismatch".into()));
        }
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 + 3 * N_DISCRIMINATORS {
                return Err(Error::Domain(format!("training log row {ln} malformed")));
            }
            let parse_f = |s: &str| s.parse::<f32>().map_err(|_| {
                Error::Domain(format!("training log row {ln}: bad float {s:?}"))
            });
            let mut row = LogRow {
                iteration: cols[0]
                    .parse()
                    .map_err(|_| Error::Domain(format!("training log row {ln}: bad iteration")))?,
                gap: [0.0; N_DISCRIMINATORS],
                omega: [0.0; N_DISCRIMINATORS],
                lagrange: [0.0; N_DISCRIMINATORS],
                gen_loss: None,
                modes: None,
                wall_ms: 0,
            };
            for i in 0..N_DISCRIMINATORS {
                row.gap[i] = parse_f(cols[1 + i])?;
                row.omega[i] = parse_f(cols[1 + N_DISCRIMINATORS + i])?;
                row.lagrange[i] = parse_f(cols[1 + 2 * N_DISCRIMINATORS + i])?;
            }
            let base = 1 + 3 * N_DISCRIMINATORS;
            if !cols[base].is_empty() {
                row.gen_loss = Some(parse_f(cols[base])?);
            }
            if !cols[base + 1].is_empty() {
                row.modes = Some(cols[base + 1].parse().map_err(|_| {
                    Error::Domain(format!("training log row {ln}: bad modes"))
                })?);
            }
            row.wall_ms = cols[base + 2]
                .parse()
                .map_err(|_| Error::Domain(format!("training log row {ln}: bad wall_ms")))?;
            rows.push(row);
        }
        Ok(TrainingLog {
            rows,
            tripped: false,
            trip_iteration: None,
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub tripped: bool,
    pub completed_iters: u64,
}

struct InstabilityDetector {
    window: VecDeque<f64>,
    capacity: usize,
    ma_width: usize,
    factor: f64,
}

impl InstabilityDetector {
    fn new(capacity: usize, ma_width: usize, factor: f64) -> Self {
        InstabilityDetector {
            window: VecDeque::with_capacity(capacity),
            capacity,
            ma_width,
            factor,
        }
    }

    /// Push this iteration's mean |gap|; true when the moving average blows
    /// past `factor` times the window median.
    fn observe(&mut self, gap_abs_mean: f64) -> bool {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(gap_abs_mean);
        if self.window.len() < self.capacity {
            return false;
        }
        let ma = self
            .window
            .iter()
            .rev()
            .take(self.ma_width)
            .sum::<f64>()
            / self.ma_width as f64;
        let mut sorted: Vec<f64> = self.window.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        median > 0.0 && ma > self.factor * median
    }
}

fn assemble_batch(dataset: &[Tensor<f32>], idx: &[usize], square: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[idx.len(), 1, square, square]);
    let per = square * square;
    for (i, &d) in idx.iter().enumerate() {
        out.data[i * per..(i + 1) * per].copy_from_slice(&dataset[d].data);
    }
    out
}

struct DiscResult {
    grads: Vec<(usize, Vec<f32>)>,
    gap: f32,
    omega: f32,
    c_batch: Option<f32>,
}

/// Train the model on square model-space spectrograms.
///
/// Each iteration runs one Adam step per critic (objective + Lagrange
/// refresh), then a stochastically realized number of generator steps whose
/// expectation starts at `gen_steps` and decays by `step_decay` per epoch.
/// The instability detector trips on non-finite state or a runaway critic
/// gap, rolling back to the last snapshot.
pub fn train(model: &mut GanModel, dataset: &[Tensor<f32>], opts: &TrainOptions) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Domain("training dataset is empty".into()));
    }
    let square = model.config.square_size;
    for (i, d) in dataset.iter().enumerate() {
        if d.numel() != square * square {
            return Err(Error::Domain(format!(
                "dataset sample {i} has {} values, expected {}",
                d.numel(),
                square * square
            )));
        }
    }

    let seed = model.seed;
    let cfg = model.config.clone();
    let epoch_len = dataset.len().div_ceil(cfg.batch_size).max(1);
    let mut detector = InstabilityDetector::new(
        cfg.instability_window,
        cfg.instability_ma,
        cfg.instability_factor,
    );
    let mut log = TrainingLog::default();
    let mut snapshot: Checkpoint = model.to_checkpoint();
    let started = Instant::now();
    let mut last_wall = 0u128;

    let mut completed = 0u64;
    for iter in 0..opts.iters {
        let epoch = iter / epoch_len as u64;

        // shared batches for the five critic updates
        let mut batch_rng = rng::stream(seed, "gan.batch", iter);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.gen_range(0..dataset.len()))
            .collect();
        let real = assemble_batch(dataset, &idx, square);
        let mut z_rng = rng::stream(seed, "gan.z", iter);
        let z = model.sample_latents(cfg.batch_size, &mut z_rng);
        let fake = model.generate(&z, true)?;
        let mut interp_rng = rng::stream(seed, "gan.interp", iter);
        let x_tilde = crate::gan::interpolate_samples(&real, &fake, cfg.alpha_theta, &mut interp_rng);

        let step_disc = |i: usize| -> Result<DiscResult> {
            let mut graph = Graph::new();
            let mut dir_rng = rng::stream(seed, "gan.dirs", iter * N_DISCRIMINATORS as u64 + i as u64);
            let obj = discriminator_objective(
                &mut graph, model, i, &real, &fake, &x_tilde, opts.star, &mut dir_rng,
            )?;
            graph.backward(obj.loss, &Tensor::scalar(1.0))?;
            Ok(DiscResult {
                grads: graph.param_grads(&model.discriminators[i].store),
                gap: obj.gap,
                omega: obj.omega_hat,
                c_batch: obj.c_upsilon_batch,
            })
        };

        let results: Vec<Result<DiscResult>> = if opts.deterministic {
            (0..N_DISCRIMINATORS).map(step_disc).collect()
        } else {
            (0..N_DISCRIMINATORS).into_par_iter().map(step_disc).collect()
        };

        let mut gaps = [0.0f32; N_DISCRIMINATORS];
        let mut omegas = [0.0f32; N_DISCRIMINATORS];
        let mut trip = false;
        for (i, res) in results.into_iter().enumerate() {
            match res {
                Ok(r) => {
                    gaps[i] = r.gap;
                    omegas[i] = r.omega;
                    for (pidx, grad) in &r.grads {
                        model.discriminators[i].store.add_grad(*pidx, grad);
                    }
                    if let Err(e) = adam_step(&mut model.discriminators[i].store, &cfg.adam) {
                        let _ = e;
                        trip = true;
                        break;
                    }
                    model.enforce_spectral_norm(i);
                    if opts.star {
                        if let Some(cb) = r.c_batch {
                            model.update_c_upsilon(cb);
                        }
                    }
                    lagrange_update(model, i, f64::from(r.omega), opts.star);
                }
                Err(Error::Training(_)) => {
                    trip = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        // generator steps: expectation decays per epoch, fraction realized
        // stochastically
        let mut gen_loss = None;
        if !trip {
            let expected = cfg.gen_steps * cfg.step_decay.powi(epoch as i32);
            let mut step_rng = rng::stream(seed, "gan.gensteps", iter);
            let mut k = expected.floor() as u64;
            if step_rng.gen_range(0.0..1.0) < expected.fract() {
                k += 1;
            }
            for j in 0..k {
                let mut zg_rng = rng::stream(seed, "gan.zgen", iter * 64 + j);
                let zg = model.sample_latents(cfg.batch_size, &mut zg_rng);
                let mut graph = Graph::new();
                match generator_objective(&mut graph, model, &zg) {
                    Ok(loss) => {
                        let lv = graph.value(loss).item();
                        if !lv.is_finite() {
                            trip = true;
                            break;
                        }
                        gen_loss = Some(lv);
                        if graph.backward(loss, &Tensor::scalar(1.0)).is_err() {
                            trip = true;
                            break;
                        }
                        graph.accumulate_param_grads(&mut model.generator.store);
                        let updates = graph.take_bn_updates();
                        model
                            .generator
                            .store
                            .apply_bn_updates(&updates, BN_MOMENTUM as f32);
                        if adam_step(&mut model.generator.store, &cfg.adam).is_err() {
                            trip = true;
                            break;
                        }
                    }
                    Err(Error::Training(_)) => {
                        trip = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        let gap_abs_mean =
            gaps.iter().map(|g| f64::from(g.abs())).sum::<f64>() / N_DISCRIMINATORS as f64;
        if !trip && !gap_abs_mean.is_finite() {
            trip = true;
        }
        if !trip {
            trip = detector.observe(gap_abs_mean);
        }

        let at_eval = (iter + 1) % cfg.eval_interval as u64 == 0 || iter + 1 == opts.iters;
        let modes = if !trip && at_eval && !opts.centroids.is_empty() {
            Some(count_modes(
                model,
                &opts.centroids,
                cfg.mode_samples,
                cfg.mode_threshold,
                rng::derive_seed(seed, "gan.modeeval", iter),
            )?)
        } else {
            None
        };

        let wall_ms = if opts.deterministic {
            0
        } else {
            let now = started.elapsed().as_millis();
            let delta = now - last_wall;
            last_wall = now;
            delta as u64
        };

        log.rows.push(LogRow {
            iteration: iter,
            gap: gaps,
            omega: omegas,
            lagrange: {
                let mut l = [0.0f32; N_DISCRIMINATORS];
                l.copy_from_slice(&model.lagrange);
                l
            },
            gen_loss,
            modes,
            wall_ms,
        });

        if trip {
            // roll back to the last stable snapshot and stop
            *model = GanModel::from_checkpoint(&snapshot)?;
            log.tripped = true;
            log.trip_iteration = Some(iter);
            return Ok(TrainOutcome {
                tripped: true,
                completed_iters: completed,
                log,
            });
        }

        completed = iter + 1;
        model.iteration += 1;
        if at_eval {
            snapshot = model.to_checkpoint();
            if let Some(dir) = &opts.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(format!("ckpt_{:07}.sdgn", iter + 1));
                snapshot.write(&path)?;
            }
        }
    }

    Ok(TrainOutcome {
        tripped: false,
        completed_iters: completed,
        log,
    })
}
