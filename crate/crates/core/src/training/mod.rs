//! Kinematic auxiliary losses, the total objective, optimizers and the
//! training loop.

mod losses;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, standard_normal, ModelOutput, NoiseSchedule, ScheduleKind, VlbSampler};
use crate::error::{Error, Result};
use crate::popnet::{save_checkpoint, Graph, Mode, ParamStore, PopDg};
use crate::skeleton::{ContactAssignment, JointTree, POSE_DIM};

pub use losses::{
    loss_body, loss_body_with_grad, loss_fk, loss_fk_with_grad, loss_va, loss_va_with_grad, total_loss,
    loss_residuals, total_loss_detached, FkBatch, LossContext, LossReport, LossWeights, Residuals, TotalLoss,
};
pub use optim::{clip_global_norm, global_norm, Optimizer, OptimizerConfig, OptimizerKind};

/// One aligned (motion, music) clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `N x 156` pose rows.
    pub motion: Array2<f64>,
    /// `N x W` music features on the same frame grid.
    pub music: Array2<f64>,
    pub fps: u32,
}

impl TrainSample {
    pub fn new(motion: Array2<f64>, music: Array2<f64>, fps: u32) -> Result<Self> {
        if motion.ncols() != POSE_DIM {
            return Err(Error::shape("training motion", POSE_DIM, motion.ncols()));
        }
        if motion.nrows() != music.nrows() {
            return Err(Error::Alignment {
                motion: motion.nrows(),
                music: music.nrows(),
            });
        }
        if motion.nrows() < 3 {
            return Err(Error::TooShort {
                needed: 3,
                got: motion.nrows(),
            });
        }
        if fps == 0 {
            return Err(Error::config("fps", "must be positive"));
        }
        Ok(Self { motion, music, fps })
    }

    pub fn frames(&self) -> usize {
        self.motion.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Clips per optimizer step; gradients are averaged.
    pub batch_size: usize,
    /// Training window in frames; longer clips are randomly cropped.
    pub window: usize,
    pub seed: u64,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 1,
            window: 150,
            seed: 0,
            diffusion_steps: 1000,
            schedule: ScheduleKind::Cosine,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            clip_norm: Some(1.0),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.window < 3 {
            return Err(Error::config("window", "must be at least 3 frames"));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::config("diffusion_steps", "must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm", "must be positive"));
            }
        }
        self.weights.validate()?;
        self.optimizer.validate()
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.diffusion_steps, self.schedule)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub p_t: f64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PopDg,
    pub schedule: NoiseSchedule,
    pub history: Vec<StepRecord>,
}

/// Objective value, its parameter gradients and the prediction it was built
/// from, for one (x, z_t, t) draw.
pub struct Evaluation {
    pub loss: TotalLoss,
    pub grads: Vec<Array2<f64>>,
    pub output: ModelOutput,
}

/// Forward pass with `params`, total loss, and back-propagation to every
/// parameter. `vlb_x_hat` overrides the detached mean used by the VLB term.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads(
    model: &PopDg,
    params: &ParamStore,
    ctx: &LossContext,
    x: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    t: usize,
    p_t: f64,
    music: ArrayView2<f64>,
    mode: Mode,
    vlb_x_hat: Option<ArrayView2<f64>>,
) -> Result<Evaluation> {
    let mut g = Graph::new(params);
    let (xv, vv) = model.forward_graph(&mut g, z_t, t, music, mode)?;
    let output = ModelOutput::new(g.tape.value(xv).clone(), g.tape.value(vv).clone())?;
    let loss = match vlb_x_hat {
        Some(d) => total_loss_detached(ctx, x, z_t, t, p_t, &output, d),
        None => total_loss(ctx, x, z_t, t, p_t, &output),
    }
    .map_err(|e| e.in_stage("loss"))?;
    let ix = g.tape.injected(xv, 0.0, loss.grad_x_hat.clone());
    let iv = g.tape.injected(vv, 0.0, loss.grad_v.clone());
    let root = g.tape.add(ix, iv);
    let grads = g.param_grads(&g.tape.backward(root));
    Ok(Evaluation { loss, grads, output })
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    /// Entries whose magnitude fell under the effective floor, so their
    /// error was judged against the floor rather than themselves.
    pub floored: usize,
    /// Effective floor used: the larger of the configured floor and the
    /// resolution of the difference quotient.
    pub floor: f64,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub worst: String,
}

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSpec {
    pub step: f64,
    pub rel_tol: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Multiple of the difference quotient's rounding resolution
    /// `eps * |L| / step` that errors are never judged below.
    pub resolution: f64,
    /// Use the five-point stencil, `O(step^4)` truncation at twice the
    /// cost, instead of the plain two-point central difference.
    pub fourth_order: bool,
    /// Check at most this many scalars per tensor (evenly spaced); `None`
    /// checks every scalar.
    pub per_tensor: Option<usize>,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-4,
            floor: 1e-6,
            resolution: 10.0,
            fourth_order: false,
            per_tensor: None,
        }
    }
}

/// Central finite differences of the total loss against the
/// analytic gradient for the model's own parameters. The VLB's detached mean
/// is held at the unperturbed prediction on every side, and loss differences
/// are accumulated per residual (see [`Residuals::difference`]).
///
/// A difference quotient of a loss `L` evaluated in f64 cannot resolve
/// gradients much below `eps * |L| / step`, so the floor is raised until
/// `rel_tol * floor` covers `spec.resolution` times that quantity. Parameters with an exactly vanishing
/// gradient (key biases under softmax shift invariance, for instance) would
/// otherwise fail on rounding alone.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    model: &PopDg,
    ctx: &LossContext,
    x: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    t: usize,
    p_t: f64,
    music: ArrayView2<f64>,
    mode: Mode,
    spec: GradCheckSpec,
) -> Result<GradCheck> {
    let base = loss_and_grads(model, model.params(), ctx, x, z_t, t, p_t, music, mode, None)?;
    let detached = base.output.x_hat.clone();
    let eval = |p: &ParamStore| -> Result<Residuals> {
        let mut g = Graph::new(p);
        let (xv, vv) = model.forward_graph(&mut g, z_t, t, music, mode)?;
        let out = ModelOutput::new(g.tape.value(xv).clone(), g.tape.value(vv).clone())?;
        loss_residuals(ctx, x, z_t, t, p_t, &out, detached.view())
    };
    let floor = spec
        .floor
        .max(spec.resolution * f64::EPSILON * base.loss.report.total.abs() / spec.step / spec.rel_tol);
    let params = model.params();
    let mut work = Vec::new();
    for id in params.ids() {
        let len = params.get(id).len();
        match spec.per_tensor {
            Some(k) if k < len => work.extend((0..k).map(|i| (id, i * len / k))),
            _ => work.extend((0..len).map(|k| (id, k))),
        }
    }
    let h = spec.step;
    let results: Vec<(f64, bool, String)> = work
        .par_iter()
        .map_init(
            || params.clone(),
            |local, &(id, k)| -> Result<(f64, bool, String)> {
                let orig = params.get(id).as_slice().expect("standard layout")[k];
                let mut at = |d: f64| -> Result<Residuals> {
                    local.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig + d;
                    let r = eval(local);
                    local.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig;
                    r
                };
                let near = at(h)?.difference(&at(-h)?);
                let numeric = if spec.fourth_order {
                    (8.0 * near - at(2.0 * h)?.difference(&at(-2.0 * h)?)) / (12.0 * h)
                } else {
                    near / (2.0 * h)
                };
                let analytic = base.grads[id.0].as_slice().expect("standard layout")[k];
                let scale = analytic.abs().max(numeric.abs());
                let err = (analytic - numeric).abs() / scale.max(floor);
                let label = format!("{}[{k}]: analytic {analytic:e}, numeric {numeric:e}", params.name(id));
                Ok((err, scale < floor, label))
            },
        )
        .collect::<Result<_>>()?;
    let mut report = GradCheck {
        checked: results.len(),
        failures: 0,
        floored: 0,
        floor,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (err, floored, label) in results {
        report.failures += usize::from(err > spec.rel_tol);
        report.floored += usize::from(floored);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = label;
        }
    }
    Ok(report)
}

fn validate_data(model: &PopDg, data: &[TrainSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let width = model.config().music_width;
    for (i, s) in data.iter().enumerate() {
        if s.music.ncols() != width {
            return Err(Error::shape(&format!("music features of clip {i}"), width, s.music.ncols()));
        }
        if s.motion.nrows() != s.music.nrows() {
            return Err(Error::Alignment {
                motion: s.motion.nrows(),
                music: s.music.nrows(),
            });
        }
    }
    Ok(())
}

/// Runs the optimization loop. With `out_dir` set, writes `metrics.jsonl`,
/// periodic `step_NNNNNN.popw` checkpoints and `final.popw`.
pub fn train(mut model: PopDg, data: &[TrainSample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    validate_data(&model, data)?;
    let schedule = cfg.noise_schedule()?;
    let mut ctx = LossContext {
        schedule: schedule.clone(),
        tree: JointTree::smpl(),
        assignment: ContactAssignment::default(),
        weights: cfg.weights,
        fps: 30.0,
    };
    let shapes: Vec<_> = model.params().values().iter().map(|v| v.dim()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, &shapes)?;
    let mut sampler = VlbSampler::new(cfg.diffusion_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);
    info!(
        "training {} parameters for {} steps on {} clips",
        model.params().num_scalars(),
        cfg.steps,
        data.len()
    );

    for step in 0..cfg.steps {
        let mut acc: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
        let mut mean = LossReport::default();
        let (mut last_t, mut last_p) = (0, 0.0);
        for _ in 0..cfg.batch_size {
            let clip = &data[rng.gen_range(0..data.len())];
            let n = clip.frames().min(cfg.window);
            let start_row = rng.gen_range(0..=clip.frames() - n);
            let x = clip.motion.slice(s![start_row..start_row + n, ..]);
            let music = clip.music.slice(s![start_row..start_row + n, ..]);
            let (t, p_t) = sampler.sample(&mut rng);
            let noise = standard_normal(&mut rng, n, POSE_DIM);
            let z_t = q_sample(&schedule, x, t, noise.view())?;
            let mode = Mode::Train { mask_seed: rng.gen() };
            ctx.fps = clip.fps as f64;
            let ev = loss_and_grads(&model, model.params(), &ctx, x, z_t.view(), t, p_t, music, mode, None)?;
            let r = ev.loss.report;
            if !r.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    details: format!("t={t} p_t={p_t:e} components={r:?}"),
                });
            }
            sampler.record(t, r.vlb_term);
            let b = cfg.batch_size as f64;
            for (a, g) in acc.iter_mut().zip(&ev.grads) {
                a.scaled_add(1.0 / b, g);
            }
            for (m, v) in [
                (&mut mean.simple, r.simple),
                (&mut mean.vlb_term, r.vlb_term),
                (&mut mean.vlb, r.vlb),
                (&mut mean.hybrid, r.hybrid),
                (&mut mean.fk, r.fk),
                (&mut mean.va, r.va),
                (&mut mean.body, r.body),
                (&mut mean.total, r.total),
            ] {
                *m += v / b;
            }
            (last_t, last_p) = (t, p_t);
        }
        let grad_norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut acc, c),
            None => global_norm(&acc),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                details: format!("gradient norm {grad_norm}; components={mean:?}"),
            });
        }
        opt.step(model.params_mut().values_mut(), &acc);

        let rec = StepRecord {
            step,
            t: last_t,
            p_t: last_p,
            losses: mean,
            grad_norm,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some((w, p)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w).map_err(|e| Error::io(p.as_path(), e))?;
        }
        debug!("step {step}: total {:.6} simple {:.6}", mean.total, mean.simple);
        history.push(rec);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let p: PathBuf = dir.join(format!("step_{:06}.popw", step + 1));
                save_checkpoint(&p, &model, &schedule, (step + 1) as u64)?;
            }
        }
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final.popw"), &model, &schedule, cfg.steps as u64)?;
    }
    Ok(TrainOutcome {
        model,
        schedule,
        history,
    })
}

#[cfg(test)]
mod tests;
