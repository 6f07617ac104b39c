//! Learned-variance diffusion: forward noising, the reverse-process variance
//! interpolation, the hybrid objective and DDIM sampling.

mod sampler;
mod schedule;

use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::popnet::MusicFeatures;
use crate::skeleton::{MotionSequence, CONTACT_OFFSET, POSE_DIM};

pub use sampler::{VlbSampler, VLB_HISTORY};
pub use schedule::{NoiseSchedule, ScheduleKind};

/// Default interpolation weight of the VLB term in the hybrid loss.
pub const DEFAULT_LAMBDA_VLB: f64 = 0.001;

/// Network prediction for one noisy sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Predicted clean sequence, `N x 156`.
    pub x_hat: Array2<f64>,
    /// Variance interpolation weights in `[0, 1]`: `N x 156`, or `N x 1` for a
    /// single weight per frame.
    pub v: Array2<f64>,
}

impl ModelOutput {
    pub fn new(x_hat: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        if v.nrows() != x_hat.nrows() || (v.ncols() != x_hat.ncols() && v.ncols() != 1) {
            return Err(Error::shape(
                "model output v",
                format!("{}x{} or {}x1", x_hat.nrows(), x_hat.ncols(), x_hat.nrows()),
                format!("{}x{}", v.nrows(), v.ncols()),
            ));
        }
        let v = v.mapv(|x| x.clamp(0.0, 1.0));
        Ok(Self { x_hat, v })
    }

    pub fn v_at(&self, row: usize, col: usize) -> f64 {
        if self.v.ncols() == 1 {
            self.v[[row, 0]]
        } else {
            self.v[[row, col]]
        }
    }
}

fn check_same(context: &str, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            context,
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

/// `z_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps`.
pub fn q_sample(
    schedule: &NoiseSchedule,
    x: ArrayView2<f64>,
    t: usize,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    schedule.check_t(t)?;
    check_same("q_sample noise", x, noise)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x).and(noise).map_collect(|&x, &e| a * x + b * e))
}

/// Log of the learned reverse variance, `v log beta_t + (1 - v) log beta_tilde_t`.
pub fn interp_log_variance(v: f64, t: usize, schedule: &NoiseSchedule) -> f64 {
    v * schedule.beta(t).ln() + (1.0 - v) * schedule.beta_tilde(t).ln()
}

/// Geometric interpolation between `beta_tilde_t` (v = 0) and `beta_t` (v = 1).
pub fn interp_variance(v: f64, t: usize, schedule: &NoiseSchedule) -> f64 {
    if v == 1.0 {
        schedule.beta(t)
    } else if v == 0.0 {
        schedule.beta_tilde(t)
    } else {
        interp_log_variance(v, t, schedule).exp()
    }
}

/// Mean squared error over every element.
pub fn loss_simple(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<f64> {
    check_same("loss_simple", x, x_hat)?;
    let n = x.len().max(1) as f64;
    Ok(Zip::from(x)
        .and(x_hat)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        / n)
}

/// Gradient of [`loss_simple`] with respect to `x_hat`.
pub fn loss_simple_grad(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Array2<f64> {
    let n = x.len().max(1) as f64;
    Zip::from(x_hat).and(x).map_collect(|&b, &a| 2.0 * (b - a) / n)
}

/// One VLB term and its gradient with respect to the variance weights.
#[derive(Debug, Clone)]
pub struct VlbTerm {
    pub value: f64,
    /// Same shape as `ModelOutput::v`.
    pub grad_v: Array2<f64>,
}

/// KL divergence between two diagonal Gaussians, `KL(N(m1, s1) || N(m2, s2))`,
/// parameterized by log-variances.
pub fn gaussian_kl(mean1: f64, logvar1: f64, mean2: f64, logvar2: f64) -> f64 {
    0.5 * (logvar2 - logvar1 + (logvar1 - logvar2).exp() + (mean1 - mean2).powi(2) * (-logvar2).exp()
        - 1.0)
}

/// `L_t` of the variational bound, averaged over elements (nats).
///
/// For `t > 1` this is the KL from the true posterior `q(z_{t-1} | z_t, x)` to
/// the model Gaussian; for `t = 1` it is the Gaussian negative log-likelihood
/// of `x`. The model mean is built from `x_hat` and treated as a constant, so
/// only `v` receives gradient.
pub fn loss_vlb_term(
    x: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    t: usize,
    out: &ModelOutput,
    schedule: &NoiseSchedule,
) -> Result<VlbTerm> {
    schedule.check_t(t)?;
    check_same("vlb x/z_t", x, z_t)?;
    check_same("vlb x/x_hat", x, out.x_hat.view())?;
    let (c_x, c_z) = schedule.posterior_mean_coefs(t);
    let log_beta = schedule.beta(t).ln();
    let log_beta_tilde = schedule.beta_tilde(t).ln();
    let dlogvar_dv = log_beta - log_beta_tilde;
    let true_logvar = log_beta_tilde;
    let n = x.len() as f64;
    let mut grad_v = Array2::zeros(out.v.dim());
    let mut total = 0.0;
    for ((r, c), &xv) in x.indexed_iter() {
        let z = z_t[[r, c]];
        let model_mean = c_x * out.x_hat[[r, c]] + c_z * z;
        let logvar = interp_log_variance(out.v_at(r, c), t, schedule);
        let (term, dlogvar) = if t == 1 {
            let d2 = (xv - model_mean).powi(2);
            let inv = (-logvar).exp();
            (
                0.5 * ((2.0 * std::f64::consts::PI).ln() + logvar + d2 * inv),
                0.5 * (1.0 - d2 * inv),
            )
        } else {
            let true_mean = c_x * xv + c_z * z;
            let d2 = (true_mean - model_mean).powi(2);
            let inv = (-logvar).exp();
            (
                gaussian_kl(true_mean, true_logvar, model_mean, logvar),
                0.5 * (1.0 - (true_logvar.exp() + d2) * inv),
            )
        };
        total += term;
        let gc = if grad_v.ncols() == 1 { 0 } else { c };
        grad_v[[r, gc]] += dlogvar * dlogvar_dv / n;
    }
    Ok(VlbTerm {
        value: total / n,
        grad_v,
    })
}

/// `L_simple + lambda * L_t / (T p_t)`: the VLB is importance-weighted by the
/// probability `p_t` with which `t` was drawn.
pub fn loss_hybrid(l_simple: f64, l_t: f64, p_t: f64, steps: usize, lambda: f64) -> f64 {
    l_simple + lambda * vlb_estimate(l_t, p_t, steps)
}

/// Importance-sampled single-draw estimate of the per-step-averaged VLB.
pub fn vlb_estimate(l_t: f64, p_t: f64, steps: usize) -> f64 {
    l_t / (steps as f64 * p_t)
}

fn predicted_noise(schedule: &NoiseSchedule, z_t: f64, x_hat: f64, t: usize) -> f64 {
    let ab = schedule.alpha_bar(t);
    (z_t - ab.sqrt() * x_hat) / (1.0 - ab).sqrt()
}

/// Standard deviation DDIM injects when stepping from `t` to `t_prev`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// One DDIM update from `t` to `t_prev` (`t_prev = 0` yields the clean estimate).
/// `noise` is required when `eta > 0`.
pub fn ddim_step(
    z_t: ArrayView2<f64>,
    out: &ModelOutput,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Invalid(format!(
            "ddim step must go backwards in time (t={t}, t_prev={t_prev})"
        )));
    }
    check_same("ddim z_t/x_hat", z_t, out.x_hat.view())?;
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = ddim_sigma(schedule, t, t_prev, eta);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut next = Zip::from(z_t)
        .and(&out.x_hat)
        .map_collect(|&z, &xh| ab_prev.sqrt() * xh + dir * predicted_noise(schedule, z, xh, t));
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::Invalid("eta > 0 requires a noise draw".into()))?;
        check_same("ddim noise", z_t, noise)?;
        next.zip_mut_with(&noise, |a, &e| *a += sigma * e);
    }
    Ok(next)
}

/// Ancestral step with the learned variance:
/// `z_{t-1} = mu(x_hat, z_t) + sqrt(Sigma(v, t)) * noise` (no noise at `t = 1`).
pub fn ancestral_step(
    z_t: ArrayView2<f64>,
    out: &ModelOutput,
    t: usize,
    schedule: &NoiseSchedule,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    schedule.check_t(t)?;
    check_same("ancestral z_t/x_hat", z_t, out.x_hat.view())?;
    check_same("ancestral noise", z_t, noise)?;
    let (c_x, c_z) = schedule.posterior_mean_coefs(t);
    Ok(Array2::from_shape_fn(z_t.dim(), |(r, c)| {
        let mean = c_x * out.x_hat[[r, c]] + c_z * z_t[[r, c]];
        if t == 1 {
            mean
        } else {
            mean + interp_variance(out.v_at(r, c), t, schedule).sqrt() * noise[[r, c]]
        }
    }))
}

/// Evenly strided descending timesteps from `T` down to 1, paired with the
/// step each one jumps to (the last jumps to 0).
pub fn ddim_timesteps(steps: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 || n > steps {
        return Err(Error::config(
            "ddim_steps",
            format!("must be in [1, {steps}], got {n}"),
        ));
    }
    let ladder: Vec<usize> = if n == 1 {
        vec![steps]
    } else {
        (0..n).map(|k| 1 + k * (steps - 1) / (n - 1)).collect()
    };
    Ok(ladder
        .iter()
        .enumerate()
        .rev()
        .map(|(k, &t)| (t, if k == 0 { 0 } else { ladder[k - 1] }))
        .collect())
}

/// Anything that predicts clean motion from a noisy sequence.
pub trait Denoiser {
    fn denoise(&self, z_t: ArrayView2<f64>, t: usize, music: &MusicFeatures) -> Result<ModelOutput>;
}

pub fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Generates a motion from pure noise with `n_steps` DDIM updates. The frame
/// count comes from the music; contacts are thresholded at 0.5.
pub fn sample(
    model: &dyn Denoiser,
    music: &MusicFeatures,
    schedule: &NoiseSchedule,
    n_steps: usize,
    eta: f64,
    seed: u64,
) -> Result<MotionSequence> {
    let x = sample_array(model, music, schedule, n_steps, eta, seed)?;
    let mut frames = x;
    for mut row in frames.rows_mut() {
        for c in CONTACT_OFFSET..POSE_DIM {
            row[c] = if row[c] > 0.5 { 1.0 } else { 0.0 };
        }
    }
    MotionSequence::from_array(frames.view(), music.fps)
}

/// Raw sampled array, before contact thresholding.
pub fn sample_array(
    model: &dyn Denoiser,
    music: &MusicFeatures,
    schedule: &NoiseSchedule,
    n_steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = music.frames();
    let mut z = standard_normal(&mut rng, n, POSE_DIM);
    for (t, t_prev) in ddim_timesteps(schedule.steps(), n_steps)? {
        let out = model.denoise(z.view(), t, music)?;
        let noise = (eta > 0.0).then(|| standard_normal(&mut rng, n, POSE_DIM));
        z = ddim_step(z.view(), &out, t, t_prev, schedule, eta, noise.as_ref().map(|a| a.view()))?;
    }
    Ok(z)
}
