use ndarray::{Array2, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};

use super::BeatList;
use crate::error::{Error, Result};
use crate::skeleton::{Joints, NUM_JOINTS};

/// Onsets must exceed `mean + ONSET_K * std` of the onset curve.
pub const ONSET_K: f64 = 1.0;

/// Width of the Gaussian applied to the joint-speed curve, in frames.
const SPEED_SMOOTHING: f64 = 2.0;

/// Positive energy flux per frame, summed over channels. The frame before
/// the first is taken to be each channel's minimum over the clip, so a
/// constant offset never reads as an onset.
pub fn onset_strength(features: ArrayView2<f64>) -> Vec<f64> {
    let (n, w) = features.dim();
    if n == 0 {
        return Vec::new();
    }
    let floor: Vec<f64> = (0..w)
        .map(|c| features.column(c).iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    (0..n)
        .map(|i| {
            (0..w)
                .map(|c| {
                    let prev = if i == 0 { floor[c] } else { features[[i - 1, c]] };
                    (features[[i, c]] - prev).max(0.0)
                })
                .sum()
        })
        .collect()
}

/// Local maxima of `onset` above `mean + k * std`. Scaling the curve scales
/// the threshold with it.
pub fn pick_onsets(onset: &[f64], k: f64) -> Vec<usize> {
    let n = onset.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = onset.iter().sum::<f64>() / n as f64;
    let var = onset.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / n as f64;
    let threshold = mean + k * var.sqrt();
    (0..n)
        .filter(|&i| {
            let o = onset[i];
            o > 0.0
                && o > threshold
                && (i == 0 || o >= onset[i - 1])
                && (i + 1 == n || o > onset[i + 1])
        })
        .collect()
}

fn to_beats(frames: Vec<usize>, fps: u32) -> Result<BeatList> {
    BeatList::new(frames.into_iter().map(|f| f as f64).collect(), fps)
}

/// Beats from an `N x W` per-frame feature matrix via channel-energy flux.
pub fn extract_music_beats(features: ArrayView2<f64>, fps: u32) -> Result<BeatList> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("music features contain non-finite values".into()));
    }
    to_beats(pick_onsets(&onset_strength(features), ONSET_K), fps)
}

/// Beats from a mono waveform via spectral flux. Analysis frames are centred
/// on the motion frame grid (`sample_rate / fps` samples apart) with a Hann
/// window twice the hop, rounded up to a power of two.
pub fn extract_music_beats_waveform(samples: &[f64], sample_rate: u32, fps: u32) -> Result<BeatList> {
    if fps == 0 || sample_rate == 0 {
        return Err(Error::config("fps", "frame and sample rates must be positive"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("waveform contains non-finite samples".into()));
    }
    let hop = sample_rate as f64 / fps as f64;
    if hop < 1.0 {
        return Err(Error::config("fps", "frame rate exceeds the sample rate"));
    }
    let frames = (samples.len() as f64 / hop).ceil() as usize;
    let size = ((2.0 * hop).ceil() as usize).next_power_of_two();
    let window: Vec<f64> = (0..size)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / size as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(size);
    let bins = size / 2 + 1;
    let mut spec = Array2::zeros((frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); size];
    for i in 0..frames {
        let centre = (i as f64 * hop).round() as i64;
        for (k, b) in buf.iter_mut().enumerate() {
            let s = centre - (size / 2) as i64 + k as i64;
            let x = if s >= 0 && (s as usize) < samples.len() { samples[s as usize] } else { 0.0 };
            *b = Complex::new(x * window[k], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            spec[[i, k]] = buf[k].norm();
        }
    }
    to_beats(pick_onsets(&onset_strength(spec.view()), ONSET_K), fps)
}

/// Mean joint speed per frame (central differences inside, one-sided at the
/// ends), Gaussian-smoothed with edge clamping.
pub fn smoothed_joint_speed(positions: &[Joints], fps: f64) -> Result<Vec<f64>> {
    let n = positions.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b, span) = match i {
                0 => (0, 1, 1.0),
                _ if i + 1 == n => (n - 2, n - 1, 1.0),
                _ => (i - 1, i + 1, 2.0),
            };
            let total: f64 = (0..NUM_JOINTS)
                .map(|j| {
                    let d: [f64; 3] = std::array::from_fn(|k| positions[b][j][k] - positions[a][j][k]);
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .sum();
            total / NUM_JOINTS as f64 * fps / span
        })
        .collect();
    let radius = (3.0 * SPEED_SMOOTHING).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * SPEED_SMOOTHING * SPEED_SMOOTHING)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    Ok((0..n as i64)
        .map(|i| {
            (-radius..=radius)
                .zip(&kernel)
                .map(|(d, w)| w * raw[(i + d).clamp(0, n as i64 - 1) as usize])
                .sum::<f64>()
                / ksum
        })
        .collect())
}

/// Kinematic beats: interior local minima of the smoothed mean joint speed.
/// A flat-bottomed minimum reports its centre frame.
pub fn extract_dance_beats(positions: &[Joints], fps: u32) -> Result<BeatList> {
    let s = smoothed_joint_speed(positions, fps as f64)?;
    let n = s.len();
    let tol = 1e-9 * s.iter().cloned().fold(0.0, f64::max);
    let mut beats = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        let mut j = i;
        while j + 1 < n && (s[j + 1] - s[i]).abs() <= tol {
            j += 1;
        }
        if j + 1 < n && s[i - 1] > s[i] + tol && s[j + 1] > s[j] + tol {
            beats.push((i + j) / 2);
        }
        i = j + 1;
    }
    to_beats(beats, fps)
}
