//! Kinetic and geometric motion descriptors and the pairwise-distance
//! diversity scores built on them.

use crate::error::{Error, Result};
use crate::skeleton::{Joints, Vec3, HEAD, LEFT_FOOT, LEFT_HAND, NUM_JOINTS, PELVIS, RIGHT_FOOT, RIGHT_HAND};

const LEFT_HIP: usize = 1;
const RIGHT_HIP: usize = 2;
const LEFT_KNEE: usize = 4;
const RIGHT_KNEE: usize = 5;
const LEFT_ANKLE: usize = 7;
const RIGHT_ANKLE: usize = 8;
const LEFT_SHOULDER: usize = 16;
const RIGHT_SHOULDER: usize = 17;
const LEFT_WRIST: usize = 20;
const RIGHT_WRIST: usize = 21;

/// Joint pairs compared by the geometric descriptor.
pub const RELATIONS: [(usize, usize); 12] = [
    (LEFT_HAND, HEAD),
    (RIGHT_HAND, HEAD),
    (LEFT_HAND, RIGHT_HAND),
    (LEFT_FOOT, RIGHT_FOOT),
    (LEFT_HAND, PELVIS),
    (RIGHT_HAND, PELVIS),
    (LEFT_KNEE, RIGHT_KNEE),
    (LEFT_ANKLE, RIGHT_KNEE),
    (RIGHT_ANKLE, LEFT_KNEE),
    (LEFT_WRIST, LEFT_SHOULDER),
    (RIGHT_WRIST, RIGHT_SHOULDER),
    (HEAD, PELVIS),
];

/// Two joints count as apart beyond this distance (meters).
const APART: f64 = 0.3;

/// Per joint: mean horizontal kinetic energy `|v_xy|^2 / 2`, mean vertical
/// kinetic energy `v_z^2 / 2` (both over forward-difference velocities) and
/// mean acceleration magnitude. `24 * 3` values.
pub fn kinetic_features(positions: &[Joints], fps: f64) -> Result<Vec<f64>> {
    let n = positions.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let vel = |i: usize, j: usize| -> Vec3 { std::array::from_fn(|k| (positions[i + 1][j][k] - positions[i][j][k]) * fps) };
    let mut out = Vec::with_capacity(NUM_JOINTS * 3);
    for j in 0..NUM_JOINTS {
        let (mut horiz, mut vert, mut acc) = (0.0, 0.0, 0.0);
        for i in 0..n - 1 {
            let v = vel(i, j);
            horiz += 0.5 * (v[0] * v[0] + v[1] * v[1]);
            vert += 0.5 * v[2] * v[2];
        }
        for i in 0..n - 2 {
            let (v0, v1) = (vel(i, j), vel(i + 1, j));
            let a: Vec3 = std::array::from_fn(|k| (v1[k] - v0[k]) * fps);
            acc += (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        }
        out.extend([horiz / (n - 1) as f64, vert / (n - 1) as f64, acc / (n - 2) as f64]);
    }
    Ok(out)
}

fn heading(p: &Joints) -> Vec3 {
    // forward = up x (left hip - right hip), on the ground plane
    let l = [p[LEFT_HIP][0] - p[RIGHT_HIP][0], p[LEFT_HIP][1] - p[RIGHT_HIP][1]];
    let f = [-l[1], l[0]];
    let len = (f[0] * f[0] + f[1] * f[1]).sqrt();
    if len > 1e-12 {
        [f[0] / len, f[1] / len, 0.0]
    } else {
        [1.0, 0.0, 0.0]
    }
}

/// Boolean relations per frame, averaged over time: for every pair in
/// [`RELATIONS`], whether the first joint is above the second, in front of
/// it along the body heading, and farther than 0.3 m from it.
/// `RELATIONS.len() * 3` values in `[0, 1]`.
pub fn geometric_features(positions: &[Joints]) -> Result<Vec<f64>> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let mut out = vec![0.0; RELATIONS.len() * 3];
    for p in positions {
        let fwd = heading(p);
        for (r, &(a, b)) in RELATIONS.iter().enumerate() {
            let d: Vec3 = std::array::from_fn(|k| p[a][k] - p[b][k]);
            let above = d[2] > 0.0;
            let front = d[0] * fwd[0] + d[1] * fwd[1] > 0.0;
            let apart = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() > APART;
            for (k, bit) in [above, front, apart].into_iter().enumerate() {
                if bit {
                    out[3 * r + k] += 1.0;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Ok(out)
}

/// Mean Euclidean distance over all unordered pairs of feature vectors.
pub fn mean_pairwise_distance(features: &[Vec<f64>]) -> Result<f64> {
    let m = features.len();
    if m < 2 {
        return Err(Error::TooFewSequences { needed: 2, got: m });
    }
    let width = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != width) {
        return Err(Error::shape("feature vector", width, f.len()));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            total += features[i]
                .iter()
                .zip(&features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}

/// Kinetic diversity of a set of motions given as joint positions.
pub fn div_k(set: &[Vec<Joints>], fps: f64) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::TooFewSequences { needed: 2, got: set.len() });
    }
    let f = set.iter().map(|p| kinetic_features(p, fps)).collect::<Result<Vec<_>>>()?;
    mean_pairwise_distance(&f)
}

/// Geometric diversity of a set of motions given as joint positions.
pub fn div_g(set: &[Vec<Joints>]) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::TooFewSequences { needed: 2, got: set.len() });
    }
    let f = set.iter().map(|p| geometric_features(p)).collect::<Result<Vec<_>>>()?;
    mean_pairwise_distance(&f)
}
