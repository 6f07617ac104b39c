//! Motion-quality, diversity and music-correlation scores.
//!
//! Joint positions are z-up, in meters. Physical scores use second forward
//! differences `a_i = (p[i+2] - 2 p[i+1] + p[i]) * fps^2`, which are centred
//! on frame `i + 1`, paired with the forward velocity leaving that frame,
//! `v_i = (p[i+2] - p[i+1]) * fps`.

mod beats;
mod diversity;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::popnet::MusicFeatures;
use crate::skeleton::{
    forward_kinematics, JointTree, Joints, MotionSequence, Vec3, HEAD, LEFT_COLLAR, LEFT_FOOT, LEFT_HAND, NECK,
    PELVIS, RIGHT_COLLAR, RIGHT_FOOT, RIGHT_HAND,
};

pub use beats::{
    extract_dance_beats, extract_music_beats, extract_music_beats_waveform, onset_strength, pick_onsets,
    smoothed_joint_speed, ONSET_K,
};
pub use diversity::{div_g, div_k, geometric_features, kinetic_features, mean_pairwise_distance, RELATIONS};

/// Beat kernel width, in frames.
pub const BEAT_SIGMA: f64 = 3.0;

/// Strictly increasing, non-negative beat times in frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatList {
    pub fps: u32,
    pub times: Vec<f64>,
}

impl BeatList {
    pub fn new(times: Vec<f64>, fps: u32) -> Result<Self> {
        if fps == 0 {
            return Err(Error::config("fps", "must be positive"));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Invalid("beat times must be finite and non-negative".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("beat times must be strictly increasing".into()));
        }
        Ok(Self { fps, times })
    }

    pub fn empty(fps: u32) -> Self {
        Self { fps, times: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Mean Gaussian proximity of each music beat to its nearest dance beat.
/// An empty dance list scores 0.
pub fn beat_align_score(music: &BeatList, dance: &BeatList, sigma: f64) -> Result<f64> {
    if music.is_empty() {
        return Err(Error::EmptyBeats);
    }
    if music.fps != dance.fps {
        return Err(Error::Invalid(format!(
            "beat lists at different frame rates ({} vs {})",
            music.fps, dance.fps
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("sigma", "must be positive"));
    }
    if dance.is_empty() {
        warn!("no dance beats; beat alignment is 0");
        return Ok(0.0);
    }
    let total: f64 = music
        .times
        .iter()
        .map(|&tm| {
            let d = nearest_distance(&dance.times, tm);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / music.len() as f64)
}

fn nearest_distance(sorted: &[f64], t: f64) -> f64 {
    let i = sorted.partition_point(|&x| x < t);
    let after = sorted.get(i).map(|x| x - t);
    let before = i.checked_sub(1).map(|k| t - sorted[k]);
    match (before, after) {
        (Some(b), Some(a)) => b.min(a),
        (Some(b), None) => b,
        (None, Some(a)) => a,
        (None, None) => f64::INFINITY,
    }
}

/// A physical score with a note of every acceleration group whose maximum
/// was zero (those groups contribute 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalScore {
    pub value: f64,
    pub zero_acceleration: Vec<String>,
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: &Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// `|a|` per acceleration frame with the vertical component clamped at 0.
fn clamped_acceleration(positions: &[Joints], joint: usize, fps: f64) -> Vec<f64> {
    (0..positions.len() - 2)
        .map(|i| {
            let v0 = sub(&positions[i + 1][joint], &positions[i][joint]);
            let v1 = sub(&positions[i + 2][joint], &positions[i + 1][joint]);
            let mut a = sub(&v1, &v0);
            a.iter_mut().for_each(|c| *c *= fps * fps);
            a[2] = a[2].max(0.0);
            norm(&a)
        })
        .collect()
}

fn speed(positions: &[Joints], joint: usize, fps: f64) -> Vec<f64> {
    (0..positions.len() - 2)
        .map(|i| norm(&sub(&positions[i + 2][joint], &positions[i + 1][joint])) * fps)
        .collect()
}

/// One accelerating segment and the extremities it should imply are moving.
/// Returns the normalized sum and whether the group had zero acceleration.
fn group(positions: &[Joints], fps: f64, seg: usize, ends: &[usize]) -> (f64, bool) {
    let acc = clamped_acceleration(positions, seg, fps);
    let max = acc.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return (0.0, true);
    }
    let speeds: Vec<Vec<f64>> = ends.iter().map(|&j| speed(positions, j, fps)).collect();
    let sum: f64 = (0..acc.len())
        .map(|i| acc[i] * speeds.iter().map(|s| s[i]).product::<f64>())
        .sum();
    (sum / max, false)
}

fn check_frames(positions: &[Joints], fps: f64) -> Result<()> {
    if positions.len() < 3 {
        return Err(Error::TooShort {
            needed: 3,
            got: positions.len(),
        });
    }
    if !(fps > 0.0) {
        return Err(Error::config("fps", "must be positive"));
    }
    Ok(())
}

/// Foot-contact plausibility: root acceleration times both foot speeds,
/// normalized by the peak root acceleration and the number of acceleration
/// frames. Lower is better.
pub fn pfc(positions: &[Joints], fps: f64) -> Result<PhysicalScore> {
    check_frames(positions, fps)?;
    let n = (positions.len() - 2) as f64;
    let (f, zero) = group(positions, fps, PELVIS, &[LEFT_FOOT, RIGHT_FOOT]);
    Ok(PhysicalScore {
        value: f / n,
        zero_acceleration: if zero { vec!["root".into()] } else { Vec::new() },
    })
}

/// Full-body extension of [`pfc`]: the foot term enters negated, and the
/// collars and neck are paired with the hands and head.
pub fn pbc(positions: &[Joints], fps: f64) -> Result<PhysicalScore> {
    check_frames(positions, fps)?;
    let n = (positions.len() - 2) as f64;
    let groups: [(&str, f64, usize, &[usize]); 4] = [
        ("root", -1.0, PELVIS, &[LEFT_FOOT, RIGHT_FOOT]),
        ("lchest", 1.0, LEFT_COLLAR, &[LEFT_HAND]),
        ("rchest", 1.0, RIGHT_COLLAR, &[RIGHT_HAND]),
        ("neck", 1.0, NECK, &[HEAD]),
    ];
    let mut total = 0.0;
    let mut zero_acceleration = Vec::new();
    for (name, sign, seg, ends) in groups {
        let (f, zero) = group(positions, fps, seg, ends);
        total += sign * f;
        if zero {
            zero_acceleration.push(name.to_string());
        }
    }
    Ok(PhysicalScore {
        value: total / n,
        zero_acceleration,
    })
}

/// One motion to evaluate, optionally paired with its music.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub name: String,
    pub motion: MotionSequence,
    pub music: Option<MusicFeatures>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub pfc: f64,
    pub pbc: f64,
    pub bas: Option<f64>,
    pub music_beats: Option<BeatList>,
    pub dance_beats: BeatList,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pfc: f64,
    pub pbc: f64,
    /// `None` with fewer than two sequences.
    pub div_k: Option<f64>,
    pub div_g: Option<f64>,
    /// Mean over sequences that came with music.
    pub bas: Option<f64>,
    pub sequences: Vec<SequenceMetrics>,
    /// The same scores computed on ground-truth motion, when provided.
    pub reference: Option<Box<MetricReport>>,
}

struct Scored {
    row: SequenceMetrics,
    kinetic: Vec<f64>,
    geometric: Vec<f64>,
}

fn score_one(item: &EvalItem, tree: &JointTree) -> Result<Scored> {
    let fps = item.motion.fps as f64;
    let positions = forward_kinematics(&item.motion, tree).map_err(|e| e.in_stage(&item.name))?;
    let pf = pfc(&positions, fps)?;
    let pb = pbc(&positions, fps)?;
    let dance_beats = extract_dance_beats(&positions, item.motion.fps)?;
    let mut flags: Vec<String> = pf.zero_acceleration.iter().map(|g| format!("pfc: zero {g} acceleration")).collect();
    flags.extend(pb.zero_acceleration.iter().map(|g| format!("pbc: zero {g} acceleration")));
    let (bas, music_beats) = match &item.music {
        Some(m) => {
            m.check_aligned(positions.len()).map_err(|e| e.in_stage(&item.name))?;
            let mb = extract_music_beats(m.view(), m.fps)?;
            if mb.is_empty() {
                flags.push("no music beats".into());
                (None, Some(mb))
            } else {
                (Some(beat_align_score(&mb, &dance_beats, BEAT_SIGMA)?), Some(mb))
            }
        }
        None => (None, None),
    };
    Ok(Scored {
        kinetic: kinetic_features(&positions, fps)?,
        geometric: geometric_features(&positions)?,
        row: SequenceMetrics {
            name: item.name.clone(),
            frames: positions.len(),
            pfc: pf.value,
            pbc: pb.value,
            bas,
            music_beats,
            dance_beats,
            flags,
        },
    })
}

fn summarize(items: &[EvalItem], tree: &JointTree) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::TooFewSequences { needed: 1, got: 0 });
    }
    let scored = items
        .par_iter()
        .map(|it| score_one(it, tree))
        .collect::<Result<Vec<_>>>()?;
    let n = scored.len() as f64;
    let pfc = scored.iter().map(|s| s.row.pfc).sum::<f64>() / n;
    let pbc = scored.iter().map(|s| s.row.pbc).sum::<f64>() / n;
    let bas_vals: Vec<f64> = scored.iter().filter_map(|s| s.row.bas).collect();
    let bas = (!bas_vals.is_empty()).then(|| bas_vals.iter().sum::<f64>() / bas_vals.len() as f64);
    let (div_k, div_g) = if scored.len() >= 2 {
        let k: Vec<_> = scored.iter().map(|s| s.kinetic.clone()).collect();
        let g: Vec<_> = scored.iter().map(|s| s.geometric.clone()).collect();
        (Some(mean_pairwise_distance(&k)?), Some(mean_pairwise_distance(&g)?))
    } else {
        (None, None)
    };
    Ok(MetricReport {
        pfc,
        pbc,
        div_k,
        div_g,
        bas,
        sequences: scored.into_iter().map(|s| s.row).collect(),
        reference: None,
    })
}

/// Scores every generated motion in parallel (row order follows the input)
/// and aggregates set-level numbers; the reference set, when given, is
/// scored the same way.
pub fn evaluate(generated: &[EvalItem], reference: Option<&[EvalItem]>, tree: &JointTree) -> Result<MetricReport> {
    let mut report = summarize(generated, tree)?;
    if let Some(r) = reference {
        report.reference = Some(Box::new(summarize(r, tree)?));
    }
    Ok(report)
}
