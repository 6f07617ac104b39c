//! Synthetic motion and music with known contacts and beats.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BeatList;
use crate::popnet::MusicFeatures;
use crate::skeleton::{
    axis_angle, compute_contacts, fk_pose, forward_kinematics, matrix_to_rot6d, ContactAssignment, JointTree,
    MotionSequence, PoseFrame, LEFT_ANKLE, LEFT_FOOT, RIGHT_ANKLE, RIGHT_FOOT,
};

/// A contact point must move slower than this (m/s).
pub const CONTACT_SPEED: f64 = 0.1;
/// A foot contact point must sit lower than this (m).
pub const CONTACT_HEIGHT: f64 = 0.1;

const LEFT_HIP: usize = 1;
const RIGHT_HIP: usize = 2;
const LEFT_KNEE: usize = 4;
const RIGHT_KNEE: usize = 5;
const LEFT_SHOULDER: usize = 16;
const RIGHT_SHOULDER: usize = 17;
const LEFT_ELBOW: usize = 18;
const RIGHT_ELBOW: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionArchetype {
    Static,
    Walk,
    Bounce,
    SinusoidLimbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MusicArchetype {
    /// Decaying clicks on a fixed grid.
    Click,
    /// Clicks whose spacing shrinks linearly to half the period by the end.
    Chirp,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub sequences: usize,
    /// Frames per sequence.
    pub frames: usize,
    pub motion: MotionArchetype,
    pub music: MusicArchetype,
    /// Beat period in seconds.
    pub beat_period: f64,
    /// Music feature channels.
    pub width: usize,
    pub fps: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sequences: 4,
            frames: 150,
            motion: MotionArchetype::Bounce,
            music: MusicArchetype::Click,
            beat_period: 0.5,
            width: 64,
            fps: 30,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn period_frames(&self) -> f64 {
        self.beat_period * self.fps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 {
            return Err(Error::config("sequences", "must be positive"));
        }
        if self.frames < 3 {
            return Err(Error::config("frames", "must be at least 3"));
        }
        if self.width == 0 {
            return Err(Error::config("width", "must be positive"));
        }
        if self.fps == 0 {
            return Err(Error::config("fps", "must be positive"));
        }
        let p = self.period_frames();
        if !p.is_finite() || p < 2.0 {
            return Err(Error::config("beat_period", format!("{p} frames is shorter than two frames")));
        }
        if self.music == MusicArchetype::Click && (p - p.round()).abs() > 1e-9 {
            return Err(Error::config(
                "beat_period",
                format!("click tracks need a whole number of frames per beat, got {p}"),
            ));
        }
        if self.music == MusicArchetype::Chirp && p < 4.0 {
            return Err(Error::config("beat_period", "chirps need at least 4 frames per beat"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub name: String,
    pub motion: MotionSequence,
    pub music: MusicFeatures,
    /// Known onset frames; `None` for noise.
    pub music_beats: Option<BeatList>,
    /// Known kinematic beats; only the bounce archetype has them.
    pub dance_beats: Option<BeatList>,
}

/// Ground truth written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub name: String,
    pub music_beats: Option<BeatList>,
    pub dance_beats: Option<BeatList>,
}

impl From<&SyntheticSequence> for GroundTruth {
    fn from(s: &SyntheticSequence) -> Self {
        Self {
            name: s.name.clone(),
            music_beats: s.music_beats.clone(),
            dance_beats: s.dance_beats.clone(),
        }
    }
}

/// Root height that puts the lowest foot point of the rest pose on the ground.
pub fn standing_height(tree: &JointTree) -> f64 {
    let rest = fk_pose(&PoseFrame::identity([0.0; 3]).flatten(), tree).expect("rest pose is valid");
    -[LEFT_ANKLE, LEFT_FOOT, RIGHT_ANKLE, RIGHT_FOOT]
        .iter()
        .map(|&j| rest[j][2])
        .fold(f64::INFINITY, f64::min)
}

fn rot(axis: [f64; 3], angle: f64) -> [f64; 6] {
    matrix_to_rot6d(&axis_angle(axis, angle))
}

const LATERAL: [f64; 3] = [1.0, 0.0, 0.0];
const FORWARD_AXIS: [f64; 3] = [0.0, 1.0, 0.0];

fn pose_track(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, height: f64) -> Vec<PoseFrame> {
    let p = spec.period_frames();
    let amp: f64 = rng.gen_range(0.8..1.2);
    let phase: f64 = rng.gen_range(0.0..TAU);
    (0..spec.frames)
        .map(|i| {
            let u = i as f64 / p;
            match spec.motion {
                MotionArchetype::Static => PoseFrame::identity([0.0, 0.0, height]),
                MotionArchetype::Walk => {
                    // one stride per beat, forward is -y
                    let s = (TAU * u + phase).sin();
                    let bob = 0.02 * amp * (1.0 - (2.0 * (TAU * u + phase)).cos()) / 2.0;
                    let mut f = PoseFrame::identity([0.0, -0.6 * amp * u, height - bob]);
                    let swing = 0.35 * amp * s;
                    f.joint_rot6d[LEFT_HIP] = rot(LATERAL, -swing);
                    f.joint_rot6d[RIGHT_HIP] = rot(LATERAL, swing);
                    f.joint_rot6d[LEFT_KNEE] = rot(LATERAL, 0.3 * amp * s.max(0.0));
                    f.joint_rot6d[RIGHT_KNEE] = rot(LATERAL, 0.3 * amp * (-s).max(0.0));
                    f.joint_rot6d[LEFT_SHOULDER] = rot(LATERAL, 0.5 * swing);
                    f.joint_rot6d[RIGHT_SHOULDER] = rot(LATERAL, -0.5 * swing);
                    f
                }
                MotionArchetype::Bounce => {
                    // cycloid hops that land, at rest, on every multiple of the period
                    let dy = -0.3 * amp * (u - (TAU * u).sin() / TAU);
                    let dz = 0.1 * amp * (1.0 - (TAU * u).cos());
                    PoseFrame::identity([0.0, dy, height + dz])
                }
                MotionArchetype::SinusoidLimbs => {
                    let s = (TAU * u + phase).sin();
                    let mut f = PoseFrame::identity([0.0, 0.0, height]);
                    f.joint_rot6d[LEFT_SHOULDER] = rot(FORWARD_AXIS, 0.6 * amp * s);
                    f.joint_rot6d[RIGHT_SHOULDER] = rot(FORWARD_AXIS, -0.6 * amp * s);
                    f.joint_rot6d[LEFT_ELBOW] = rot(LATERAL, 0.4 * amp * s);
                    f.joint_rot6d[RIGHT_ELBOW] = rot(LATERAL, 0.4 * amp * s);
                    f.joint_rot6d[LEFT_HIP] = rot(FORWARD_AXIS, -0.1 * amp * s);
                    f.joint_rot6d[RIGHT_HIP] = rot(FORWARD_AXIS, 0.1 * amp * s);
                    f
                }
            }
        })
        .collect()
}

fn onset_frames(spec: &SyntheticSpec) -> Vec<usize> {
    let (n, p) = (spec.frames as f64, spec.period_frames());
    let mut out = Vec::new();
    match spec.music {
        MusicArchetype::Noise => {}
        MusicArchetype::Click => {
            let step = p.round() as usize;
            out.extend((0..spec.frames).step_by(step));
        }
        MusicArchetype::Chirp => {
            let mut t: f64 = 0.0;
            while t.round() < n {
                out.push(t.round() as usize);
                t += p * (1.0 - 0.5 * t / n);
            }
        }
    }
    out
}

fn music_track(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, onsets: &[usize]) -> Array2<f64> {
    let (n, w) = (spec.frames, spec.width);
    if spec.music == MusicArchetype::Noise {
        return Array2::from_shape_simple_fn((n, w), || rng.gen_range(0.0..1.0));
    }
    let gain: Vec<f64> = (0..w).map(|_| rng.gen_range(0.5..1.5)).collect();
    let mut last = 0;
    let mut out = Array2::zeros((n, w));
    for i in 0..n {
        if onsets.contains(&i) {
            last = i;
        }
        let decay = (-((i - last) as f64) / 2.0).exp();
        for c in 0..w {
            out[[i, c]] = gain[c] * decay;
        }
    }
    out
}

/// Landings strictly inside the clip with at least half a period after them.
fn bounce_beats(spec: &SyntheticSpec) -> Vec<f64> {
    let p = spec.period_frames();
    let last = (spec.frames - 1) as f64 - p / 2.0;
    (1..).map(|k| k as f64 * p).take_while(|&t| t <= last).collect()
}

/// Generates `spec.sequences` clips. The same `(spec, seed)` always yields
/// bit-identical output.
pub fn synth_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticSequence>> {
    spec.validate()?;
    let tree = JointTree::smpl();
    let height = standing_height(&tree);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let onsets = onset_frames(spec);
    (0..spec.sequences)
        .map(|k| {
            let mut frames = pose_track(spec, &mut rng, height);
            let positions = forward_kinematics(&MotionSequence::new(frames.clone(), spec.fps)?, &tree)?;
            let contacts = compute_contacts(
                &positions,
                spec.fps as f64,
                CONTACT_SPEED,
                CONTACT_HEIGHT,
                &ContactAssignment::default(),
            )?;
            for (f, c) in frames.iter_mut().zip(contacts) {
                f.contacts = c;
            }
            let music = MusicFeatures::new(music_track(spec, &mut rng, &onsets), spec.fps)?;
            let music_beats = match spec.music {
                MusicArchetype::Noise => None,
                _ => Some(BeatList::new(onsets.iter().map(|&o| o as f64).collect(), spec.fps)?),
            };
            let dance_beats = match spec.motion {
                MotionArchetype::Bounce => Some(BeatList::new(bounce_beats(spec), spec.fps)?),
                _ => None,
            };
            Ok(SyntheticSequence {
                name: format!("seq_{k:03}"),
                motion: MotionSequence::new(frames, spec.fps)?,
                music,
                music_beats,
                dance_beats,
            })
        })
        .collect()
}
