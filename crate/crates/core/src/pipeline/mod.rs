//! Configuration, seeding and the train / generate / evaluate / curate /
//! synth commands.

pub mod io;
pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{self, PopularityModel, Rule};
use crate::diffusion::sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalItem, MetricReport};
use crate::popnet::{load_checkpoint, AttentionConfig, MusicFeatures, PopDg};
use crate::skeleton::{JointTree, MotionSequence};
use crate::training::{train, TrainConfig, TrainSample};

pub use io::{load_features, load_motion, load_pair, read_json, save_features, save_motion, write_json};
pub use synth::{synth_dataset, GroundTruth, MotionArchetype, MusicArchetype, SyntheticSequence, SyntheticSpec};

/// Default DDIM steps for generation.
pub const GENERATE_STEPS: usize = 50;
pub const MOTION_DIR: &str = "motion";
pub const MUSIC_DIR: &str = "music";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
const MOTION_EXTENSIONS: [&str; 2] = ["popm", "json"];

/// Independent random streams derived from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Synth = 3,
    Sample = 4,
}

pub fn derive_seed(root: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; model init and training draw from derived streams, so
    /// `train.seed` is overwritten.
    pub seed: u64,
    pub fps: u32,
    /// Dataset laid out as `synth` writes it: `motion/` and `music/`.
    pub data: PathBuf,
    /// Run directory for checkpoints and logs.
    pub out: PathBuf,
    pub model: AttentionConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fps: 30,
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            model: AttentionConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn under(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 {
            return Err(Error::config("fps", "must be positive"));
        }
        if self.data.as_os_str().is_empty() {
            return Err(Error::config("data", "must name a directory"));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::config("out", "must name a directory"));
        }
        self.model.validate().map_err(|e| under("model", e))?;
        self.train.validate().map_err(|e| under("train", e))
    }

    /// Reads and validates a config; relative paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.out] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Motion files in `motion_dir` paired by stem with `<stem>.json` features
/// in `music_dir`.
pub fn load_dataset(motion_dir: &Path, music_dir: &Path) -> Result<Vec<(String, MotionSequence, MusicFeatures)>> {
    let files = io::list_by_stem(motion_dir, &MOTION_EXTENSIONS)?;
    if files.is_empty() {
        return Err(Error::Invalid(format!("no motion files in {}", motion_dir.display())));
    }
    files
        .into_iter()
        .map(|(stem, path)| {
            let music = music_dir.join(format!("{stem}.json"));
            if !music.is_file() {
                return Err(Error::Invalid(format!("no music features {} for {}", music.display(), path.display())));
            }
            let (m, f) = load_pair(&path, &music)?;
            Ok((stem, m, f))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub clips: usize,
    pub parameters: usize,
    pub initial_simple: f64,
    /// Mean over the last ten steps.
    pub final_simple: f64,
    pub final_total: f64,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trained {} parameters for {} steps on {} clips in {:.1}s\nL_simple {:.5} -> {:.5}, total {:.5}\ncheckpoint {}",
            self.parameters,
            self.steps,
            self.clips,
            self.seconds,
            self.initial_simple,
            self.final_simple,
            self.final_total,
            self.checkpoint.display()
        )
    }
}

pub fn cmd_train(config: &Path) -> Result<TrainSummary> {
    let cfg = PipelineConfig::load(config)?;
    let data = load_dataset(&cfg.data.join(MOTION_DIR), &cfg.data.join(MUSIC_DIR))?;
    let mut samples = Vec::with_capacity(data.len());
    for (name, m, f) in data {
        if m.fps != cfg.fps {
            return Err(Error::config("fps", format!("config says {} but {name} is at {}", cfg.fps, m.fps)));
        }
        if f.width() != cfg.model.music_width {
            return Err(Error::config(
                "model.music_width",
                format!("{} but {name} has {} feature channels", cfg.model.music_width, f.width()),
            ));
        }
        samples.push(TrainSample::new(m.to_array(), f.features, m.fps)?);
    }
    let model = PopDg::new(cfg.model.clone(), derive_seed(cfg.seed, Stream::Init))?;
    let parameters = model.params().num_scalars();
    let tc = TrainConfig {
        seed: derive_seed(cfg.seed, Stream::Train),
        ..cfg.train.clone()
    };
    let start = Instant::now();
    let outcome = train(model, &samples, &tc, Some(&cfg.out))?;
    let h = &outcome.history;
    let tail = &h[h.len().saturating_sub(10)..];
    let mean = |f: fn(&crate::training::StepRecord) -> f64| tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64;
    let summary = TrainSummary {
        steps: h.len(),
        clips: samples.len(),
        parameters,
        initial_simple: h.first().map_or(f64::NAN, |r| r.losses.simple),
        final_simple: mean(|r| r.losses.simple),
        final_total: mean(|r| r.losses.total),
        checkpoint: cfg.out.join("final.popw"),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub frames: usize,
    pub fps: u32,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "generated {} frames at {} fps with {} DDIM steps (seed {}) -> {}",
            self.frames,
            self.fps,
            self.steps,
            self.seed,
            self.out.display()
        )
    }
}

/// Deterministic (eta = 0) sampling conditioned on a feature file; the
/// motion has one frame per music frame.
pub fn cmd_generate(checkpoint: &Path, music: &Path, seed: u64, out: &Path, steps: usize) -> Result<GenerateSummary> {
    let (model, schedule, _) = load_checkpoint(checkpoint)?;
    let features = load_features(music)?;
    if features.width() != model.config().music_width {
        return Err(Error::config(
            "music",
            format!(
                "{} has {} channels, the checkpoint expects {}",
                music.display(),
                features.width(),
                model.config().music_width
            ),
        ));
    }
    let steps = steps.min(schedule.steps());
    info!("sampling {} frames with {steps} steps", features.frames());
    let motion = sample(&model, &features, &schedule, steps, 0.0, seed)?;
    save_motion(out, &motion)?;
    Ok(GenerateSummary {
        frames: motion.len(),
        fps: motion.fps,
        steps,
        seed,
        out: out.to_path_buf(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub report: MetricReport,
    pub path: PathBuf,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

impl fmt::Display for EvaluateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        writeln!(f, "{:<14}{:>9}{:>9}{:>9}{:>9}{:>9}", "", "PFC", "PBC", "Div_k", "Div_g", "BAS")?;
        let line = |f: &mut fmt::Formatter<'_>, name: &str, r: &MetricReport| {
            writeln!(
                f,
                "{name:<14}{:>9.4}{:>9.4}{:>9}{:>9}{:>9}",
                r.pfc,
                r.pbc,
                opt(r.div_k),
                opt(r.div_g),
                opt(r.bas)
            )
        };
        line(f, "generated", r)?;
        if let Some(g) = &r.reference {
            line(f, "reference", g)?;
        }
        write!(f, "{} sequences, report {}", r.sequences.len(), self.path.display())
    }
}

fn eval_items(motion_dir: &Path, music_dir: &Path) -> Result<Vec<EvalItem>> {
    Ok(load_dataset(motion_dir, music_dir)?
        .into_iter()
        .map(|(name, motion, music)| EvalItem {
            name,
            motion,
            music: Some(music),
        })
        .collect())
}

/// Scores every motion file in `generated` (and `reference`) against the
/// same-stem features in `music`.
pub fn cmd_evaluate(generated: &Path, reference: Option<&Path>, music: &Path, report: &Path) -> Result<EvaluateSummary> {
    let gen = eval_items(generated, music)?;
    let reference = reference.map(|r| eval_items(r, music)).transpose()?;
    let r = evaluate(&gen, reference.as_deref(), &JointTree::smpl())?;
    write_json(report, &r)?;
    Ok(EvaluateSummary {
        report: r,
        path: report.to_path_buf(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurateSummary {
    pub total: usize,
    pub kept: usize,
    pub failed_popularity: usize,
    pub failed_followers: usize,
    pub out: PathBuf,
    pub audit: PathBuf,
}

impl fmt::Display for CurateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "kept {} of {} videos ({} below the popularity threshold, {} with views <= followers)\nselected {}\naudit {}",
            self.kept,
            self.total,
            self.failed_popularity,
            self.failed_followers,
            self.out.display(),
            self.audit.display()
        )
    }
}

/// Audit file written next to the curated CSV.
pub fn audit_path(out: &Path) -> PathBuf {
    out.with_extension("audit.json")
}

/// Scores a stats CSV, writes the selected rows and a JSON audit. Without a
/// model file the built-in coefficients are used.
pub fn cmd_curate(input: &Path, model: Option<&Path>, out: &Path) -> Result<CurateSummary> {
    let model = match model {
        Some(p) => PopularityModel::load(p)?,
        None => PopularityModel::default(),
    };
    let rows = curation::read_stats_csv(input)?;
    let audit = curation::curate(&rows, &model)?;
    curation::write_selected_csv(out, &rows, &audit)?;
    let audit_file = audit_path(out);
    write_json(&audit_file, &audit)?;
    let failed = |rule| audit.rejected().filter(|d| d.failed.contains(&rule)).count();
    Ok(CurateSummary {
        total: rows.len(),
        kept: audit.kept().count(),
        failed_popularity: failed(Rule::Popularity),
        failed_followers: failed(Rule::Follower),
        out: out.to_path_buf(),
        audit: audit_file,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub out: PathBuf,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "wrote {} sequences of {} frames ({} feature channels) to {}",
            self.sequences,
            self.frames,
            self.width,
            self.out.display()
        )
    }
}

/// Writes `motion/<name>.popm`, `music/<name>.json`, the ground truth and a
/// copy of the spec under `out`.
pub fn write_dataset(out: &Path, spec: &SyntheticSpec, data: &[SyntheticSequence]) -> Result<()> {
    for s in data {
        save_motion(&out.join(MOTION_DIR).join(format!("{}.popm", s.name)), &s.motion)?;
        save_features(&out.join(MUSIC_DIR).join(format!("{}.json", s.name)), &s.music)?;
    }
    let truth: Vec<GroundTruth> = data.iter().map(GroundTruth::from).collect();
    write_json(&out.join(GROUND_TRUTH_FILE), &truth)?;
    write_json(&out.join("spec.json"), spec)
}

pub fn cmd_synth(spec: &Path, out: &Path) -> Result<SynthSummary> {
    let s: SyntheticSpec = read_json(spec)?;
    let data = synth_dataset(&s, derive_seed(s.seed, Stream::Synth))?;
    write_dataset(out, &s, &data)?;
    Ok(SynthSummary {
        sequences: data.len(),
        frames: s.frames,
        width: s.width,
        out: out.to_path_buf(),
    })
}
