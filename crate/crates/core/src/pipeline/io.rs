//! Motion, feature and report files.
//!
//! Motion files come in two flavours chosen by extension. `.json` holds
//! `{fps, layout, frames}`; anything else is binary POPM: magic `POPM`, then
//! u32 LE version, fps, frame count and row width, then the rows as f64 LE.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::popnet::MusicFeatures;
use crate::skeleton::{MotionSequence, POSE_DIM};

pub const MOTION_MAGIC: &[u8; 4] = b"POPM";
pub const MOTION_VERSION: u32 = 1;
pub const LAYOUT: &str = "root3+rot6d24+contact9";
const HEADER_LEN: usize = 4 + 4 * 4;

fn format_err(path: &Path, reason: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

#[derive(Serialize, Deserialize)]
struct MotionFile {
    fps: u32,
    layout: String,
    frames: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FeatureFile {
    fps: u32,
    width: usize,
    frames: Vec<Vec<f64>>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| format_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(path: &Path, rows: Vec<Vec<f64>>, width: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(format_err(path, format!("row {i} has {} values, expected {width}", r.len())));
    }
    Array2::from_shape_vec((n, width), rows.into_iter().flatten().collect()).map_err(|e| format_err(path, e))
}

pub fn encode_motion(seq: &MotionSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * POSE_DIM * seq.len());
    out.extend_from_slice(MOTION_MAGIC);
    for v in [MOTION_VERSION, seq.fps, seq.len() as u32, POSE_DIM as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in &seq.frames {
        for x in f.flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// `path` only labels errors.
pub fn decode_motion(bytes: &[u8], path: &Path) -> Result<MotionSequence> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MOTION_MAGIC {
        return Err(format_err(path, "bad magic, not a POPM motion file"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
    let (version, fps, n, width) = (word(0), word(1), word(2) as usize, word(3) as usize);
    if version != MOTION_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    if width != POSE_DIM {
        return Err(format_err(path, format!("row width {width}, expected {POSE_DIM}")));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * n * width {
        return Err(format_err(path, format!("payload has {} bytes, header promises {}", body.len(), 8 * n * width)));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let a = Array2::from_shape_vec((n, width), values).map_err(|e| format_err(path, e))?;
    MotionSequence::from_array(a.view(), fps).map_err(|e| format_err(path, e))
}

pub fn save_motion(path: &Path, seq: &MotionSequence) -> Result<()> {
    if is_json(path) {
        return write_json(
            path,
            &MotionFile {
                fps: seq.fps,
                layout: LAYOUT.into(),
                frames: rows(&seq.to_array()),
            },
        );
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_motion(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    if is_json(path) {
        let f: MotionFile = read_json(path)?;
        if f.layout != LAYOUT {
            return Err(format_err(path, format!("layout `{}`, expected `{LAYOUT}`", f.layout)));
        }
        let a = from_rows(path, f.frames, POSE_DIM)?;
        return MotionSequence::from_array(a.view(), f.fps).map_err(|e| format_err(path, e));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_motion(&bytes, path)
}

pub fn save_features(path: &Path, music: &MusicFeatures) -> Result<()> {
    write_json(
        path,
        &FeatureFile {
            fps: music.fps,
            width: music.width(),
            frames: rows(&music.features),
        },
    )
}

pub fn load_features(path: &Path) -> Result<MusicFeatures> {
    let f: FeatureFile = read_json(path)?;
    let a = from_rows(path, f.frames, f.width)?;
    MusicFeatures::new(a, f.fps).map_err(|e| format_err(path, e))
}

/// Loads a motion and its music, checking that they share a frame grid.
pub fn load_pair(motion: &Path, music: &Path) -> Result<(MotionSequence, MusicFeatures)> {
    let m = load_motion(motion)?;
    let f = load_features(music)?;
    if m.fps != f.fps {
        return Err(Error::config(
            "fps",
            format!("{} is at {} fps but {} is at {}", motion.display(), m.fps, music.display(), f.fps),
        ));
    }
    f.check_aligned(m.len())?;
    Ok((m, f))
}

/// Files in `dir` with one of `extensions`, sorted by file stem.
pub fn list_by_stem(dir: &Path, extensions: &[&str]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && extensions.iter().any(|x| x.eq_ignore_ascii_case(ext)) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Invalid(format!(
            "{} and {} share a stem",
            w[0].1.display(),
            w[1].1.display()
        )));
    }
    Ok(out)
}
