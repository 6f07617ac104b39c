use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::AttentionConfig;
use super::model::PopDg;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"POPW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: AttentionConfig,
    pub schedule: NoiseSchedule,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

// Layout: magic, u32 LE manifest length, manifest JSON, f32 LE payload.
fn encode(model: &PopDg, schedule: &NoiseSchedule, step: u64) -> Result<Vec<u8>> {
    let params = model.params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for id in params.ids() {
        let v = params.get(id);
        tensors.push(TensorEntry {
            name: params.name(id).to_string(),
            shape: [v.nrows(), v.ncols()],
            offset,
        });
        offset += v.len();
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        schedule: schedule.clone(),
        step,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.values() {
        for x in v.iter() {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> std::result::Result<(PopDg, NoiseSchedule, CheckpointManifest), String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("missing checkpoint magic".into());
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(8..8 + len).ok_or("truncated manifest")?;
    let manifest: CheckpointManifest = serde_json::from_slice(json).map_err(|e| e.to_string())?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format!("unsupported format version {}", manifest.format_version));
    }
    let payload = &bytes[8 + len..];
    let model = PopDg::new(manifest.config.clone(), 0).map_err(|e| e.to_string())?;
    let mut params = model.params().clone();
    if params.len() != manifest.tensors.len() {
        return Err(format!(
            "expected {} tensors for this configuration, found {}",
            params.len(),
            manifest.tensors.len()
        ));
    }
    let ids: Vec<_> = params.ids().collect();
    for (id, entry) in ids.into_iter().zip(&manifest.tensors) {
        let want = params.get(id).dim();
        if params.name(id) != entry.name || want != (entry.shape[0], entry.shape[1]) {
            return Err(format!("tensor {} does not match the configuration", entry.name));
        }
        let n = want.0 * want.1;
        let raw = payload
            .get(4 * entry.offset..4 * (entry.offset + n))
            .ok_or_else(|| format!("payload truncated at tensor {}", entry.name))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        *params.get_mut(id) = Array2::from_shape_vec(want, data).expect("sized above");
    }
    let schedule = manifest.schedule.clone();
    Ok((model.with_params(params), schedule, manifest))
}

/// Writes weights, configuration and noise schedule to a single file.
pub fn save_checkpoint(path: &Path, model: &PopDg, schedule: &NoiseSchedule, step: u64) -> Result<()> {
    let bytes = encode(model, schedule, step)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(PopDg, NoiseSchedule, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;

    fn model() -> PopDg {
        let mut cfg = AttentionConfig::tiny(8);
        cfg.zero_init_heads = false;
        PopDg::new(cfg, 3).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let sched = NoiseSchedule::new(50, ScheduleKind::Cosine).unwrap();
        let a = dir.path().join("a.popw");
        let b = dir.path().join("b.popw");
        save_checkpoint(&a, &model(), &sched, 7).unwrap();
        let (m, s, manifest) = load_checkpoint(&a).unwrap();
        assert_eq!(manifest.step, 7);
        assert_eq!(s, sched);
        save_checkpoint(&b, &m, &s, 7).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn loaded_weights_are_f32_rounded() {
        let m = model();
        let sched = NoiseSchedule::new(10, ScheduleKind::Linear).unwrap();
        let bytes = encode(&m, &sched, 0).unwrap();
        let (back, _, _) = decode(&bytes).unwrap();
        for (x, y) in m.params().values().iter().zip(back.params().values()) {
            for (a, b) in x.iter().zip(y.iter()) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.popw");
        fs::write(&p, b"NOPE1234").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));

        let sched = NoiseSchedule::new(10, ScheduleKind::Linear).unwrap();
        let mut bytes = encode(&model(), &sched, 0).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
    }
}
