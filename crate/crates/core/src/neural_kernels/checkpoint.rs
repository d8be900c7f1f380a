//! Checkpoint directories: `manifest.json` lists every parameter in order and
//! `params.bin` holds the values as little-endian `f32`, row-major,
//! concatenated in manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KernelError, ParamSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

pub fn save_params<P: ParamSet + ?Sized>(params: &P, dir: &Path) -> Result<(), KernelError> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    params.visit(&mut |p| {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: bytes.len() as u64,
        });
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, KernelError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads values by name into an already-shaped parameter set. Every parameter
/// of `params` must be present with an identical shape.
pub fn load_params<P: ParamSet + ?Sized>(params: &mut P, dir: &Path) -> Result<(), KernelError> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let by_name: HashMap<&str, &ManifestEntry> = manifest.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut failure: Option<KernelError> = None;
    params.visit_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.get(p.name.as_str()) else {
            failure = Some(KernelError::Checkpoint(format!("missing parameter {}", p.name)));
            return;
        };
        if entry.shape != p.value.shape() || entry.dtype != "f32" {
            failure = Some(KernelError::Shape(format!(
                "parameter {}: checkpoint has {:?} ({}), model expects {:?}",
                p.name,
                entry.shape,
                entry.dtype,
                p.value.shape()
            )));
            return;
        }
        let start = entry.byte_offset as usize;
        let end = start + 4 * p.value.len();
        let Some(raw) = bytes.get(start..end) else {
            failure = Some(KernelError::Checkpoint(format!("{} runs past params.bin", p.name)));
            return;
        };
        for (v, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Rounds every parameter to `f32` precision, matching a save/load cycle.
pub fn round_to_f32<P: ParamSet + ?Sized>(params: &mut P) {
    params.visit_mut(&mut |p| {
        p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    });
}
