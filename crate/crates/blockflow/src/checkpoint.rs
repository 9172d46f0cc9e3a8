//! Checkpoint directory format: `metadata.json` plus one raw little-endian
//! f32 blob per named parameter. Names and shapes are stable across runs,
//! which is what model merging relies on.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::backbone::{BackboneParams, ModelConfig};
use crate::error::{Error, Result};
use crate::repa::TeacherConfig;
use crate::synthdata::ToySpec;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Checkpoint metadata: everything needed to rebuild the model and rerun
/// evaluation against the right corpus and teacher.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub data_spec: ToySpec,
    pub corpus_spec_hash: String,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub params: Vec<ParamMeta>,
}

/// Writes the checkpoint. The caller should snap the in-memory parameters to
/// f32 first (see [`BackboneParams::snap_to_f32`]) if it wants the reloaded
/// model to be bit-identical.
pub fn save(params: &BackboneParams, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    let pdir = dir.join("params");
    std::fs::create_dir_all(&pdir)?;
    let mut metas = Vec::new();
    for (name, a) in params.collect() {
        let mut bytes = Vec::with_capacity(a.len() * 4);
        for &x in a.iter() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        std::fs::write(pdir.join(format!("{}.bin", sanitize(&name))), bytes)?;
        metas.push(ParamMeta {
            name,
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let mut meta = meta.clone();
    meta.params = metas;
    std::fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(BackboneParams, CheckpointMeta)> {
    let meta: CheckpointMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metadata.json"))?)?;
    let mut params = BackboneParams::init(&meta.model, 0);
    let metas = meta.params.clone();
    let mut by_name: std::collections::HashMap<&str, &ParamMeta> =
        metas.iter().map(|m| (m.name.as_str(), m)).collect();
    for (name, a) in params.collect_mut() {
        let pm = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {name} missing from metadata"))
        })?;
        if (pm.rows, pm.cols) != a.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} shape {:?} does not match metadata ({}, {})",
                a.dim(),
                pm.rows,
                pm.cols
            )));
        }
        let bytes = std::fs::read(dir.join("params").join(format!("{}.bin", sanitize(&name))))?;
        if bytes.len() != a.len() * 4 {
            return Err(Error::Checkpoint(format!(
                "parameter {name} blob has {} bytes, expected {}",
                bytes.len(),
                a.len() * 4
            )));
        }
        for (i, x) in a.iter_mut().enumerate() {
            let v = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
            *x = v as f64;
        }
    }
    if !by_name.is_empty() {
        return Err(Error::Checkpoint(format!(
            "metadata lists unknown parameters: {:?}",
            by_name.keys().collect::<Vec<_>>()
        )));
    }
    Ok((params, meta))
}

fn sanitize(name: &str) -> String {
    name.replace('.', "_")
}

/// Content hash over metadata and every parameter blob, in name order.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let meta: CheckpointMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metadata.json"))?)?;
    let mut h = Sha256::new();
    h.update(std::fs::read(dir.join("metadata.json"))?);
    let mut names: Vec<&str> = meta.params.iter().map(|p| p.name.as_str()).collect();
    names.sort_unstable();
    for name in names {
        h.update(std::fs::read(dir.join("params").join(format!("{}.bin", sanitize(name))))?);
    }
    Ok(hex_string(&h.finalize()))
}

/// Per-parameter weighted average of checkpoints with identical names and
/// shapes. Weights must sum to 1.
pub fn merge_models(models: &[&BackboneParams], weights: &[f64]) -> Result<BackboneParams> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::Checkpoint(
            "merge needs one weight per checkpoint".into(),
        ));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::Checkpoint(format!(
            "merge weights sum to {wsum}, expected 1"
        )));
    }
    let base = models[0].collect();
    for m in &models[1..] {
        let other = m.collect();
        if other.len() != base.len() {
            return Err(Error::Checkpoint("parameter count mismatch in merge".into()));
        }
        for ((na, a), (nb, b)) in base.iter().zip(other.iter()) {
            if na != nb || a.dim() != b.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch in merge: {na} {:?} vs {nb} {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
    }
    let mut out = models[0].clone();
    for (name, target) in out.collect_mut() {
        let mut acc = Array2::<f64>::zeros(target.dim());
        for (m, &w) in models.iter().zip(weights.iter()) {
            let src = m
                .collect()
                .into_iter()
                .find(|(n, _)| *n == name)
                .expect("name checked above")
                .1
                .clone();
            acc.scaled_add(w, &src);
        }
        target.assign(&acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta_for(params: &BackboneParams) -> CheckpointMeta {
        CheckpointMeta {
            format_version: 1,
            model: params.cfg.clone(),
            teacher: TeacherConfig::default(),
            data_spec: ToySpec::default(),
            corpus_spec_hash: "none".into(),
            step: 0,
            seed: 0,
            config_hash: "none".into(),
            params: Vec::new(),
        }
    }

    #[test]
    fn save_load_roundtrip_after_snap() {
        let cfg = ModelConfig::tiny_for_tests();
        let mut params = BackboneParams::init(&cfg, 5);
        params.snap_to_f32();
        let dir = tempfile::tempdir().unwrap();
        save(&params, &meta_for(&params), dir.path()).unwrap();
        let (loaded, meta) = load(dir.path()).unwrap();
        assert_eq!(meta.model, cfg);
        for ((_, a), (_, b)) in params.collect().iter().zip(loaded.collect().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_hash_changes_with_params() {
        let cfg = ModelConfig::tiny_for_tests();
        let mut p1 = BackboneParams::init(&cfg, 1);
        p1.snap_to_f32();
        let d1 = tempfile::tempdir().unwrap();
        save(&p1, &meta_for(&p1), d1.path()).unwrap();
        let h1 = checkpoint_hash(d1.path()).unwrap();

        let mut p2 = BackboneParams::init(&cfg, 2);
        p2.snap_to_f32();
        let d2 = tempfile::tempdir().unwrap();
        save(&p2, &meta_for(&p2), d2.path()).unwrap();
        let h2 = checkpoint_hash(d2.path()).unwrap();
        assert_ne!(h1, h2);
    }

    #[test]
    fn merge_weight_one_returns_first_model() {
        let cfg = ModelConfig::tiny_for_tests();
        let a = BackboneParams::init(&cfg, 1);
        let b = BackboneParams::init(&cfg, 2);
        let merged = merge_models(&[&a, &b], &[1.0, 0.0]).unwrap();
        for ((_, x), (_, y)) in merged.collect().iter().zip(a.collect().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn merge_is_idempotent_on_identical_models() {
        let cfg = ModelConfig::tiny_for_tests();
        let a = BackboneParams::init(&cfg, 3);
        let merged = merge_models(&[&a, &a], &[0.5, 0.5]).unwrap();
        for ((_, x), (_, y)) in merged.collect().iter().zip(a.collect().iter()) {
            for (p, q) in x.iter().zip(y.iter()) {
                assert!((p - q).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn merge_half_half_is_elementwise_mean() {
        let cfg = ModelConfig::tiny_for_tests();
        let a = BackboneParams::init(&cfg, 4);
        let b = BackboneParams::init(&cfg, 5);
        let merged = merge_models(&[&a, &b], &[0.5, 0.5]).unwrap();
        for (((_, m), (_, x)), (_, y)) in merged
            .collect()
            .iter()
            .zip(a.collect().iter())
            .zip(b.collect().iter())
        {
            for ((mm, xx), yy) in m.iter().zip(x.iter()).zip(y.iter()) {
                assert!((mm - 0.5 * (xx + yy)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_rejects_mismatched_shapes() {
        let a = BackboneParams::init(&ModelConfig::tiny_for_tests(), 1);
        let mut cfg2 = ModelConfig::tiny_for_tests();
        cfg2.model_dim = 24;
        cfg2.heads = 2;
        let b = BackboneParams::init(&cfg2, 1);
        assert!(merge_models(&[&a, &b], &[0.5, 0.5]).is_err());
    }
}
