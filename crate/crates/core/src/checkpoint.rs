//! Checkpoint directories: `params.bin` (little-endian f64, parameter-index
//! order) and `checkpoint.json` (architecture, lineage, parameter index).

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, ProbUNet};
use crate::error::{Error, Result};
use crate::imageio::write_bytes;
use crate::model::ProsonaModel;
use crate::nn::Parameters;
use crate::prompt::{ProjectionMlp, TextEncoderSpec};

pub const FORMAT_VERSION: &str = "prosona-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    /// First 16 hex digits of sha256(params.bin).
    pub checkpoint_id: String,
    pub stage: u8,
    /// "best" or "last".
    pub tag: String,
    pub epoch: usize,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub text_encoder: String,
    pub embed_dim: Option<usize>,
    pub git_hash: Option<String>,
    /// Stage-1 checkpoint this one was trained from.
    pub parent: Option<String>,
    pub metrics: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub params_sha256: String,
}

fn param_index(model: &ProsonaModel) -> (Vec<ParamEntry>, Vec<f64>) {
    let mut entries = Vec::new();
    let mut flat = Vec::new();
    let mut push = |name: String, v: &[f64]| {
        entries.push(ParamEntry {
            name,
            len: v.len(),
        });
        flat.extend_from_slice(v);
    };
    model.backbone.visit("backbone", &mut push);
    if let Some(p) = &model.projection {
        p.visit("projection", &mut push);
    }
    (entries, flat)
}

fn to_bytes(flat: &[f64]) -> Vec<u8> {
    flat.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// sha256 over the little-endian encoding of every parameter.
pub fn parameter_checksum<P: Parameters>(params: &P) -> String {
    hex::encode(Sha256::digest(to_bytes(&params.flatten())))
}

/// Best-effort `git rev-parse HEAD` of the working directory.
pub fn git_hash() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

#[derive(Debug, Clone)]
pub struct SaveOptions {
    pub stage: u8,
    pub tag: String,
    pub epoch: usize,
    pub seed: u64,
    pub parent: Option<String>,
    pub metrics: serde_json::Value,
}

pub fn save(model: &ProsonaModel, dir: &Path, opts: &SaveOptions) -> Result<CheckpointMeta> {
    let (params, flat) = param_index(model);
    let bytes = to_bytes(&flat);
    let digest = hex::encode(Sha256::digest(&bytes));
    let meta = CheckpointMeta {
        format: FORMAT_VERSION.to_string(),
        checkpoint_id: digest[..16].to_string(),
        stage: opts.stage,
        tag: opts.tag.clone(),
        epoch: opts.epoch,
        seed: opts.seed,
        backbone: model.backbone.config,
        text_encoder: model.encoder_spec.to_string(),
        embed_dim: model.projection.as_ref().map(ProjectionMlp::input_dim),
        git_hash: git_hash(),
        parent: opts.parent.clone(),
        metrics: opts.metrics.clone(),
        params,
        params_sha256: digest,
    };
    write_bytes(&dir.join("params.bin"), &bytes)?;
    let mut json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    json.push(b'\n');
    write_bytes(&dir.join("checkpoint.json"), &json)?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("checkpoint.json");
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.format != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint format {:?}", meta.format),
        ));
    }
    Ok(meta)
}

/// Loads a checkpoint. `encoder_override` replaces the recorded text encoder
/// (needed when an external embedding table has moved).
pub fn load(dir: &Path, encoder_override: Option<TextEncoderSpec>) -> Result<(ProsonaModel, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let bin: PathBuf = dir.join("params.bin");
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(&bin, "length is not a multiple of 8"));
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != meta.params_sha256 {
        return Err(Error::format(&bin, "checksum does not match checkpoint.json"));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let spec = match encoder_override {
        Some(s) => s,
        None => match TextEncoderSpec::parse(&meta.text_encoder)? {
            TextEncoderSpec::Fallback { .. } => TextEncoderSpec::Fallback {
                dim: meta.embed_dim.unwrap_or(crate::prompt::HashedBowEncoder::DEFAULT_DIM),
            },
            other => other,
        },
    };
    // Architecture is rebuilt from the config; values are then overwritten.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut backbone = ProbUNet::new(meta.backbone, &mut rng)?;
    let projection = meta
        .embed_dim
        .map(|d| ProjectionMlp::new(d, meta.backbone.latent_dim, true, &mut rng));
    let n_backbone = backbone.num_parameters();
    let n_total = n_backbone + projection.as_ref().map_or(0, |p| p.num_parameters());
    if flat.len() != n_total {
        return Err(Error::format(
            &bin,
            format!("holds {} values, architecture needs {n_total}", flat.len()),
        ));
    }
    backbone.load_flat(&flat[..n_backbone]);
    let projection = projection.map(|mut p| {
        p.load_flat(&flat[n_backbone..]);
        p
    });
    let model = ProsonaModel::new(backbone, projection, spec)?;
    let (index, _) = param_index(&model);
    if index != meta.params {
        return Err(Error::format(
            dir.join("checkpoint.json"),
            "parameter index does not match the architecture",
        ));
    }
    Ok((model, meta))
}
