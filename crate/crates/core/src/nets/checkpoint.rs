use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::denoiser::{Denoiser, DenoiserConfig, PredictionMode};
use super::discriminator::{DiscArch, DiscriminatorBundle};
use super::featnet::{FeatnetArch, FeatureNetwork};
use super::params::ParamStore;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::numcore::serialize;

/// Sidecar JSON written next to every `.bin` parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub network: String,
    pub architecture: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_mode: Option<PredictionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleKind>,
    pub config_hash: String,
    /// sha256 of the parameter file.
    pub params_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` and `<stem>.json`; returns the parameter file hash.
pub fn save_params(stem: &Path, params: &ParamStore, mut manifest: Manifest) -> Result<String> {
    let (bin, json) = paths(stem);
    if let Some(dir) = bin.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = serialize::encode(&params.to_named(""));
    let hash = sha256_hex(&bytes);
    std::fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    manifest.params_sha256 = hash.clone();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(hash)
}

pub fn read_manifest(stem: &Path) -> Result<Manifest> {
    let (_, json) = paths(stem);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(json.display().to_string(), e.to_string()))
}

/// Existence check used before any compute starts.
pub fn checkpoint_exists(stem: &Path) -> Result<()> {
    let (bin, json) = paths(stem);
    for p in [&bin, &json] {
        if !p.is_file() {
            return Err(Error::Input(format!("checkpoint file {} not found", p.display())));
        }
    }
    Ok(())
}

fn load_into(stem: &Path, expected: &str, params: &mut ParamStore) -> Result<Manifest> {
    checkpoint_exists(stem)?;
    let manifest = read_manifest(stem)?;
    if manifest.network != expected {
        return Err(Error::format(
            stem.display().to_string(),
            format!("expected a {expected} checkpoint, found {}", manifest.network),
        ));
    }
    let (bin, _) = paths(stem);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if sha256_hex(&bytes) != manifest.params_sha256 {
        return Err(Error::format(bin.display().to_string(), "parameter hash does not match manifest"));
    }
    let tensors = serialize::decode(&bytes, &bin.display().to_string())?;
    params.load_named(&tensors, "")?;
    Ok(manifest)
}

fn arch_of<T: for<'de> Deserialize<'de>>(m: &Manifest, stem: &Path) -> Result<T> {
    serde_json::from_value(m.architecture.clone()).map_err(|e| Error::format(stem.display().to_string(), e.to_string()))
}

fn peek(stem: &Path) -> Result<Manifest> {
    checkpoint_exists(stem)?;
    read_manifest(stem)
}

pub fn save_denoiser(stem: &Path, net: &Denoiser, schedule: ScheduleKind, config_hash: &str) -> Result<String> {
    save_params(
        stem,
        net.params(),
        Manifest {
            network: "denoiser".into(),
            architecture: serde_json::to_value(net.config()).expect("config serializes"),
            prediction_mode: Some(net.mode()),
            schedule: Some(schedule),
            config_hash: config_hash.into(),
            params_sha256: String::new(),
        },
    )
}

pub fn load_denoiser(stem: &Path) -> Result<(Denoiser, Manifest)> {
    let m = peek(stem)?;
    let cfg: DenoiserConfig = arch_of(&m, stem)?;
    let mode = m
        .prediction_mode
        .ok_or_else(|| Error::format(stem.display().to_string(), "manifest lacks prediction_mode"))?;
    let mut net = Denoiser::new(cfg, mode, &mut crate::rng::seeded(0))?;
    let m = load_into(stem, "denoiser", net.params_mut())?;
    Ok((net, m))
}

pub fn save_featnet(stem: &Path, net: &FeatureNetwork, config_hash: &str) -> Result<String> {
    save_params(
        stem,
        net.params(),
        Manifest {
            network: "featnet".into(),
            architecture: serde_json::to_value(net.arch()).expect("arch serializes"),
            prediction_mode: None,
            schedule: None,
            config_hash: config_hash.into(),
            params_sha256: String::new(),
        },
    )
}

/// Loaded feature networks are always frozen.
pub fn load_featnet(stem: &Path) -> Result<(FeatureNetwork, Manifest)> {
    let m = peek(stem)?;
    let arch: FeatnetArch = arch_of(&m, stem)?;
    let mut net = FeatureNetwork::new(arch, 0)?;
    let m = load_into(stem, "featnet", net.params_mut())?;
    net.freeze();
    Ok((net, m))
}

pub fn save_discriminator(stem: &Path, d: &DiscriminatorBundle, config_hash: &str) -> Result<String> {
    save_params(
        stem,
        d.params(),
        Manifest {
            network: "discriminator".into(),
            architecture: serde_json::to_value(d.arch()).expect("arch serializes"),
            prediction_mode: None,
            schedule: None,
            config_hash: config_hash.into(),
            params_sha256: String::new(),
        },
    )
}

pub fn load_discriminator(stem: &Path) -> Result<(DiscriminatorBundle, Manifest)> {
    let m = peek(stem)?;
    let arch: DiscArch = arch_of(&m, stem)?;
    let mut d = DiscriminatorBundle::new(arch, 0)?;
    let m = load_into(stem, "discriminator", d.params_mut())?;
    Ok((d, m))
}
