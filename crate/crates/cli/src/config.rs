use std::path::{Path, PathBuf};

use addlab::data::DatasetSpec;
use addlab::evaluation::EvalSpec;
use addlab::inference::CondSpec;
use addlab::nets::FeatnetConfig;
use addlab::training::{DistillConfig, ScheduleSpec, TeacherConfig};
use addlab::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every command reads the same file layout; a command ignores sections it does not use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the command. Copied into `teacher.seed` / `distill.seed` on resolve.
    pub seed: u64,
    pub inputs: Inputs,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub teacher: TeacherConfig,
    pub featnet: FeatnetConfig,
    pub distill: DistillConfig,
    pub eval: EvalSpec,
    pub sample: SampleSpec,
    pub elo: EloSpec,
    pub ablate: AblateSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    /// Directory holding `data.bin` and `dataset.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Checkpoints: a stem (`dir/teacher`), a `.bin`/`.json` file, or a run directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub featnet: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Existing comparison records to rank instead of judging.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<PathBuf>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub contestants: Vec<ContestantSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContestantSpec {
    pub id: String,
    pub checkpoint: PathBuf,
    pub n_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    pub n_steps: Vec<usize>,
    pub conds: Vec<CondSpec>,
    pub seeds: Vec<u64>,
    pub batch: usize,
    pub svg: bool,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            n_steps: vec![1, 2, 4],
            conds: Vec::new(),
            seeds: vec![0],
            batch: 1000,
            svg: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EloSpec {
    pub n_boot: usize,
    /// Each task is one conditioning label judged on a fresh batch.
    pub tasks: usize,
    pub batch: usize,
    pub n_proj: usize,
}

impl Default for EloSpec {
    fn default() -> Self {
        EloSpec {
            n_boot: 1000,
            tasks: 16,
            batch: 200,
            n_proj: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSpec {
    /// Any `[distill]` key.
    pub axis: String,
    pub values: Vec<toml::Value>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        AblateSpec {
            axis: "cond_mode".into(),
            values: ["none", "label", "image", "label+image"]
                .iter()
                .map(|v| toml::Value::String(v.to_string()))
                .collect(),
        }
    }
}

pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes to toml")
}

impl RunConfig {
    /// Seed propagation done once, so the written config is self-consistent.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.teacher.seed = self.seed;
        self.distill.seed = self.seed;
        self
    }
}

/// Resolves a checkpoint argument to a stem, looking for `default` inside directories.
pub fn checkpoint_stem(p: &Path, default: &str) -> PathBuf {
    if p.is_dir() {
        return p.join(default);
    }
    match p.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config("bogus = 1", "t").is_err());
        assert!(parse_config("[distill]\nlamda = 1.0", "t").is_err());
        assert!(parse_config("[dataset]\nkind = \"ring_mixture\"\nn_modes = 8\nn_points = 500\nnoise_std = 0.1\nextra = 2", "t").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = parse_config("seed = 4\n[distill]\ncond_mode = \"label+image\"\niters = 7", "t")
            .unwrap()
            .resolve(Some(9));
        assert_eq!(cfg.distill.seed, 9);
        assert_eq!(cfg.teacher.seed, 9);
        let back = parse_config(&to_toml(&cfg), "t").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.clone().resolve(None), cfg);
    }

    #[test]
    fn stems_from_files_and_dirs() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(checkpoint_stem(d.path(), "teacher"), d.path().join("teacher"));
        assert_eq!(checkpoint_stem(Path::new("a/b.bin"), "x"), PathBuf::from("a/b"));
        assert_eq!(checkpoint_stem(Path::new("a/b"), "x"), PathBuf::from("a/b"));
    }
}
