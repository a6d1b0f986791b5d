use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::add::{distill, DistillOutcome, Frozen, LossReport};
use super::config::{DistillConfig, ScheduleSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::checkpoint::{
    checkpoint_exists, load_denoiser, load_featnet, save_denoiser, save_discriminator, sha256_hex,
};

#[derive(Clone, Debug)]
pub struct DistillPaths {
    pub data: PathBuf,
    /// Checkpoint stems, without extension.
    pub teacher: PathBuf,
    pub featnet: PathBuf,
    pub out: PathBuf,
}

pub struct DistillRun {
    pub outcome: DistillOutcome,
    pub config_hash: String,
    pub student_hash: String,
}

/// sha256 of the compact JSON form of any config value.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

pub fn write_losses_csv(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut text = String::from(LossReport::CSV_HEADER);
    text.push('\n');
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads frozen inputs, distills, and writes `student`, `discriminator`,
/// `losses.csv` and `snapshots.jsonl` under `paths.out`.
pub fn run_distillation(
    cfg: &DistillConfig,
    sched_spec: &ScheduleSpec,
    paths: &DistillPaths,
    on_step: impl FnMut(&LossReport),
) -> Result<DistillRun> {
    checkpoint_exists(&paths.teacher)?;
    checkpoint_exists(&paths.featnet)?;
    if !paths.data.join("data.bin").is_file() {
        return Err(Error::Input(format!("dataset not found in {}", paths.data.display())));
    }
    let sched = sched_spec.build()?;
    cfg.validate(&sched)?;
    let data = Dataset::load(&paths.data)?;
    let (teacher, _) = load_denoiser(&paths.teacher)?;
    let (featnet, _) = load_featnet(&paths.featnet)?;

    let hash = config_hash(&(cfg, sched_spec));
    let outcome = distill(
        Frozen {
            teacher: &teacher,
            featnet: &featnet,
        },
        &data,
        cfg,
        &sched,
        on_step,
    )?;

    std::fs::create_dir_all(&paths.out).map_err(|e| Error::io(&paths.out, e))?;
    let student_hash = save_denoiser(&paths.out.join("student"), &outcome.student, sched_spec.kind, &hash)?;
    save_discriminator(&paths.out.join("discriminator"), &outcome.disc, &hash)?;
    write_losses_csv(&paths.out.join("losses.csv"), &outcome.reports)?;
    let snap = paths.out.join("snapshots.jsonl");
    let mut f = std::fs::File::create(&snap).map_err(|e| Error::io(&snap, e))?;
    for s in &outcome.snapshots {
        writeln!(f, "{}", serde_json::to_string(s).expect("snapshot serializes")).map_err(|e| Error::io(&snap, e))?;
    }
    Ok(DistillRun {
        outcome,
        config_hash: hash,
        student_hash,
    })
}
