use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use addlab::data::{generate_dataset, Dataset, LabeledPoints};
use addlab::elo::{rank, read_records_csv, simulated_judge, write_records_csv, ComparisonRecord, Contestant, Dimension};
use addlab::evaluation::{append_jsonl, evaluate_checkpoint, generate, CheckpointEval, MetricReport};
use addlab::inference::{sample_grid, GridSpec};
use addlab::nets::checkpoint::{checkpoint_exists, load_denoiser, load_featnet, save_denoiser, save_featnet};
use addlab::nets::{pretrain_feature_network, Denoiser, FeatureNetwork};
use addlab::rng;
use addlab::training::{config_hash, run_distillation, train_teacher as fit_teacher, DistillConfig, DistillPaths, LossReport};
use addlab::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{checkpoint_stem, load_config, to_toml, RunConfig};
use crate::Common;

pub const CODE_HASH: &str = env!("ADDLAB_CODE_HASH");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionInfo {
    pub package: String,
    pub version: String,
    pub code_hash: String,
}

impl VersionInfo {
    pub fn current() -> Self {
        VersionInfo {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            code_hash: CODE_HASH.into(),
        }
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("value serializes");
    io(path, std::fs::write(path, text + "\n"))
}

fn resolved(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.resolve(c.seed))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Input(format!("config is missing inputs.{key}")))
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let d = required(&cfg.inputs.data, "data")?.clone();
    if !d.join("data.bin").is_file() || !d.join("dataset.json").is_file() {
        return Err(Error::Input(format!("no dataset in {}", d.display())));
    }
    Ok(d)
}

fn stem_of(p: &Option<PathBuf>, key: &str, default: &str) -> Result<PathBuf> {
    let stem = checkpoint_stem(required(p, key)?, default);
    checkpoint_exists(&stem)?;
    Ok(stem)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Refuses output directories that hold inputs or earlier artifacts, then
/// creates `out` with its resolved config and version stamp.
pub fn open_out_dir(out: &Path, cfg: &RunConfig, input_dirs: &[&Path]) -> Result<()> {
    for d in input_dirs {
        if same_dir(out, d) {
            return Err(Error::Input(format!("output directory {} is also an input", out.display())));
        }
    }
    if out.exists() {
        let mut entries = io(out, std::fs::read_dir(out))?;
        if entries.next().is_some() {
            return Err(Error::Input(format!(
                "output directory {} is not empty; refusing to overwrite",
                out.display()
            )));
        }
    }
    io(out, std::fs::create_dir_all(out))?;
    let p = out.join("resolved_config.toml");
    io(&p, std::fs::write(&p, to_toml(cfg)))?;
    write_json(&out.join("version.json"), &VersionInfo::current())
}

fn parent_of(stem: &Path) -> &Path {
    stem.parent().unwrap_or(Path::new("."))
}

fn log_every(iters: usize) -> usize {
    (iters / 10).max(1)
}

pub fn gen_data(c: &Common) -> Result<()> {
    let cfg = resolved(c)?;
    cfg.dataset.validate()?;
    let data = generate_dataset(&cfg.dataset, cfg.seed)?;
    open_out_dir(&c.out, &cfg, &[])?;
    data.save(&c.out)?;
    if data.dim() >= 2 {
        let p = c.out.join("train.svg");
        let svg = addlab::plot::scatter_svg(&data.train.points, Some(&data.train.labels), "training split");
        io(&p, std::fs::write(&p, svg))?;
    }
    log::info!("{} train / {} held-out points written to {}", data.train.len(), data.heldout.len(), c.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TeacherSummary {
    init_heldout_loss: f64,
    final_heldout_loss: f64,
    iters: usize,
    checkpoint_hash: String,
}

pub fn train_teacher(c: &Common) -> Result<()> {
    let cfg = resolved(c)?;
    let data_dir = data_dir(&cfg)?;
    cfg.teacher.validate()?;
    let sched = cfg.schedule.build()?;
    let data = Dataset::load(&data_dir)?;
    check_label_count(cfg.teacher.net.n_classes, &data)?;
    open_out_dir(&c.out, &cfg, &[&data_dir])?;

    let every = log_every(cfg.teacher.iters);
    let out = fit_teacher(&cfg.teacher, &data.train, &data.heldout, &sched, |step, loss| {
        if step % every == 0 {
            log::info!("teacher step {step} loss {loss:.5}");
        }
    })?;
    let hash = config_hash(&(&cfg.teacher, &cfg.schedule));
    let ck = save_denoiser(&c.out.join("teacher"), &out.net, cfg.schedule.kind, &hash)?;
    let p = c.out.join("losses.csv");
    let mut text = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        text.push_str(&format!("{i},{l:?}\n"));
    }
    io(&p, std::fs::write(&p, text))?;
    write_json(
        &c.out.join("summary.json"),
        &TeacherSummary {
            init_heldout_loss: out.init_loss,
            final_heldout_loss: out.final_loss,
            iters: cfg.teacher.iters,
            checkpoint_hash: ck,
        },
    )?;
    log::info!("held-out loss {:.5} -> {:.5}", out.init_loss, out.final_loss);
    Ok(())
}

fn check_label_count(n_classes: Option<usize>, data: &Dataset) -> Result<()> {
    match n_classes {
        Some(n) if n != data.n_classes() => Err(Error::Config(format!(
            "teacher.net.n_classes = {n} but the dataset has {} modes",
            data.n_classes()
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct FeatnetSummary {
    heldout_accuracy: f64,
    checkpoint_hash: String,
}

pub fn train_featnet(c: &Common) -> Result<()> {
    let cfg = resolved(c)?;
    let data_dir = data_dir(&cfg)?;
    let data = Dataset::load(&data_dir)?;
    open_out_dir(&c.out, &cfg, &[&data_dir])?;
    let net = pretrain_feature_network(&data.train, data.n_classes(), &cfg.featnet, rng::derive(cfg.seed, "featnet"))?;
    let ck = save_featnet(&c.out.join("featnet"), &net, &config_hash(&cfg.featnet))?;
    let acc = net.accuracy(&data.heldout)?;
    write_json(
        &c.out.join("summary.json"),
        &FeatnetSummary {
            heldout_accuracy: acc,
            checkpoint_hash: ck,
        },
    )?;
    log::info!("feature network held-out accuracy {acc:.4}");
    Ok(())
}

struct DistillInputs {
    data: PathBuf,
    teacher: PathBuf,
    featnet: PathBuf,
}

fn distill_inputs(cfg: &RunConfig) -> Result<DistillInputs> {
    Ok(DistillInputs {
        data: data_dir(cfg)?,
        teacher: stem_of(&cfg.inputs.teacher, "teacher", "teacher")?,
        featnet: stem_of(&cfg.inputs.featnet, "featnet", "featnet")?,
    })
}

/// One distillation plus the evaluation of its student, inside `out`.
fn distill_and_eval(cfg: &RunConfig, dcfg: &DistillConfig, inputs: &DistillInputs, out: &Path, name: &str) -> Result<MetricReport> {
    let every = log_every(dcfg.iters);
    let run = run_distillation(
        dcfg,
        &cfg.schedule,
        &DistillPaths {
            data: inputs.data.clone(),
            teacher: inputs.teacher.clone(),
            featnet: inputs.featnet.clone(),
            out: out.to_path_buf(),
        },
        |r: &LossReport| {
            if r.step % every == 0 {
                log::info!("{name} step {} total {:.5} distill {:.5} adv_g {:.5}", r.step, r.total, r.distill, r.adv_g);
            }
        },
    )?;
    let data = Dataset::load(&inputs.data)?;
    let (featnet, _) = load_featnet(&inputs.featnet)?;
    let report = evaluate_checkpoint(
        &CheckpointEval {
            name,
            net: &run.outcome.student,
            checkpoint_hash: &run.student_hash,
            config_hash: &run.config_hash,
        },
        &data.heldout,
        &featnet,
        &cfg.eval,
        &cfg.schedule.build()?,
    )?;
    append_jsonl(&out.join("metrics.jsonl"), &report)?;
    Ok(report)
}

pub fn distill(c: &Common) -> Result<()> {
    let cfg = resolved(c)?;
    let inputs = distill_inputs(&cfg)?;
    cfg.distill.validate(&cfg.schedule.build()?)?;
    open_out_dir(&c.out, &cfg, &[&inputs.data, parent_of(&inputs.teacher), parent_of(&inputs.featnet)])?;
    let r = distill_and_eval(&cfg, &cfg.distill, &inputs, &c.out, "student")?;
    log::info!("student {}-step sliced_w2 {:.5} ffd {:.5}", cfg.eval.n_steps, r.sliced_w2, r.ffd);
    Ok(())
}

pub fn sample(c: &Common) -> Result<()> {
    let cfg = resolved(c)?;
    let stem = stem_of(&cfg.inputs.checkpoint, "checkpoint", "student")?;
    let sched = cfg.schedule.build()?;
    let (net, manifest) = load_denoiser(&stem)?;
    open_out_dir(&c.out, &cfg, &[parent_of(&stem)])?;
    let index = sample_grid(
        &net,
        &GridSpec {
            n_steps: &cfg.sample.n_steps,
            conds: &cfg.sample.conds,
            seeds: &cfg.sample.seeds,
            batch: cfg.sample.batch,
            svg: cfg.sample.svg,
        },
        &sched,
        &manifest.params_sha256,
        &c.out,
    )?;
    log::info!("{} batches archived in {}", index.entries.len(), c.out.display());
    Ok(())
}

fn stem_name(stem: &Path) -> String {
    stem.file_name().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

pub fn eval(c: &Common) -> Result<()> {
    let cfg = resolved(c)?;
    let stem = stem_of(&cfg.inputs.checkpoint, "checkpoint", "student")?;
    let fstem = stem_of(&cfg.inputs.featnet, "featnet", "featnet")?;
    let data_dir = data_dir(&cfg)?;
    let sched = cfg.schedule.build()?;
    let (net, manifest) = load_denoiser(&stem)?;
    let (featnet, _) = load_featnet(&fstem)?;
    let data = Dataset::load(&data_dir)?;
    open_out_dir(&c.out, &cfg, &[parent_of(&stem), parent_of(&fstem), &data_dir])?;
    let name = stem_name(&stem);
    let report = evaluate_checkpoint(
        &CheckpointEval {
            name: &name,
            net: &net,
            checkpoint_hash: &manifest.params_sha256,
            config_hash: &manifest.config_hash,
        },
        &data.heldout,
        &featnet,
        &cfg.eval,
        &sched,
    )?;
    append_jsonl(&c.out.join("metrics.jsonl"), &report)?;
    log::info!("{name} sliced_w2 {:.5} ffd {:.5}", report.sliced_w2, report.ffd);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContestantInfo {
    pub id: String,
    pub n_steps: Option<usize>,
    pub checkpoint_hash: Option<String>,
}

struct LoadedContestant {
    id: String,
    n_steps: usize,
    net: Denoiser,
    hash: String,
}

/// Real held-out points carrying `label`, or all of them when `label` is `None`.
fn reference_for(data: &LabeledPoints, label: Option<usize>) -> LabeledPoints {
    match label {
        None => data.clone(),
        Some(l) => {
            let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == l).collect();
            data.select(&idx)
        }
    }
}

fn judge_all(cfg: &RunConfig, contestants: &[LoadedContestant], featnet: &FeatureNetwork, data: &Dataset) -> Result<Vec<ComparisonRecord>> {
    let sched = cfg.schedule.build()?;
    let n_classes = contestants[0].net.config().n_classes;
    if contestants.iter().any(|k| k.net.config().n_classes != n_classes) {
        return Err(Error::Input("contestants disagree on conditioning".into()));
    }
    let dims: &[Dimension] = if n_classes.is_some() { &[Dimension::Quality, Dimension::Alignment] } else { &[Dimension::Quality] };
    let mut records = Vec::new();
    for k in 0..cfg.elo.tasks {
        let label = n_classes.map(|n| k % n);
        let task = label.map_or_else(|| format!("task{k}"), |l| format!("label{l}"));
        let labels = label.map(|l| vec![l; cfg.elo.batch]);
        let reference = reference_for(&data.heldout, label);
        if reference.is_empty() {
            return Err(Error::Input(format!("no held-out points for {task}")));
        }
        let seed = rng::derive(cfg.seed, &format!("elo-task-{k}"));
        let batches = contestants
            .iter()
            .map(|ct| generate(&ct.net, ct.n_steps, labels.as_deref(), cfg.elo.batch, &sched, seed))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..contestants.len() {
            for j in i + 1..contestants.len() {
                let a = Contestant {
                    id: &contestants[i].id,
                    samples: &batches[i],
                    labels: labels.as_deref(),
                };
                let b = Contestant {
                    id: &contestants[j].id,
                    samples: &batches[j],
                    labels: labels.as_deref(),
                };
                for &d in dims {
                    records.push(simulated_judge(&a, &b, &reference.points, featnet, d, &task, cfg.elo.n_proj, seed)?);
                }
            }
        }
    }
    Ok(records)
}

pub fn elo(c: &Common) -> Result<()> {
    let cfg = resolved(c)?;
    if cfg.elo.n_boot == 0 {
        return Err(Error::Config("elo.n_boot must be >= 1".into()));
    }
    let (records, info) = match &cfg.inputs.records {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::Input(format!("records file {} not found", p.display())));
            }
            let records = read_records_csv(p)?;
            let info: Vec<ContestantInfo> = addlab::elo::contestants(&records)
                .into_iter()
                .map(|id| ContestantInfo {
                    id: id.to_string(),
                    n_steps: None,
                    checkpoint_hash: None,
                })
                .collect();
            open_out_dir(&c.out, &cfg, &[parent_of(p)])?;
            (records, info)
        }
        None => {
            if cfg.inputs.contestants.len() < 2 {
                return Err(Error::Input("elo needs at least two inputs.contestants or inputs.records".into()));
            }
            let mut seen = std::collections::BTreeSet::new();
            let mut stems = Vec::new();
            for ct in &cfg.inputs.contestants {
                if !seen.insert(ct.id.as_str()) {
                    return Err(Error::Input(format!("duplicate contestant id {}", ct.id)));
                }
                let stem = checkpoint_stem(&ct.checkpoint, "student");
                checkpoint_exists(&stem)?;
                stems.push(stem);
            }
            let fstem = stem_of(&cfg.inputs.featnet, "featnet", "featnet")?;
            let data_dir = data_dir(&cfg)?;
            let loaded = cfg
                .inputs
                .contestants
                .iter()
                .zip(&stems)
                .map(|(ct, stem)| {
                    let (net, m) = load_denoiser(stem)?;
                    Ok(LoadedContestant {
                        id: ct.id.clone(),
                        n_steps: ct.n_steps,
                        net,
                        hash: m.params_sha256,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (featnet, _) = load_featnet(&fstem)?;
            let data = Dataset::load(&data_dir)?;
            let mut inputs: Vec<&Path> = stems.iter().map(|s| parent_of(s)).collect();
            inputs.push(parent_of(&fstem));
            inputs.push(&data_dir);
            open_out_dir(&c.out, &cfg, &inputs)?;
            let records = judge_all(&cfg, &loaded, &featnet, &data)?;
            let info = loaded
                .iter()
                .map(|k| ContestantInfo {
                    id: k.id.clone(),
                    n_steps: Some(k.n_steps),
                    checkpoint_hash: Some(k.hash.clone()),
                })
                .collect();
            (records, info)
        }
    };
    write_records_csv(&c.out.join("records.csv"), &records)?;
    let rankings = rank(&records, cfg.elo.n_boot, cfg.seed)?;
    write_json(&c.out.join("rankings.json"), &rankings)?;
    write_json(&c.out.join("contestants.json"), &info)?;
    for (id, m) in &rankings.mean_of_dimensions {
        log::info!("{id}: mean elo {m:.3}");
    }
    Ok(())
}

/// `base` with `[distill].<axis>` replaced by `value`.
pub fn override_distill(base: &DistillConfig, axis: &str, value: &toml::Value) -> Result<DistillConfig> {
    let mut table = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let t = table.as_table_mut().expect("config is a table");
    if !t.contains_key(axis) {
        return Err(Error::Config(format!("ablate.axis {axis:?} is not a [distill] key")));
    }
    t.insert(axis.to_string(), value.clone());
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("ablate value {value} for {axis}: {e}")))
}

fn value_tag(v: &toml::Value) -> String {
    let raw = match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    raw.chars()
        .map(|ch| if ch.is_ascii_alphanumeric() || "+-.".contains(ch) { ch } else { '_' })
        .collect()
}

pub fn ablate(c: &Common, jobs: usize) -> Result<()> {
    let cfg = resolved(c)?;
    if cfg.ablate.values.is_empty() {
        return Err(Error::Config("ablate.values is empty".into()));
    }
    let sched = cfg.schedule.build()?;
    let mut runs = Vec::new();
    let mut names = std::collections::BTreeSet::new();
    for v in &cfg.ablate.values {
        let d = override_distill(&cfg.distill, &cfg.ablate.axis, v)?;
        d.validate(&sched)?;
        let name = format!("{}={}", cfg.ablate.axis, value_tag(v));
        if !names.insert(name.clone()) {
            return Err(Error::Config(format!("ablate value {v} repeats")));
        }
        runs.push((name, d));
    }
    let inputs = distill_inputs(&cfg)?;
    open_out_dir(&c.out, &cfg, &[&inputs.data, parent_of(&inputs.teacher), parent_of(&inputs.featnet)])?;

    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<usize, Result<MetricReport>>> = Mutex::new(BTreeMap::new());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((name, dcfg)) = runs.get(i) else { break };
        let sub = c.out.join(name);
        let mut sub_cfg = cfg.clone();
        sub_cfg.distill = dcfg.clone();
        let r = open_out_dir(&sub, &sub_cfg, &[]).and_then(|_| distill_and_eval(&sub_cfg, dcfg, &inputs, &sub, name));
        results.lock().expect("results lock").insert(i, r);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, runs.len()) {
            s.spawn(work);
        }
    });
    let results = results.into_inner().expect("results lock");
    let top = c.out.join("metrics.jsonl");
    for (i, r) in results {
        let report = r?;
        log::info!("{}: sliced_w2 {:.5} ffd {:.5} acc {:?}", runs[i].0, report.sliced_w2, report.ffd, report.cond_accuracy);
        append_jsonl(&top, &report)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_any_distill_key() {
        let base = DistillConfig::default();
        let d = override_distill(&base, "cond_mode", &toml::Value::String("label+image".into())).unwrap();
        assert_eq!(d.cond_mode, addlab::nets::CondMode::LabelImage);
        let d = override_distill(&base, "adversarial", &toml::Value::Boolean(false)).unwrap();
        assert!(!d.adversarial);
        let d = override_distill(&base, "clip_grad", &toml::Value::String("none".into())).unwrap();
        assert_eq!(d.clip_grad, None);
        assert!(override_distill(&base, "lamda", &toml::Value::Float(1.0)).is_err());
        assert!(override_distill(&base, "lambda", &toml::Value::String("x".into())).is_err());
    }

    #[test]
    fn tags_are_path_safe() {
        assert_eq!(value_tag(&toml::Value::String("label+image".into())), "label+image");
        assert_eq!(value_tag(&toml::Value::Float(2.5)), "2.5");
        assert_eq!(value_tag(&toml::Value::String("a/b c".into())), "a_b_c");
    }
}
