//! Few-step student sampling and sample archives.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nets::checkpoint::sha256_hex;
use crate::nets::{Denoiser, PredictionMode};
use crate::numcore::{serialize, Tensor};
use crate::rng;

/// Descending student timesteps visited at inference, starting from pure noise at `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePlan {
    pub steps: Vec<usize>,
    /// Fresh noise at every re-diffusion; `false` reuses the initial noise.
    #[serde(default = "yes")]
    pub stochastic_renoise: bool,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl SamplePlan {
    /// `{T}`, `{T, T/2}`, `{T, 3T/4, T/2, T/4}` and in general `T (n - i) / n`.
    pub fn default_steps(n: usize, steps: usize) -> Result<Vec<usize>> {
        if n == 0 || n > steps {
            return Err(Error::Config(format!("cannot plan {n} steps over T={steps}")));
        }
        Ok((0..n).map(|i| steps * (n - i) / n).collect())
    }

    pub fn new(n: usize, steps: usize, seed: u64) -> Result<Self> {
        Ok(SamplePlan {
            steps: Self::default_steps(n, steps)?,
            stochastic_renoise: true,
            seed,
        })
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let first = *self
            .steps
            .first()
            .ok_or_else(|| Error::Config("sample plan is empty".into()))?;
        if first != sched.steps() {
            return Err(Error::Config(format!(
                "sample plan must start at T={} (pure noise), starts at {first}",
                sched.steps()
            )));
        }
        if self.steps.windows(2).any(|w| w[1] >= w[0]) || self.steps.iter().any(|&s| s < 1) {
            return Err(Error::Config(format!("plan {:?} must be strictly decreasing and >= 1", self.steps)));
        }
        Ok(())
    }
}

/// Every network input of a sampling run, in order.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub output: Tensor,
    pub inputs: Vec<Tensor>,
}

/// Predict `x0`, re-diffuse to the next planned timestep, repeat.
pub fn sample_traced(
    student: &Denoiser,
    plan: &SamplePlan,
    labels: Option<&[usize]>,
    n: usize,
    sched: &NoiseSchedule,
) -> Result<SampleTrace> {
    if student.mode() != PredictionMode::X0 {
        return Err(Error::Input("student sampling needs an x0-mode denoiser".into()));
    }
    plan.validate(sched)?;
    let dim = student.config().dim;
    let mut r = rng::stream(plan.seed, "student-sample");
    let z = Tensor::randn(n, dim, &mut r);
    let mut x = z.clone();
    let mut inputs = Vec::with_capacity(plan.steps.len());
    for (i, &t) in plan.steps.iter().enumerate() {
        inputs.push(x.clone());
        let x0 = student.predict(&x, &vec![t; n], labels)?;
        match plan.steps.get(i + 1) {
            Some(&next) => {
                let noise = if plan.stochastic_renoise { Tensor::randn(n, dim, &mut r) } else { z.clone() };
                x = forward_diffuse(&x0, next, &noise, sched)?;
            }
            None => return Ok(SampleTrace { output: x0, inputs }),
        }
    }
    unreachable!("validated plans are non-empty")
}

pub fn sample(
    student: &Denoiser,
    plan: &SamplePlan,
    labels: Option<&[usize]>,
    n: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    Ok(sample_traced(student, plan, labels, n, sched)?.output)
}

/// Conditioning of one archived batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondSpec {
    None,
    /// Every sample gets this label.
    Label(usize),
    /// Labels cycle through all classes.
    Balanced,
}

impl CondSpec {
    pub fn labels(&self, n: usize, n_classes: Option<usize>) -> Result<Option<Vec<usize>>> {
        match (self, n_classes) {
            (CondSpec::None, None) => Ok(None),
            (CondSpec::None, Some(_)) => Err(Error::Input("conditional model needs a label or balanced cond".into())),
            (_, None) => Err(Error::Input("unconditional model given a condition".into())),
            (CondSpec::Label(l), Some(c)) if *l >= c => Err(Error::Input(format!("label {l} >= {c} classes"))),
            (CondSpec::Label(l), Some(_)) => Ok(Some(vec![*l; n])),
            (CondSpec::Balanced, Some(c)) => Ok(Some((0..n).map(|i| i % c).collect())),
        }
    }

    fn tag(&self) -> String {
        match self {
            CondSpec::None => "none".into(),
            CondSpec::Label(l) => format!("label{l}"),
            CondSpec::Balanced => "balanced".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub file: String,
    pub n_steps: usize,
    pub plan: SamplePlan,
    pub cond: CondSpec,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveIndex {
    pub entries: Vec<ArchiveEntry>,
}

pub struct GridSpec<'a> {
    pub n_steps: &'a [usize],
    /// Empty means unconditional on unconditional models and balanced otherwise.
    pub conds: &'a [CondSpec],
    pub seeds: &'a [u64],
    pub batch: usize,
    pub svg: bool,
}

/// Samples every `(n_steps, cond, seed)` combination into `dir`.
pub fn sample_grid(
    student: &Denoiser,
    grid: &GridSpec<'_>,
    sched: &NoiseSchedule,
    checkpoint_hash: &str,
    dir: &Path,
) -> Result<ArchiveIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_classes = student.config().n_classes;
    let default_cond = [if n_classes.is_some() { CondSpec::Balanced } else { CondSpec::None }];
    let conds = if grid.conds.is_empty() { &default_cond[..] } else { grid.conds };
    let mut entries = Vec::new();
    for &n in grid.n_steps {
        for cond in conds {
            for &seed in grid.seeds {
                let plan = SamplePlan::new(n, sched.steps(), seed)?;
                let labels = cond.labels(grid.batch, n_classes)?;
                let x = sample(student, &plan, labels.as_deref(), grid.batch, sched)?;
                let file = format!("batch_n{n}_{}_s{seed}.bin", cond.tag());
                let mut tensors = vec![("samples".to_string(), x.clone())];
                if let Some(l) = &labels {
                    tensors.push(("labels".into(), Tensor::column(&l.iter().map(|&v| v as f64).collect::<Vec<_>>())));
                }
                let bytes = serialize::encode(&tensors);
                let path = dir.join(&file);
                std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                if grid.svg && x.cols() >= 2 {
                    let svg = crate::plot::scatter_svg(&x, labels.as_deref(), &format!("{n}-step {} seed {seed}", cond.tag()));
                    let p = path.with_extension("svg");
                    std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
                }
                entries.push(ArchiveEntry {
                    file,
                    n_steps: n,
                    plan,
                    cond: cond.clone(),
                    seed,
                    checkpoint_hash: checkpoint_hash.into(),
                    sha256: sha256_hex(&bytes),
                });
            }
        }
    }
    let index = ArchiveIndex { entries };
    let p = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(index)
}

pub struct ArchivedBatch {
    pub entry: ArchiveEntry,
    pub samples: Tensor,
    pub labels: Option<Vec<usize>>,
}

pub fn read_archive(dir: &Path) -> Result<Vec<ArchivedBatch>> {
    let p = dir.join("index.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let index: ArchiveIndex =
        serde_json::from_str(&text).map_err(|e| Error::format(p.display().to_string(), e.to_string()))?;
    index
        .entries
        .into_iter()
        .map(|entry| {
            let path: PathBuf = dir.join(&entry.file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::format(path.display().to_string(), "hash does not match index"));
            }
            let tensors = serialize::decode(&bytes, &path.display().to_string())?;
            let find = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone());
            let samples = find("samples").ok_or_else(|| Error::format(entry.file.clone(), "missing samples"))?;
            let labels = find("labels").map(|t| t.data().iter().map(|&v| v as usize).collect());
            Ok(ArchivedBatch { entry, samples, labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{counters, DenoiserConfig};
    use crate::training::ScheduleSpec;

    fn student(n_classes: Option<usize>) -> Denoiser {
        let cfg = DenoiserConfig {
            hidden: 16,
            depth: 2,
            time_dim: 8,
            n_classes,
            ..DenoiserConfig::default()
        };
        Denoiser::new(cfg, PredictionMode::X0, &mut rng::seeded(1)).unwrap()
    }

    #[test]
    fn plans() {
        assert_eq!(SamplePlan::default_steps(1, 1000).unwrap(), vec![1000]);
        assert_eq!(SamplePlan::default_steps(2, 1000).unwrap(), vec![1000, 500]);
        assert_eq!(SamplePlan::default_steps(4, 1000).unwrap(), vec![1000, 750, 500, 250]);
        let s = ScheduleSpec::default().build().unwrap();
        let bad = SamplePlan {
            steps: vec![750, 500],
            stochastic_renoise: true,
            seed: 0,
        };
        assert!(bad.validate(&s).is_err());
    }

    #[test]
    fn one_step_is_one_student_pass_and_never_touches_others() {
        let s = ScheduleSpec::default().build().unwrap();
        let net = student(Some(3));
        let labels = vec![0, 1, 2, 0];
        for n in [1, 4] {
            let before = counters::snapshot();
            let out = sample(&net, &SamplePlan::new(n, 1000, 5).unwrap(), Some(&labels), 4, &s).unwrap();
            let used = counters::snapshot().since(before);
            assert_eq!(used.x0_denoiser, n as u64);
            assert_eq!((used.eps_denoiser, used.featnet, used.discriminator), (0, 0, 0));
            assert_eq!(out.shape(), &[4, 2]);
        }
    }

    #[test]
    fn first_input_is_standard_normal_and_seeded() {
        let s = ScheduleSpec::default().build().unwrap();
        let net = student(None);
        let plan = SamplePlan::new(2, 1000, 3).unwrap();
        let tr = sample_traced(&net, &plan, None, 20_000, &s).unwrap();
        let x = &tr.inputs[0];
        let m = x.mean();
        let var = x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
        assert!(m.abs() < 0.02 && (var - 1.0).abs() < 0.05, "{m} {var}");
        let again = sample(&net, &plan, None, 20_000, &s).unwrap();
        assert_eq!(tr.output, again);
    }

    #[test]
    fn archive_round_trip() {
        let s = ScheduleSpec::default().build().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let net = student(None);
        let grid = GridSpec {
            n_steps: &[1, 2, 4],
            conds: &[],
            seeds: &[0, 1, 2, 3, 4],
            batch: 16,
            svg: true,
        };
        let index = sample_grid(&net, &grid, &s, "h", dir.path()).unwrap();
        assert_eq!(index.entries.len(), 15);
        let back = read_archive(dir.path()).unwrap();
        assert_eq!(back.len(), 15);
        for b in &back {
            assert!(b.labels.is_none());
            let plan = &b.entry.plan;
            assert_eq!(b.samples, sample(&net, plan, None, 16, &s).unwrap());
        }
    }
}
