use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{cond_accuracy, ffd, sliced_w2};
use crate::data::LabeledPoints;
use crate::diffusion::{ancestral_sample, AncestralOptions, NoiseSchedule};
use crate::error::{Error, Result};
use crate::inference::{sample, SamplePlan};
use crate::nets::{Denoiser, FeatureNetwork, PredictionMode};
use crate::numcore::Tensor;

/// Bumped whenever a field of [`MetricReport`] changes meaning.
pub const METRIC_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub name: String,
    pub sliced_w2: f64,
    pub ffd: f64,
    /// `None` for unconditional samples.
    pub cond_accuracy: Option<f64>,
    pub n_samples: usize,
    pub n_steps: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub n_steps: usize,
    /// 0 means one sample per reference point.
    pub n_samples: usize,
    pub n_proj: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            n_steps: 1,
            n_samples: 0,
            n_proj: 128,
            seed: 1234,
        }
    }
}

/// Metric values of one sample set against a reference set. FFD is computed on
/// the feature network's embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub sliced_w2: f64,
    pub ffd: f64,
    pub cond_accuracy: Option<f64>,
}

pub fn evaluate_samples(
    samples: &Tensor,
    labels: Option<&[usize]>,
    reference: &Tensor,
    featnet: &FeatureNetwork,
    n_proj: usize,
    seed: u64,
) -> Result<SampleMetrics> {
    if !samples.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: "non-finite samples".into(),
        });
    }
    let sw = sliced_w2(samples, reference, n_proj, seed)?;
    let f = ffd(&featnet.embed(samples)?, &featnet.embed(reference)?)?;
    let acc = match labels {
        Some(l) => Some(cond_accuracy(samples, Some(l), featnet)?),
        None => None,
    };
    Ok(SampleMetrics {
        sliced_w2: sw,
        ffd: f,
        cond_accuracy: acc,
    })
}

/// Labels for `n` samples, cycling through the reference labels.
fn eval_labels(reference: &LabeledPoints, n: usize) -> Vec<usize> {
    (0..n).map(|i| reference.labels[i % reference.len()]).collect()
}

/// Samples a denoiser: x0-mode nets use the student sampler, eps-mode nets the
/// ancestral teacher sampler.
pub fn generate(net: &Denoiser, n_steps: usize, labels: Option<&[usize]>, n: usize, sched: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    match net.mode() {
        PredictionMode::X0 => sample(net, &SamplePlan::new(n_steps, sched.steps(), seed)?, labels, n, sched),
        PredictionMode::Eps => ancestral_sample(
            net,
            &AncestralOptions {
                n_steps,
                t_max: crate::diffusion::ANCESTRAL_T_MAX,
            },
            n,
            net.config().dim,
            labels,
            sched,
            seed,
        ),
    }
}

pub struct CheckpointEval<'a> {
    pub name: &'a str,
    pub net: &'a Denoiser,
    pub checkpoint_hash: &'a str,
    pub config_hash: &'a str,
}

pub fn evaluate_checkpoint(
    ck: &CheckpointEval<'_>,
    reference: &LabeledPoints,
    featnet: &FeatureNetwork,
    spec: &EvalSpec,
    sched: &NoiseSchedule,
) -> Result<MetricReport> {
    if reference.is_empty() {
        return Err(Error::Input("evaluation reference set is empty".into()));
    }
    let n = if spec.n_samples == 0 { reference.len() } else { spec.n_samples };
    let labels = ck.net.is_conditional().then(|| eval_labels(reference, n));
    let x = generate(ck.net, spec.n_steps, labels.as_deref(), n, sched, spec.seed)?;
    let m = evaluate_samples(&x, labels.as_deref(), &reference.points, featnet, spec.n_proj, spec.seed)?;
    Ok(MetricReport {
        schema_version: METRIC_SCHEMA_VERSION,
        name: ck.name.to_string(),
        sliced_w2: m.sliced_w2,
        ffd: m.ffd,
        cond_accuracy: m.cond_accuracy,
        n_samples: n,
        n_steps: Some(spec.n_steps),
        seed: spec.seed,
        config_hash: ck.config_hash.to_string(),
        checkpoint_hash: ck.checkpoint_hash.to_string(),
    })
}

/// Report of one real split against another: the noise floor of every metric.
pub fn data_baseline(
    a: &LabeledPoints,
    reference: &LabeledPoints,
    featnet: &FeatureNetwork,
    n_proj: usize,
    seed: u64,
) -> Result<MetricReport> {
    let m = evaluate_samples(&a.points, Some(&a.labels), &reference.points, featnet, n_proj, seed)?;
    Ok(MetricReport {
        schema_version: METRIC_SCHEMA_VERSION,
        name: "data-baseline".into(),
        sliced_w2: m.sliced_w2,
        ffd: m.ffd,
        cond_accuracy: m.cond_accuracy,
        n_samples: a.len(),
        n_steps: None,
        seed,
        config_hash: String::new(),
        checkpoint_hash: String::new(),
    })
}

pub fn append_jsonl(path: &Path, report: &MetricReport) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(report).expect("report serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let v: serde_json::Value = serde_json::from_str(l)
                .map_err(|e| Error::format(path.display().to_string(), format!("line {}: {e}", i + 1)))?;
            let found = v.get("schema_version").and_then(|s| s.as_u64());
            if found != Some(METRIC_SCHEMA_VERSION as u64) {
                return Err(Error::SchemaMismatch {
                    expected: METRIC_SCHEMA_VERSION,
                    found: found.map_or_else(|| "missing".to_string(), |f| f.to_string()),
                });
            }
            serde_json::from_value(v)
                .map_err(|e| Error::format(path.display().to_string(), format!("line {}: {e}", i + 1)))
        })
        .collect()
}
