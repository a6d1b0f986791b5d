//! Synthetic labeled point sets.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{serialize, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    RingMixture,
    GridMixture,
    Checkerboard,
    Spiral,
    /// 4x4 "images": noisy copies of random binary prototypes.
    TinyRaster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_modes: usize,
    pub n_points: usize,
    pub noise_std: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::RingMixture,
            n_modes: 8,
            n_points: 10_000,
            noise_std: 0.12,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 100 {
            return Err(Error::Config(format!("n_points must be >= 100, got {}", self.n_points)));
        }
        if self.n_modes == 0 {
            return Err(Error::Config("n_modes must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} invalid", self.noise_std)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::TinyRaster => 16,
            _ => 2,
        }
    }
}

/// Points with integer class labels (mode indices).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoints {
    pub points: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledPoints {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledPoints {
        LabeledPoints {
            points: self.points.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Random batch drawn with replacement.
    pub fn batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> LabeledPoints {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.select(&idx)
    }

    pub fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: LabeledPoints,
    pub heldout: LabeledPoints,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.spec.n_modes
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

fn raw_point<R: Rng + ?Sized>(spec: &DatasetSpec, label: usize, protos: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    let n = spec.n_modes;
    let noise = |rng: &mut R| spec.noise_std * rng.sample::<f64, _>(StandardNormal);
    match spec.kind {
        DatasetKind::RingMixture => {
            let a = 2.0 * PI * label as f64 / n as f64;
            vec![a.cos() + noise(rng), a.sin() + noise(rng)]
        }
        DatasetKind::GridMixture => {
            let side = (n as f64).sqrt().ceil() as usize;
            let (i, j) = (label / side, label % side);
            vec![i as f64 + noise(rng), j as f64 + noise(rng)]
        }
        DatasetKind::Checkerboard => {
            let (i, j) = checker_cell(label, n);
            vec![i as f64 + rng.random::<f64>(), j as f64 + rng.random::<f64>()]
        }
        DatasetKind::Spiral => {
            let r: f64 = 0.2 + 0.8 * rng.random::<f64>();
            let a = 2.0 * PI * label as f64 / n as f64 + 1.5 * PI * r;
            vec![r * a.cos() + noise(rng), r * a.sin() + noise(rng)]
        }
        DatasetKind::TinyRaster => protos[label].iter().map(|&p| p + noise(rng)).collect(),
    }
}

/// Dark squares of the smallest board holding `n` of them, in row-major order.
fn checker_cell(label: usize, n: usize) -> (usize, usize) {
    let side = ((2 * n) as f64).sqrt().ceil() as usize;
    (0..side * side)
        .map(|c| (c / side, c % side))
        .filter(|(i, j)| (i + j) % 2 == 0)
        .nth(label)
        .expect("board holds n dark cells")
}

/// Deterministic dataset with balanced labels, standardized per dimension,
/// split 90/10 into train and held-out.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "dataset");
    let dim = spec.dim();
    let protos: Vec<Vec<f64>> = if spec.kind == DatasetKind::TinyRaster {
        let mut prng = rng::stream(seed, "prototypes");
        (0..spec.n_modes)
            .map(|_| (0..dim).map(|_| if prng.random::<bool>() { 1.0 } else { -1.0 }).collect())
            .collect()
    } else {
        Vec::new()
    };
    let mut labels: Vec<usize> = (0..spec.n_points).map(|i| i % spec.n_modes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(spec.n_points * dim);
    for &l in &labels {
        data.extend(raw_point(spec, l, &protos, &mut rng));
    }
    let mut points = Tensor::matrix(spec.n_points, dim, data);
    standardize(&mut points);
    let n_train = spec.n_points * 9 / 10;
    let all = LabeledPoints { points, labels };
    let train_idx: Vec<usize> = (0..n_train).collect();
    let held_idx: Vec<usize> = (n_train..spec.n_points).collect();
    Ok(Dataset {
        spec: spec.clone(),
        train: all.select(&train_idx),
        heldout: all.select(&held_idx),
    })
}

fn standardize(points: &mut Tensor) {
    let (n, d) = (points.rows(), points.cols());
    let means = points.col_means();
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (c, v) in points.row_slice(r).iter().enumerate() {
            var[c] += (v - means.data()[c]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(1e-12)).collect();
    let data = points.data_mut();
    for r in 0..n {
        for c in 0..d {
            data[r * d + c] = (data[r * d + c] - means.data()[c]) / std[c];
        }
    }
}

/// Per-dimension standard deviation.
pub fn column_std(points: &Tensor) -> Vec<f64> {
    let means = points.col_means();
    let n = points.rows() as f64;
    (0..points.cols())
        .map(|c| {
            ((0..points.rows())
                .map(|r| (points.get(r, c) - means.data()[c]).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
        })
        .collect()
}

fn labels_tensor(labels: &[usize]) -> Tensor {
    Tensor::column(&labels.iter().map(|&l| l as f64).collect::<Vec<_>>())
}

fn labels_from(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::format("dataset", format!("bad label {v}")))
            }
        })
        .collect()
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        serialize::save(
            &dir.join("data.bin"),
            &[
                ("train.points".into(), self.train.points.clone()),
                ("train.labels".into(), labels_tensor(&self.train.labels)),
                ("heldout.points".into(), self.heldout.points.clone()),
                ("heldout.labels".into(), labels_tensor(&self.heldout.labels)),
            ],
        )?;
        let spec = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        let path = dir.join("dataset.json");
        std::fs::write(&path, spec + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("dataset.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spec: DatasetSpec = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let tensors = serialize::load(&dir.join("data.bin"))?;
        let get = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format("data.bin", format!("missing tensor {name}")))
        };
        Ok(Dataset {
            spec,
            train: LabeledPoints {
                points: get("train.points")?.clone(),
                labels: labels_from(get("train.labels")?)?,
            },
            heldout: LabeledPoints {
                points: get("heldout.points")?.clone(),
                labels: labels_from(get("heldout.labels")?)?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_mixture_is_balanced_and_normalized() {
        let d = generate_dataset(&DatasetSpec::default(), 1).unwrap();
        assert_eq!(d.train.len(), 9000);
        assert_eq!(d.heldout.len(), 1000);
        let mut counts = [0usize; 8];
        for &l in d.train.labels.iter().chain(&d.heldout.labels) {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1250));
        let all = d.train.points.concat_rows(&d.heldout.points);
        for s in column_std(&all) {
            assert!((0.9..=1.1).contains(&s), "std {s}");
        }
    }

    #[test]
    fn every_kind_generates() {
        for kind in [
            DatasetKind::RingMixture,
            DatasetKind::GridMixture,
            DatasetKind::Checkerboard,
            DatasetKind::Spiral,
            DatasetKind::TinyRaster,
        ] {
            let spec = DatasetSpec {
                kind,
                n_modes: 5,
                n_points: 500,
                noise_std: 0.1,
            };
            let d = generate_dataset(&spec, 2).unwrap();
            assert_eq!(d.dim(), spec.dim());
            assert_eq!(d.train.distinct_labels(), 5);
            assert!(d.train.points.is_finite());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = DatasetSpec::default();
        spec.n_points = 50;
        assert!(generate_dataset(&spec, 0).is_err());
        spec.n_points = 1000;
        spec.n_modes = 0;
        assert!(generate_dataset(&spec, 0).is_err());
    }

    #[test]
    fn files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_points: 400,
            ..DatasetSpec::default()
        };
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate_dataset(&spec, 9).unwrap().save(&a).unwrap();
        generate_dataset(&spec, 9).unwrap().save(&b).unwrap();
        for f in ["data.bin", "dataset.json"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
        let back = Dataset::load(&a).unwrap();
        assert_eq!(back, generate_dataset(&spec, 9).unwrap());
    }
}
