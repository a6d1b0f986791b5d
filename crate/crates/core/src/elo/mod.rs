//! Pairwise-comparison ratings with bootstrapped orderings.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::evaluate_samples;
use crate::nets::FeatureNetwork;
use crate::numcore::Tensor;
use crate::rng;

pub const R_INIT: f64 = 1000.0;
pub const K_FACTOR: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AWins,
    BWins,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Quality,
    Alignment,
}

impl Dimension {
    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Quality => "quality",
            Dimension::Alignment => "alignment",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub contestant_a: String,
    pub contestant_b: String,
    pub outcome: Outcome,
    pub task: String,
    pub dimension: Dimension,
}

impl ComparisonRecord {
    pub fn new(a: &str, b: &str, outcome: Outcome, task: &str, dimension: Dimension) -> Result<Self> {
        if a == b {
            return Err(Error::Input(format!("contestant {a} compared against itself")));
        }
        Ok(ComparisonRecord {
            contestant_a: a.to_string(),
            contestant_b: b.to_string(),
            outcome,
            task: task.to_string(),
            dimension,
        })
    }

    pub fn winner(&self) -> &str {
        match self.outcome {
            Outcome::AWins => &self.contestant_a,
            Outcome::BWins => &self.contestant_b,
        }
    }
}

/// `(E1, E2)` for ratings `r1`, `r2`.
pub fn expected_score(r1: f64, r2: f64) -> (f64, f64) {
    let e1 = 1.0 / (1.0 + 10f64.powf((r2 - r1) / 400.0));
    (e1, 1.0 - e1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    pub ratings: BTreeMap<String, f64>,
    pub k: f64,
    pub r_init: f64,
}

impl EloTable {
    pub fn new<'a>(ids: impl IntoIterator<Item = &'a str>, k: f64, r_init: f64) -> Self {
        EloTable {
            ratings: ids.into_iter().map(|id| (id.to_string(), r_init)).collect(),
            k,
            r_init,
        }
    }

    pub fn rating(&self, id: &str) -> Option<f64> {
        self.ratings.get(id).copied()
    }

    pub fn total(&self) -> f64 {
        self.ratings.values().sum()
    }
}

pub fn update_ratings(table: &mut EloTable, record: &ComparisonRecord) -> Result<()> {
    let get = |id: &str| {
        table
            .rating(id)
            .ok_or_else(|| Error::Input(format!("unknown contestant {id}")))
    };
    let (ra, rb) = (get(&record.contestant_a)?, get(&record.contestant_b)?);
    let (ea, _) = expected_score(ra, rb);
    let sa = match record.outcome {
        Outcome::AWins => 1.0,
        Outcome::BWins => 0.0,
    };
    // the same delta moves both ratings, so the sum is conserved exactly
    let delta = table.k * (sa - ea);
    *table.ratings.get_mut(&record.contestant_a).unwrap() = ra + delta;
    *table.ratings.get_mut(&record.contestant_b).unwrap() = rb - delta;
    Ok(())
}

pub fn contestants(records: &[ComparisonRecord]) -> Vec<&str> {
    let mut ids: Vec<&str> = records
        .iter()
        .flat_map(|r| [r.contestant_a.as_str(), r.contestant_b.as_str()])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EloStat {
    pub mean: f64,
    /// Population standard deviation over bootstrap rounds.
    pub std: f64,
}

/// Sequential updates from `R_INIT` with `K_FACTOR` over `n_boot` random orderings.
pub fn bootstrap_elo(records: &[ComparisonRecord], n_boot: usize, seed: u64) -> Result<BTreeMap<String, EloStat>> {
    if n_boot == 0 {
        return Err(Error::Config("n_boot must be >= 1".into()));
    }
    if records.is_empty() {
        return Err(Error::Input("no comparison records".into()));
    }
    let ids = contestants(records);
    let mut r = rng::stream(seed, "elo-bootstrap");
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut runs: BTreeMap<&str, Vec<f64>> = ids.iter().map(|&id| (id, Vec::with_capacity(n_boot))).collect();
    for _ in 0..n_boot {
        order.shuffle(&mut r);
        let mut table = EloTable::new(ids.iter().copied(), K_FACTOR, R_INIT);
        for &i in &order {
            update_ratings(&mut table, &records[i])?;
        }
        for (id, v) in table.ratings {
            runs.get_mut(id.as_str()).expect("known id").push(v);
        }
    }
    Ok(runs
        .into_iter()
        .map(|(id, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (id.to_string(), EloStat { mean, std: var.sqrt() })
        })
        .collect())
}

/// Fraction of matches won, per contestant.
pub fn win_rates(records: &[ComparisonRecord]) -> BTreeMap<String, f64> {
    let mut played: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for rec in records {
        let w = rec.winner();
        for id in [rec.contestant_a.as_str(), rec.contestant_b.as_str()] {
            let e = played.entry(id).or_default();
            e.1 += 1;
            if id == w {
                e.0 += 1;
            }
        }
    }
    played
        .into_iter()
        .map(|(id, (w, n))| (id.to_string(), w as f64 / n as f64))
        .collect()
}

/// Contestant ids sorted by descending value, ties by id.
pub fn ordering(values: &BTreeMap<String, f64>) -> Vec<String> {
    let mut v: Vec<(&String, f64)> = values.iter().map(|(k, &x)| (k, x)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(k, _)| k.clone()).collect()
}

/// One sample batch entered into a comparison.
pub struct Contestant<'a> {
    pub id: &'a str,
    pub samples: &'a Tensor,
    pub labels: Option<&'a [usize]>,
}

/// Metric-based stand-in for a human judge. Quality prefers lower FFD,
/// alignment higher conditional accuracy; ties go to lower sliced-W2, then to
/// the lexicographically smaller id.
pub fn simulated_judge(
    a: &Contestant<'_>,
    b: &Contestant<'_>,
    reference: &Tensor,
    featnet: &FeatureNetwork,
    dimension: Dimension,
    task: &str,
    n_proj: usize,
    seed: u64,
) -> Result<ComparisonRecord> {
    if a.samples.rows() == 0 || b.samples.rows() == 0 {
        return Err(Error::Input("judge needs non-empty batches".into()));
    }
    let ma = evaluate_samples(a.samples, a.labels, reference, featnet, n_proj, seed)?;
    let mb = evaluate_samples(b.samples, b.labels, reference, featnet, n_proj, seed)?;
    // larger is better for every key
    let key = |m: &crate::evaluation::SampleMetrics| -> Result<f64> {
        match dimension {
            Dimension::Quality => Ok(-m.ffd),
            Dimension::Alignment => m
                .cond_accuracy
                .ok_or_else(|| Error::Input("alignment judging needs conditioned samples".into())),
        }
    };
    let (ka, kb) = (key(&ma)?, key(&mb)?);
    let a_wins = if ka != kb {
        ka > kb
    } else if ma.sliced_w2 != mb.sliced_w2 {
        ma.sliced_w2 < mb.sliced_w2
    } else {
        a.id < b.id
    };
    let outcome = if a_wins { Outcome::AWins } else { Outcome::BWins };
    ComparisonRecord::new(a.id, b.id, outcome, task, dimension)
}

pub fn write_records_csv(path: &Path, records: &[ComparisonRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ComparisonRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for r in rd.deserialize::<ComparisonRecord>() {
        let r = r.map_err(|e| csv_err(path, e))?;
        out.push(ComparisonRecord::new(&r.contestant_a, &r.contestant_b, r.outcome, &r.task, r.dimension)?);
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub n_boot: usize,
    pub seed: u64,
    pub k: f64,
    pub r_init: f64,
    pub dimensions: BTreeMap<String, BTreeMap<String, EloStat>>,
    /// Per contestant, the average of its per-dimension means.
    pub mean_of_dimensions: BTreeMap<String, f64>,
}

pub fn rank(records: &[ComparisonRecord], n_boot: usize, seed: u64) -> Result<Rankings> {
    let mut by_dim: BTreeMap<Dimension, Vec<ComparisonRecord>> = BTreeMap::new();
    for r in records {
        by_dim.entry(r.dimension).or_default().push(r.clone());
    }
    if by_dim.is_empty() {
        return Err(Error::Input("no comparison records".into()));
    }
    let mut dimensions = BTreeMap::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (dim, recs) in &by_dim {
        let stats = bootstrap_elo(recs, n_boot, seed)?;
        for (id, s) in &stats {
            let e = sums.entry(id.clone()).or_default();
            e.0 += s.mean;
            e.1 += 1;
        }
        dimensions.insert(dim.as_str().to_string(), stats);
    }
    Ok(Rankings {
        n_boot,
        seed,
        k: K_FACTOR,
        r_init: R_INIT,
        dimensions,
        mean_of_dimensions: sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(a: &str, b: &str, a_wins: bool) -> ComparisonRecord {
        let o = if a_wins { Outcome::AWins } else { Outcome::BWins };
        ComparisonRecord::new(a, b, o, "t", Dimension::Quality).unwrap()
    }

    #[test]
    fn expected_score_values() {
        assert_eq!(expected_score(1000.0, 1000.0), (0.5, 0.5));
        let (e1, e2) = expected_score(1400.0, 1000.0);
        assert!((e1 - 10.0 / 11.0).abs() < 1e-12);
        assert!((e1 + e2 - 1.0).abs() < 1e-12);
        let (f1, f2) = expected_score(1000.0, 1400.0);
        assert!((f1 - e2).abs() < 1e-12 && (f2 - e1).abs() < 1e-12);
    }

    #[test]
    fn single_update_and_unknown_contestant() {
        let mut t = EloTable::new(["a", "b"], 1.0, 1000.0);
        update_ratings(&mut t, &rec("a", "b", true)).unwrap();
        assert_eq!(t.rating("a"), Some(1000.5));
        assert_eq!(t.rating("b"), Some(999.5));
        assert!(update_ratings(&mut t, &rec("a", "zed", true)).is_err());
        assert!(ComparisonRecord::new("a", "a", Outcome::AWins, "t", Dimension::Quality).is_err());
    }

    #[test]
    fn favourite_gains_little() {
        // rating gap giving E = 0.99
        let gap = 400.0 * 99f64.log10();
        let mut t = EloTable::new(["a", "b"], 1.0, 1000.0);
        t.ratings.insert("a".into(), 1000.0 + gap);
        update_ratings(&mut t, &rec("a", "b", true)).unwrap();
        assert!((t.rating("a").unwrap() - (1000.0 + gap + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_single_record_is_exact() {
        let s = bootstrap_elo(&[rec("a", "b", false)], 1000, 3).unwrap();
        assert_eq!(s["a"].mean, 999.5);
        assert_eq!(s["b"].mean, 1000.5);
        assert_eq!(s["a"].std, 0.0);
    }

    #[test]
    fn dominant_contestant_ranks_first() {
        let recs: Vec<_> = (0..50).map(|i| if i % 2 == 0 { rec("w", "l", true) } else { rec("l", "w", false) }).collect();
        let s = bootstrap_elo(&recs, 200, 0).unwrap();
        assert!(s["w"].mean > s["l"].mean);
    }

    #[test]
    fn bootstrap_is_deterministic_and_relabel_invariant() {
        let recs = vec![rec("a", "b", true), rec("b", "c", true), rec("c", "a", false), rec("a", "c", false)];
        let relabel = |id: &str| format!("x-{id}");
        let renamed: Vec<_> = recs
            .iter()
            .map(|r| ComparisonRecord::new(&relabel(&r.contestant_a), &relabel(&r.contestant_b), r.outcome, "t", r.dimension).unwrap())
            .collect();
        let s1 = bootstrap_elo(&recs, 100, 5).unwrap();
        let s2 = bootstrap_elo(&renamed, 100, 5).unwrap();
        assert_eq!(s1, bootstrap_elo(&recs, 100, 5).unwrap());
        for (id, st) in &s1 {
            assert!((s2[&relabel(id)].mean - st.mean).abs() < 1e-9);
        }
    }

    #[test]
    fn records_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut recs = vec![rec("a", "b", true), rec("b", "a", false)];
        recs[1].dimension = Dimension::Alignment;
        write_records_csv(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("contestant_a,contestant_b,outcome,task,dimension\n"));
        assert!(text.contains("a,b,a_wins,t,quality"));
        assert_eq!(read_records_csv(&p).unwrap(), recs);
    }

    #[test]
    fn rank_reports_each_dimension_and_their_mean() {
        let mut recs = vec![rec("a", "b", true)];
        let mut r = rec("a", "b", false);
        r.dimension = Dimension::Alignment;
        recs.push(r);
        let k = rank(&recs, 10, 0).unwrap();
        assert_eq!(k.dimensions["quality"]["a"].mean, 1000.5);
        assert_eq!(k.dimensions["alignment"]["a"].mean, 999.5);
        assert_eq!(k.mean_of_dimensions["a"], 1000.0);
    }

    proptest! {
        #[test]
        fn rating_sum_is_conserved(outcomes in proptest::collection::vec((0usize..4, 0usize..4, any::<bool>()), 1..200)) {
            let ids = ["p", "q", "r", "s"];
            let mut t = EloTable::new(ids, 1.0, 1000.0);
            for (i, j, w) in outcomes {
                if i == j { continue; }
                update_ratings(&mut t, &rec(ids[i], ids[j], w)).unwrap();
            }
            prop_assert!((t.total() - 4000.0).abs() < 1e-9);
        }

        #[test]
        fn expected_scores_sum_to_one(r1 in -5000.0f64..5000.0, r2 in -5000.0f64..5000.0) {
            let (e1, e2) = expected_score(r1, r2);
            prop_assert!((e1 + e2 - 1.0).abs() < 1e-12);
            prop_assert!(e1 >= 0.0 && e1 <= 1.0);
        }
    }
}
