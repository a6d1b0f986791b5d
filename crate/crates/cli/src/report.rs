use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use addlab::elo::Rankings;
use addlab::evaluation::{read_jsonl, MetricReport};
use addlab::{Error, Result};

use crate::commands::ContestantInfo;

/// What `report` wrote.
#[derive(Debug, Default)]
pub struct ReportSummary {
    pub included: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
    pub metric_rows: usize,
    /// `(contestant, n_steps, mean elo)` for every plotted contestant.
    pub elo_points: Vec<(String, usize, f64)>,
}

struct RunContents {
    metrics: Vec<MetricReport>,
    elo: Option<(Rankings, Vec<ContestantInfo>)>,
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(p: &Path) -> Result<T> {
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(p.display().to_string(), e.to_string()))
}

fn read_run(dir: &Path) -> Result<RunContents> {
    if !dir.join("resolved_config.toml").is_file() {
        return Err(Error::Input(format!("{} has no resolved_config.toml", dir.display())));
    }
    let m = dir.join("metrics.jsonl");
    let metrics = if m.is_file() { read_jsonl(&m)? } else { Vec::new() };
    let r = dir.join("rankings.json");
    let elo = if r.is_file() {
        Some((read_json(&r)?, read_json(&dir.join("contestants.json"))?))
    } else {
        None
    };
    if metrics.is_empty() && elo.is_none() {
        return Err(Error::Input(format!("{} holds no metrics or rankings", dir.display())));
    }
    Ok(RunContents { metrics, elo })
}

fn opt<T: std::fmt::Debug>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

/// Writes `report.csv`, plus `elo.csv` and `elo_vs_steps.svg` when any run
/// holds rankings. Malformed run directories are skipped with a warning; a
/// metric schema mismatch aborts.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    let mut summary = ReportSummary::default();
    let mut loaded = Vec::new();
    for dir in runs {
        match read_run(dir) {
            Ok(c) => {
                summary.included.push(dir.clone());
                loaded.push((dir, c));
            }
            Err(e @ Error::SchemaMismatch { .. }) => {
                log::error!("{}: {e}", dir.display());
                return Err(e);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                summary.skipped.push(dir.clone());
            }
        }
    }
    if loaded.is_empty() {
        return Err(Error::Input("no completed run directories to report".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut table = String::from("run,name,n_steps,n_samples,sliced_w2,ffd,cond_accuracy,seed,config_hash,checkpoint_hash\n");
    for (dir, c) in &loaded {
        for m in &c.metrics {
            let _ = writeln!(
                table,
                "{},{},{},{},{:?},{:?},{},{},{},{}",
                dir.display(),
                m.name,
                opt(m.n_steps),
                m.n_samples,
                m.sliced_w2,
                m.ffd,
                opt(m.cond_accuracy),
                m.seed,
                m.config_hash,
                m.checkpoint_hash
            );
            summary.metric_rows += 1;
        }
    }
    let p = out.join("report.csv");
    std::fs::write(&p, table).map_err(|e| Error::io(&p, e))?;

    let mut elo_table = String::from("run,contestant,n_steps,dimension,mean,std\n");
    let mut any_elo = false;
    for (dir, c) in &loaded {
        let Some((rk, info)) = &c.elo else { continue };
        any_elo = true;
        for ct in info {
            for (dim, stats) in &rk.dimensions {
                if let Some(s) = stats.get(&ct.id) {
                    let _ = writeln!(elo_table, "{},{},{},{dim},{:?},{:?}", dir.display(), ct.id, opt(ct.n_steps), s.mean, s.std);
                }
            }
            if let (Some(n), Some(m)) = (ct.n_steps, rk.mean_of_dimensions.get(&ct.id)) {
                summary.elo_points.push((ct.id.clone(), n, *m));
            }
        }
    }
    if any_elo {
        let p = out.join("elo.csv");
        std::fs::write(&p, elo_table).map_err(|e| Error::io(&p, e))?;
        let pts: Vec<(f64, f64, String)> =
            summary.elo_points.iter().map(|(id, n, m)| (*n as f64, *m, id.clone())).collect();
        let svg = addlab::plot::points_svg(&pts, "sampling steps", "mean ELO", "ELO against inference steps");
        let p = out.join("elo_vs_steps.svg");
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    }
    Ok(summary)
}
