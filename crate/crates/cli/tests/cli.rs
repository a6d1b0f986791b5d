use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_addlab");

const TINY: &str = r#"
seed = 3

[dataset]
kind = "ring_mixture"
n_modes = 4
n_points = 400
noise_std = 0.1

[teacher]
iters = 30
batch_size = 32

[teacher.net]
dim = 2
hidden = 16
depth = 2
time_dim = 8
n_classes = 4
label_dim = 4

[featnet]
width = 12
depth = 2
embed_dim = 4
epochs = 2
batch_size = 64

[distill]
iters = 4
batch_size = 16
eval_every = 2

[eval]
n_samples = 64
n_proj = 16

[sample]
n_steps = [1, 2]
seeds = [0, 1]
batch = 20

[elo]
n_boot = 20
tasks = 4
batch = 30
n_proj = 16
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).arg("--quiet").output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

/// A finished gen-data, train-teacher, train-featnet, distill chain shared by tests.
struct Pipeline {
    root: tempfile::TempDir,
}

impl Pipeline {
    fn path(&self, p: &str) -> PathBuf {
        self.root.path().join(p)
    }

    fn inputs(&self) -> String {
        format!(
            "[inputs]\ndata = {:?}\nteacher = {:?}\nfeatnet = {:?}\ncheckpoint = {:?}\n",
            self.path("data"),
            self.path("teacher"),
            self.path("featnet"),
            self.path("distill/student"),
        )
    }
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let p = Pipeline {
            root: tempfile::tempdir().unwrap(),
        };
        let base = write_config(p.root.path(), "base.toml", "");
        run_ok(&["gen-data", "--config", s(&base), "--out", s(&p.path("data"))]);
        let cfg = write_config(p.root.path(), "chain.toml", &p.inputs());
        run_ok(&["train-teacher", "--config", s(&cfg), "--out", s(&p.path("teacher"))]);
        run_ok(&["train-featnet", "--config", s(&cfg), "--out", s(&p.path("featnet"))]);
        run_ok(&["distill", "--config", s(&cfg), "--out", s(&p.path("distill"))]);
        p
    })
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn every_artifact_dir_has_config_and_version() {
    let p = pipeline();
    for d in ["data", "teacher", "featnet", "distill"] {
        let dir = p.path(d);
        assert!(dir.join("resolved_config.toml").is_file(), "{d}");
        let v: serde_json::Value = serde_json::from_slice(&read(&dir.join("version.json"))).unwrap();
        assert_eq!(v["code_hash"].as_str().unwrap().len(), 64);
    }
    assert!(p.path("distill/student.bin").is_file());
    assert!(p.path("distill/losses.csv").is_file());
    assert_eq!(std::fs::read_to_string(p.path("distill/snapshots.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn rerun_from_frozen_configs_is_bit_exact() {
    let p = pipeline();
    let scratch = tempfile::tempdir().unwrap();
    let again = |cmd: &str, dir: &str| -> PathBuf {
        let out = scratch.path().join(dir);
        let frozen = p.path(dir).join("resolved_config.toml");
        run_ok(&[cmd, "--config", s(&frozen), "--out", s(&out)]);
        out
    };
    let d = again("gen-data", "data");
    assert_eq!(read(&d.join("data.bin")), read(&p.path("data/data.bin")));
    let t = again("train-teacher", "teacher");
    for f in ["teacher.bin", "losses.csv", "summary.json"] {
        assert_eq!(read(&t.join(f)), read(&p.path("teacher").join(f)), "{f}");
    }
    let f = again("train-featnet", "featnet");
    assert_eq!(read(&f.join("featnet.bin")), read(&p.path("featnet/featnet.bin")));
    let s2 = again("distill", "distill");
    for f in ["losses.csv", "metrics.jsonl", "snapshots.jsonl", "student.bin"] {
        assert_eq!(read(&s2.join(f)), read(&p.path("distill").join(f)), "{f}");
    }
    assert_eq!(read(&s2.join("resolved_config.toml")), read(&p.path("distill/resolved_config.toml")));
}

#[test]
fn seed_flag_changes_the_run_and_is_frozen() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let out = dir.path().join("d");
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&out), "--seed", "11"]);
    assert_ne!(read(&out.join("data.bin")), read(&p.path("data/data.bin")));
    let frozen = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(frozen.contains("seed = 11"), "{frozen}");
}

#[test]
fn eval_and_sample_write_reports_and_archives() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &p.inputs());
    let ev = dir.path().join("eval");
    run_ok(&["eval", "--config", s(&cfg), "--out", s(&ev)]);
    let reports = addlab::evaluation::read_jsonl(&ev.join("metrics.jsonl")).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].n_samples, 64);
    assert!(reports[0].cond_accuracy.is_some());

    let sm = dir.path().join("samples");
    run_ok(&["sample", "--config", s(&cfg), "--out", s(&sm)]);
    let batches = addlab::inference::read_archive(&sm).unwrap();
    assert_eq!(batches.len(), 4);
    assert!(batches.iter().all(|b| b.samples.shape() == [20, 2]));
    let svgs = std::fs::read_dir(&sm)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 4);
}

#[test]
fn missing_checkpoint_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline();
    let extra = format!(
        "[inputs]\ndata = {:?}\nfeatnet = {:?}\ncheckpoint = {:?}\n",
        p.path("data"),
        p.path("featnet"),
        dir.path().join("nowhere/student")
    );
    let cfg = write_config(dir.path(), "c.toml", &extra);
    let out = dir.path().join("eval");
    let o = run(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n\n[distill]\nlamda = 2.0\n").unwrap();
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn divergence_exits_3() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &p.inputs());
    let text = std::fs::read_to_string(&cfg).unwrap().replace("iters = 30", "iters = 30\nlr = 1e300");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["train-teacher", "--config", s(&cfg), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn output_dir_must_not_hold_inputs_or_artifacts() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &p.inputs());
    let before = read(&p.path("featnet/featnet.bin"));
    let o = run(&["train-featnet", "--config", s(&cfg), "--out", s(&p.path("data"))]);
    assert_eq!(code(&o), 2);
    let o = run(&["train-featnet", "--config", s(&cfg), "--out", s(&p.path("featnet"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(read(&p.path("featnet/featnet.bin")), before);
}

#[test]
fn ablate_over_cond_mode_emits_four_reports() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &p.inputs());
    let out = dir.path().join("ablate");
    let o = Command::new(BIN)
        .args(["ablate", "--config", s(&cfg), "--out", s(&out), "--jobs", "2", "--quiet"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = addlab::evaluation::read_jsonl(&out.join("metrics.jsonl")).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(
        names,
        ["cond_mode=none", "cond_mode=label", "cond_mode=image", "cond_mode=label+image"]
    );
    for n in names {
        assert!(out.join(n).join("student.bin").is_file());
        assert!(out.join(n).join("resolved_config.toml").is_file());
    }
    // parallel and serial sweeps agree
    let out1 = dir.path().join("ablate1");
    run_ok(&["ablate", "--config", s(&cfg), "--out", s(&out1)]);
    assert_eq!(read(&out1.join("metrics.jsonl")), read(&out.join("metrics.jsonl")));
}

#[test]
fn ablate_rejects_unknown_axis() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{}\n[ablate]\naxis = \"nope\"\nvalues = [1]\n", p.inputs()));
    let o = run(&["ablate", "--config", s(&cfg), "--out", s(&dir.path().join("a"))]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("a").exists());
}

fn elo_run(dir: &Path) -> PathBuf {
    let p = pipeline();
    let extra = format!(
        "{}\n[[inputs.contestants]]\nid = \"one-step\"\ncheckpoint = {:?}\nn_steps = 1\n\n[[inputs.contestants]]\nid = \"two-step\"\ncheckpoint = {:?}\nn_steps = 2\n\n[[inputs.contestants]]\nid = \"four-step\"\ncheckpoint = {:?}\nn_steps = 4\n",
        p.inputs(),
        p.path("distill"),
        p.path("distill/student"),
        p.path("distill/student.bin"),
    );
    let cfg = write_config(dir, "elo.toml", &extra);
    let out = dir.join("elo");
    run_ok(&["elo", "--config", s(&cfg), "--out", s(&out)]);
    out
}

#[test]
fn elo_judges_ranks_and_replays_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = elo_run(dir.path());
    let records = addlab::elo::read_records_csv(&out.join("records.csv")).unwrap();
    // 4 tasks x 3 pairs x 2 dimensions
    assert_eq!(records.len(), 24);
    let rk: addlab::elo::Rankings = serde_json::from_slice(&read(&out.join("rankings.json"))).unwrap();
    assert_eq!(rk.mean_of_dimensions.len(), 3);
    assert_eq!(rk.n_boot, 20);

    let cfg = write_config(
        dir.path(),
        "replay.toml",
        &format!("[inputs]\nrecords = {:?}\n", out.join("records.csv")),
    );
    let replay = dir.path().join("replay");
    run_ok(&["elo", "--config", s(&cfg), "--out", s(&replay)]);
    let rk2: addlab::elo::Rankings = serde_json::from_slice(&read(&replay.join("rankings.json"))).unwrap();
    assert_eq!(rk2.dimensions, rk.dimensions);
}

#[test]
fn report_tables_plots_and_skips() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let elo = elo_run(dir.path());
    let junk = dir.path().join("junk");
    std::fs::create_dir(&junk).unwrap();

    let one = dir.path().join("r1");
    run_ok(&["report", s(&p.path("distill")), "--out", s(&one)]);
    let table = std::fs::read_to_string(one.join("report.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(!one.join("elo_vs_steps.svg").exists());

    let out = dir.path().join("r2");
    let o = Command::new(BIN)
        .args(["report", s(&p.path("distill")), s(&junk), s(&elo), "--out", s(&out)])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipping"));
    let svg = std::fs::read_to_string(out.join("elo_vs_steps.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let points = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("point"))
        .count();
    assert_eq!(points, 3);
}

#[test]
fn report_names_both_schema_versions_on_mismatch() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("old");
    std::fs::create_dir(&run_dir).unwrap();
    std::fs::copy(p.path("distill/resolved_config.toml"), run_dir.join("resolved_config.toml")).unwrap();
    let line = std::fs::read_to_string(p.path("distill/metrics.jsonl")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    v["schema_version"] = 7.into();
    std::fs::write(run_dir.join("metrics.jsonl"), v.to_string()).unwrap();
    let o = run(&["report", s(&p.path("distill")), s(&run_dir), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("expected version 1") && err.contains("found 7"), "{err}");
}
