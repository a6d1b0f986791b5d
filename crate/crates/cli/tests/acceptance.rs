//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails. Arguments select criteria by id (`C1 C9`).

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use addlab::data::{generate_dataset, Dataset, DatasetSpec, LabeledPoints};
use addlab::diffusion::{forward_diffuse, NoiseSchedule, ScheduleKind};
use addlab::elo::{
    bootstrap_elo, expected_score, update_ratings, win_rates, ComparisonRecord, Dimension, EloTable, Outcome,
};
use addlab::evaluation::{evaluate_samples, generate, sliced_w2};
use addlab::nets::{
    network_suite, pretrain_feature_network, CondMode, Denoiser, DenoiserConfig, DiscArch, DiscriminatorBundle,
    FeatnetConfig, FeatureNetwork, Conditioning, PredictionMode,
};
use addlab::numcore::{op_suite, Graph, Tensor};
use addlab::rng;
use addlab::training::{
    adv_loss_g, distill, distill_loss_node, hinge_fake, hinge_real, sds_seed, DistillConfig, DistillTerm, Frozen,
    ScheduleSpec, StudentInit, TeacherConfig, Weighting,
};
use rand::Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sched() -> NoiseSchedule {
    ScheduleSpec::default().build().unwrap()
}

fn max_abs(ts: &[Tensor]) -> f64 {
    ts.iter().map(Tensor::max_abs).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- C1

fn small_net(mode: PredictionMode, r: &mut impl Rng) -> Denoiser {
    let cfg = DenoiserConfig {
        dim: 2,
        hidden: 8,
        depth: 2,
        time_dim: 4,
        n_classes: Some(3),
        label_dim: 3,
    };
    Denoiser::new(cfg, mode, r).unwrap()
}

/// Independent route: `w(t) (eps_hat - eps')` pushed back through the student only.
fn c1_sds_identity() -> Check {
    let s = sched();
    let mut worst: f64 = 0.0;
    let n = 120u64;
    for inst in 0..n {
        let mut r = rng::stream(inst, "acceptance-sds");
        let student = small_net(PredictionMode::X0, &mut r);
        let teacher = small_net(PredictionMode::Eps, &mut r);
        let b = 1 + (inst as usize % 6);
        let x_s = Tensor::randn(b, 2, &mut r);
        let s_t: Vec<usize> = (0..b).map(|_| r.random_range(1..=1000)).collect();
        let t: Vec<usize> = (0..b).map(|_| r.random_range(1..=999)).collect();
        let eps = Tensor::randn(b, 2, &mut r);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..3)).collect();

        let mut g = Graph::new();
        let ids = student.bind(&mut g, true).unwrap();
        let x = g.constant(x_s.clone()).unwrap();
        let x_hat = student.forward_node(&mut g, &ids, x, &s_t, Some(&labels)).unwrap();
        let tids = teacher.bind(&mut g, false).unwrap();
        let bound = teacher.bound(&tids);
        let term = DistillTerm {
            teacher: &bound,
            t: &t,
            eps: &eps,
            weighting: Weighting::Sds,
            teacher_steps: 1,
            labels: Some(&labels),
            bounds: None,
        };
        let (loss, _) = distill_loss_node(&mut g, x_hat, &term, &s).unwrap();
        let gr = g.backward(loss, Tensor::scalar(1.0)).unwrap();
        let a: Vec<Tensor> = ids.iter().map(|&i| gr.wrt(i, g.shape(i))).collect();

        let mut h = Graph::new();
        let hids = student.bind(&mut h, true).unwrap();
        let hx = h.constant(x_s).unwrap();
        let hx_hat = student.forward_node(&mut h, &hids, hx, &s_t, Some(&labels)).unwrap();
        let seed = sds_seed(h.value(hx_hat).unwrap(), &teacher, &t, &eps, Some(&labels), &s).unwrap();
        let hr = h.backward(hx_hat, seed).unwrap();
        let want: Vec<Tensor> = hids.iter().map(|&i| hr.wrt(i, h.shape(i))).collect();

        let diff: Vec<Tensor> = a.iter().zip(&want).map(|(p, q)| p.sub(q)).collect();
        worst = worst.max(max_abs(&diff) / max_abs(&want).max(1e-300));
    }
    ensure(worst < 1e-8, format!("{n} instances, worst relative error {worst:.2e} (tol 1e-8)"))
}

// ---------------------------------------------------------------- C2

fn c2_autodiff() -> Check {
    let mut checks = op_suite(0, 1e-6).map_err(|e| e.to_string())?;
    checks.extend(network_suite(17, 1e-6).map_err(|e| e.to_string())?);
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    ensure(
        failed.is_empty(),
        format!("{} op/network cases, worst relative error {worst:.2e} (tol 1e-6), failed {failed:?}", checks.len()),
    )
}

// ---------------------------------------------------------------- C3

fn c3_schedule() -> Check {
    let mut worst: f64 = 0.0;
    let mut r = rng::seeded(3);
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        for zt in [true, false] {
            for steps in [10, 1000] {
                let s = NoiseSchedule::build(kind, steps, zt).map_err(|e| e.to_string())?;
                for i in 0..=steps {
                    worst = worst.max((s.alpha(i).powi(2) + s.sigma(i).powi(2) - 1.0).abs());
                }
                if zt {
                    if s.alpha(steps) != 0.0 || s.sigma(steps) != 1.0 {
                        return Err(format!("{kind:?}/{steps}: terminal ({}, {})", s.alpha(steps), s.sigma(steps)));
                    }
                    let x0 = Tensor::randn(7, 3, &mut r);
                    let eps = Tensor::randn(7, 3, &mut r);
                    let x = forward_diffuse(&x0, steps, &eps, &s).map_err(|e| e.to_string())?;
                    if x.data().iter().zip(eps.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                        return Err(format!("{kind:?}/{steps}: terminal diffusion is not the noise bit-exactly"));
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-12, format!("max |alpha^2 + sigma^2 - 1| = {worst:.1e}; terminal values exact"))
}

// ---------------------------------------------------------------- C4

fn col(v: &[f64]) -> Tensor {
    Tensor::column(v)
}

fn c4_losses(world: Option<&World>) -> Check {
    // hand-built scores chosen so every closed form is exact in binary
    let real = [col(&[2.0, 0.5, -1.0, 0.0]), col(&[1.0, 1.5, 0.25, -0.25])];
    let fake = [col(&[-2.0, 0.5, -1.0, 1.0]), col(&[0.0, -1.5, 0.5, -0.5])];
    let (hr, _) = hinge_real(&real).map_err(|e| e.to_string())?;
    let (hf, _) = hinge_fake(&fake).map_err(|e| e.to_string())?;
    let g = adv_loss_g(&fake).map_err(|e| e.to_string())?;
    // per-head hinge sums 3.5 + 2.0 (real) and 3.5 + 3.0 (fake), over a batch of 4
    let want_r = 5.5 / 4.0;
    let want_f = 6.5 / 4.0;
    // fake score sums -1.5 and -1.5
    let want_g = 3.0 / 4.0;
    if hr != want_r || hf != want_f || g != want_g {
        return Err(format!("hinge ({hr}, {hf}, {g}) vs closed form ({want_r}, {want_f}, {want_g})"));
    }

    let mut r1_worst: f64 = 0.0;
    for seed in 0..5u64 {
        let arch = DiscArch {
            feat_dims: vec![6, 4, 5],
            hidden: 0,
            proj_dim: 3,
            label_dim: 2,
            img_dim: 2,
            n_classes: 3,
            feat_norm: Vec::new(),
        };
        let d = DiscriminatorBundle::new(arch, seed).map_err(|e| e.to_string())?;
        let mut r = rng::seeded(seed + 100);
        let feats: Vec<Tensor> = [6, 4, 5].iter().map(|&w| Tensor::randn(8, w, &mut r)).collect();
        let want: f64 = (0..3).map(|k| d.psi_weight(k).squared_norm()).sum();
        let got = d.r1_penalty(&feats, &Conditioning::default()).map_err(|e| e.to_string())?;
        r1_worst = r1_worst.max((got - want).abs() / want.max(1.0));
    }
    if r1_worst > 1e-10 {
        return Err(format!("R1 on linear heads off by {r1_worst:.1e}"));
    }

    // additivity on every logged step of a short real run
    let w = world.ok_or("no trained world available")?;
    let cfg = DistillConfig {
        iters: 40,
        seed: 5,
        ..add_config()
    };
    let out = distill(w.frozen(), &w.data, &cfg, &w.sched, |_| {}).map_err(|e| e.to_string())?;
    let add_worst = out
        .reports
        .iter()
        .map(|rp| (rp.total - (rp.adv_g + cfg.lambda * rp.distill)).abs())
        .fold(0.0, f64::max);
    ensure(
        add_worst <= 1e-12,
        format!(
            "hinge closed forms exact; R1 error {r1_worst:.1e}; additivity worst {add_worst:.1e} over {} steps",
            out.reports.len()
        ),
    )
}

// ---------------------------------------------------------------- C5..C8 shared state

/// Sampling and metric seeds shared by every quality measurement.
const SAMPLE_SEEDS: [u64; 3] = [100, 101, 102];
const N_PROJ: usize = 128;
const METRIC_SEED: u64 = 7;

struct World {
    data: Dataset,
    teacher: Denoiser,
    featnet: FeatureNetwork,
    sched: NoiseSchedule,
}

impl World {
    fn frozen(&self) -> Frozen<'_> {
        Frozen {
            teacher: &self.teacher,
            featnet: &self.featnet,
        }
    }

    fn held(&self) -> &LabeledPoints {
        &self.data.heldout
    }

    /// `(sliced_w2, ffd, cond_accuracy)` averaged over [`SAMPLE_SEEDS`].
    fn quality(&self, net: &Denoiser, n_steps: usize) -> (f64, f64, f64) {
        let h = self.held();
        let mut acc = (0.0, 0.0, 0.0);
        for &s in &SAMPLE_SEEDS {
            let x = generate(net, n_steps, Some(&h.labels), h.len(), &self.sched, s).unwrap();
            let m = evaluate_samples(&x, Some(&h.labels), &h.points, &self.featnet, N_PROJ, METRIC_SEED).unwrap();
            acc.0 += m.sliced_w2;
            acc.1 += m.ffd;
            acc.2 += m.cond_accuracy.unwrap();
        }
        let k = SAMPLE_SEEDS.len() as f64;
        (acc.0 / k, acc.1 / k, acc.2 / k)
    }
}

fn teacher_config() -> TeacherConfig {
    let mut c = TeacherConfig {
        iters: 4000,
        ..TeacherConfig::default()
    };
    c.net.hidden = 256;
    c
}

fn add_config() -> DistillConfig {
    DistillConfig::default()
}

struct C5 {
    world: World,
    teacher_sw: f64,
}

fn c5_teacher() -> std::result::Result<(C5, String), String> {
    let t0 = Instant::now();
    let data = generate_dataset(&DatasetSpec::default(), 0).map_err(|e| e.to_string())?;
    let sched = sched();
    let h = &data.heldout;
    // oracle first: training points with exactly the held-out label counts
    let mut next = vec![0usize; data.n_classes()];
    let mut idx = Vec::with_capacity(h.len());
    for &l in &h.labels {
        let i = (next[l]..data.train.len()).find(|&i| data.train.labels[i] == l).ok_or("too few training points")?;
        next[l] = i + 1;
        idx.push(i);
    }
    let real = data.train.select(&idx);
    let baseline = sliced_w2(&real.points, &h.points, N_PROJ, METRIC_SEED).map_err(|e| e.to_string())?;

    let teacher = addlab::training::train_teacher(&teacher_config(), &data.train, h, &sched, |_, _| {})
        .map_err(|e| e.to_string())?
        .net;
    let featnet = pretrain_feature_network(&data.train, data.n_classes(), &FeatnetConfig::default(), 0)
        .map_err(|e| e.to_string())?;
    let world = World {
        data,
        teacher,
        featnet,
        sched,
    };
    let (sw, _, _) = world.quality(&world.teacher, 50);
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "50-step sliced-W2 {sw:.4} vs 1.5 x baseline {:.4} (baseline {baseline:.4}); {secs:.0}s (limit 600s)",
        1.5 * baseline
    );
    if sw <= 1.5 * baseline && secs < 600.0 {
        Ok((C5 { world, teacher_sw: sw }, detail))
    } else {
        Err(detail)
    }
}

/// Quality of one distilled student per `(variant, seed)`.
#[derive(Clone, Copy, Debug)]
struct StudentScore {
    sw1: f64,
    sw4: f64,
    ffd1: f64,
    acc1: f64,
}

fn train_variant(w: &World, cfg: &DistillConfig) -> StudentScore {
    let out = distill(w.frozen(), &w.data, cfg, &w.sched, |_| {}).unwrap();
    let (sw1, ffd1, acc1) = w.quality(&out.student, 1);
    let (sw4, _, _) = w.quality(&out.student, 4);
    StudentScore { sw1, sw4, ffd1, acc1 }
}

const FULL_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Sweep {
    runs: BTreeMap<(&'static str, u64), StudentScore>,
}

fn sweep(w: &World) -> Sweep {
    let variants: [(&str, fn(&mut DistillConfig), &[u64]); 5] = [
        ("full", |_| {}, &FULL_SEEDS),
        ("distill-only", |c| c.adversarial = false, &ABLATION_SEEDS),
        ("random-init", |c| c.student_init = StudentInit::Random, &ABLATION_SEEDS),
        ("label", |c| c.cond_mode = CondMode::Label, &ABLATION_SEEDS),
        ("none", |c| c.cond_mode = CondMode::None, &ABLATION_SEEDS),
    ];
    let mut runs = BTreeMap::new();
    for (name, edit, seeds) in variants {
        for &seed in seeds {
            let mut cfg = DistillConfig { seed, ..add_config() };
            edit(&mut cfg);
            let t = Instant::now();
            let s = train_variant(w, &cfg);
            eprintln!(
                "  {name:>12} seed {seed}: 1-step sw {:.4} ffd {:.4} acc {:.4} | 4-step sw {:.4} ({:.0}s)",
                s.sw1,
                s.ffd1,
                s.acc1,
                s.sw4,
                t.elapsed().as_secs_f64()
            );
            runs.insert((name, seed), s);
        }
    }
    Sweep { runs }
}

impl Sweep {
    fn get(&self, name: &str, seed: u64) -> StudentScore {
        *self.runs.iter().find(|((n, s), _)| *n == name && *s == seed).expect("run present").1
    }
}

fn c6_distillation(sw: &Sweep, teacher_sw: f64) -> Check {
    let m: f64 = ABLATION_SEEDS.iter().map(|&s| sw.get("full", s).sw1).sum::<f64>() / ABLATION_SEEDS.len() as f64;
    ensure(
        m <= 2.0 * teacher_sw,
        format!("mean 1-step sliced-W2 {m:.4} vs 2 x teacher {:.4} over 3 seeds", 2.0 * teacher_sw),
    )
}

fn c7_refinement(sw: &Sweep) -> Check {
    let n = FULL_SEEDS.len() as f64;
    let one: f64 = FULL_SEEDS.iter().map(|&s| sw.get("full", s).sw1).sum::<f64>() / n;
    let four: f64 = FULL_SEEDS.iter().map(|&s| sw.get("full", s).sw4).sum::<f64>() / n;
    ensure(four <= one, format!("mean 4-step sliced-W2 {four:.4} vs 1-step {one:.4} over {} seeds", FULL_SEEDS.len()))
}

fn majority(pred: impl Fn(u64) -> bool) -> usize {
    ABLATION_SEEDS.iter().filter(|&&s| pred(s)).count()
}

fn c8_ablations(sw: &Sweep) -> Check {
    let need = ABLATION_SEEDS.len() / 2 + 1;
    let a = majority(|s| sw.get("distill-only", s).ffd1 > sw.get("full", s).ffd1);
    let b = majority(|s| sw.get("full", s).ffd1 < sw.get("random-init", s).ffd1);
    let c = majority(|s| {
        let (li, l, n) = (sw.get("full", s).acc1, sw.get("label", s).acc1, sw.get("none", s).acc1);
        li >= l && l >= n
    });
    let mean = |name: &str, f: fn(&StudentScore) -> f64| {
        ABLATION_SEEDS.iter().map(|&s| f(&sw.get(name, s))).sum::<f64>() / ABLATION_SEEDS.len() as f64
    };
    let detail = format!(
        "(a) distill-only worse FFD {a}/3 [{:.3} vs full {:.3}]; (b) pretrained beats random {b}/3 [{:.3} vs {:.3}]; (c) acc ordering {c}/3 [{:.4} >= {:.4} >= {:.4}]",
        mean("distill-only", |s| s.ffd1),
        mean("full", |s| s.ffd1),
        mean("full", |s| s.ffd1),
        mean("random-init", |s| s.ffd1),
        mean("full", |s| s.acc1),
        mean("label", |s| s.acc1),
        mean("none", |s| s.acc1),
    );
    ensure(a >= need && b >= need && c >= need, detail)
}

// ---------------------------------------------------------------- C9

fn c9_elo() -> Check {
    let (e1, e2) = expected_score(1000.0, 1000.0);
    if e1 != 0.5 || e2 != 0.5 {
        return Err(format!("equal ratings give {e1}"));
    }
    let (e1, _) = expected_score(1400.0, 1000.0);
    if (e1 - 10.0 / 11.0).abs() > 1e-12 {
        return Err(format!("delta 400 gives {e1}"));
    }
    let mut t = EloTable::new(["a", "b"], 1.0, 1000.0);
    update_ratings(&mut t, &ComparisonRecord::new("a", "b", Outcome::AWins, "t", Dimension::Quality).unwrap())
        .map_err(|e| e.to_string())?;
    if t.rating("a") != Some(1000.5) || t.rating("b") != Some(999.5) {
        return Err(format!("single update gives {:?}", t.ratings));
    }

    let ids = ["p", "q", "r", "s", "u"];
    let mut rg = rng::seeded(9);
    let mut t = EloTable::new(ids, 1.0, 1000.0);
    let before = t.total();
    for _ in 0..10_000 {
        let i = rg.random_range(0..ids.len());
        let j = (i + rg.random_range(1..ids.len())) % ids.len();
        let o = if rg.random::<bool>() { Outcome::AWins } else { Outcome::BWins };
        update_ratings(&mut t, &ComparisonRecord::new(ids[i], ids[j], o, "t", Dimension::Quality).unwrap())
            .map_err(|e| e.to_string())?;
    }
    let drift = (t.total() - before).abs();
    if drift > 1e-6 {
        return Err(format!("rating sum drifted by {drift:e}"));
    }

    // dominated round robin: strength order a > b > c > d
    let names = ["a", "b", "c", "d"];
    let mut recs = Vec::new();
    let mut rr = rng::seeded(11);
    for _ in 0..25 {
        for i in 0..4 {
            for j in i + 1..4 {
                let p_i = 0.5 + 0.12 * (j - i) as f64;
                let o = if rr.random::<f64>() < p_i { Outcome::AWins } else { Outcome::BWins };
                recs.push(ComparisonRecord::new(names[i], names[j], o, "t", Dimension::Quality).unwrap());
            }
        }
    }
    for j in 1..4 {
        recs.push(ComparisonRecord::new("a", names[j], Outcome::AWins, "t", Dimension::Quality).unwrap());
    }
    let stats = bootstrap_elo(&recs, 1000, 3).map_err(|e| e.to_string())?;
    let means: BTreeMap<String, f64> = stats.iter().map(|(k, v)| (k.clone(), v.mean)).collect();
    let by_elo = addlab::elo::ordering(&means);
    let by_rate = addlab::elo::ordering(&win_rates(&recs));
    if by_elo != by_rate {
        return Err(format!("bootstrap order {by_elo:?} vs win-rate order {by_rate:?}"));
    }

    let mut sym = Vec::new();
    for i in 0..1000 {
        let o = if i % 2 == 0 { Outcome::AWins } else { Outcome::BWins };
        sym.push(ComparisonRecord::new("x", "y", o, "t", Dimension::Quality).unwrap());
    }
    let st = bootstrap_elo(&sym, 1000, 4).map_err(|e| e.to_string())?;
    let gap = (st["x"].mean - st["y"].mean).abs();
    ensure(
        gap < 5.0,
        format!("expected scores exact; single update +-0.5; sum drift {drift:.1e}; order {by_elo:?}; symmetric gap {gap:.3}"),
    )
}

// ---------------------------------------------------------------- C10

const CLI_CONFIG: &str = r#"
seed = 2

[dataset]
kind = "ring_mixture"
n_modes = 4
n_points = 400
noise_std = 0.1

[teacher]
iters = 40
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

[distill]
iters = 6
batch_size = 16
eval_every = 3

[eval]
n_samples = 64
n_proj = 16

[sample]
n_steps = [1, 4]
batch = 16

[elo]
n_boot = 50
tasks = 4
batch = 24
n_proj = 16

[ablate]
axis = "lambda"
values = [0.5, 2.5]
"#;

fn cli(args: &[&str]) -> std::result::Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_addlab"))
        .args(args)
        .arg("--quiet")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn p(x: &Path) -> &str {
    x.to_str().unwrap()
}

/// Runs the whole command chain under `root`; the first pass writes fresh
/// configs, a replay reuses each command's frozen `resolved_config.toml`.
fn cli_chain(root: &Path, replay_of: Option<&Path>) -> std::result::Result<(), String> {
    let base = root.join("base.toml");
    let d = |n: &str| root.join(n);
    let inputs = format!(
        "[inputs]\ndata = {:?}\nteacher = {:?}\nfeatnet = {:?}\ncheckpoint = {:?}\n\n[[inputs.contestants]]\nid = \"one\"\ncheckpoint = {:?}\nn_steps = 1\n\n[[inputs.contestants]]\nid = \"four\"\ncheckpoint = {:?}\nn_steps = 4\n",
        d("data"),
        d("teacher"),
        d("featnet"),
        d("distill"),
        d("distill"),
        d("distill"),
    );
    std::fs::write(&base, format!("{CLI_CONFIG}\n{inputs}")).map_err(|e| e.to_string())?;
    for (cmd, out) in [
        ("gen-data", "data"),
        ("train-teacher", "teacher"),
        ("train-featnet", "featnet"),
        ("distill", "distill"),
        ("eval", "eval"),
        ("sample", "sample"),
        ("elo", "elo"),
        ("ablate", "ablate"),
    ] {
        let cfg: PathBuf = match replay_of {
            // frozen configs name the first pass's inputs; rewrite them to this root
            Some(first) => {
                let text = std::fs::read_to_string(first.join(out).join("resolved_config.toml")).map_err(|e| e.to_string())?;
                let text = text.replace(p(first), p(root));
                let f = root.join(format!("{out}.frozen.toml"));
                std::fs::write(&f, text).map_err(|e| e.to_string())?;
                f
            }
            None => base.clone(),
        };
        cli(&[cmd, "--config", p(&cfg), "--out", p(&d(out))])?;
    }
    Ok(())
}

const LOGS: &[&str] = &[
    "data/data.bin",
    "teacher/losses.csv",
    "teacher/summary.json",
    "featnet/summary.json",
    "distill/losses.csv",
    "distill/snapshots.jsonl",
    "distill/metrics.jsonl",
    "eval/metrics.jsonl",
    "sample/index.json",
    "elo/records.csv",
    "elo/rankings.json",
    "ablate/metrics.jsonl",
    "ablate/lambda=0.5/losses.csv",
    "ablate/lambda=2.5/losses.csv",
];

fn c10_determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_chain(a.path(), None)?;
    cli_chain(b.path(), Some(a.path()))?;
    let mut differ = Vec::new();
    for f in LOGS {
        let x = std::fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        // paths inside a log differ between roots; compare with them normalized
        let norm = |v: Vec<u8>, root: &Path| String::from_utf8_lossy(&v).replace(p(root), "<root>").into_bytes();
        if norm(x, a.path()) != norm(y, b.path()) {
            differ.push(*f);
        }
    }
    ensure(
        differ.is_empty(),
        format!("8 commands replayed from frozen configs; {} logs compared, differing {differ:?}", LOGS.len()),
    )
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(format!(
            "panicked: {}",
            e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let on = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut results: Vec<(&str, &str, Check, f64)> = Vec::new();
    let mut record = |id: &'static str, title: &'static str, f: &mut dyn FnMut() -> Check| {
        if on(id) {
            let t = Instant::now();
            let r = guarded(f);
            let secs = t.elapsed().as_secs_f64();
            println!("{} {id} {title}: {} ({secs:.1}s)", if r.is_ok() { "PASS" } else { "FAIL" }, r.as_ref().unwrap_or_else(|e| e));
            results.push((id, title, r, secs));
        }
    };

    record("C1", "distillation gradient equals score distillation", &mut c1_sds_identity);
    record("C2", "autodiff finite differences", &mut c2_autodiff);
    record("C3", "schedule invariants", &mut c3_schedule);

    let needs_world = ["C4", "C5", "C6", "C7", "C8"].iter().any(|c| on(c));
    let mut c5: Option<std::result::Result<(C5, String), String>> = None;
    if needs_world {
        c5 = Some(guarded_world());
    }
    let world = c5.as_ref().and_then(|r| r.as_ref().ok()).map(|(c, _)| c);
    record("C4", "loss unit suite and additivity", &mut || c4_losses(world.map(|c| &c.world)));
    record("C5", "teacher quality", &mut || match &c5 {
        Some(Ok((_, d))) => Ok(d.clone()),
        Some(Err(e)) => Err(e.clone()),
        None => Err("not run".into()),
    });

    let sw = if ["C6", "C7", "C8"].iter().any(|c| on(c)) {
        world.map(|c| {
            eprintln!("distillation sweep:");
            sweep(&c.world)
        })
    } else {
        None
    };
    let no_sweep = || Err::<String, String>("teacher unavailable, sweep not run".into());
    record("C6", "one-step distillation quality", &mut || match (&sw, world) {
        (Some(s), Some(c)) => c6_distillation(s, c.teacher_sw),
        _ => no_sweep(),
    });
    record("C7", "iterative refinement direction", &mut || sw.as_ref().map_or_else(no_sweep, c7_refinement));
    record("C8", "ablation directions", &mut || sw.as_ref().map_or_else(no_sweep, c8_ablations));
    record("C9", "ELO mechanics", &mut c9_elo);
    record("C10", "CLI determinism", &mut c10_determinism);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    let total: f64 = results.iter().map(|r| r.3).sum();
    println!("{} of {} criteria passed ({total:.0}s)", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn guarded_world() -> std::result::Result<(C5, String), String> {
    match catch_unwind(c5_teacher) {
        Ok(r) => r,
        Err(_) => Err("teacher training panicked".into()),
    }
}
