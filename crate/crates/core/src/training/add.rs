use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{DistillConfig, FeatNorm, StudentInit};
use super::losses::{adv_loss_g_node, distill_loss_node, hinge_fake, hinge_real, DistillTerm};
use crate::data::{Dataset, LabeledPoints};
use crate::diffusion::{forward_diffuse_rows, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nets::{Denoiser, DiscArch, DiscriminatorBundle, FeatAffine, FeatureNetwork, PredictionMode};
use crate::numcore::{clip_grad_norm, Adam, AdamConfig, Graph, NodeId, Tensor};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub adv_g: f64,
    pub adv_d_real: f64,
    pub adv_d_fake: f64,
    pub r1: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,adv_g,adv_d_real,adv_d_fake,r1,distill,total";

    /// Shortest round-trip float formatting, so logs compare bit-exactly.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.adv_g, self.adv_d_real, self.adv_d_fake, self.r1, self.distill, self.total
        )
    }

    fn is_finite(&self) -> bool {
        [self.adv_g, self.adv_d_real, self.adv_d_fake, self.r1, self.distill, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Frozen networks shared by every step.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub teacher: &'a Denoiser,
    pub featnet: &'a FeatureNetwork,
}

/// Everything a training run updates.
#[derive(Clone, Debug)]
pub struct AddState {
    pub student: Denoiser,
    pub disc: DiscriminatorBundle,
    opt_g: Adam,
    opt_d: Adam,
    pub step: usize,
}

impl AddState {
    pub fn new(student: Denoiser, disc: DiscriminatorBundle, cfg: &DistillConfig) -> Self {
        let adam = |lr| AdamConfig {
            lr,
            beta1: cfg.adam_betas[0],
            beta2: cfg.adam_betas[1],
            ..AdamConfig::default()
        };
        let opt_g = Adam::new(adam(cfg.lr_g), student.params().values());
        let opt_d = Adam::new(adam(cfg.lr_d), disc.params().values());
        AddState {
            student,
            disc,
            opt_g,
            opt_d,
            step: 0,
        }
    }
}

/// Random quantities of one step.
#[derive(Clone, Debug)]
pub struct StepDraws {
    /// Student timestep per sample.
    pub s: Vec<usize>,
    pub eps: Tensor,
    pub x_s: Tensor,
    /// Teacher timestep per sample.
    pub t: Vec<usize>,
    pub eps_prime: Tensor,
}

pub fn draw_step<R: Rng + ?Sized>(
    real: &LabeledPoints,
    cfg: &DistillConfig,
    sched: &NoiseSchedule,
    r: &mut R,
) -> Result<StepDraws> {
    let (b, d) = (real.len(), real.dim());
    let s: Vec<usize> = (0..b).map(|_| cfg.student_taus.sample(r)).collect();
    let eps = Tensor::randn(b, d, r);
    let x_s = forward_diffuse_rows(&real.points, &s, &eps, sched)?;
    let [lo, hi] = cfg.distill_t_bounds;
    let t: Vec<usize> = (0..b).map(|_| r.random_range(lo..=hi)).collect();
    let eps_prime = Tensor::randn(b, d, r);
    Ok(StepDraws {
        s,
        eps,
        x_s,
        t,
        eps_prime,
    })
}

fn denoiser_labels<'a>(net: &Denoiser, labels: &'a [usize]) -> Option<&'a [usize]> {
    net.is_conditional().then_some(labels)
}

fn grads_of(g: &Graph, grads: &crate::numcore::Gradients, ids: &[NodeId]) -> Vec<Tensor> {
    ids.iter().map(|&id| grads.wrt(id, g.shape(id))).collect()
}

struct DiscTerms {
    real: f64,
    fake: f64,
    r1: f64,
}

fn disc_update(
    state: &mut AddState,
    feats_real: &[Tensor],
    feats_fake: &[Tensor],
    c_img: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<DiscTerms> {
    let disc = &state.disc;
    let mut g = Graph::new();
    let ids = disc.bind(&mut g, true)?;
    let cond = disc.condition_nodes(&mut g, &ids, labels, c_img, cfg.cond_mode)?;
    let (_, real_scores, r1) = disc.r1_nodes(&mut g, &ids, feats_real, &cond)?;
    let fake_nodes: Vec<NodeId> = feats_fake.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
    let fake_scores = disc.score_nodes(&mut g, &ids, &fake_nodes, &cond)?;
    let values = |ns: &[NodeId]| ns.iter().map(|&n| g.value(n).cloned()).collect::<Result<Vec<_>>>();
    let (real_loss, real_seeds) = hinge_real(&values(&real_scores)?)?;
    let (fake_loss, fake_seeds) = hinge_fake(&values(&fake_scores)?)?;
    let r1_value = g.value(r1)?.item();
    let mut seeds: Vec<(NodeId, Tensor)> = real_scores.iter().copied().zip(real_seeds).collect();
    seeds.extend(fake_scores.iter().copied().zip(fake_seeds));
    if cfg.gamma > 0.0 {
        seeds.push((r1, Tensor::scalar(cfg.gamma)));
    }
    let grads = g.backward_multi(&seeds)?;
    let mut gs = grads_of(&g, &grads, &ids);
    if let Some(c) = cfg.clip_grad {
        clip_grad_norm(&mut gs, c);
    }
    state.opt_d.step(state.disc.params_mut().values_mut(), &gs)?;
    Ok(DiscTerms {
        real: real_loss,
        fake: fake_loss,
        r1: r1_value,
    })
}

/// One discriminator update (or `d_steps` of them) followed by one student update.
pub fn add_train_step(
    state: &mut AddState,
    frozen: Frozen<'_>,
    real: &LabeledPoints,
    draws: &StepDraws,
    cfg: &DistillConfig,
    sched: &NoiseSchedule,
) -> Result<LossReport> {
    if !frozen.featnet.is_frozen() {
        return Err(Error::Input("feature network must be frozen during distillation".into()));
    }
    if frozen.teacher.mode() != PredictionMode::Eps {
        return Err(Error::Input("teacher must be an eps-mode denoiser".into()));
    }
    if state.student.mode() != PredictionMode::X0 {
        return Err(Error::Input("student must be an x0-mode denoiser".into()));
    }
    let labels = &real.labels;
    let step = state.step;

    let mut g = Graph::new();
    let sid = state.student.bind(&mut g, true)?;
    let xs = g.constant(draws.x_s.clone())?;
    let x_hat = state
        .student
        .forward_node(&mut g, &sid, xs, &draws.s, denoiser_labels(&state.student, labels))?;

    let mut d_terms = DiscTerms {
        real: 0.0,
        fake: 0.0,
        r1: 0.0,
    };
    let mut adv_node = None;
    if cfg.adversarial {
        let (feats_real, c_img) = frozen.featnet.features(&real.points)?;
        let (feats_fake, _) = frozen.featnet.features(g.value(x_hat)?)?;
        for _ in 0..cfg.d_steps {
            d_terms = disc_update(state, &feats_real, &feats_fake, &c_img, labels, cfg)?;
        }
        let fids = frozen.featnet.bind(&mut g, false)?;
        let fnodes = frozen.featnet.forward_node(&mut g, &fids, x_hat)?;
        let dids = state.disc.bind(&mut g, false)?;
        let cond = state.disc.condition_nodes(&mut g, &dids, labels, &c_img, cfg.cond_mode)?;
        let scores = state.disc.score_nodes(&mut g, &dids, &fnodes.feats, &cond)?;
        adv_node = Some(adv_loss_g_node(&mut g, &scores)?);
    }

    let tids = frozen.teacher.bind(&mut g, false)?;
    let bound = frozen.teacher.bound(&tids);
    let term = DistillTerm {
        teacher: &bound,
        t: &draws.t,
        eps: &draws.eps_prime,
        weighting: cfg.weighting,
        teacher_steps: cfg.teacher_steps,
        labels: denoiser_labels(frozen.teacher, labels),
        bounds: Some(cfg.distill_t_bounds),
    };
    let (distill_node, _) = distill_loss_node(&mut g, x_hat, &term, sched)?;
    let scaled = g.scale(distill_node, cfg.lambda)?;
    let total_node = match adv_node {
        Some(a) => g.add(a, scaled)?,
        None => scaled,
    };

    let adv_g = match adv_node {
        Some(a) => g.value(a)?.item(),
        None => 0.0,
    };
    let distill = g.value(distill_node)?.item();
    let report = LossReport {
        step,
        adv_g,
        adv_d_real: d_terms.real,
        adv_d_fake: d_terms.fake,
        r1: d_terms.r1,
        distill,
        // the value actually differentiated, so additivity checks see the graph
        total: g.value(total_node)?.item(),
    };
    if !report.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("non-finite losses {report:?}"),
        });
    }
    let grads = g.backward(total_node, Tensor::scalar(1.0))?;
    let mut gs = grads_of(&g, &grads, &sid);
    if let Some(c) = cfg.clip_grad {
        clip_grad_norm(&mut gs, c);
    }
    state
        .opt_g
        .step(state.student.params_mut().values_mut(), &gs)
        .map_err(|e| Error::Divergence {
            step,
            detail: e.to_string(),
        })?;
    state.step += 1;
    Ok(report)
}

pub fn disc_arch_for(featnet: &FeatureNetwork, cfg: &DistillConfig) -> DiscArch {
    let a = featnet.arch();
    DiscArch {
        feat_dims: vec![a.width; a.depth],
        hidden: cfg.disc_hidden,
        proj_dim: cfg.disc_proj_dim,
        label_dim: 16,
        img_dim: a.embed_dim,
        n_classes: a.n_classes,
        feat_norm: Vec::new(),
    }
}

/// Per-layer feature statistics of `data` under the chosen normalization.
pub fn feature_norm(featnet: &FeatureNetwork, data: &LabeledPoints, mode: FeatNorm) -> Result<Vec<FeatAffine>> {
    if mode == FeatNorm::None {
        return Ok(Vec::new());
    }
    let (feats, _) = featnet.features(&data.points)?;
    let n_classes = featnet.arch().n_classes;
    Ok(feats
        .iter()
        .map(|f| {
            let (n, d) = (f.rows(), f.cols());
            let mean = f.col_means();
            let mut var = vec![0.0; d];
            match mode {
                FeatNorm::Standard => {
                    for r in 0..n {
                        for (c, v) in f.row_slice(r).iter().enumerate() {
                            var[c] += (v - mean.data()[c]).powi(2);
                        }
                    }
                }
                _ => {
                    let mut sums = vec![vec![0.0; d]; n_classes];
                    let mut counts = vec![0usize; n_classes];
                    for r in 0..n {
                        counts[data.labels[r]] += 1;
                        for (c, v) in f.row_slice(r).iter().enumerate() {
                            sums[data.labels[r]][c] += v;
                        }
                    }
                    for r in 0..n {
                        let l = data.labels[r];
                        for (c, v) in f.row_slice(r).iter().enumerate() {
                            var[c] += (v - sums[l][c] / counts[l] as f64).powi(2);
                        }
                    }
                }
            }
            FeatAffine {
                shift: mean.data().to_vec(),
                // dead units keep a unit scale
                scale: var.iter().map(|v| {
                    let s = (v / n as f64).sqrt();
                    if s > 1e-6 { 1.0 / s } else { 1.0 }
                }).collect(),
            }
        })
        .collect())
}

pub fn init_student(teacher: &Denoiser, cfg: &DistillConfig) -> Result<Denoiser> {
    match cfg.student_init {
        StudentInit::Pretrained => Ok(teacher.clone().with_mode(PredictionMode::X0)),
        StudentInit::Random => Denoiser::new(
            teacher.config().clone(),
            PredictionMode::X0,
            &mut rng::stream(cfg.seed, "student-init"),
        ),
    }
}

/// One logged 1-step quality snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub sliced_w2_1step: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: Denoiser,
    pub disc: DiscriminatorBundle,
    pub reports: Vec<LossReport>,
    pub snapshots: Vec<Snapshot>,
}

/// The full loop around [`add_train_step`].
pub fn distill(
    frozen: Frozen<'_>,
    data: &Dataset,
    cfg: &DistillConfig,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(&LossReport),
) -> Result<DistillOutcome> {
    cfg.validate(sched)?;
    let student = init_student(frozen.teacher, cfg)?;
    let mut arch = disc_arch_for(frozen.featnet, cfg);
    arch.feat_norm = feature_norm(frozen.featnet, &data.train, cfg.feat_norm)?;
    let disc = DiscriminatorBundle::new(arch, rng::derive(cfg.seed, "disc"))?;
    let mut state = AddState::new(student, disc, cfg);
    let mut r = rng::stream(cfg.seed, "distill-steps");
    let mut reports = Vec::with_capacity(cfg.iters);
    let mut snapshots = Vec::new();
    for it in 0..cfg.iters {
        let batch = data.train.batch(cfg.batch_size, &mut r);
        let draws = draw_step(&batch, cfg, sched, &mut r)?;
        let rep = add_train_step(&mut state, frozen, &batch, &draws, cfg, sched)?;
        on_step(&rep);
        reports.push(rep);
        if cfg.eval_every > 0 && ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iters) {
            snapshots.push(snapshot(&state.student, data, sched, it + 1)?);
        }
    }
    Ok(DistillOutcome {
        student: state.student,
        disc: state.disc,
        reports,
        snapshots,
    })
}

fn snapshot(student: &Denoiser, data: &Dataset, sched: &NoiseSchedule, step: usize) -> Result<Snapshot> {
    let plan = crate::inference::SamplePlan::new(1, sched.steps(), 0)?;
    let held = &data.heldout;
    let x = crate::inference::sample(student, &plan, denoiser_labels(student, &held.labels), held.len(), sched)?;
    Ok(Snapshot {
        step,
        sliced_w2_1step: crate::evaluation::sliced_w2(&x, &held.points, 128, 0)?,
    })
}
