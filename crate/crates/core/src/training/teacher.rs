use rand::Rng;

use super::config::TeacherConfig;
use crate::data::LabeledPoints;
use crate::diffusion::{forward_diffuse_rows, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nets::{Denoiser, PredictionMode};
use crate::numcore::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor};
use crate::rng;

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub net: Denoiser,
    /// Held-out denoising loss before and after training.
    pub init_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

fn labels_for<'a>(net: &Denoiser, data: &'a LabeledPoints) -> Option<&'a [usize]> {
    net.is_conditional().then_some(data.labels.as_slice())
}

/// Mean squared noise-prediction error on `data` with timesteps and noise drawn from `seed`.
pub fn denoising_loss(net: &Denoiser, data: &LabeledPoints, sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "denoising-eval");
    let t: Vec<usize> = (0..data.len()).map(|_| r.random_range(1..=sched.steps())).collect();
    let eps = Tensor::randn(data.len(), data.dim(), &mut r);
    let x_t = forward_diffuse_rows(&data.points, &t, &eps, sched)?;
    let pred = net.predict(&x_t, &t, labels_for(net, data))?;
    Ok(pred.sub(&eps).squared_norm() / eps.len() as f64)
}

/// Noise-prediction pretraining with `t` uniform over `1..=T`.
pub fn train_teacher(
    cfg: &TeacherConfig,
    data: &LabeledPoints,
    heldout: &LabeledPoints,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TeacherOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("teacher training data is empty".into()));
    }
    let mut init_rng = rng::stream(cfg.seed, "teacher-init");
    let mut net = Denoiser::new(cfg.net.clone(), PredictionMode::Eps, &mut init_rng)?;
    if net.config().dim != data.dim() {
        return Err(Error::Config(format!(
            "teacher dim {} does not match data dim {}",
            net.config().dim,
            data.dim()
        )));
    }
    let eval_seed = rng::derive(cfg.seed, "teacher-heldout");
    let init_loss = denoising_loss(&net, heldout, sched, eval_seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), net.params().values());
    let mut ema: Vec<Tensor> = net.params().values().to_vec();
    let mut r = rng::stream(cfg.seed, "teacher-batches");
    let mut losses = Vec::with_capacity(cfg.iters);
    let n_el = (cfg.batch_size * data.dim()) as f64;
    for step in 0..cfg.iters {
        let batch = data.batch(cfg.batch_size, &mut r);
        let t: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(1..=sched.steps())).collect();
        let eps = Tensor::randn(cfg.batch_size, data.dim(), &mut r);
        let x_t = forward_diffuse_rows(&batch.points, &t, &eps, sched)?;

        let mut g = Graph::new();
        let ids = net.bind(&mut g, true)?;
        let x = g.constant(x_t)?;
        let pred = net.forward_node(&mut g, &ids, x, &t, labels_for(&net, &batch))?;
        let target = g.constant(eps)?;
        let diff = g.sub(pred, target)?;
        let sq = g.squared_norm(diff)?;
        let loss_node = g.scale(sq, 1.0 / n_el)?;
        let loss = g.value(loss_node)?.item();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("teacher loss {loss}"),
            });
        }
        let grads = g.backward(loss_node, Tensor::scalar(1.0))?;
        let mut gs: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(id, g.shape(id))).collect();
        if let Some(c) = cfg.clip_grad {
            clip_grad_norm(&mut gs, c);
        }
        opt.config.lr = cfg.lr_at(step);
        opt.step(net.params_mut().values_mut(), &gs).map_err(|e| Error::Divergence {
            step,
            detail: e.to_string(),
        })?;
        if cfg.ema > 0.0 {
            for (e, p) in ema.iter_mut().zip(net.params().values()) {
                for (ev, pv) in e.data_mut().iter_mut().zip(p.data()) {
                    *ev = cfg.ema * *ev + (1.0 - cfg.ema) * pv;
                }
            }
        }
        losses.push(loss);
        on_step(step, loss);
    }
    if cfg.ema > 0.0 {
        net.params_mut().values_mut().clone_from_slice(&ema);
    }
    let final_loss = denoising_loss(&net, heldout, sched, eval_seed)?;
    Ok(TeacherOutcome {
        net,
        init_loss,
        final_loss,
        losses,
    })
}
