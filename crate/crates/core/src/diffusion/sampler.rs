use rand::Rng as _;

use super::process::{coefficient_columns, eps_to_x0_node};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::rng;

/// A noise-prediction model that can be recorded into a graph.
pub trait EpsModel {
    fn eps_node(&self, g: &mut Graph, x: NodeId, t: &[usize], labels: Option<&[usize]>) -> Result<NodeId>;

    fn predict_eps(&self, x: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone())?;
        let e = self.eps_node(&mut g, xn, t, labels)?;
        Ok(g.value(e)?.clone())
    }
}

/// Timesteps visited by `m` deterministic sub-steps starting at `t`.
pub fn ddim_substeps(t: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Config("teacher_steps must be >= 1".into()));
    }
    let steps: Vec<usize> = (0..m)
        .map(|j| t - ((j * t) as f64 / m as f64).round() as usize)
        .collect();
    if steps.iter().any(|&u| u < 1) || steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Input(format!(
            "{m} teacher sub-steps do not fit below t={t}"
        )));
    }
    Ok(steps)
}

/// x0-estimate after `m` deterministic (eta = 0) teacher sub-steps from
/// per-row timesteps `t`, recorded into `g`.
pub fn teacher_ddim_node(
    net: &dyn EpsModel,
    g: &mut Graph,
    x_t: NodeId,
    t: &[usize],
    m: usize,
    labels: Option<&[usize]>,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    let per_row: Vec<Vec<usize>> = t.iter().map(|&ti| ddim_substeps(ti, m)).collect::<Result<_>>()?;
    let mut x = x_t;
    for j in 0..m {
        let u: Vec<usize> = per_row.iter().map(|s| s[j]).collect();
        let eps = net.eps_node(g, x, &u, labels)?;
        let x0 = eps_to_x0_node(g, x, eps, &u, sched)?;
        if j + 1 == m {
            return Ok(x0);
        }
        let next: Vec<usize> = per_row.iter().map(|s| s[j + 1]).collect();
        let (a, s) = coefficient_columns(&next, sched)?;
        let (a, s) = (g.constant(a)?, g.constant(s)?);
        let ax = g.mul(x0, a)?;
        let se = g.mul(eps, s)?;
        x = g.add(ax, se)?;
    }
    unreachable!("m >= 1 checked by ddim_substeps")
}

pub fn teacher_ddim_steps(
    net: &dyn EpsModel,
    x_t: &Tensor,
    t: usize,
    m: usize,
    labels: Option<&[usize]>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_t.clone())?;
    let out = teacher_ddim_node(net, &mut g, x, &vec![t; x_t.rows()], m, labels, sched)?;
    Ok(g.value(out)?.clone())
}

/// Default starting timestep of the ancestral sampler on a 1000-step schedule.
pub const ANCESTRAL_T_MAX: usize = 980;

#[derive(Clone, Copy, Debug)]
pub struct AncestralOptions {
    pub n_steps: usize,
    /// Highest timestep visited; sampling starts from standard normal noise there.
    pub t_max: usize,
}

fn ancestral_grid(opts: &AncestralOptions, sched: &NoiseSchedule) -> Result<Vec<usize>> {
    let n = opts.n_steps;
    if n == 0 {
        return Err(Error::Config("n_steps must be >= 1".into()));
    }
    if opts.t_max > sched.steps() || sched.alpha(opts.t_max) == 0.0 {
        return Err(Error::SingularTimestep { t: opts.t_max });
    }
    let grid: Vec<usize> = (0..n)
        .map(|i| ((opts.t_max * (n - i)) as f64 / n as f64).round() as usize)
        .collect();
    if grid.iter().any(|&t| t < 1) || grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!(
            "{n} steps do not fit in 1..={}",
            opts.t_max
        )));
    }
    Ok(grid)
}

/// Stochastic ancestral sampling from the teacher.
pub fn ancestral_sample(
    net: &dyn EpsModel,
    opts: &AncestralOptions,
    n_samples: usize,
    dim: usize,
    labels: Option<&[usize]>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let grid = ancestral_grid(opts, sched)?;
    let mut rng = rng::seeded(seed);
    let mut x = Tensor::randn(n_samples, dim, &mut rng);
    for (i, &t) in grid.iter().enumerate() {
        let eps = net.predict_eps(&x, &vec![t; n_samples], labels)?;
        let Some(&s) = grid.get(i + 1) else {
            return super::process::eps_to_x0(&x, &eps, t, sched);
        };
        let (at, st) = (sched.alpha(t), sched.sigma(t));
        let (as_, ss) = (sched.alpha(s), sched.sigma(s));
        let ratio = at / as_;
        let var_ts = (st * st - ratio * ratio * ss * ss).max(0.0);
        let std = (var_ts * ss * ss / (st * st)).sqrt();
        let coef = var_ts / st;
        let data = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xv, &ev)| (xv - coef * ev) / ratio + std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        x = Tensor::matrix(n_samples, dim, data);
    }
    unreachable!("grid is non-empty")
}
