use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `alpha_s * x0 + sigma_s * eps` at a single timestep.
pub fn forward_diffuse(x0: &Tensor, s: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "forward_diffuse")?;
    sched.check_timestep(s)?;
    let (a, sg) = (sched.alpha(s), sched.sigma(s));
    Ok(x0.zip_map(eps, |x, e| a * x + sg * e))
}

/// Row-wise [`forward_diffuse`] with one timestep per sample.
pub fn forward_diffuse_rows(x0: &Tensor, s: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "forward_diffuse_rows")?;
    if s.len() != x0.rows() {
        return Err(Error::Input(format!("{} timesteps for {} rows", s.len(), x0.rows())));
    }
    let cols = x0.cols();
    let mut out = x0.clone();
    for (r, &t) in s.iter().enumerate() {
        sched.check_timestep(t)?;
        let (a, sg) = (sched.alpha(t), sched.sigma(t));
        let e = eps.row_slice(r);
        for (c, v) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
            *v = a * *v + sg * e[c];
        }
    }
    Ok(out)
}

/// `(x_t - sigma_t * eps_hat) / alpha_t`.
pub fn eps_to_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x_t, eps_hat, "eps_to_x0")?;
    sched.check_timestep(t)?;
    let a = sched.alpha(t);
    if a == 0.0 {
        return Err(Error::SingularTimestep { t });
    }
    // same operation order as `eps_to_x0_node`, so both agree bit for bit
    let (neg_s, inv_a) = (-sched.sigma(t), 1.0 / a);
    Ok(x_t.zip_map(eps_hat, |x, e| (x + e * neg_s) * inv_a))
}

/// Per-row `(alpha, sigma)` columns for a batch of timesteps.
pub fn coefficient_columns(t: &[usize], sched: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    let mut a = Vec::with_capacity(t.len());
    let mut s = Vec::with_capacity(t.len());
    for &ti in t {
        sched.check_timestep(ti)?;
        a.push(sched.alpha(ti));
        s.push(sched.sigma(ti));
    }
    Ok((Tensor::column(&a), Tensor::column(&s)))
}

/// Graph form of [`forward_diffuse_rows`]; gradients flow into `x0`.
pub fn diffuse_node(
    g: &mut Graph,
    x0: NodeId,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    let (a, s) = coefficient_columns(t, sched)?;
    let a = g.constant(a)?;
    let noise = g.constant(eps_scaled(eps, &s))?;
    let ax = g.mul(x0, a)?;
    g.add(ax, noise)
}

fn eps_scaled(eps: &Tensor, sigma_col: &Tensor) -> Tensor {
    let cols = eps.cols();
    let mut out = eps.clone();
    for r in 0..eps.rows() {
        let s = sigma_col.data()[r];
        for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
            *v *= s;
        }
    }
    out
}

/// Graph form of [`eps_to_x0`] with per-row timesteps.
pub fn eps_to_x0_node(
    g: &mut Graph,
    x_t: NodeId,
    eps_hat: NodeId,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    let mut inv_a = Vec::with_capacity(t.len());
    let mut neg_s = Vec::with_capacity(t.len());
    for &ti in t {
        sched.check_timestep(ti)?;
        let a = sched.alpha(ti);
        if a == 0.0 {
            return Err(Error::SingularTimestep { t: ti });
        }
        inv_a.push(1.0 / a);
        neg_s.push(-sched.sigma(ti));
    }
    let neg_s = g.constant(Tensor::column(&neg_s))?;
    let inv_a = g.constant(Tensor::column(&inv_a))?;
    let se = g.mul(eps_hat, neg_s)?;
    let diff = g.add(x_t, se)?;
    g.mul(diff, inv_a)
}
