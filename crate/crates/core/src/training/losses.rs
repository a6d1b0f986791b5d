use super::config::Weighting;
use crate::diffusion::{diffuse_node, teacher_ddim_node, EpsModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

fn check_scores(scores: &[Tensor], what: &str) -> Result<usize> {
    let b = scores.first().map_or(0, Tensor::rows);
    if b == 0 {
        return Err(Error::Input(format!("{what}: empty batch")));
    }
    for s in scores {
        if s.rows() != b || s.cols() != 1 {
            return Err(Error::Input(format!("{what}: head scores must all be ({b}, 1)")));
        }
        if !s.is_finite() {
            return Err(Error::Input(format!("{what}: non-finite head score")));
        }
    }
    Ok(b)
}

/// `-mean_b sum_k D_k`.
pub fn adv_loss_g(scores: &[Tensor]) -> Result<f64> {
    let b = check_scores(scores, "adv_loss_g")?;
    Ok(-scores.iter().map(Tensor::sum).sum::<f64>() / b as f64)
}

/// Graph form of [`adv_loss_g`].
pub fn adv_loss_g_node(g: &mut Graph, scores: &[NodeId]) -> Result<NodeId> {
    let b = g.shape(scores[0]).0 as f64;
    let mut acc = g.sum(scores[0])?;
    for &s in &scores[1..] {
        let t = g.sum(s)?;
        acc = g.add(acc, t)?;
    }
    g.scale(acc, -1.0 / b)
}

/// `mean_b sum_k max(0, 1 - sign * D_k)` and its gradient per head;
/// `sign = +1` for real scores, `-1` for fake ones.
fn hinge(scores: &[Tensor], sign: f64, what: &str) -> Result<(f64, Vec<Tensor>)> {
    let b = check_scores(scores, what)? as f64;
    let mut loss = 0.0;
    let mut seeds = Vec::with_capacity(scores.len());
    for s in scores {
        let mut seed = Tensor::zeros(s.rows(), 1);
        for (i, &d) in s.data().iter().enumerate() {
            let m = 1.0 - sign * d;
            if m > 0.0 {
                loss += m;
                seed.data_mut()[i] = -sign / b;
            }
        }
        seeds.push(seed);
    }
    Ok((loss / b, seeds))
}

pub fn hinge_real(scores: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    hinge(scores, 1.0, "hinge_real")
}

pub fn hinge_fake(scores: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    hinge(scores, -1.0, "hinge_fake")
}

/// Hinge discriminator objective plus `gamma * r1`.
pub fn adv_loss_d(real: &[Tensor], fake: &[Tensor], r1: f64, gamma: f64) -> Result<f64> {
    if !r1.is_finite() || !gamma.is_finite() {
        return Err(Error::Input("adv_loss_d: non-finite r1 or gamma".into()));
    }
    let (lr, _) = hinge_real(real)?;
    let (lf, _) = hinge_fake(fake)?;
    Ok(lr + gamma * r1 + lf)
}

pub fn total_loss(adv_g: f64, distill: f64, lambda: f64) -> f64 {
    adv_g + lambda * distill
}

fn check_bounds(t: &[usize], bounds: Option<[usize; 2]>) -> Result<()> {
    if let Some([lo, hi]) = bounds {
        if let Some(&bad) = t.iter().find(|&&ti| ti < lo || ti > hi) {
            return Err(Error::TimestepRange { t: bad, lo, hi });
        }
    }
    Ok(())
}

/// Inputs of one distillation term besides the student output.
pub struct DistillTerm<'a> {
    pub teacher: &'a dyn EpsModel,
    pub t: &'a [usize],
    pub eps: &'a Tensor,
    pub weighting: Weighting,
    pub teacher_steps: usize,
    pub labels: Option<&'a [usize]>,
    pub bounds: Option<[usize; 2]>,
}

/// `mean_b c(t_b) |x_hat_b - target_b|^2`, where the target is the teacher's
/// estimate from the stop-gradient re-diffusion of `x_hat`.
/// Returns `(loss, target)`.
pub fn distill_loss_node(
    g: &mut Graph,
    x_hat: NodeId,
    term: &DistillTerm<'_>,
    sched: &NoiseSchedule,
) -> Result<(NodeId, NodeId)> {
    check_bounds(term.t, term.bounds)?;
    let (rows, _) = g.shape(x_hat);
    if term.t.len() != rows {
        return Err(Error::Input(format!("{} timesteps for {rows} rows", term.t.len())));
    }
    let frozen = g.stop_gradient(x_hat)?;
    let x_t = diffuse_node(g, frozen, term.t, term.eps, sched)?;
    let target = teacher_ddim_node(term.teacher, g, x_t, term.t, term.teacher_steps, term.labels, sched)?;
    let c: Vec<f64> = term.t.iter().map(|&ti| term.weighting.c(ti, sched)).collect();
    if c.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Config(format!("weighting {:?} is not positive on these timesteps", term.weighting)));
    }
    let diff = g.sub(x_hat, target)?;
    let sq = g.mul(diff, diff)?;
    let per_row = g.sum_rows(sq)?;
    let c = g.constant(Tensor::column(&c))?;
    let weighted = g.mul(per_row, c)?;
    let loss = g.mean(weighted)?;
    Ok((loss, target))
}

/// Value form of [`distill_loss_node`].
pub fn distill_loss(student_x0: &Tensor, term: &DistillTerm<'_>, sched: &NoiseSchedule) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(student_x0.clone())?;
    let (loss, _) = distill_loss_node(&mut g, x, term, sched)?;
    Ok(g.value(loss)?.item())
}

/// Seed `w(t_b) (eps_hat_b - eps'_b) / B` on the student output, the score
/// distillation gradient written directly in noise space.
pub fn sds_seed(
    student_x0: &Tensor,
    teacher: &dyn EpsModel,
    t: &[usize],
    eps: &Tensor,
    labels: Option<&[usize]>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = crate::diffusion::forward_diffuse_rows(student_x0, t, eps, sched)?;
    let eps_hat = teacher.predict_eps(&x_t, t, labels)?;
    let b = student_x0.rows() as f64;
    let cols = student_x0.cols();
    let mut seed = eps_hat.sub(eps);
    for (r, &ti) in t.iter().enumerate() {
        let w = super::config::sds_w(ti) / b;
        for v in &mut seed.data_mut()[r * cols..(r + 1) * cols] {
            *v *= w;
        }
    }
    Ok(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::column(v)
    }

    #[test]
    fn generator_loss_values() {
        assert_eq!(adv_loss_g(&[col(&[0.0, 0.0])]).unwrap(), 0.0);
        assert_eq!(adv_loss_g(&[col(&[2.0])]).unwrap(), -2.0);
        assert_eq!(adv_loss_g(&[col(&[1.0, 3.0]), col(&[0.5, -0.5])]).unwrap(), -2.0);
        assert!(adv_loss_g(&[]).is_err());
        assert!(adv_loss_g(&[col(&[f64::NAN])]).is_err());
    }

    #[test]
    fn discriminator_hinge_values() {
        assert_eq!(adv_loss_d(&[col(&[1.0, 3.0])], &[col(&[-1.0, -5.0])], 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(adv_loss_d(&[col(&[0.0])], &[col(&[0.0])], 0.0, 0.0).unwrap(), 2.0);
        assert_eq!(adv_loss_d(&[col(&[0.5])], &[col(&[-2.0])], 0.0, 0.0).unwrap(), 0.5);
        assert_eq!(adv_loss_d(&[col(&[0.5])], &[col(&[-2.0])], 3.0, 0.5).unwrap(), 2.0);
    }

    #[test]
    fn hinge_seeds_are_subgradients() {
        let (_, s) = hinge_real(&[col(&[0.5, 2.0])]).unwrap();
        assert_eq!(s[0].data(), &[-0.5, 0.0]);
        let (_, s) = hinge_fake(&[col(&[0.5, -2.0])]).unwrap();
        assert_eq!(s[0].data(), &[0.5, 0.0]);
    }

    #[test]
    fn total_is_additive() {
        assert_eq!(total_loss(1.0, 2.0, 2.5), 6.0);
        assert_eq!(total_loss(-0.3, 0.0, 2.5), -0.3);
    }

    proptest::proptest! {
        #[test]
        fn hinge_is_monotone(real in -3.0f64..3.0, fake in -3.0f64..3.0, d in 0.0f64..2.0) {
            let base = adv_loss_d(&[col(&[real])], &[col(&[fake])], 0.0, 0.0).unwrap();
            let up_real = adv_loss_d(&[col(&[real + d])], &[col(&[fake])], 0.0, 0.0).unwrap();
            let up_fake = adv_loss_d(&[col(&[real])], &[col(&[fake + d])], 0.0, 0.0).unwrap();
            proptest::prop_assert!(up_real <= base);
            proptest::prop_assert!(up_fake >= base);
            proptest::prop_assert!(base >= 0.0);
        }
    }
}
