use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// near-zero gradients are compared in absolute terms.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            floor: 1e-3,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamError {
    pub node: NodeId,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare backward gradients of a scalar `output` against central
/// differences for every parameter leaf of `graph`.
pub fn grad_check(graph: &mut Graph, output: NodeId, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(
        graph,
        output,
        &GradCheckOptions {
            tolerance,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with(
    graph: &mut Graph,
    output: NodeId,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if graph.shape(output) != (1, 1) {
        return Err(Error::Input(format!(
            "grad_check needs a scalar output, node {output} has shape {:?}",
            graph.shape(output)
        )));
    }
    let params = graph.params();
    if params.is_empty() {
        return Err(Error::Input("grad_check needs at least one parameter".into()));
    }
    let grads = graph.backward(output, Tensor::scalar(1.0))?;
    let mut per_param = Vec::with_capacity(params.len());
    for &p in &params {
        let analytic = grads.wrt(p, graph.shape(p));
        if !analytic.is_finite() {
            return Err(Error::NonFiniteGradient(p.index()));
        }
        let base = graph.value(p)?.clone();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let eval = |graph: &mut Graph, delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                graph.set_value(p, t)?;
                graph.recompute()?;
                Ok(graph.value(output)?.item())
            };
            let plus = eval(graph, opts.step)?;
            let minus = eval(graph, -opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient(p.index()));
            }
            worst = worst.max(relative_error(analytic.data()[i], numeric, opts.floor));
        }
        graph.set_value(p, base)?;
        per_param.push(ParamError {
            node: p,
            max_rel_error: worst,
        });
    }
    graph.recompute()?;
    let worst = per_param.iter().fold(0.0_f64, |m, e| m.max(e.max_rel_error));
    Ok(GradCheckReport {
        per_param,
        worst,
        tolerance: opts.tolerance,
        passed: worst < opts.tolerance,
    })
}
