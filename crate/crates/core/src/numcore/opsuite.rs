//! Finite-difference coverage of every differentiable graph op.

use std::collections::BTreeSet;
use std::sync::Arc;

use super::gradcheck::grad_check;
use super::graph::{CustomOp, Graph, NodeId, OP_NAMES};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng;

/// Outcome of one case of [`op_suite`].
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub worst: f64,
    pub passed: bool,
}

/// Elementwise cube, exercising the custom-op plumbing.
#[derive(Debug)]
struct Cube;

impl CustomOp for Cube {
    fn name(&self) -> &'static str {
        "cube"
    }

    fn output_shape(&self, inputs: &[(usize, usize)]) -> std::result::Result<(usize, usize), String> {
        match inputs {
            [s] => Ok(*s),
            _ => Err(format!("cube takes one input, got {}", inputs.len())),
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].map(|v| v * v * v)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![inputs[0].zip_map(grad, |x, g| 3.0 * x * x * g)]
    }
}

struct Case {
    name: String,
    g: Graph,
    out: NodeId,
}

/// Contracts `y` against a fixed random weight so every output entry matters.
fn contract(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let (r, c) = g.shape(y);
    let w = g.constant(Tensor::randn(r, c, &mut rng::seeded(seed)))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn unary(name: &str, seed: u64, shape: (usize, usize), f: impl Fn(&mut Graph, NodeId) -> Result<NodeId>) -> Result<Case> {
    let mut r = rng::seeded(seed);
    let mut g = Graph::new();
    let a = g.param(Tensor::randn(shape.0, shape.1, &mut r))?;
    let y = f(&mut g, a)?;
    let out = contract(&mut g, y, seed + 1)?;
    Ok(Case {
        name: name.into(),
        g,
        out,
    })
}

fn binary(
    name: &str,
    seed: u64,
    sa: (usize, usize),
    sb: (usize, usize),
    f: impl Fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>,
) -> Result<Case> {
    let mut r = rng::seeded(seed);
    let mut g = Graph::new();
    let a = g.param(Tensor::randn(sa.0, sa.1, &mut r))?;
    let b = g.param(Tensor::randn(sb.0, sb.1, &mut r))?;
    let y = f(&mut g, a, b)?;
    let out = contract(&mut g, y, seed + 1)?;
    Ok(Case {
        name: name.into(),
        g,
        out,
    })
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let s = (3, 4);
    let mut v = vec![
        binary("matmul", seed, (3, 4), (4, 2), |g, a, b| g.matmul(a, b))?,
        unary("transpose", seed + 10, s, |g, a| g.transpose(a))?,
        binary("add", seed + 20, s, s, |g, a, b| g.add(a, b))?,
        binary("add/row", seed + 30, s, (1, 4), |g, a, b| g.add(a, b))?,
        binary("add/col", seed + 40, s, (3, 1), |g, a, b| g.add(a, b))?,
        binary("add/scalar", seed + 50, (1, 1), s, |g, a, b| g.add(a, b))?,
        binary("mul", seed + 60, s, s, |g, a, b| g.mul(a, b))?,
        binary("mul/row", seed + 70, (1, 4), s, |g, a, b| g.mul(a, b))?,
        binary("mul/col", seed + 80, s, (3, 1), |g, a, b| g.mul(a, b))?,
        binary("sub", seed + 90, s, s, |g, a, b| g.sub(a, b))?,
        unary("scale", seed + 100, s, |g, a| g.scale(a, -1.7))?,
        unary("add_scalar", seed + 110, s, |g, a| g.add_scalar(a, 0.3))?,
        unary("silu", seed + 120, s, |g, a| g.silu(a))?,
        unary("silu_prime", seed + 130, s, |g, a| g.silu_prime(a))?,
        unary("sum", seed + 140, s, |g, a| g.sum(a))?,
        unary("mean", seed + 150, s, |g, a| g.mean(a))?,
        unary("sum_rows", seed + 160, s, |g, a| g.sum_rows(a))?,
        unary("squared_norm", seed + 170, s, |g, a| g.squared_norm(a))?,
        binary("concat", seed + 180, s, (3, 2), |g, a, b| g.concat(a, b))?,
        unary("slice_cols", seed + 190, s, |g, a| g.slice_cols(a, 1, 3))?,
        unary("custom", seed + 200, s, |g, a| g.custom(&[a], Arc::new(Cube)))?,
        // the stop-gradient branch is a constant to finite differences as well
        unary("stop_gradient", seed + 210, s, |g, a| {
            let c = g.constant(Tensor::randn(3, 4, &mut rng::seeded(seed + 211)))?;
            let sg = g.stop_gradient(c)?;
            g.add(a, sg)
        })?,
    ];
    // second order: differentiate a squared input gradient, as R1 does.
    // Inputs are shrunk so the output stays O(1) and round-off does not
    // swamp the finite differences.
    let mut r = rng::seeded(seed + 300);
    let mut g = Graph::new();
    let mut small = |rows, cols| Tensor::randn(rows, cols, &mut r).map(|v| 0.5 * v);
    let x = g.param(small(3, 2))?;
    let w = g.param(small(2, 4))?;
    let b = g.param(small(1, 4))?;
    let u = g.param(small(4, 1))?;
    let h = g.affine(x, w, b)?;
    let h = g.silu(h)?;
    let sq = g.mul(h, h)?;
    let score = g.matmul(sq, u)?;
    let gx = g.grad_graph(score, &[x])?[0];
    let out = g.squared_norm(gx)?;
    v.push(Case {
        name: "grad_graph".into(),
        g,
        out,
    });
    Ok(v)
}

/// Runs every op case at `tolerance`. Panics if a differentiable op has no case.
pub fn op_suite(seed: u64, tolerance: f64) -> Result<Vec<OpCheck>> {
    let mut covered = BTreeSet::new();
    let mut out = Vec::new();
    for mut c in cases(seed)? {
        for i in 0..c.g.len() {
            covered.insert(c.g.op_name(NodeId::from_index(i)));
        }
        let rep = grad_check(&mut c.g, c.out, tolerance)?;
        out.push(OpCheck {
            name: c.name,
            worst: rep.worst,
            passed: rep.passed,
        });
    }
    let missing: Vec<&str> = OP_NAMES.iter().copied().filter(|n| !covered.contains(n)).collect();
    assert!(missing.is_empty(), "ops without a gradient case: {missing:?}");
    Ok(out)
}
