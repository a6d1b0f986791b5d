//! Finite-difference checks of complete randomly initialized networks.

use super::denoiser::{Denoiser, DenoiserConfig, PredictionMode};
use super::discriminator::{CondMode, DiscArch, DiscriminatorBundle};
use super::featnet::{FeatnetArch, FeatureNetwork};
use crate::error::Result;
use crate::numcore::{grad_check, Graph, OpCheck, Tensor};
use crate::rng;

fn weighted_sum(g: &mut Graph, y: crate::numcore::NodeId, seed: u64) -> Result<crate::numcore::NodeId> {
    let (r, c) = g.shape(y);
    let w = g.constant(Tensor::randn(r, c, &mut rng::seeded(seed)))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(name: &str, g: &mut Graph, out: crate::numcore::NodeId, tolerance: f64) -> Result<OpCheck> {
    let rep = grad_check(g, out, tolerance)?;
    Ok(OpCheck {
        name: name.into(),
        worst: rep.worst,
        passed: rep.passed,
    })
}

/// A conditional denoiser, a feature network, and a conditioned discriminator
/// whose objective includes its input-gradient penalty.
pub fn network_suite(seed: u64, tolerance: f64) -> Result<Vec<OpCheck>> {
    let mut r = rng::seeded(seed);
    let (b, dim, classes) = (3, 2, 3);
    let x = Tensor::randn(b, dim, &mut r);
    let labels = [0, 2, 1];

    let cfg = DenoiserConfig {
        dim,
        hidden: 6,
        depth: 2,
        time_dim: 4,
        n_classes: Some(classes),
        label_dim: 3,
    };
    let net = Denoiser::new(cfg, PredictionMode::Eps, &mut rng::stream(seed, "net"))?;
    let mut g = Graph::new();
    let ids = net.bind(&mut g, true)?;
    let xn = g.constant(x.clone())?;
    let y = net.forward_node(&mut g, &ids, xn, &[3, 500, 997], Some(&labels))?;
    let out = weighted_sum(&mut g, y, seed + 1)?;
    let mut res = vec![check("denoiser", &mut g, out, tolerance)?];

    let fnet = FeatureNetwork::new(
        FeatnetArch {
            dim,
            width: 5,
            depth: 2,
            embed_dim: 3,
            n_classes: classes,
        },
        seed + 2,
    )?;
    let mut g = Graph::new();
    let ids = fnet.bind(&mut g, true)?;
    let xn = g.constant(x.clone())?;
    let nodes = fnet.forward_node(&mut g, &ids, xn)?;
    let a = weighted_sum(&mut g, nodes.logits, seed + 3)?;
    let e = weighted_sum(&mut g, nodes.feats[0], seed + 4)?;
    let out = g.add(a, e)?;
    res.push(check("featnet", &mut g, out, tolerance)?);

    let (feats, c_img) = fnet.features(&x)?;
    let disc = DiscriminatorBundle::new(
        DiscArch {
            feat_dims: vec![5, 5],
            hidden: 4,
            proj_dim: 3,
            label_dim: 2,
            img_dim: 3,
            n_classes: classes,
            feat_norm: Vec::new(),
        },
        seed + 5,
    )?;
    let mut g = Graph::new();
    let ids = disc.bind(&mut g, true)?;
    let cond = disc.condition_nodes(&mut g, &ids, &labels, &c_img, CondMode::LabelImage)?;
    let (_, scores, r1) = disc.r1_nodes(&mut g, &ids, &feats, &cond)?;
    let mut out = g.scale(r1, 0.5)?;
    for (k, s) in scores.into_iter().enumerate() {
        let t = weighted_sum(&mut g, s, seed + 6 + k as u64)?;
        out = g.add(out, t)?;
    }
    res.push(check("discriminator", &mut g, out, tolerance)?);
    Ok(res)
}
