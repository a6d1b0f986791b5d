use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::params::{dense_stack, one_hot, push_dense_stack, ParamStore};
use crate::data::LabeledPoints;
use crate::error::{Error, Result};
use crate::numcore::{clip_grad_norm, Adam, AdamConfig, Graph, NodeId, Tensor};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatnetConfig {
    pub width: usize,
    /// Number of hidden layers, which is also the number of discriminator heads.
    pub depth: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FeatnetConfig {
    fn default() -> Self {
        FeatnetConfig {
            width: 64,
            depth: 3,
            embed_dim: 16,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatnetArch {
    pub dim: usize,
    pub width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
}

/// Encoder exposing every hidden layer, a final embedding, and a linear
/// classifier on that embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetwork {
    arch: FeatnetArch,
    params: ParamStore,
    frozen: bool,
}

pub struct FeatureNodes {
    pub feats: Vec<NodeId>,
    pub embedding: NodeId,
    pub logits: NodeId,
}

impl FeatureNetwork {
    pub fn new(arch: FeatnetArch, seed: u64) -> Result<Self> {
        if arch.depth == 0 || arch.width == 0 || arch.embed_dim == 0 {
            return Err(Error::Config("feature network needs depth, width, embed_dim > 0".into()));
        }
        let mut r = rng::stream(seed, "featnet-init");
        let mut params = ParamStore::default();
        let mut dims = vec![arch.dim];
        dims.extend(std::iter::repeat_n(arch.width, arch.depth));
        push_dense_stack(&mut params, "enc.", &dims, &mut r);
        push_dense_stack(&mut params, "embed.", &[arch.width, arch.embed_dim], &mut r);
        push_dense_stack(&mut params, "cls.", &[arch.embed_dim, arch.n_classes], &mut r);
        Ok(FeatureNetwork {
            arch,
            params,
            frozen: false,
        })
    }

    pub fn from_parts(arch: FeatnetArch, params: ParamStore, frozen: bool) -> Self {
        FeatureNetwork { arch, params, frozen }
    }

    pub fn arch(&self) -> &FeatnetArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn n_layers(&self) -> usize {
        self.arch.depth
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<NodeId>> {
        if trainable && self.frozen {
            return Err(Error::Unsupported("frozen feature network bound as trainable".into()));
        }
        self.params.bind(g, trainable)
    }

    pub fn forward_node(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<FeatureNodes> {
        super::counters::bump(|c| c.featnet += 1);
        let enc = 2 * self.arch.depth;
        let (h, feats) = dense_stack(g, &ids[..enc], x, true)?;
        let embedding = g.affine(h, ids[enc], ids[enc + 1])?;
        let logits = g.affine(embedding, ids[enc + 2], ids[enc + 3])?;
        Ok(FeatureNodes {
            feats,
            embedding,
            logits,
        })
    }

    /// Per-layer features and the final embedding, by value.
    pub fn features(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false)?;
        let xn = g.constant(x.clone())?;
        let n = self.forward_node(&mut g, &ids, xn)?;
        let feats = n.feats.iter().map(|&f| g.value(f).cloned()).collect::<Result<_>>()?;
        Ok((feats, g.value(n.embedding)?.clone()))
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.features(x)?.1)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false)?;
        let xn = g.constant(x.clone())?;
        let n = self.forward_node(&mut g, &ids, xn)?;
        Ok(g.value(n.logits)?.clone())
    }

    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(x)?;
        Ok((0..l.rows())
            .map(|r| {
                let row = l.row_slice(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, data: &LabeledPoints) -> Result<f64> {
        let pred = self.classify(&data.points)?;
        let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Mean cross-entropy of `logits` and its gradient with respect to them.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = (logits.rows(), logits.cols());
    let target = one_hot(labels, c)?;
    let mut grad = Tensor::zeros(b, c);
    let mut loss = 0.0;
    for r in 0..b {
        let row = logits.row_slice(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[labels[r]];
        for k in 0..c {
            grad.data_mut()[r * c + k] = ((row[k] - m).exp() / z - target.get(r, k)) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Supervised pretraining on mode labels; the result is frozen.
pub fn pretrain_feature_network(
    data: &LabeledPoints,
    n_classes: usize,
    cfg: &FeatnetConfig,
    seed: u64,
) -> Result<FeatureNetwork> {
    if data.distinct_labels() < 2 || n_classes < 2 {
        return Err(Error::Input("feature network pretraining needs at least 2 classes".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("featnet epochs and batch_size must be > 0".into()));
    }
    let arch = FeatnetArch {
        dim: data.dim(),
        width: cfg.width,
        depth: cfg.depth,
        embed_dim: cfg.embed_dim,
        n_classes,
    };
    let mut net = FeatureNetwork::new(arch, seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), net.params.values());
    let mut r = rng::stream(seed, "featnet-batches");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let mut g = Graph::new();
            let ids = net.bind(&mut g, true)?;
            let x = g.constant(batch.points.clone())?;
            let nodes = net.forward_node(&mut g, &ids, x)?;
            let (loss, seed_grad) = cross_entropy(g.value(nodes.logits)?, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: "featnet cross-entropy".into(),
                });
            }
            let grads = g.backward(nodes.logits, seed_grad)?;
            let mut gs: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(id, g.shape(id))).collect();
            clip_grad_norm(&mut gs, 1.0);
            opt.step(net.params.values_mut(), &gs)?;
            step += 1;
        }
    }
    net.freeze();
    Ok(net)
}
