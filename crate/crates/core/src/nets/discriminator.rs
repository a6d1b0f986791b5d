use serde::{Deserialize, Serialize};

use super::params::{init_weight, one_hot, ParamStore};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::rng;

/// Which embeddings the discriminator is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    None,
    Label,
    Image,
    #[default]
    #[serde(alias = "label+image")]
    LabelImage,
}

impl CondMode {
    pub fn uses_label(self) -> bool {
        matches!(self, CondMode::Label | CondMode::LabelImage)
    }

    pub fn uses_image(self) -> bool {
        matches!(self, CondMode::Image | CondMode::LabelImage)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CondMode::None => "none",
            CondMode::Label => "label",
            CondMode::Image => "image",
            CondMode::LabelImage => "label_image",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscArch {
    /// Width of each feature layer the heads read.
    pub feat_dims: Vec<usize>,
    /// Head hidden width; 0 gives linear heads.
    pub hidden: usize,
    pub proj_dim: usize,
    pub label_dim: usize,
    pub img_dim: usize,
    pub n_classes: usize,
    /// Fixed per-head input standardization; empty leaves features unchanged.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feat_norm: Vec<FeatAffine>,
}

/// `(f - shift) * scale`, per feature column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatAffine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatAffine {
    fn nodes(&self, g: &mut Graph) -> Result<(NodeId, NodeId)> {
        let n = self.scale.len();
        let mut w = Tensor::zeros(n, n);
        for (i, s) in self.scale.iter().enumerate() {
            w.data_mut()[i * n + i] = *s;
        }
        let b: Vec<f64> = self.shift.iter().zip(&self.scale).map(|(m, s)| -m * s).collect();
        Ok((g.constant(w)?, g.constant(Tensor::row(&b))?))
    }
}

/// Conditioning embeddings for one batch; absent parts contribute nothing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditioning {
    pub c_label: Option<Tensor>,
    pub c_img: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CondNodes {
    pub label: Option<NodeId>,
    pub img: Option<NodeId>,
}

/// Per-layer heads `psi_k(F_k) + <c_label P_text_k + c_img P_img_k, phi_k(F_k)>`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorBundle {
    arch: DiscArch,
    params: ParamStore,
}

struct HeadLayout {
    hidden: Option<(usize, usize)>,
    psi_w: usize,
    psi_b: usize,
    phi: usize,
    p_text: usize,
    p_img: usize,
}

impl DiscriminatorBundle {
    pub fn new(arch: DiscArch, seed: u64) -> Result<Self> {
        if arch.feat_dims.is_empty() || arch.proj_dim == 0 {
            return Err(Error::Config("discriminator needs >= 1 head and proj_dim > 0".into()));
        }
        let norm_ok = arch.feat_norm.is_empty()
            || (arch.feat_norm.len() == arch.feat_dims.len()
                && arch
                    .feat_norm
                    .iter()
                    .zip(&arch.feat_dims)
                    .all(|(n, &f)| n.shift.len() == f && n.scale.len() == f));
        if !norm_ok {
            return Err(Error::Config("feature normalization does not match feat_dims".into()));
        }
        let mut r = rng::stream(seed, "disc-init");
        let mut params = ParamStore::default();
        params.push("label_embed", Tensor::randn(arch.n_classes, arch.label_dim, &mut r));
        for (k, &f) in arch.feat_dims.iter().enumerate() {
            let top = if arch.hidden > 0 {
                params.push(format!("head{k}.h.w"), init_weight(f, arch.hidden, &mut r));
                params.push(format!("head{k}.h.b"), Tensor::zeros(1, arch.hidden));
                arch.hidden
            } else {
                f
            };
            params.push(format!("head{k}.psi.w"), init_weight(top, 1, &mut r));
            params.push(format!("head{k}.psi.b"), Tensor::zeros(1, 1));
            params.push(format!("head{k}.phi.w"), init_weight(top, arch.proj_dim, &mut r));
            params.push(format!("head{k}.p_text"), init_weight(arch.label_dim, arch.proj_dim, &mut r));
            params.push(format!("head{k}.p_img"), init_weight(arch.img_dim, arch.proj_dim, &mut r));
        }
        Ok(DiscriminatorBundle { arch, params })
    }

    pub fn arch(&self) -> &DiscArch {
        &self.arch
    }

    pub fn n_heads(&self) -> usize {
        self.arch.feat_dims.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn from_parts(arch: DiscArch, params: ParamStore) -> Self {
        DiscriminatorBundle { arch, params }
    }

    fn layout(&self, k: usize) -> HeadLayout {
        let per = if self.arch.hidden > 0 { 7 } else { 5 };
        let base = 1 + k * per;
        let (hidden, o) = if self.arch.hidden > 0 {
            (Some((base, base + 1)), base + 2)
        } else {
            (None, base)
        };
        HeadLayout {
            hidden,
            psi_w: o,
            psi_b: o + 1,
            phi: o + 2,
            p_text: o + 3,
            p_img: o + 4,
        }
    }

    /// Zero every conditioning projector.
    pub fn zero_projectors(&mut self) {
        for k in 0..self.n_heads() {
            let l = self.layout(k);
            for i in [l.p_text, l.p_img] {
                self.params.values_mut()[i].data_mut().fill(0.0);
            }
        }
    }

    /// Linear-head weight vector `w_k` (only meaningful when `hidden == 0`).
    pub fn psi_weight(&self, k: usize) -> &Tensor {
        self.params.get(self.layout(k).psi_w)
    }

    pub fn psi_weight_mut(&mut self, k: usize) -> &mut Tensor {
        let i = self.layout(k).psi_w;
        &mut self.params.values_mut()[i]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<NodeId>> {
        self.params.bind(g, trainable)
    }

    /// Learned label embedding `c_label` by value.
    pub fn label_embedding(&self, labels: &[usize]) -> Result<Tensor> {
        one_hot(labels, self.arch.n_classes)?.matmul(self.params.get(0))
    }

    pub fn conditioning(&self, labels: &[usize], c_img: &Tensor, mode: CondMode) -> Result<Conditioning> {
        Ok(Conditioning {
            c_label: if mode.uses_label() { Some(self.label_embedding(labels)?) } else { None },
            c_img: if mode.uses_image() { Some(c_img.clone()) } else { None },
        })
    }

    /// Conditioning nodes; the label embedding stays trainable through `ids`.
    pub fn condition_nodes(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        labels: &[usize],
        c_img: &Tensor,
        mode: CondMode,
    ) -> Result<CondNodes> {
        let label = if mode.uses_label() {
            let oh = g.constant(one_hot(labels, self.arch.n_classes)?)?;
            Some(g.matmul(oh, ids[0])?)
        } else {
            None
        };
        let img = if mode.uses_image() { Some(g.constant(c_img.clone())?) } else { None };
        Ok(CondNodes { label, img })
    }

    /// One `(B, 1)` score node per head.
    pub fn score_nodes(&self, g: &mut Graph, ids: &[NodeId], feats: &[NodeId], cond: &CondNodes) -> Result<Vec<NodeId>> {
        if feats.len() != self.n_heads() {
            return Err(Error::Input(format!(
                "discriminator has {} heads, got {} feature layers",
                self.n_heads(),
                feats.len()
            )));
        }
        super::counters::bump(|c| c.discriminator += 1);
        let mut out = Vec::with_capacity(feats.len());
        for (k, &f) in feats.iter().enumerate() {
            let l = self.layout(k);
            let f = match self.arch.feat_norm.get(k) {
                Some(n) => {
                    let (w, b) = n.nodes(g)?;
                    g.affine(f, w, b)?
                }
                None => f,
            };
            let h = match l.hidden {
                Some((w, b)) => {
                    let a = g.affine(f, ids[w], ids[b])?;
                    g.silu(a)?
                }
                None => f,
            };
            let mut score = g.affine(h, ids[l.psi_w], ids[l.psi_b])?;
            let text = match cond.label {
                Some(c) => Some(g.matmul(c, ids[l.p_text])?),
                None => None,
            };
            let img = match cond.img {
                Some(c) => Some(g.matmul(c, ids[l.p_img])?),
                None => None,
            };
            let e = match (text, img) {
                (Some(a), Some(b)) => Some(g.add(a, b)?),
                (a, b) => a.or(b),
            };
            if let Some(e) = e {
                let phi = g.matmul(h, ids[l.phi])?;
                let inner = g.mul(phi, e)?;
                let proj = g.sum_rows(inner)?;
                score = g.add(score, proj)?;
            }
            out.push(score);
        }
        Ok(out)
    }

    /// Per-head scores by value.
    pub fn score(&self, feats: &[Tensor], cond: &Conditioning) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false)?;
        let f: Vec<NodeId> = feats.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
        let c = CondNodes {
            label: cond.c_label.clone().map(|t| g.constant(t)).transpose()?,
            img: cond.c_img.clone().map(|t| g.constant(t)).transpose()?,
        };
        let s = self.score_nodes(&mut g, &ids, &f, &c)?;
        s.iter().map(|&n| g.value(n).cloned()).collect()
    }

    /// Records the penalty `sum_k mean_b |dD_k / dF_k|^2` on fresh leaves holding
    /// `feats`. Returns the feature leaves, the head scores on them and the penalty node.
    pub fn r1_nodes(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        feats: &[Tensor],
        cond: &CondNodes,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>, NodeId)> {
        let leaves: Vec<NodeId> = feats.iter().map(|t| g.param(t.clone())).collect::<Result<_>>()?;
        let scores = self.score_nodes(g, ids, &leaves, cond)?;
        let batch = feats.first().map_or(1, Tensor::rows) as f64;
        let mut total: Option<NodeId> = None;
        for (&s, &leaf) in scores.iter().zip(&leaves) {
            let grad = g.grad_graph(s, &[leaf])?[0];
            let sq = g.squared_norm(grad)?;
            total = Some(match total {
                Some(t) => g.add(t, sq)?,
                None => sq,
            });
        }
        let total = total.expect("at least one head");
        let r1 = g.scale(total, 1.0 / batch)?;
        Ok((leaves, scores, r1))
    }

    /// R1 penalty by value.
    pub fn r1_penalty(&self, feats: &[Tensor], cond: &Conditioning) -> Result<f64> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false)?;
        let c = CondNodes {
            label: cond.c_label.clone().map(|t| g.constant(t)).transpose()?,
            img: cond.c_img.clone().map(|t| g.constant(t)).transpose()?,
        };
        let (_, _, r1) = self.r1_nodes(&mut g, &ids, feats, &c)?;
        Ok(g.value(r1)?.item())
    }
}
