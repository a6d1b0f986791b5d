use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{dense_stack, one_hot, push_dense_stack, ParamStore};
use crate::diffusion::{eps_to_x0, EpsModel};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    X0,
    Eps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    /// `None` for an unconditional network.
    #[serde(with = "crate::opt_serde")]
    pub n_classes: Option<usize>,
    pub label_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            dim: 2,
            hidden: 256,
            depth: 4,
            time_dim: 64,
            n_classes: Some(8),
            label_dim: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim must be even and > 0, got {}", self.time_dim)));
        }
        if self.dim == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::Config("dim, hidden and depth must be > 0".into()));
        }
        if self.n_classes == Some(0) {
            return Err(Error::Config("n_classes must be > 0 when set".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.dim + self.time_dim + self.n_classes.map_or(0, |_| self.label_dim)
    }
}

/// Sinusoidal embedding of integer timesteps, `[sin | cos]` halves.
pub fn time_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let ti = ti as f64;
        data.extend(freqs.iter().map(|f| (ti * f).sin()));
        data.extend(freqs.iter().map(|f| (ti * f).cos()));
    }
    Tensor::matrix(t.len(), dim, data)
}

/// MLP denoiser over `concat(x, time embedding, label embedding)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    mode: PredictionMode,
    params: ParamStore,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, mode: PredictionMode, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        if let Some(c) = config.n_classes {
            params.push("label_embed", Tensor::randn(c, config.label_dim, rng));
        }
        let mut dims = vec![config.input_dim()];
        dims.extend(std::iter::repeat_n(config.hidden, config.depth));
        dims.push(config.dim);
        push_dense_stack(&mut params, "mlp.", &dims, rng);
        Ok(Denoiser { config, mode, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn mode(&self) -> PredictionMode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_conditional(&self) -> bool {
        self.config.n_classes.is_some()
    }

    /// Same weights, different output interpretation.
    pub fn with_mode(mut self, mode: PredictionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn zero_output_layer(&mut self) {
        let last_w = self.params.len() - 2;
        let w = &mut self.params.values_mut()[last_w];
        w.data_mut().fill(0.0);
    }

    /// Bias of the output layer.
    pub fn output_bias(&self) -> &Tensor {
        self.params.get(self.params.len() - 1)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<NodeId>> {
        self.params.bind(g, trainable)
    }

    /// Network output for per-row timesteps using parameters bound by [`Denoiser::bind`].
    pub fn forward_node(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        x: NodeId,
        t: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<NodeId> {
        let (rows, cols) = g.shape(x);
        if cols != self.config.dim || t.len() != rows {
            return Err(Error::Input(format!(
                "denoiser expects ({} timesteps, dim {}), got x {:?} with {} timesteps",
                rows,
                self.config.dim,
                (rows, cols),
                t.len()
            )));
        }
        let mode = self.mode;
        super::counters::bump(|c| match mode {
            PredictionMode::X0 => c.x0_denoiser += 1,
            PredictionMode::Eps => c.eps_denoiser += 1,
        });
        let temb = g.constant(time_embedding(t, self.config.time_dim))?;
        let mut input = g.concat(x, temb)?;
        let mlp_ids = match (self.config.n_classes, labels) {
            (Some(c), Some(l)) => {
                if l.len() != rows {
                    return Err(Error::Input(format!("{} labels for {rows} rows", l.len())));
                }
                let oh = g.constant(one_hot(l, c)?)?;
                let emb = g.matmul(oh, ids[0])?;
                input = g.concat(input, emb)?;
                &ids[1..]
            }
            (Some(_), None) => return Err(Error::Input("conditional denoiser needs labels".into())),
            (None, Some(_)) => return Err(Error::Input("unconditional denoiser given labels".into())),
            (None, None) => ids,
        };
        Ok(dense_stack(g, mlp_ids, input, false)?.0)
    }

    /// Raw network output (an `x0` or `eps` estimate depending on the mode).
    pub fn predict(&self, x: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false)?;
        let xn = g.constant(x.clone())?;
        let out = self.forward_node(&mut g, &ids, xn, t, labels)?;
        Ok(g.value(out)?.clone())
    }

    /// Clean-sample estimate at a single timestep, converting from `eps` if needed.
    pub fn predict_x0(
        &self,
        x: &Tensor,
        t: usize,
        labels: Option<&[usize]>,
        sched: &crate::diffusion::NoiseSchedule,
    ) -> Result<Tensor> {
        let out = self.predict(x, &vec![t; x.rows()], labels)?;
        match self.mode {
            PredictionMode::X0 => Ok(out),
            PredictionMode::Eps => eps_to_x0(x, &out, t, sched),
        }
    }

    /// View with parameters already recorded in a graph.
    pub fn bound<'a>(&'a self, ids: &'a [NodeId]) -> BoundDenoiser<'a> {
        BoundDenoiser { net: self, ids }
    }

    fn require_eps(&self) -> Result<()> {
        if self.mode != PredictionMode::Eps {
            return Err(Error::Unsupported("noise prediction requested from an x0-mode denoiser".into()));
        }
        Ok(())
    }
}

impl EpsModel for Denoiser {
    fn eps_node(&self, g: &mut Graph, x: NodeId, t: &[usize], labels: Option<&[usize]>) -> Result<NodeId> {
        self.require_eps()?;
        let ids = self.bind(g, false)?;
        self.forward_node(g, &ids, x, t, labels)
    }
}

pub struct BoundDenoiser<'a> {
    net: &'a Denoiser,
    ids: &'a [NodeId],
}

impl EpsModel for BoundDenoiser<'_> {
    fn eps_node(&self, g: &mut Graph, x: NodeId, t: &[usize], labels: Option<&[usize]>) -> Result<NodeId> {
        self.net.require_eps()?;
        self.net.forward_node(g, self.ids, x, t, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            hidden: 16,
            depth: 2,
            time_dim: 8,
            n_classes: Some(3),
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn zero_output_layer_returns_bias() {
        let mut r = rng::seeded(7);
        let mut net = Denoiser::new(small(), PredictionMode::X0, &mut r).unwrap();
        net.zero_output_layer();
        let last = net.params().len() - 1;
        net.params_mut().values_mut()[last] = Tensor::row(&[0.25, -0.5]);
        let x = Tensor::randn(4, 2, &mut r);
        let out = net.predict(&x, &[1, 10, 500, 1000], Some(&[0, 1, 2, 0])).unwrap();
        for row in 0..4 {
            assert_eq!(out.row_slice(row), &[0.25, -0.5]);
        }
    }

    #[test]
    fn conditioning_contract() {
        let mut r = rng::seeded(1);
        let net = Denoiser::new(small(), PredictionMode::Eps, &mut r).unwrap();
        let x = Tensor::zeros(2, 2);
        assert!(net.predict(&x, &[5, 5], None).is_err());
        assert!(net.predict(&x, &[5, 5], Some(&[0, 3])).is_err());
        let unc = Denoiser::new(
            DenoiserConfig {
                n_classes: None,
                ..small()
            },
            PredictionMode::Eps,
            &mut r,
        )
        .unwrap();
        assert!(unc.predict(&x, &[5, 5], Some(&[0, 1])).is_err());
        assert!(unc.predict(&x, &[5, 5], None).is_ok());
    }

    #[test]
    fn deterministic_and_odd_time_dim_rejected() {
        let mut r = rng::seeded(2);
        let net = Denoiser::new(small(), PredictionMode::Eps, &mut r).unwrap();
        let x = Tensor::randn(3, 2, &mut r);
        let a = net.predict(&x, &[3, 4, 5], Some(&[0, 1, 2])).unwrap();
        let b = net.predict(&x, &[3, 4, 5], Some(&[0, 1, 2])).unwrap();
        assert_eq!(a, b);
        let bad = DenoiserConfig {
            time_dim: 7,
            ..small()
        };
        assert!(Denoiser::new(bad, PredictionMode::Eps, &mut r).is_err());
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(&[0, 3], 4);
        assert_eq!(e.row_slice(0), &[0.0, 0.0, 1.0, 1.0]);
        assert!((e.get(1, 0) - 3f64.sin()).abs() < 1e-15);
        assert!((e.get(1, 1) - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
