use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::serialize::NamedTensors;
use crate::numcore::{Graph, NodeId, Tensor};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Record every tensor in `g`, as params when `trainable`, else constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<NodeId>> {
        self.values
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn to_named(&self, prefix: &str) -> NamedTensors {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Overwrite values from named tensors; names and shapes must match exactly.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)], prefix: &str) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.values.iter_mut()) {
            let full = format!("{prefix}{name}");
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {full}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{full}: expected shape {:?}, found {:?}", slot.shape(), t.shape()),
                ));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Normal init with std `1/sqrt(fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(fan_in, fan_out, rng).scale(1.0 / (fan_in as f64).sqrt())
}

/// Appends `w{i}`/`b{i}` pairs for a stack of dense layers; returns the index of the first.
pub fn push_dense_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dims: &[usize],
    rng: &mut R,
) -> usize {
    let first = store.len();
    for (i, w) in dims.windows(2).enumerate() {
        store.push(format!("{prefix}w{i}"), init_weight(w[0], w[1], rng));
        store.push(format!("{prefix}b{i}"), Tensor::zeros(1, w[1]));
    }
    first
}

/// Dense stack over bound `(w, b)` pairs with SiLU between layers.
/// Returns the output and the post-activation hidden layers.
pub fn dense_stack(g: &mut Graph, ids: &[NodeId], x: NodeId, act_last: bool) -> Result<(NodeId, Vec<NodeId>)> {
    let n = ids.len() / 2;
    let mut h = x;
    let mut hidden = Vec::with_capacity(n);
    for i in 0..n {
        h = g.affine(h, ids[2 * i], ids[2 * i + 1])?;
        if i + 1 < n || act_last {
            h = g.silu(h)?;
            hidden.push(h);
        }
    }
    Ok((h, hidden))
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), n_classes);
    for (r, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::Input(format!("label {l} out of range for {n_classes} classes")));
        }
        t.data_mut()[r * n_classes + l] = 1.0;
    }
    Ok(t)
}
