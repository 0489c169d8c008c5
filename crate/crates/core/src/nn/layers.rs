//! Parameter storage and the building blocks of the model: MLPs, GIN layers
//! and the two eigenvector heads.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::tape::{Tape, Tensor};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: DenseMatrix,
}

/// Ordered, named model parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        self.entries.push(NamedParam {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[NamedParam] {
        &self.entries
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    pub fn find(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.as_slice().len()).sum()
    }

    /// Overwrites every parameter whose name appears in `source`. Shapes must
    /// agree. Returns how many were copied.
    pub fn copy_matching(&mut self, source: &[NamedParam]) -> Result<usize> {
        let mut copied = 0;
        for entry in &mut self.entries {
            if let Some(src) = source.iter().find(|s| s.name == entry.name) {
                if src.value.shape() != entry.value.shape() {
                    return Err(shape(
                        "copy_matching",
                        format!(
                            "parameter '{}' is {:?}, source has {:?}",
                            entry.name,
                            entry.value.shape(),
                            src.value.shape()
                        ),
                    ));
                }
                entry.value = src.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Registers every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let tensors = self
            .entries
            .iter()
            .map(|e| tape.param(e.value.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound(tensors))
    }

    pub fn zeros_like(&self) -> Vec<DenseMatrix> {
        self.entries
            .iter()
            .map(|e| DenseMatrix::zeros(e.value.rows(), e.value.cols()))
            .collect()
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Tensor>);

impl Bound {
    /// Gradients of all parameters after `tape.backward`; parameters the loss
    /// did not reach get zeros.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Vec<DenseMatrix> {
        self.0
            .iter()
            .zip(store.entries())
            .map(|(t, e)| {
                tape.grad(*t)
                    .cloned()
                    .unwrap_or_else(|| DenseMatrix::zeros(e.value.rows(), e.value.cols()))
            })
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Tensor;

    fn index(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }
}

/// Forward mode: training draws dropout masks from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut StreamRng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Glorot-uniform weight in `±√(6/(fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> DenseMatrix {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    DenseMatrix::from_vec(fan_in, fan_out, data).expect("finite init")
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

/// Multi-layer perceptron with ReLU and dropout after every hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    dims: Vec<usize>,
    dropout: f64,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`; needs at least two entries.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad MLP dims {dims:?} for {prefix}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!("dropout {dropout} not in [0, 1)")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear {
                weight: store.add(format!("{prefix}.{i}.weight"), glorot_uniform(rng, w[0], w[1])),
                bias: store.add(format!("{prefix}.{i}.bias"), DenseMatrix::zeros(1, w[1])),
            })
            .collect();
        Ok(Self {
            layers,
            dims: dims.to_vec(),
            dropout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    /// Parameter ids as `(weight, bias)` per layer.
    pub fn layer_params(&self) -> Vec<(ParamId, ParamId)> {
        self.layers.iter().map(|l| (l.weight, l.bias)).collect()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, bound[layer.weight])?;
            h = tape.add_row_broadcast(z, bound[layer.bias])?;
            if i < last {
                h = tape.relu(h)?;
                h = apply_dropout(tape, h, self.dropout, mode)?;
            }
        }
        Ok(h)
    }
}

pub(crate) fn apply_dropout(tape: &mut Tape, h: Tensor, rate: f64, mode: &mut Mode<'_>) -> Result<Tensor> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => tape.dropout(h, rate, *rng),
        _ => Ok(h),
    }
}

/// `h_v ← MLP((1 + ε)·h_v + Σ_{u ∈ N(v)} h_u)` with learnable `ε`.
#[derive(Debug, Clone)]
pub struct GinLayer {
    epsilon: ParamId,
    update: Mlp,
}

impl GinLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let epsilon = store.add(format!("{prefix}.eps"), DenseMatrix::zeros(1, 1));
        let update = Mlp::new(store, &format!("{prefix}.mlp"), dims, dropout, rng)?;
        Ok(Self { epsilon, update })
    }

    pub fn epsilon(&self) -> ParamId {
        self.epsilon
    }

    pub fn update_mlp(&self) -> &Mlp {
        &self.update
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Tensor,
        neighbors: &[Vec<usize>],
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        let agg = tape.sum_neighbors(h, neighbors)?;
        let eps_h = tape.scalar_mul(h, bound[self.epsilon])?;
        let self_term = tape.add(h, eps_h)?;
        let pre = tape.add(self_term, agg)?;
        self.update.forward(tape, bound, pre, mode)
    }
}

/// Stack of GIN layers; ReLU and dropout between layers, none after the last.
#[derive(Debug, Clone)]
pub struct GinEncoder {
    layers: Vec<GinLayer>,
    dropout: f64,
}

impl GinEncoder {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        update_layers: usize,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if num_layers == 0 || update_layers == 0 {
            return Err(Error::InvalidConfig(
                "GIN needs at least one layer and one update layer".into(),
            ));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut dims = alloc::vec![if l == 0 { input_dim } else { hidden_dim }];
            dims.extend(core::iter::repeat_n(hidden_dim, update_layers));
            layers.push(GinLayer::new(store, &format!("gin.{l}"), &dims, dropout, rng)?);
        }
        Ok(Self { layers, dropout })
    }

    pub fn layers(&self) -> &[GinLayer] {
        &self.layers
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Tensor,
        neighbors: &[Vec<usize>],
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        let (rows, cols) = tape.shape(x);
        if rows != neighbors.len() {
            return Err(shape(
                "gin_forward",
                format!("{rows} feature rows for {} nodes", neighbors.len()),
            ));
        }
        let expected = self.layers[0].update.input_dim();
        if cols != expected {
            return Err(shape(
                "gin_forward",
                format!("{cols} input features, model expects {expected}"),
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h, neighbors, mode)?;
            if l < last {
                h = tape.relu(h)?;
                h = apply_dropout(tape, h, self.dropout, mode)?;
            }
        }
        Ok(h)
    }
}

/// Concatenates all node embeddings (zero-padded to `max_nodes`) and maps
/// them jointly through one MLP. Depends on node order.
#[derive(Debug, Clone)]
pub struct GraphLevelHead {
    max_nodes: usize,
    embed_dim: usize,
    out_per_node: usize,
    mlp: Mlp,
}

impl GraphLevelHead {
    /// MLP of `layers` linear layers, `max_nodes·embed_dim → hidden… → max_nodes·out_per_node`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        max_nodes: usize,
        embed_dim: usize,
        out_per_node: usize,
        layers: usize,
        hidden_dim: usize,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let dims = mlp_dims(max_nodes * embed_dim, hidden_dim, max_nodes * out_per_node, layers)?;
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), &dims, dropout, rng)?;
        Ok(Self {
            max_nodes,
            embed_dim,
            out_per_node,
            mlp,
        })
    }

    pub fn max_nodes(&self) -> usize {
        self.max_nodes
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Flattened, padded MLP input for `z` (`n × embed_dim`).
    pub fn flatten_padded(&self, tape: &mut Tape, z: Tensor) -> Result<Tensor> {
        let (n, d) = tape.shape(z);
        if n > self.max_nodes {
            return Err(Error::GraphTooLarge { n, max: self.max_nodes });
        }
        if d != self.embed_dim {
            return Err(shape(
                "graph_level_head",
                format!("embedding dim {d}, head expects {}", self.embed_dim),
            ));
        }
        let padded = tape.zero_pad_rows(z, self.max_nodes)?;
        tape.reshape(padded, 1, self.max_nodes * d)
    }

    /// `n × out_per_node` output; padded rows are dropped.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let n = tape.shape(z).0;
        let flat = self.flatten_padded(tape, z)?;
        let out = self.mlp.forward(tape, bound, flat, mode)?;
        let grid = tape.reshape(out, self.max_nodes, self.out_per_node)?;
        tape.slice_rows(grid, 0, n)
    }
}

/// Applies the same MLP to every node embedding independently.
#[derive(Debug, Clone)]
pub struct NodeWiseHead {
    mlp: Mlp,
}

impl NodeWiseHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        embed_dim: usize,
        k: usize,
        layers: usize,
        hidden_dim: usize,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let dims = mlp_dims(embed_dim, hidden_dim, k, layers)?;
        Ok(Self {
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), &dims, dropout, rng)?,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        self.mlp.forward(tape, bound, z, mode)
    }
}

/// `[input, hidden × (layers − 1), output]`.
pub fn mlp_dims(input: usize, hidden: usize, output: usize, layers: usize) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::InvalidConfig("an MLP needs at least one layer".into()));
    }
    let mut dims = alloc::vec![input];
    dims.extend(core::iter::repeat_n(hidden, layers - 1));
    dims.push(output);
    Ok(dims)
}
