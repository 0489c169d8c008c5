//! GIN encoder plus an eigenvector head and/or a downstream regression head.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::layers::{mlp_dims, Bound, GinEncoder, GraphLevelHead, Mlp, Mode, NodeWiseHead, ParamStore};
use crate::nn::tape::{Tape, Tensor};
use crate::rng;

const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    GraphLevel,
    NodeWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenHeadConfig {
    pub kind: HeadKind,
    pub k: usize,
    /// Padding budget of the graph-level head; ignored by the node-wise head.
    pub max_nodes: usize,
    pub layers: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub max_nodes: usize,
    pub layers: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub gin_layers: usize,
    /// Linear layers inside each GIN update MLP.
    pub update_layers: usize,
    pub dropout: f64,
    pub eigen_head: Option<EigenHeadConfig>,
    pub downstream: Option<DownstreamConfig>,
}

/// Per-graph model input.
#[derive(Debug, Clone, Copy)]
pub struct GraphInput<'a> {
    pub features: &'a DenseMatrix,
    pub neighbors: &'a [Vec<usize>],
}

#[derive(Debug, Clone)]
enum EigenHead {
    GraphLevel(GraphLevelHead),
    NodeWise(NodeWiseHead),
}

/// Regression head over the padded, concatenated node embeddings.
#[derive(Debug, Clone)]
struct DownstreamHead {
    max_nodes: usize,
    embed_dim: usize,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: GinEncoder,
    eigen_head: Option<EigenHead>,
    downstream: Option<DownstreamHead>,
}

impl Model {
    /// Builds and initializes all parameters deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::InvalidConfig("input and hidden dims must be positive".into()));
        }
        let mut rng = rng::seeded(seed, INIT_STREAM);
        let mut params = ParamStore::new();
        let encoder = GinEncoder::new(
            &mut params,
            config.input_dim,
            config.hidden_dim,
            config.gin_layers,
            config.update_layers,
            config.dropout,
            &mut rng,
        )?;
        let eigen_head = match &config.eigen_head {
            None => None,
            Some(h) if h.k == 0 => return Err(Error::InvalidConfig("k must be positive".into())),
            Some(h) => Some(match h.kind {
                HeadKind::GraphLevel => EigenHead::GraphLevel(GraphLevelHead::new(
                    &mut params,
                    "head",
                    h.max_nodes,
                    config.hidden_dim,
                    h.k,
                    h.layers,
                    h.hidden_dim,
                    config.dropout,
                    &mut rng,
                )?),
                HeadKind::NodeWise => EigenHead::NodeWise(NodeWiseHead::new(
                    &mut params,
                    "head",
                    config.hidden_dim,
                    h.k,
                    h.layers,
                    h.hidden_dim,
                    config.dropout,
                    &mut rng,
                )?),
            }),
        };
        let downstream = match &config.downstream {
            None => None,
            Some(d) => {
                let dims = mlp_dims(d.max_nodes * config.hidden_dim, d.hidden_dim, 1, d.layers)?;
                Some(DownstreamHead {
                    max_nodes: d.max_nodes,
                    embed_dim: config.hidden_dim,
                    mlp: Mlp::new(&mut params, "downstream.mlp", &dims, config.dropout, &mut rng)?,
                })
            }
        };
        Ok(Self {
            config,
            params,
            encoder,
            eigen_head,
            downstream,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &GinEncoder {
        &self.encoder
    }

    /// Copies all same-named parameters from another model's store.
    pub fn load_matching(&mut self, source: &ParamStore) -> Result<usize> {
        self.params.copy_matching(source.entries())
    }

    /// Node embeddings `z_1 … z_n`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, input: GraphInput<'_>, mode: &mut Mode<'_>) -> Result<Tensor> {
        let x = tape.constant(input.features.clone())?;
        self.encoder.forward(tape, bound, x, input.neighbors, mode)
    }

    /// Raw `n × k` eigenvector prediction `Ũ`, before orthonormalization.
    pub fn predict_eigvecs(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: GraphInput<'_>,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        let z = self.encode(tape, bound, input, mode)?;
        self.eigen_head_forward(tape, bound, z, mode)
    }

    /// Applies the eigenvector head to precomputed embeddings.
    pub fn eigen_head_forward(&self, tape: &mut Tape, bound: &Bound, z: Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        match &self.eigen_head {
            Some(EigenHead::GraphLevel(h)) => h.forward(tape, bound, z, mode),
            Some(EigenHead::NodeWise(h)) => h.forward(tape, bound, z, mode),
            None => Err(Error::InvalidConfig("model has no eigenvector head".into())),
        }
    }

    /// Scalar downstream prediction (`1 × 1`) from precomputed embeddings.
    pub fn downstream_forward(&self, tape: &mut Tape, bound: &Bound, z: Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let head = self
            .downstream
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("model has no downstream head".into()))?;
        let (n, d) = tape.shape(z);
        if n > head.max_nodes {
            return Err(Error::GraphTooLarge { n, max: head.max_nodes });
        }
        if d != head.embed_dim {
            return Err(shape(
                "downstream_head",
                format!("embedding dim {d}, head expects {}", head.embed_dim),
            ));
        }
        let padded = tape.zero_pad_rows(z, head.max_nodes)?;
        let flat = tape.reshape(padded, 1, head.max_nodes * d)?;
        head.mlp.forward(tape, bound, flat, mode)
    }

    pub fn predict_target(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: GraphInput<'_>,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        let z = self.encode(tape, bound, input, mode)?;
        self.downstream_forward(tape, bound, z, mode)
    }

    pub fn has_eigen_head(&self) -> bool {
        self.eigen_head.is_some()
    }

    pub fn has_downstream(&self) -> bool {
        self.downstream.is_some()
    }

    /// The eigenvector head's node budget, if it pads.
    pub fn max_nodes(&self) -> Option<usize> {
        match &self.eigen_head {
            Some(EigenHead::GraphLevel(h)) => Some(h.max_nodes()),
            _ => self.downstream.as_ref().map(|d| d.max_nodes),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{augment_features, FeatureConfig};
    use crate::graph::{generate_graph, Graph, GraphSpec};
    use crate::nn::layers::Mode;
    use alloc::vec;

    fn config(kind: HeadKind, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: 5,
            gin_layers: 2,
            update_layers: 2,
            dropout: 0.1,
            eigen_head: Some(EigenHeadConfig {
                kind,
                k: 3,
                max_nodes: 10,
                layers: 2,
                hidden_dim: 12,
            }),
            downstream: None,
        }
    }

    fn forward(model: &Model, x: &DenseMatrix, nb: &[Vec<usize>]) -> DenseMatrix {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape).unwrap();
        let out = model
            .predict_eigvecs(
                &mut tape,
                &bound,
                GraphInput {
                    features: x,
                    neighbors: nb,
                },
                &mut Mode::Eval,
            )
            .unwrap();
        tape.value(out).clone()
    }

    fn embed(model: &Model, x: &DenseMatrix, nb: &[Vec<usize>]) -> DenseMatrix {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape).unwrap();
        let out = model
            .encode(
                &mut tape,
                &bound,
                GraphInput {
                    features: x,
                    neighbors: nb,
                },
                &mut Mode::Eval,
            )
            .unwrap();
        tape.value(out).clone()
    }

    fn fixture() -> (Graph, DenseMatrix) {
        let g = generate_graph(&GraphSpec::ErdosRenyi { n: 7, p: 0.4 }, 5).unwrap();
        let x = augment_features(&g, &FeatureConfig::default()).unwrap();
        (g, x)
    }

    #[test]
    fn graph_level_head_shapes() {
        let (g, x) = fixture();
        let model = Model::new(config(HeadKind::GraphLevel, x.cols()), 1).unwrap();
        assert_eq!(forward(&model, &x, &g.neighbors()).shape(), (7, 3));
        let big = generate_graph(&GraphSpec::Cycle { n: 11 }, 0).unwrap();
        let xb = augment_features(&big, &FeatureConfig::default()).unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape).unwrap();
        let err = model
            .predict_eigvecs(
                &mut tape,
                &bound,
                GraphInput {
                    features: &xb,
                    neighbors: &big.neighbors(),
                },
                &mut Mode::Eval,
            )
            .unwrap_err();
        assert_eq!(err, Error::GraphTooLarge { n: 11, max: 10 });
    }

    #[test]
    fn graph_level_head_at_capacity_and_table_sizes() {
        // max_nodes 40, hidden 60, k 6: the head MLP maps 2400 inputs to 240 outputs
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0, 0);
        let head = GraphLevelHead::new(&mut store, "head", 40, 60, 6, 1, 2400, 0.0, &mut r).unwrap();
        assert_eq!(head.mlp().input_dim(), 2400);
        assert_eq!(head.mlp().output_dim(), 240);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let z = tape.constant(DenseMatrix::filled(3, 60, 0.1)).unwrap();
        let out = head.forward(&mut tape, &bound, z, &mut Mode::Eval).unwrap();
        assert_eq!(tape.shape(out), (3, 6));
        let full = tape.constant(DenseMatrix::filled(40, 60, 0.1)).unwrap();
        let out = head.forward(&mut tape, &bound, full, &mut Mode::Eval).unwrap();
        assert_eq!(tape.shape(out), (40, 6));
    }

    #[test]
    fn gin_is_permutation_equivariant() {
        let (g, x) = fixture();
        let model = Model::new(config(HeadKind::NodeWise, x.cols()), 2).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let pg = g.permuted(&perm).unwrap();
        let px = x.permute_rows(&perm);
        let z = embed(&model, &x, &g.neighbors());
        let pz = embed(&model, &px, &pg.neighbors());
        assert!(z.permute_rows(&perm).max_abs_diff(&pz) < 1e-12);
        // node-wise head on top stays equivariant
        let u = forward(&model, &x, &g.neighbors());
        let pu = forward(&model, &px, &pg.neighbors());
        assert!(u.permute_rows(&perm).max_abs_diff(&pu) < 1e-12);
    }

    #[test]
    fn graph_level_head_is_not_permutation_equivariant() {
        let (g, x) = fixture();
        let model = Model::new(config(HeadKind::GraphLevel, x.cols()), 2).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let pg = g.permuted(&perm).unwrap();
        let u = forward(&model, &x, &g.neighbors());
        let pu = forward(&model, &x.permute_rows(&perm), &pg.neighbors());
        assert!(u.permute_rows(&perm).max_abs_diff(&pu) > 1e-6);
    }

    #[test]
    fn no_edges_means_no_mixing() {
        let g = Graph::new(3, []).unwrap();
        let x = DenseMatrix::from_rows(&[[1.0, 0.5], [-0.3, 2.0], [0.0, 1.0]]).unwrap();
        let mut cfg = config(HeadKind::NodeWise, 2);
        cfg.gin_layers = 1;
        let model = Model::new(cfg, 3).unwrap();
        let z = embed(&model, &x, &g.neighbors());
        // each row depends only on its own input
        for r in 0..3 {
            let single = x.rows_range(r, 1);
            let zr = embed(&model, &single, &[vec![]]);
            assert!(zr.max_abs_diff(&z.rows_range(r, 1)) < 1e-15);
        }
    }

    #[test]
    fn identity_gin_layer_on_k2_sums_both_nodes() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0, 0);
        let layer = crate::nn::layers::GinLayer::new(&mut store, "gin.0", &[2, 2], 0.0, &mut r).unwrap();
        let (w, _) = layer.update_mlp().layer_params()[0];
        *store.get_mut(w) = DenseMatrix::identity(2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let x = tape
            .constant(DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap())
            .unwrap();
        let out = layer
            .forward(&mut tape, &bound, x, &[vec![1], vec![0]], &mut Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(out).to_rows(), vec![vec![4.0, 1.0], vec![4.0, 1.0]]);
    }

    #[test]
    fn node_wise_head_rows_are_independent() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(4, 0);
        let head = NodeWiseHead::new(&mut store, "head", 3, 2, 2, 6, 0.0, &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let z = DenseMatrix::from_rows(&[[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]]).unwrap();
        let zt = tape.constant(z).unwrap();
        let t = head.forward(&mut tape, &bound, zt, &mut Mode::Eval).unwrap();
        let out = tape.value(t).clone();
        assert_eq!(out.row(0), out.row(1));

        // zero weights: output is the broadcast bias
        let mut zero = store.clone();
        for (i, (w, b)) in head.mlp().layer_params().into_iter().enumerate() {
            let shape = zero.get(w).shape();
            *zero.get_mut(w) = DenseMatrix::zeros(shape.0, shape.1);
            if i == 1 {
                *zero.get_mut(b) = DenseMatrix::from_rows(&[[0.7, -0.2]]).unwrap();
            }
        }
        let mut tape = Tape::new();
        let bound = zero.bind(&mut tape).unwrap();
        let zt = tape.constant(DenseMatrix::filled(4, 3, 1.5)).unwrap();
        let t = head.forward(&mut tape, &bound, zt, &mut Mode::Eval).unwrap();
        let out = tape.value(t).clone();
        for r in 0..4 {
            assert_eq!(out.row(r), &[0.7, -0.2]);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_dropout_free() {
        let (g, x) = fixture();
        let model = Model::new(config(HeadKind::GraphLevel, x.cols()), 9).unwrap();
        let nb = g.neighbors();
        assert_eq!(forward(&model, &x, &nb), forward(&model, &x, &nb));
        let mut r = rng::seeded(1, 1);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape).unwrap();
        let trained = model
            .predict_eigvecs(
                &mut tape,
                &bound,
                GraphInput {
                    features: &x,
                    neighbors: &nb,
                },
                &mut Mode::Train(&mut r),
            )
            .unwrap();
        assert!(tape.value(trained).max_abs_diff(&forward(&model, &x, &nb)) > 0.0);
    }

    #[test]
    fn initialization_is_seeded() {
        let a = Model::new(config(HeadKind::GraphLevel, 4), 1).unwrap();
        let b = Model::new(config(HeadKind::GraphLevel, 4), 1).unwrap();
        let c = Model::new(config(HeadKind::GraphLevel, 4), 2).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        for e in a.params().entries() {
            if e.name.ends_with(".bias") || e.name.ends_with(".eps") {
                assert!(e.value.as_slice().iter().all(|&v| v == 0.0));
            } else {
                let limit = (6.0 / (e.value.rows() + e.value.cols()) as f64).sqrt();
                assert!(e.value.max_abs() <= limit);
            }
        }
    }
}
