//! Structure-based node features from diffusion wavelets.
//!
//! A wavelet bank of order `J` holds `Ψ_0 = I − P`, `Ψ_j = P^{2^{j-1}} − P^{2^j}`
//! for `1 ≤ j ≤ J`, and the low-pass remainder `P^{2^J}`. The operators sum
//! telescopically to the identity.

use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_diffusion, Graph};
use crate::matrix::{dot, DenseMatrix};
use crate::rng;

const STOCHASTIC_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBank {
    scales: usize,
    operators: Vec<DenseMatrix>,
    source_diffusion: DenseMatrix,
}

impl WaveletBank {
    /// `J`.
    pub fn scales(&self) -> usize {
        self.scales
    }

    /// `[Ψ_0, …, Ψ_J, P^{2^J}]`, always `J + 2` entries.
    pub fn operators(&self) -> &[DenseMatrix] {
        &self.operators
    }

    pub fn diffusion(&self) -> &DenseMatrix {
        &self.source_diffusion
    }

    pub fn num_nodes(&self) -> usize {
        self.source_diffusion.rows()
    }

    /// Elementwise sum of all operators (the identity, up to rounding).
    pub fn operator_sum(&self) -> DenseMatrix {
        let n = self.num_nodes();
        self.operators
            .iter()
            .fold(DenseMatrix::zeros(n, n), |acc, op| acc.add(op))
    }
}

pub fn build_wavelet_bank(p: &DenseMatrix, scales: usize) -> Result<WaveletBank> {
    if !p.is_square() {
        return Err(crate::error::shape(
            "build_wavelet_bank",
            alloc::format!("diffusion operator is {}x{}", p.rows(), p.cols()),
        ));
    }
    for (row, sum) in p.row_sums().into_iter().enumerate() {
        if libm::fabs(sum - 1.0) > STOCHASTIC_TOL {
            return Err(Error::NotStochastic { row, sum });
        }
    }
    let n = p.rows();
    let mut operators = Vec::with_capacity(scales + 2);
    operators.push(DenseMatrix::identity(n).sub(p));
    // prev holds P^{2^{j-1}} at the top of iteration j
    let mut prev = p.clone();
    for _ in 1..=scales {
        let next = prev.matmul(&prev);
        operators.push(prev.sub(&next));
        prev = next;
    }
    operators.push(prev);
    Ok(WaveletBank {
        scales,
        operators,
        source_diffusion: p.clone(),
    })
}

/// Responses of every operator to the diracs at nodes `i` and `j`.
///
/// Row `m` holds `(Ψ_k[m][i], Ψ_k[m][j])` for each operator `k` in order.
pub fn wavelet_positional_embeddings(bank: &WaveletBank, i: usize, j: usize) -> Result<DenseMatrix> {
    let n = bank.num_nodes();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, n });
        }
    }
    if i == j {
        return Err(Error::InvalidParams("dirac source nodes must differ".into()));
    }
    let ops = bank.operators();
    let mut out = DenseMatrix::zeros(n, 2 * ops.len());
    for m in 0..n {
        for (k, op) in ops.iter().enumerate() {
            out[(m, 2 * k)] = op[(m, i)];
            out[(m, 2 * k + 1)] = op[(m, j)];
        }
    }
    Ok(out)
}

/// Entry `(m, k)` is `Ψ_k(m,·) · P(m,·)`.
pub fn diffused_dirac_embeddings(bank: &WaveletBank) -> DenseMatrix {
    let n = bank.num_nodes();
    let p = bank.diffusion();
    let ops = bank.operators();
    let mut out = DenseMatrix::zeros(n, ops.len());
    for m in 0..n {
        for (k, op) in ops.iter().enumerate() {
            out[(m, k)] = dot(op.row(m), p.row(m));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub use_wavelet_positional: bool,
    pub use_diffused_dirac: bool,
    /// Wavelet scales `J`.
    pub scales: usize,
    /// Seeds the choice of the two positional source nodes.
    pub dirac_seed: u64,
    pub keep_original_features: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            use_wavelet_positional: true,
            use_diffused_dirac: true,
            scales: 2,
            dirac_seed: 0,
            keep_original_features: false,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_wavelet_positional && !self.use_diffused_dirac && !self.keep_original_features {
            return Err(Error::InvalidConfig(
                "feature config selects no embeddings and drops the original features".into(),
            ));
        }
        Ok(())
    }

    pub fn needs_diffusion(&self) -> bool {
        self.use_wavelet_positional || self.use_diffused_dirac
    }

    /// Output width for a graph with `original` feature columns.
    pub fn output_dim(&self, original: usize) -> usize {
        let ops = self.scales + 2;
        let mut d = 0;
        if self.keep_original_features {
            d += original;
        }
        if self.use_wavelet_positional {
            d += 2 * ops;
        }
        if self.use_diffused_dirac {
            d += ops;
        }
        d
    }
}

/// The two positional source nodes for an `n`-node graph.
pub fn dirac_sources(n: usize, seed: u64) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::NodeCountTooSmall(n));
    }
    let mut rng = rng::seeded(seed, 0x0064_6972_6163);
    let picked = index::sample(&mut rng, n, 2);
    Ok((picked.index(0), picked.index(1)))
}

/// `[original? | wavelet positional? | diffused dirac?]`, column-wise.
pub fn augment_features(g: &Graph, cfg: &FeatureConfig) -> Result<DenseMatrix> {
    cfg.validate()?;
    let n = g.num_nodes();
    let mut parts: Vec<DenseMatrix> = Vec::new();
    if cfg.keep_original_features {
        if let Some(x) = g.node_features() {
            parts.push(x.clone());
        }
    }
    if cfg.needs_diffusion() {
        if cfg.use_wavelet_positional && n < 2 {
            return Err(Error::NodeCountTooSmall(n));
        }
        let bank = build_wavelet_bank(&build_diffusion(g)?, cfg.scales)?;
        if cfg.use_wavelet_positional {
            let (i, j) = dirac_sources(n, cfg.dirac_seed)?;
            parts.push(wavelet_positional_embeddings(&bank, i, j)?);
        }
        if cfg.use_diffused_dirac {
            parts.push(diffused_dirac_embeddings(&bank));
        }
    }
    if parts.is_empty() {
        return Ok(DenseMatrix::zeros(n, 0));
    }
    let refs: Vec<&DenseMatrix> = parts.iter().collect();
    DenseMatrix::hconcat(&refs)
}

/// [`augment_features`] for the `index`-th graph of a dataset: each graph
/// draws its own source nodes from a seed derived from `cfg.dirac_seed`.
pub fn augment_indexed(g: &Graph, cfg: &FeatureConfig, index: usize) -> Result<DenseMatrix> {
    let per_graph = FeatureConfig {
        dirac_seed: rng::mix(cfg.dirac_seed, index as u64),
        ..cfg.clone()
    };
    augment_features(g, &per_graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_graph, GraphSpec};

    fn p3_bank(j: usize) -> WaveletBank {
        let g = generate_graph(&GraphSpec::Path { n: 3 }, 0).unwrap();
        build_wavelet_bank(&build_diffusion(&g).unwrap(), j).unwrap()
    }

    #[test]
    fn bank_j0_is_identity_minus_p_and_p() {
        let bank = p3_bank(0);
        let p = bank.diffusion().clone();
        assert_eq!(bank.operators().len(), 2);
        assert_eq!(bank.operators()[0], DenseMatrix::identity(3).sub(&p));
        assert_eq!(bank.operators()[1], p);
    }

    #[test]
    fn bank_j1_uses_p_squared() {
        let bank = p3_bank(1);
        let p = bank.diffusion().clone();
        let p2 = DenseMatrix::from_rows(&[[0.5, 0.0, 0.5], [0.0, 1.0, 0.0], [0.5, 0.0, 0.5]]).unwrap();
        assert_eq!(bank.operators()[1], p.sub(&p2));
        assert_eq!(bank.operators()[2], p2);
    }

    #[test]
    fn bank_telescopes() {
        let g = generate_graph(&GraphSpec::ErdosRenyi { n: 9, p: 0.4 }, 3).unwrap();
        let bank = build_wavelet_bank(&build_diffusion(&g).unwrap(), 2).unwrap();
        assert_eq!(bank.operators().len(), 4);
        assert!(bank.operator_sum().max_abs_diff(&DenseMatrix::identity(9)) <= 1e-10);
    }

    #[test]
    fn bank_rejects_non_stochastic() {
        let m = DenseMatrix::from_rows(&[[0.5, 0.4], [0.5, 0.5]]).unwrap();
        assert!(matches!(
            build_wavelet_bank(&m, 1),
            Err(Error::NotStochastic { row: 0, .. })
        ));
    }

    #[test]
    fn positional_examples() {
        let w = wavelet_positional_embeddings(&p3_bank(0), 0, 2).unwrap();
        assert_eq!(w.shape(), (3, 4));
        assert_eq!(&w.row(0)[..2], &[1.0, 0.0]);
        assert_eq!(&w.row(1)[..2], &[-0.5, -0.5]);
        // the reflection m -> 2 - m of P_3 exchanges the sources, so it
        // swaps the paired columns
        for m in 0..3 {
            for k in 0..2 {
                assert_eq!(w[(m, 2 * k)], w[(2 - m, 2 * k + 1)]);
            }
        }
        assert_eq!(
            wavelet_positional_embeddings(&p3_bank(0), 0, 3),
            Err(Error::IndexOutOfRange { index: 3, n: 3 })
        );
    }

    #[test]
    fn diffused_dirac_examples() {
        let d = diffused_dirac_embeddings(&p3_bank(0));
        assert_eq!(d.col(0), alloc::vec![-1.0, -0.5, -1.0]);
        let g = generate_graph(&GraphSpec::Path { n: 2 }, 0).unwrap();
        let bank = build_wavelet_bank(&build_diffusion(&g).unwrap(), 0).unwrap();
        assert_eq!(diffused_dirac_embeddings(&bank)[(0, 0)], -1.0);
    }

    #[test]
    fn diffused_dirac_rows_sum_to_return_probability() {
        let g = generate_graph(&GraphSpec::ErdosRenyi { n: 8, p: 0.5 }, 11).unwrap();
        let bank = build_wavelet_bank(&build_diffusion(&g).unwrap(), 3).unwrap();
        let d = diffused_dirac_embeddings(&bank);
        for m in 0..8 {
            let s: f64 = d.row(m).iter().sum();
            assert!((s - bank.diffusion()[(m, m)]).abs() < 1e-12);
        }
    }

    #[test]
    fn augment_shapes() {
        let g = generate_graph(&GraphSpec::Path { n: 3 }, 0).unwrap();
        let dirac_only = FeatureConfig {
            use_wavelet_positional: false,
            scales: 0,
            ..FeatureConfig::default()
        };
        assert_eq!(augment_features(&g, &dirac_only).unwrap().shape(), (3, 2));

        let g = g.with_features(DenseMatrix::filled(3, 5, 0.25)).unwrap();
        let both = FeatureConfig {
            scales: 1,
            keep_original_features: true,
            ..FeatureConfig::default()
        };
        let x = augment_features(&g, &both).unwrap();
        assert_eq!(x.shape(), (3, 14));
        assert_eq!(both.output_dim(5), 14);
        assert_eq!(x, augment_features(&g, &both).unwrap());
    }

    #[test]
    fn augment_errors() {
        let single = Graph::new(1, []).unwrap();
        assert_eq!(
            augment_features(&single, &FeatureConfig::default()),
            Err(Error::NodeCountTooSmall(1))
        );
        let isolated = Graph::new(3, [(0, 1)]).unwrap();
        assert_eq!(
            augment_features(&isolated, &FeatureConfig::default()),
            Err(Error::IsolatedNode(2))
        );
        let none = FeatureConfig {
            use_wavelet_positional: false,
            use_diffused_dirac: false,
            ..FeatureConfig::default()
        };
        assert!(matches!(none.validate(), Err(Error::InvalidConfig(_))));
    }
}
