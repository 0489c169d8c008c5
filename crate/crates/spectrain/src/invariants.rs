//! The property suite behind `check-invariants`.
//!
//! Each check runs on fixed, seeded fixtures and reports the worst value it
//! measured against its tolerance.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use spectrain_core::eigen::{eigendecompose, lowest_k, CLUSTER_GAP};
use spectrain_core::features::{build_wavelet_bank, diffused_dirac_embeddings, FeatureConfig};
use spectrain_core::graph::{build_diffusion, build_laplacian};
use spectrain_core::losses::{
    abs_cos_mae_loss, eigenspace_rotation, eigvec_loss, energy_loss, flip_column_signs, random_orthonormal,
    random_special_orthogonal,
};
use spectrain_core::nn::objectives::eigen_objective;
use spectrain_core::nn::{orthonormalize, EigenHeadConfig, HeadKind, Mode, Model, ModelConfig, Tape};
use spectrain_core::{
    augment_features, generate_graph, rng, DenseMatrix, Graph, GraphSpec, LaplacianNorm, LossWeights,
};

/// Whether the measured value must stay below or above the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: Bound,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: measured <= threshold,
            measured,
            bound: Bound::AtMost,
            threshold,
            detail: detail.into(),
        }
    }

    fn at_least(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: measured >= threshold,
            measured,
            bound: Bound::AtLeast,
            threshold,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Self {
            name: name.into(),
            passed: false,
            measured: f64::NAN,
            bound: Bound::AtMost,
            threshold: 0.0,
            detail: format!("error: {err}"),
        }
    }
}

type Check = fn() -> anyhow::Result<CheckResult>;

const CHECKS: &[(&str, Check)] = &[
    ("path_spectrum_closed_form", path_spectrum),
    ("eigendecomposition_reconstruction", reconstruction),
    ("laplacian_row_sums", laplacian_row_sums),
    ("wavelet_bank_telescopes", telescoping),
    ("basis_invariance", basis_invariance),
    ("energy_rotation_invariance", energy_rotation_invariance),
    ("eigvec_rotation_sensitivity", eigvec_rotation_sensitivity),
    ("energy_floor", energy_floor),
    ("abs_cos_mae_sign_invariance", sign_invariance),
    ("orthonormalize_residual", orthonormalize_residual),
    ("model_gradient_check", model_gradient),
    ("gin_permutation_equivariance", permutation_equivariance),
    ("dirac_separates_p4_s4", dirac_separation),
];

/// Runs every check; a check that errors is reported as failed.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            log::debug!("running {name}");
            f().unwrap_or_else(|e| CheckResult::failed(name, e))
        })
        .collect()
}

/// Fixed-width pass/fail table.
pub fn render_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        let op = match r.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        let _ = writeln!(
            out,
            "{}  {:<width$}  {:>11.3e} {op} {:<9.1e} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.threshold,
            r.detail
        );
    }
    let passed = results.iter().filter(|r| r.passed).count();
    let _ = writeln!(out, "{passed}/{} checks passed", results.len());
    out
}

/// Connected-ish Erdős–Rényi graph with no isolated node, 4 to 16 nodes.
fn random_graph(seed: u64) -> anyhow::Result<Graph> {
    let mut r = rng::seeded(seed, 7);
    let n = r.gen_range(4..=16);
    let p = r.gen_range(0.25..0.7);
    Ok(generate_graph(&GraphSpec::ErdosRenyi { n, p }, seed)?)
}

fn path_spectrum() -> anyhow::Result<CheckResult> {
    let mut worst = 0.0f64;
    for n in 3..=10 {
        let g = generate_graph(&GraphSpec::Path { n }, 0)?;
        let s = eigendecompose(&build_laplacian(&g, LaplacianNorm::Unnormalized))?;
        for (k, &ev) in s.eigenvalues.iter().enumerate() {
            let exact = 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos();
            worst = worst.max((ev - exact).abs());
        }
    }
    Ok(CheckResult::at_most(
        "path_spectrum_closed_form",
        worst,
        1e-8,
        "P_3..P_10",
    ))
}

fn reconstruction() -> anyhow::Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..30 {
        let l = build_laplacian(&random_graph(seed)?, LaplacianNorm::Unnormalized);
        let s = eigendecompose(&l)?;
        worst = worst.max(s.reconstruct().sub(&l).frobenius_norm() / l.frobenius_norm().max(1.0));
    }
    Ok(CheckResult::at_most(
        "eigendecomposition_reconstruction",
        worst,
        1e-8,
        "relative error, 30 random graphs",
    ))
}

fn laplacian_row_sums() -> anyhow::Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..30 {
        let l = build_laplacian(&random_graph(seed)?, LaplacianNorm::Unnormalized);
        worst = l.row_sums().iter().fold(worst, |w, s| w.max(s.abs()));
    }
    Ok(CheckResult::at_most(
        "laplacian_row_sums",
        worst,
        1e-12,
        "unnormalized, 30 random graphs",
    ))
}

fn telescoping() -> anyhow::Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..30 {
        let p = build_diffusion(&random_graph(seed)?)?;
        for j in 0..=4 {
            let bank = build_wavelet_bank(&p, j)?;
            worst = worst.max(bank.operator_sum().max_abs_diff(&DenseMatrix::identity(p.rows())));
        }
    }
    Ok(CheckResult::at_most(
        "wavelet_bank_telescopes",
        worst,
        1e-10,
        "J = 0..4, 30 random graphs",
    ))
}

/// Graphs whose spectra have repeated eigenvalues, plus random ones.
fn invariance_fixtures() -> anyhow::Result<Vec<Graph>> {
    let mut graphs = vec![
        generate_graph(&GraphSpec::Complete { n: 5 }, 0)?,
        generate_graph(&GraphSpec::Complete { n: 8 }, 0)?,
        generate_graph(&GraphSpec::Cycle { n: 6 }, 0)?,
    ];
    for seed in 0..10 {
        graphs.push(random_graph(100 + seed)?);
    }
    Ok(graphs)
}

fn basis_invariance() -> anyhow::Result<CheckResult> {
    let mut worst = 0.0f64;
    for (gi, g) in invariance_fixtures()?.iter().enumerate() {
        let l = build_laplacian(g, LaplacianNorm::Unnormalized);
        let s = eigendecompose(&l)?;
        let n = g.num_nodes();
        let k = 3.min(n);
        let (lambda, _) = lowest_k(&s, k)?;
        for (ci, cluster) in s.clusters(CLUSTER_GAP).into_iter().enumerate() {
            let psi = s.eigenvectors.cols_range(cluster.start, cluster.len());
            for t in 0..10u64 {
                let seed = rng::mix(gi as u64 * 1000 + ci as u64, t);
                let u = random_orthonormal(n, k, seed);
                let a = random_special_orthogonal(cluster.len(), seed ^ 1);
                let ru = eigenspace_rotation(&psi, &a)?.matmul(&u);
                worst = worst.max((energy_loss(&ru, &l)? - energy_loss(&u, &l)?).abs());
                worst = worst.max((eigvec_loss(&ru, &l, &lambda)? - eigvec_loss(&u, &l, &lambda)?).abs());
            }
        }
    }
    Ok(CheckResult::at_most(
        "basis_invariance",
        worst,
        1e-8,
        "eigenspace rotations; K5, K8, C6 and 10 random graphs",
    ))
}

fn distinct_fixture() -> anyhow::Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let g = generate_graph(&GraphSpec::Path { n: 5 }, 0)?;
    let l = build_laplacian(&g, LaplacianNorm::Unnormalized);
    let (lambda, psi) = lowest_k(&eigendecompose(&l)?, 3)?;
    Ok((l, lambda, psi))
}

fn energy_rotation_invariance() -> anyhow::Result<CheckResult> {
    let (l, _, psi) = distinct_fixture()?;
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let u = if seed == 0 {
            psi.clone()
        } else {
            random_orthonormal(5, 3, seed)
        };
        let q = random_special_orthogonal(3, seed + 1000);
        worst = worst.max((energy_loss(&u.matmul(&q), &l)? - energy_loss(&u, &l)?).abs());
    }
    Ok(CheckResult::at_most(
        "energy_rotation_invariance",
        worst,
        1e-8,
        "P_5, k = 3, SO(3)",
    ))
}

fn eigvec_rotation_sensitivity() -> anyhow::Result<CheckResult> {
    let (l, lambda, psi) = distinct_fixture()?;
    let mut least = f64::INFINITY;
    for seed in 0..50 {
        let q = random_special_orthogonal(3, seed + 2000);
        least = least.min((eigvec_loss(&psi.matmul(&q), &l, &lambda)? - eigvec_loss(&psi, &l, &lambda)?).abs());
    }
    Ok(CheckResult::at_least(
        "eigvec_rotation_sensitivity",
        least,
        1e-4,
        "P_5 eigenvectors under random SO(3)",
    ))
}

fn energy_floor() -> anyhow::Result<CheckResult> {
    let mut least = f64::INFINITY;
    for seed in 0..300u64 {
        let g = random_graph(seed % 20)?;
        let l = build_laplacian(&g, LaplacianNorm::Unnormalized);
        let k = 1 + (seed as usize % 4).min(g.num_nodes() - 1);
        let (lambda, _) = lowest_k(&eigendecompose(&l)?, k)?;
        let floor = lambda.iter().sum::<f64>() / k as f64;
        let u = random_orthonormal(g.num_nodes(), k, seed);
        least = least.min(energy_loss(&u, &l)? - floor);
    }
    Ok(CheckResult::at_least(
        "energy_floor",
        least,
        -1e-9,
        "energy minus (1/k)Σλ over 300 random orthonormal predictions",
    ))
}

fn sign_invariance() -> anyhow::Result<CheckResult> {
    let (_, _, psi) = distinct_fixture()?;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let u = random_orthonormal(5, 3, seed);
        let base = abs_cos_mae_loss(&u, &psi)?;
        let signs = [
            if seed & 1 == 0 { 1.0 } else { -1.0 },
            if seed & 2 == 0 { 1.0 } else { -1.0 },
            -1.0,
        ];
        worst = worst.max((abs_cos_mae_loss(&flip_column_signs(&u, &signs), &psi)? - base).abs());
        worst = worst.max((abs_cos_mae_loss(&u, &flip_column_signs(&psi, &signs))? - base).abs());
    }
    Ok(CheckResult::at_most(
        "abs_cos_mae_sign_invariance",
        worst,
        1e-12,
        "column sign flips",
    ))
}

fn orthonormalize_residual() -> anyhow::Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut r = rng::seeded(seed, 11);
        let n = r.gen_range(3..=20);
        let k = r.gen_range(1..=n.min(8));
        let data = (0..n * k).map(|_| rng::standard_normal(&mut r)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::from_vec(n, k, data)?)?;
        let q = orthonormalize(&mut tape, x)?;
        worst = worst.max(tape.value(q).orthonormality_residual());
    }
    Ok(CheckResult::at_most(
        "orthonormalize_residual",
        worst,
        1e-6,
        "200 random Gaussian inputs",
    ))
}

/// Model, features, neighbor lists, Laplacian and the lowest eigenvalues.
type GradientFixture = (Model, DenseMatrix, Vec<Vec<usize>>, DenseMatrix, Vec<f64>);

fn gradient_fixture() -> anyhow::Result<GradientFixture> {
    let g = generate_graph(&GraphSpec::ErdosRenyi { n: 8, p: 0.4 }, 3)?;
    let x = augment_features(&g, &FeatureConfig::default())?;
    let cfg = ModelConfig {
        input_dim: x.cols(),
        hidden_dim: 8,
        gin_layers: 2,
        update_layers: 2,
        dropout: 0.0,
        eigen_head: Some(EigenHeadConfig {
            kind: HeadKind::GraphLevel,
            k: 3,
            max_nodes: 10,
            layers: 2,
            hidden_dim: 16,
        }),
        downstream: None,
    };
    let mut model = Model::new(cfg, 5)?;
    // nonzero biases and epsilons so every parameter carries gradient
    let mut r = rng::seeded(5, 12);
    for (i, p) in model.params_mut().values_mut().enumerate() {
        if p.rows() == 1 {
            for v in p.as_mut_slice() {
                *v = r.gen_range(-0.1..0.1) + 1e-3 * i as f64;
            }
        }
    }
    let l = build_laplacian(&g, LaplacianNorm::Unnormalized);
    let (lambda, _) = lowest_k(&eigendecompose(&l)?, 3)?;
    Ok((model, x, g.neighbors(), l, lambda))
}

fn pipeline_loss(
    model: &Model,
    x: &DenseMatrix,
    nb: &[Vec<usize>],
    l: &DenseMatrix,
    lambda: &[f64],
    grads: bool,
) -> anyhow::Result<(f64, Vec<DenseMatrix>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape)?;
    let input = spectrain_core::nn::GraphInput {
        features: x,
        neighbors: nb,
    };
    let raw = model.predict_eigvecs(&mut tape, &bound, input, &mut Mode::Eval)?;
    let u = orthonormalize(&mut tape, raw)?;
    let terms = eigen_objective(&mut tape, u, l, lambda, &LossWeights::default())?;
    let value = tape.scalar(terms.total);
    if !grads {
        return Ok((value, vec![]));
    }
    tape.backward(terms.total)?;
    Ok((value, bound.gradients(&tape, model.params())))
}

/// Worst relative error between tape gradients and central differences over
/// every parameter of a small GIN + graph-level head model.
pub fn model_gradient_error() -> anyhow::Result<f64> {
    let (model, x, nb, l, lambda) = gradient_fixture()?;
    let (_, analytic) = pipeline_loss(&model, &x, &nb, &l, &lambda, true)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..grad.as_slice().len() {
            let eval = |delta: f64| -> anyhow::Result<f64> {
                let mut m = model.clone();
                m.params_mut().values_mut().nth(pi).expect("param index").as_mut_slice()[e] += delta;
                Ok(pipeline_loss(&m, &x, &nb, &l, &lambda, false)?.0)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let an = grad.as_slice()[e];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

fn model_gradient() -> anyhow::Result<CheckResult> {
    Ok(CheckResult::at_most(
        "model_gradient_check",
        model_gradient_error()?,
        1e-3,
        "GIN(2) + graph-level head + orthonormalize + combined loss, 8-node graph",
    ))
}

fn permutation_equivariance() -> anyhow::Result<CheckResult> {
    let (model, x, _, _, _) = gradient_fixture()?;
    let g = generate_graph(&GraphSpec::ErdosRenyi { n: 8, p: 0.4 }, 3)?;
    let perm = [5, 2, 7, 0, 1, 4, 6, 3];
    let pg = g.permuted(&perm)?;
    let embed = |x: &DenseMatrix, nb: &[Vec<usize>]| -> anyhow::Result<DenseMatrix> {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape)?;
        let input = spectrain_core::nn::GraphInput {
            features: x,
            neighbors: nb,
        };
        let z = model.encode(&mut tape, &bound, input, &mut Mode::Eval)?;
        Ok(tape.value(z).clone())
    };
    let z = embed(&x, &g.neighbors())?;
    let pz = embed(&x.permute_rows(&perm), &pg.neighbors())?;
    Ok(CheckResult::at_most(
        "gin_permutation_equivariance",
        z.permute_rows(&perm).max_abs_diff(&pz),
        1e-10,
        "encoder on a relabeled 8-node graph",
    ))
}

fn sorted_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    let mut rows = m.to_rows();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    rows
}

fn dirac_separation() -> anyhow::Result<CheckResult> {
    let embed = |spec: GraphSpec| -> anyhow::Result<Vec<Vec<f64>>> {
        let g = generate_graph(&spec, 0)?;
        let bank = build_wavelet_bank(&build_diffusion(&g)?, 2)?;
        Ok(sorted_rows(&diffused_dirac_embeddings(&bank)))
    };
    let a = embed(GraphSpec::Path { n: 4 })?;
    let b = embed(GraphSpec::Star { n: 4 })?;
    let diff = a
        .iter()
        .zip(&b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    Ok(CheckResult::at_least(
        "dirac_separates_p4_s4",
        diff,
        1e-6,
        "largest entry gap between sorted embedding rows",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in run_all() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn table_marks_failures() {
        let rows = vec![
            CheckResult::at_most("a", 1.0, 2.0, ""),
            CheckResult::at_least("b", 1.0, 2.0, "too small"),
        ];
        let t = render_table(&rows);
        assert!(t.contains("PASS  a"));
        assert!(t.contains("FAIL  b"));
        assert!(t.ends_with("1/2 checks passed\n"));
    }
}
