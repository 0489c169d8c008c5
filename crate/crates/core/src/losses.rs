//! Losses over predicted eigenvector matrices `Û` (`n × k`, one predicted
//! eigenvector per column).
//!
//! The energy and eigenvector losses only see the Laplacian and the target
//! eigenvalues, never ground-truth eigenvectors, which is what makes them
//! sign and basis invariant. The absolute-value cosine + MAE baseline does see
//! eigenvectors and is only sign invariant.
//!
//! These are plain evaluations. The training path builds the same formulas on
//! the autodiff tape in [`crate::nn::objectives`].

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::matrix::{dot, norm, DenseMatrix};
use crate::rng;

/// Coefficients of the combined pre-training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_energy: f64,
    pub beta_eigvec: f64,
    pub gamma_ortho: f64,
}

impl Default for LossWeights {
    /// `1·energy + 2·eigvec`.
    fn default() -> Self {
        Self {
            alpha_energy: 1.0,
            beta_eigvec: 2.0,
            gamma_ortho: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha_energy, self.beta_eigvec, self.gamma_ortho];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidConfig("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// How eigenvector residual columns are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualNorm {
    /// `(1/k)‖LÛ − ÛΛ‖_F`
    #[default]
    Frobenius,
    /// `(1/k) Σ_i ‖Lû_i − λ_i û_i‖_2`
    PerVectorSum,
}

fn check_prediction(op: &'static str, u: &DenseMatrix, l: &DenseMatrix) -> Result<()> {
    if !l.is_square() || l.rows() != u.rows() {
        return Err(shape(
            op,
            format!(
                "L is {}x{}, prediction is {}x{}",
                l.rows(),
                l.cols(),
                u.rows(),
                u.cols()
            ),
        ));
    }
    if u.cols() == 0 {
        return Err(shape(op, "prediction has no columns".into()));
    }
    Ok(())
}

fn check_eigenvalues(op: &'static str, u: &DenseMatrix, lambda: &[f64]) -> Result<()> {
    if lambda.len() != u.cols() {
        return Err(shape(
            op,
            format!("{} eigenvalues for {} predicted vectors", lambda.len(), u.cols()),
        ));
    }
    Ok(())
}

/// `LÛ − Û diag(λ)`.
fn eigen_residual(u: &DenseMatrix, l: &DenseMatrix, lambda: &[f64]) -> DenseMatrix {
    let mut r = l.matmul(u);
    for row in 0..r.rows() {
        for (c, &lam) in lambda.iter().enumerate() {
            r[(row, c)] -= lam * u[(row, c)];
        }
    }
    r
}

pub fn eigvec_loss(u: &DenseMatrix, l: &DenseMatrix, lambda: &[f64]) -> Result<f64> {
    eigvec_loss_with(u, l, lambda, ResidualNorm::Frobenius)
}

pub fn eigvec_loss_with(u: &DenseMatrix, l: &DenseMatrix, lambda: &[f64], reduction: ResidualNorm) -> Result<f64> {
    check_prediction("eigvec_loss", u, l)?;
    check_eigenvalues("eigvec_loss", u, lambda)?;
    let r = eigen_residual(u, l, lambda);
    let k = u.cols() as f64;
    Ok(match reduction {
        ResidualNorm::Frobenius => r.frobenius_norm() / k,
        ResidualNorm::PerVectorSum => (0..u.cols()).map(|c| norm(&r.col(c))).sum::<f64>() / k,
    })
}

/// Mean Rayleigh quotient `(1/k) Tr(ÛᵀLÛ)`.
pub fn energy_loss(u: &DenseMatrix, l: &DenseMatrix) -> Result<f64> {
    check_prediction("energy_loss", u, l)?;
    Ok(rayleigh_quotients(u, l).iter().sum::<f64>() / u.cols() as f64)
}

/// `û_iᵀ L û_i` for every column.
pub fn rayleigh_quotients(u: &DenseMatrix, l: &DenseMatrix) -> Vec<f64> {
    let lu = l.matmul(u);
    (0..u.cols()).map(|c| dot(&u.col(c), &lu.col(c))).collect()
}

/// `(1/k) Σ_i |û_iᵀLû_i − λ_i|`; the absolute value is taken on the diagonal
/// only.
pub fn energy_abs_loss(u: &DenseMatrix, l: &DenseMatrix, lambda: &[f64]) -> Result<f64> {
    check_prediction("energy_abs_loss", u, l)?;
    check_eigenvalues("energy_abs_loss", u, lambda)?;
    let total: f64 = rayleigh_quotients(u, l)
        .iter()
        .zip(lambda)
        .map(|(q, lam)| libm::fabs(q - lam))
        .sum();
    Ok(total / u.cols() as f64)
}

/// `(1/k)‖ÛᵀÛ − I‖_F`.
pub fn ortho_loss(u: &DenseMatrix) -> Result<f64> {
    if u.cols() == 0 {
        return Err(shape("ortho_loss", "prediction has no columns".into()));
    }
    Ok(u.orthonormality_residual() / u.cols() as f64)
}

/// Cosine similarity of `|a|` and `|b|`; `None` when either is all zero.
pub(crate) fn abs_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (libm::fabs(x), libm::fabs(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        None
    } else {
        Some(ab / (libm::sqrt(aa) * libm::sqrt(bb)))
    }
}

/// Baseline that regresses the absolute values of the eigenvectors:
/// `(1/k) Σ_i [mean_m ||û_i[m]| − |ψ_i[m]|| + 1 − cos(|û_i|, |ψ_i|)]`.
///
/// The cosine term is 1 when either vector is identically zero.
pub fn abs_cos_mae_loss(u: &DenseMatrix, psi: &DenseMatrix) -> Result<f64> {
    if u.shape() != psi.shape() || u.cols() == 0 || u.rows() == 0 {
        return Err(shape(
            "abs_cos_mae_loss",
            format!("prediction {:?} vs targets {:?}", u.shape(), psi.shape()),
        ));
    }
    let n = u.rows() as f64;
    let mut total = 0.0;
    for c in 0..u.cols() {
        let (a, b) = (u.col(c), psi.col(c));
        let mae: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| libm::fabs(libm::fabs(*x) - libm::fabs(*y)))
            .sum::<f64>()
            / n;
        let cos = abs_cosine(&a, &b).unwrap_or(0.0);
        total += mae + (1.0 - cos);
    }
    Ok(total / u.cols() as f64)
}

/// `α·energy + β·eigvec + γ·ortho`.
pub fn combined_loss(u: &DenseMatrix, l: &DenseMatrix, lambda: &[f64], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    if w.alpha_energy != 0.0 {
        total += w.alpha_energy * energy_loss(u, l)?;
    }
    if w.beta_eigvec != 0.0 {
        total += w.beta_eigvec * eigvec_loss(u, l, lambda)?;
    }
    if w.gamma_ortho != 0.0 {
        total += w.gamma_ortho * ortho_loss(u)?;
    }
    Ok(total)
}

/// `R_Ψ = ΨAΨᵀ + (I − ΨΨᵀ)`: rotates by `A` inside `span(Ψ)` and fixes its
/// orthogonal complement.
pub fn eigenspace_rotation(psi: &DenseMatrix, a: &DenseMatrix) -> Result<DenseMatrix> {
    const TOL: f64 = 1e-8;
    let m = psi.cols();
    if a.shape() != (m, m) {
        return Err(shape(
            "eigenspace_rotation",
            format!("basis has {m} columns but rotation is {}x{}", a.rows(), a.cols()),
        ));
    }
    let basis_res = psi.orthonormality_residual();
    if basis_res > TOL {
        return Err(Error::NotOrthonormal(format!("basis residual {basis_res:e}")));
    }
    let rot_res = a.orthonormality_residual();
    if rot_res > TOL {
        return Err(Error::NotOrthonormal(format!("rotation residual {rot_res:e}")));
    }
    let det = a.determinant();
    if libm::fabs(det - 1.0) > TOL {
        return Err(Error::NotOrthonormal(format!("rotation determinant {det}")));
    }
    let n = psi.rows();
    let projector = psi.matmul_t(psi);
    let rotated = psi.matmul(a).matmul_t(psi);
    Ok(rotated.add(&DenseMatrix::identity(n).sub(&projector)))
}

/// Haar-distributed element of `SO(m)`, deterministic per seed.
pub fn random_special_orthogonal(m: usize, seed: u64) -> DenseMatrix {
    assert!(m >= 1, "SO(0) is empty");
    let mut q = random_orthonormal(m, m, seed);
    if q.determinant() < 0.0 {
        for r in 0..m {
            q[(r, 0)] = -q[(r, 0)];
        }
    }
    q
}

/// `n × k` matrix with orthonormal columns from Gram–Schmidt on a Gaussian
/// sample. Panics when `k > n`.
pub fn random_orthonormal(n: usize, k: usize, seed: u64) -> DenseMatrix {
    assert!(k <= n, "cannot fit {k} orthonormal columns in R^{n}");
    let mut rng = rng::seeded(seed, 0x726f_7461_7465);
    loop {
        let data = (0..n * k).map(|_| rng::standard_normal(&mut rng)).collect();
        let g = DenseMatrix::from_vec(n, k, data).expect("finite Gaussian sample");
        if let Ok(q) = g.gram_schmidt(1e-6) {
            return q;
        }
    }
}

/// Multiplies column `c` by `signs[c]`.
pub fn flip_column_signs(m: &DenseMatrix, signs: &[f64]) -> DenseMatrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        for (c, s) in signs.iter().enumerate() {
            out[(r, c)] *= s;
        }
    }
    out
}
