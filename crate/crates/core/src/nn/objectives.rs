//! The loss family recorded on the tape, mirroring [`crate::losses`].

use alloc::vec::Vec;

use crate::error::Result;
use crate::losses::LossWeights;
use crate::matrix::DenseMatrix;
use crate::nn::tape::{Tape, Tensor};

/// Individual terms of the eigenvector objective for one graph.
#[derive(Debug, Clone, Copy)]
pub struct EigenTerms {
    pub total: Tensor,
    pub energy: Tensor,
    pub eigvec: Tensor,
    /// `‖ÛᵀÛ − I‖_F`, without the `1/k` factor of the ortho loss.
    pub ortho_residual: Tensor,
}

/// `(1/k) Tr(ÛᵀLÛ)`.
pub fn energy(tape: &mut Tape, u: Tensor, l: Tensor) -> Result<Tensor> {
    let k = tape.shape(u).1 as f64;
    let lu = tape.matmul(l, u)?;
    let ut = tape.transpose(u)?;
    let quad = tape.matmul(ut, lu)?;
    let tr = tape.trace(quad)?;
    tape.scale(tr, 1.0 / k)
}

/// `(1/k)‖LÛ − ÛΛ‖_F`.
pub fn eigvec(tape: &mut Tape, u: Tensor, l: Tensor, lambda: &[f64]) -> Result<Tensor> {
    let k = tape.shape(u).1 as f64;
    let lu = tape.matmul(l, u)?;
    let ul = tape.column_scale(u, lambda)?;
    let r = tape.sub(lu, ul)?;
    let n = tape.frobenius_norm(r)?;
    tape.scale(n, 1.0 / k)
}

/// `‖ÛᵀÛ − I‖_F`.
pub fn ortho_residual(tape: &mut Tape, u: Tensor) -> Result<Tensor> {
    let k = tape.shape(u).1;
    let ut = tape.transpose(u)?;
    let gram = tape.matmul(ut, u)?;
    let eye = tape.constant(DenseMatrix::identity(k))?;
    let d = tape.sub(gram, eye)?;
    tape.frobenius_norm(d)
}

/// `α·energy + β·eigvec + γ·ortho` together with each term.
pub fn eigen_objective(
    tape: &mut Tape,
    u: Tensor,
    laplacian: &DenseMatrix,
    lambda: &[f64],
    w: &LossWeights,
) -> Result<EigenTerms> {
    let k = tape.shape(u).1 as f64;
    let l = tape.constant(laplacian.clone())?;
    let energy = energy(tape, u, l)?;
    let eigvec = eigvec(tape, u, l, lambda)?;
    let ortho_residual = ortho_residual(tape, u)?;
    let mut parts: Vec<Tensor> = Vec::new();
    if w.alpha_energy != 0.0 {
        parts.push(tape.scale(energy, w.alpha_energy)?);
    }
    if w.beta_eigvec != 0.0 {
        parts.push(tape.scale(eigvec, w.beta_eigvec)?);
    }
    if w.gamma_ortho != 0.0 {
        parts.push(tape.scale(ortho_residual, w.gamma_ortho / k)?);
    }
    let mut total = match parts.first() {
        Some(&t) => t,
        None => tape.scalar_constant(0.0)?,
    };
    for &p in parts.iter().skip(1) {
        total = tape.add(total, p)?;
    }
    Ok(EigenTerms {
        total,
        energy,
        eigvec,
        ortho_residual,
    })
}

/// Absolute-value cosine + MAE against ground-truth eigenvectors `psi`.
pub fn abs_cos_mae(tape: &mut Tape, u: Tensor, psi: &DenseMatrix) -> Result<Tensor> {
    let (n, k) = tape.shape(u);
    if psi.shape() != (n, k) {
        return Err(crate::error::shape(
            "abs_cos_mae",
            alloc::format!("prediction {:?} vs targets {:?}", (n, k), psi.shape()),
        ));
    }
    let mut total: Option<Tensor> = None;
    for c in 0..k {
        let col = tape.slice_cols(u, c, 1)?;
        let a = tape.abs(col)?;
        let b_val = DenseMatrix::column(&psi.col(c)).map(libm::fabs);
        let b = tape.constant(b_val.clone())?;
        let diff = tape.sub(a, b)?;
        let ad = tape.abs(diff)?;
        let s = tape.sum(ad)?;
        let mae = tape.scale(s, 1.0 / n as f64)?;
        let na = tape.frobenius_norm(a)?;
        let nb = b_val.frobenius_norm();
        let term = if tape.scalar(na) == 0.0 || nb == 0.0 {
            // zero vectors get the maximal cosine penalty of 1
            let one = tape.scalar_constant(1.0)?;
            tape.add(mae, one)?
        } else {
            let ab = tape.mul(a, b)?;
            let dot = tape.sum(ab)?;
            let cos = tape.div_scalar(dot, na)?;
            let cos = tape.scale(cos, -1.0 / nb)?;
            let one = tape.scalar_constant(1.0)?;
            let penalty = tape.add(one, cos)?;
            tape.add(mae, penalty)?
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("k >= 1");
    tape.scale(total, 1.0 / k as f64)
}
