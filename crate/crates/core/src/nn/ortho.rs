//! Forced orthogonality: differentiable modified Gram–Schmidt.
//!
//! The output is the `Q` factor of a thin QR decomposition with positive `R`
//! diagonal, so orthonormal inputs are a fixed point. Every projection and
//! normalization is recorded on the tape.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape, Error, Result};
use crate::nn::tape::{Tape, Tensor};

/// Columns whose remaining norm falls below this are rejected.
pub const RANK_TOL: f64 = 1e-8;

pub fn orthonormalize(tape: &mut Tape, u: Tensor) -> Result<Tensor> {
    let (n, k) = tape.shape(u);
    if k == 0 || n < k {
        return Err(shape("orthonormalize", format!("need n >= k >= 1, got {n}x{k}")));
    }
    let mut q: Vec<Tensor> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = tape.slice_cols(u, j, 1)?;
        for &qi in &q {
            let qt = tape.transpose(qi)?;
            let r = tape.matmul(qt, v)?;
            let proj = tape.scalar_mul(qi, r)?;
            v = tape.sub(v, proj)?;
        }
        let norm = tape.frobenius_norm(v)?;
        if tape.scalar(norm).is_nan() || tape.scalar(norm) < RANK_TOL {
            return Err(Error::RankDeficient(j));
        }
        q.push(tape.div_scalar(v, norm)?);
    }
    tape.concat_cols(&q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::random_orthonormal;
    use crate::matrix::DenseMatrix;

    #[test]
    fn orthonormal_input_is_a_fixed_point() {
        let u = random_orthonormal(7, 4, 3);
        let mut tape = Tape::new();
        let x = tape.constant(u.clone()).unwrap();
        let q = orthonormalize(&mut tape, x).unwrap();
        assert!(tape.value(q).max_abs_diff(&u) <= 1e-10);
    }

    #[test]
    fn hand_example() {
        let u = DenseMatrix::from_rows(&[[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(u).unwrap();
        let q = orthonormalize(&mut tape, x).unwrap();
        let expected = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!(tape.value(q).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let u = DenseMatrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(u).unwrap();
        assert_eq!(orthonormalize(&mut tape, x), Err(Error::RankDeficient(1)));
        let wide = tape.constant(DenseMatrix::zeros(2, 3)).unwrap();
        assert!(matches!(
            orthonormalize(&mut tape, wide),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn span_is_preserved() {
        let u = DenseMatrix::from_rows(&[[2.0, 1.0], [0.0, 3.0], [1.0, -1.0], [0.5, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(u.clone()).unwrap();
        let t = orthonormalize(&mut tape, x).unwrap();
        let q = tape.value(t).clone();
        // projecting the input onto span(Q) leaves it unchanged
        let projected = q.matmul(&q.t_matmul(&u));
        assert!(projected.max_abs_diff(&u) < 1e-12);
    }
}
