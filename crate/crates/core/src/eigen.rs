//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! This is the ground-truth oracle for Laplacian eigenpairs. Graphs here are
//! small (tens of nodes), where Jacobi is accurate to a few ulps and needs no
//! tridiagonalization.

use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Maximum number of full off-diagonal sweeps.
pub const MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius tolerance, relative to `max(1, ‖M‖_F)`.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Inputs whose asymmetry exceeds this (relative to `max(1, max|m|)`) are rejected.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues closer than this are treated as one degenerate cluster.
pub const CLUSTER_GAP: f64 = 1e-8;
const SIGN_THRESHOLD: f64 = 1e-10;

/// Eigenvalues in nondecreasing order with matching orthonormal eigenvector
/// columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Index ranges of eigenvalues whose consecutive gaps are below `gap`.
    pub fn clusters(&self, gap: f64) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.eigenvalues.len() {
            if i == self.eigenvalues.len() || self.eigenvalues[i] - self.eigenvalues[i - 1] >= gap {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Orthogonal projector `ΨΨᵀ` onto the span of eigenvector columns `range`.
    pub fn projector(&self, range: Range<usize>) -> DenseMatrix {
        let psi = self.eigenvectors.cols_range(range.start, range.len());
        psi.matmul_t(&psi)
    }

    /// `Ψ diag(λ) Ψᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut scaled = self.eigenvectors.clone();
        let n = scaled.rows();
        for r in 0..n {
            for (c, lambda) in self.eigenvalues.iter().enumerate() {
                scaled[(r, c)] *= lambda;
            }
        }
        scaled.matmul_t(&self.eigenvectors)
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(M + Mᵀ)/2`. Eigenvectors are normalized so
/// their first component with magnitude above `1e-10` is positive; inside a
/// degenerate cluster the basis is arbitrary.
pub fn eigendecompose(m: &DenseMatrix) -> Result<Spectrum> {
    if !m.is_square() {
        return Err(crate::error::shape(
            "eigendecompose",
            alloc::format!("{}x{} is not square", m.rows(), m.cols()),
        ));
    }
    if !m.is_finite() {
        return Err(Error::NumericalFault("eigendecompose"));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let n = m.rows();
    let mut a = m.add(&m.transpose()).scale(0.5);
    let mut v = DenseMatrix::identity(n);
    let tol = OFF_DIAGONAL_TOL * a.frobenius_norm().max(1.0);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > tol {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.col(src);
        if let Some(first) = col.iter().find(|x| libm::fabs(**x) > SIGN_THRESHOLD) {
            if *first < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
        }
        eigenvectors.set_col(dst, &col);
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    libm::sqrt(s)
}

/// One Jacobi rotation annihilating `a[p][q]`, accumulated into `v`.
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let n = a.rows();
    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
    let t = if libm::fabs(theta) > 1e150 {
        0.5 / theta
    } else {
        let s = if theta >= 0.0 { 1.0 } else { -1.0 };
        s / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0))
    };
    let c = 1.0 / libm::sqrt(t * t + 1.0);
    let s = t * c;

    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        a[(k, p)] = new_kp;
        a[(p, k)] = new_kp;
        a[(k, q)] = new_kq;
        a[(q, k)] = new_kq;
    }
    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// The `k` lowest eigenpairs, trivial eigenvector included.
pub fn lowest_k(s: &Spectrum, k: usize) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = s.len();
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    Ok((s.eigenvalues[..k].to_vec(), s.eigenvectors.cols_range(0, k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_laplacian, generate_graph, Graph, GraphSpec, LaplacianNorm};
    use alloc::vec;

    fn lap(spec: GraphSpec) -> DenseMatrix {
        build_laplacian(&generate_graph(&spec, 0).unwrap(), LaplacianNorm::Unnormalized)
    }

    fn check_invariants(m: &DenseMatrix, s: &Spectrum) {
        assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.eigenvectors.orthonormality_residual() <= 1e-8);
        for (i, &lambda) in s.eigenvalues.iter().enumerate() {
            let psi = DenseMatrix::column(&s.eigenvectors.col(i));
            let r = m.matmul(&psi).sub(&psi.scale(lambda)).frobenius_norm();
            assert!(r <= 1e-8 * lambda.abs().max(1.0), "residual {r}");
        }
    }

    #[test]
    fn path_three_spectrum() {
        let l = lap(GraphSpec::Path { n: 3 });
        let s = eigendecompose(&l).unwrap();
        for (got, want) in s.eigenvalues.iter().zip([0.0, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        check_invariants(&l, &s);
    }

    #[test]
    fn complete_five_is_degenerate() {
        let l = lap(GraphSpec::Complete { n: 5 });
        let s = eigendecompose(&l).unwrap();
        assert!(s.eigenvalues[0].abs() < 1e-10);
        for &lambda in &s.eigenvalues[1..] {
            assert!((lambda - 5.0).abs() < 1e-10);
        }
        assert_eq!(s.clusters(CLUSTER_GAP), vec![0..1, 1..5]);
        // the degenerate block is only defined up to its projector: I − 11ᵀ/5
        let expected = DenseMatrix::identity(5).sub(&DenseMatrix::filled(5, 5, 0.2));
        assert!(s.projector(1..5).max_abs_diff(&expected) < 1e-10);
        check_invariants(&l, &s);
    }

    #[test]
    fn identity_matrix() {
        let s = eigendecompose(&DenseMatrix::identity(4)).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0; 4]);
        assert_eq!(s.eigenvectors, DenseMatrix::identity(4));
    }

    #[test]
    fn sign_convention() {
        let l = lap(GraphSpec::Path { n: 6 });
        let s = eigendecompose(&l).unwrap();
        for c in 0..6 {
            let col = s.eigenvectors.col(c);
            let first = col.iter().find(|x| x.abs() > 1e-10).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn errors() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(eigendecompose(&m), Err(Error::NotSymmetric { .. })));
        assert!(eigendecompose(&DenseMatrix::zeros(2, 3)).is_err());
        let s = eigendecompose(&lap(GraphSpec::Path { n: 3 })).unwrap();
        assert_eq!(lowest_k(&s, 4), Err(Error::KTooLarge { k: 4, n: 3 }));
        let (vals, vecs) = lowest_k(&s, 2).unwrap();
        assert_eq!(vals.len(), 2);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        assert_eq!(vecs.shape(), (3, 2));
        let (all, _) = lowest_k(&s, 3).unwrap();
        assert_eq!(all, s.eigenvalues);
    }

    #[test]
    fn disconnected_graph_has_one_zero_per_component() {
        let g = Graph::new(6, [(0, 1), (1, 2), (3, 4)]).unwrap();
        let s = eigendecompose(&build_laplacian(&g, LaplacianNorm::Unnormalized)).unwrap();
        let zeros = s.eigenvalues.iter().filter(|&&l| l < 1e-8).count();
        assert_eq!(zeros, g.component_count());
    }
}
