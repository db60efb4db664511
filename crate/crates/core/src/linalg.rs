//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Minimum-norm least-squares solution `A^+ b`, discarding singular values
/// below `rcond * sigma_max`.
///
/// The matrix is first reduced by a QR factorization of its tall
/// orientation, so the SVD only runs on a `min(m, n)` square factor.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> DVector<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DVector::zeros(n);
    }
    if n > m {
        // A^T = Q R  =>  A = R^T Q^T,  A^+ = Q (R^T)^+.
        let qr = a.transpose().qr();
        let (q, r) = qr.unpack();
        let y = small_pinv_solve(r.transpose(), b, rcond);
        q * y
    } else {
        // A = Q R  =>  A^+ = R^+ Q^T.
        let qr = a.clone().qr();
        let (q, r) = qr.unpack();
        let qtb = q.transpose() * b;
        small_pinv_solve(r, &qtb, rcond)
    }
}

fn small_pinv_solve(r: DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> DVector<f64> {
    let svd = r.svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = rcond * smax;
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let mut coeffs = u.transpose() * b;
    for (c, &s) in coeffs.iter_mut().zip(svd.singular_values.iter()) {
        *c = if s > cutoff && s > 0.0 { *c / s } else { 0.0 };
    }
    vt.transpose() * coeffs
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn new(sym: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
        let vectors = eig.eigenvectors.select_columns(&order);
        Self { values, vectors }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `(S + shift I)^+ b`, treating `lambda + shift <= rcond * (lambda_max + shift)`
    /// as zero.
    pub fn shifted_pinv_solve(&self, b: &DVector<f64>, shift: f64, rcond: f64) -> DVector<f64> {
        let cutoff = rcond * (self.max() + shift);
        let mut coeffs = self.vectors.transpose() * b;
        for (c, &l) in coeffs.iter_mut().zip(self.values.iter()) {
            let d = l + shift;
            *c = if d > cutoff && d > 0.0 { *c / d } else { 0.0 };
        }
        &self.vectors * coeffs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        DMatrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn wide_system_matches_normal_equations() {
        let a = mat(5, 12, 1);
        let b = DVector::from_fn(5, |i, _| i as f64 - 2.0);
        let x = pinv_solve(&a, &b, 1e-12);
        let expected = a.transpose() * (&a * a.transpose()).try_inverse().unwrap() * &b;
        assert_relative_eq!(x, expected, epsilon = 1e-10);
    }

    #[test]
    fn tall_system_matches_least_squares() {
        let a = mat(12, 5, 2);
        let b = DVector::from_fn(12, |i, _| (i as f64).sin());
        let x = pinv_solve(&a, &b, 1e-12);
        let expected = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * &b;
        assert_relative_eq!(x, expected, epsilon = 1e-10);
    }

    #[test]
    fn rank_deficient_drops_null_directions() {
        // Duplicate column: the min-norm solution splits weight equally.
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 3.0]);
        let x = pinv_solve(&a, &b, 1e-10);
        assert_relative_eq!(x, DVector::from_vec(vec![1.0, 1.0, 3.0]), epsilon = 1e-12);
    }

    #[test]
    fn shifted_eigen_solve() {
        let a = mat(6, 9, 3);
        let g = &a * a.transpose();
        let eig = SymEigen::new(g.clone());
        assert!(eig.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        let b = DVector::from_fn(6, |i, _| 1.0 + i as f64);
        let x = eig.shifted_pinv_solve(&b, 0.5, 1e-14);
        let expected = (g + DMatrix::identity(6, 6) * 0.5).try_inverse().unwrap() * &b;
        assert_relative_eq!(x, expected, epsilon = 1e-10);
    }
}
