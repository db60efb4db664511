//! Baseline inverse solvers: weighted minimum norm, regularized minimum norm
//! with cross-validated regularization, and FOCUSS.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{face_neighbors, SourceGrid};
use crate::linalg::{pinv_solve, SymEigen};

/// Relative eigenvalue cutoff for pseudo-inverting `K W^-1 K^T`.
pub const GRAM_RCOND: f64 = 1e-12;

/// Relative singular-value cutoff for pseudo-inverting the whitened lead
/// field `K L^-T` of a dense weight.
pub const WHITENED_RCOND: f64 = 1e-10;

/// Weights whose condition estimate exceeds this are rejected.
pub const MAX_WEIGHT_CONDITION: f64 = 1e14;

/// A current-density estimate and how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEstimate {
    pub j: DVector<f64>,
    pub solver: String,
    pub alpha: Option<f64>,
    pub iterations: usize,
    /// `|Phi - K J|_2`, volts.
    pub residual: f64,
}

impl SourceEstimate {
    pub fn new(
        k: &DMatrix<f64>,
        phi: &DVector<f64>,
        j: DVector<f64>,
        solver: impl Into<String>,
        alpha: Option<f64>,
        iterations: usize,
    ) -> Self {
        let residual = (phi - k * &j).norm();
        Self {
            j,
            solver: solver.into(),
            alpha,
            iterations,
            residual,
        }
    }

    /// Per grid point power, `sum over x, y, z of J^2`.
    pub fn point_power(&self) -> Vec<f64> {
        self.j
            .as_slice()
            .chunks(3)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect()
    }
}

fn check_dims(phi: &DVector<f64>, k: &DMatrix<f64>) -> Result<()> {
    if phi.len() != k.nrows() {
        return Err(Error::Dimension {
            what: "measurement length vs lead-field rows",
            expected: k.nrows(),
            actual: phi.len(),
        });
    }
    Ok(())
}

/// The `W` of the weighted minimum-norm problem `min J^T W J s.t. K J = Phi`.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    /// Plain minimum norm (MNE).
    Identity,
    /// `diag(|K_i|^2)`, compensating for source depth (WMNE).
    ColumnNormSquared,
    /// Dense symmetric positive-definite weight, as built by [`loreta_weight`].
    Matrix(DMatrix<f64>),
}

/// `J = W^-1 K^T (K W^-1 K^T)^+ Phi`.
pub fn weighted_min_norm(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    weight: &WeightSpec,
) -> Result<SourceEstimate> {
    check_dims(phi, k)?;
    let kt = k.transpose();
    let (winv_kt, label) = match weight {
        WeightSpec::Identity => (kt, "mne"),
        WeightSpec::ColumnNormSquared => {
            let w: Vec<f64> = k.column_iter().map(|c| c.norm_squared()).collect();
            let (lo, hi) = w
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if !(lo > 0.0) || hi / lo > MAX_WEIGHT_CONDITION {
                return Err(Error::SingularWeight {
                    condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
                });
            }
            let mut m = kt;
            for (mut row, wi) in m.row_iter_mut().zip(&w) {
                row /= *wi;
            }
            (m, "wmne")
        }
        WeightSpec::Matrix(w) => {
            if w.nrows() != k.ncols() || w.ncols() != k.ncols() {
                return Err(Error::Dimension {
                    what: "weight matrix size",
                    expected: k.ncols(),
                    actual: w.nrows(),
                });
            }
            let chol = Cholesky::new(w.clone()).ok_or(Error::SingularWeight {
                condition: f64::INFINITY,
            })?;
            let diag = chol.l_dirty().diagonal();
            let (lo, hi) = diag
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v.abs()), hi.max(v.abs())));
            let condition = (hi / lo).powi(2);
            if !(condition <= MAX_WEIGHT_CONDITION) {
                return Err(Error::SingularWeight { condition });
            }
            // With W = L L^T and A = K L^-T the estimate is L^-T A^+ Phi. A near-null
            // mode of W makes K W^-1 K^T span many more decades than A does, so the
            // Gram route would truncate directions the data needs.
            let l = chol.l();
            let at = l.solve_lower_triangular(&kt).ok_or(Error::SingularWeight { condition })?;
            let x = pinv_solve(&at.transpose(), phi, WHITENED_RCOND);
            let j = l
                .transpose()
                .solve_upper_triangular(&x)
                .ok_or(Error::SingularWeight { condition })?;
            return Ok(SourceEstimate::new(k, phi, j, "weighted-mne", None, 1));
        }
    };
    let gram = k * &winv_kt;
    let eig = SymEigen::new(gram);
    let y = eig.shifted_pinv_solve(phi, 0.0, GRAM_RCOND);
    let j = &winv_kt * y;
    Ok(SourceEstimate::new(k, phi, j, label, None, 1))
}

/// Graph Laplacian (degree minus adjacency) of the 6-neighbor lattice graph.
pub fn laplacian(grid: &SourceGrid) -> DMatrix<f64> {
    let nbr = face_neighbors(grid);
    let m = grid.len();
    let mut b = DMatrix::zeros(m, m);
    for i in 0..m {
        let nb = nbr.neighbors(i);
        b[(i, i)] = nb.len() as f64;
        for &j in nb {
            b[(i, j)] = -1.0;
        }
    }
    b
}

/// LORETA weight `W = (B Omega)^T (B Omega) + eps I`, with `B` the lattice
/// Laplacian acting on each dipole component separately, `Omega =
/// diag(|K_i|)` and `eps = 1e-8 trace / 3M`.
pub fn loreta_weight(k: &DMatrix<f64>, grid: &SourceGrid) -> Result<WeightSpec> {
    let m = grid.len();
    if k.ncols() != 3 * m {
        return Err(Error::Dimension {
            what: "lead-field columns vs 3 x grid points",
            expected: 3 * m,
            actual: k.ncols(),
        });
    }
    let nbr = face_neighbors(grid);
    // Sparse rows of B: (index, value).
    let rows: Vec<Vec<(usize, f64)>> = (0..m)
        .map(|i| {
            let nb = nbr.neighbors(i);
            std::iter::once((i, nb.len() as f64))
                .chain(nb.iter().map(|&j| (j, -1.0)))
                .collect()
        })
        .collect();
    // B^T B accumulated row by row of B.
    let mut btb = DMatrix::<f64>::zeros(m, m);
    for row in &rows {
        for &(a, va) in row {
            for &(b, vb) in row {
                btb[(a, b)] += va * vb;
            }
        }
    }
    let omega: Vec<f64> = k.column_iter().map(|c| c.norm()).collect();
    let n = 3 * m;
    let mut w = DMatrix::<f64>::zeros(n, n);
    for a in 0..m {
        for b in 0..m {
            let v = btb[(a, b)];
            if v != 0.0 {
                for c in 0..3 {
                    let (i, j) = (3 * a + c, 3 * b + c);
                    w[(i, j)] = omega[i] * v * omega[j];
                }
            }
        }
    }
    let eps = 1e-8 * w.trace() / n as f64;
    for i in 0..n {
        w[(i, i)] += eps;
    }
    Ok(WeightSpec::Matrix(w))
}

/// Regularized minimum norm with the eigendecomposition of `K K^T` kept for
/// reuse across regularization values.
#[derive(Debug, Clone)]
pub struct RegularizedMinNorm<'a> {
    k: &'a DMatrix<f64>,
    eig: SymEigen,
}

impl<'a> RegularizedMinNorm<'a> {
    pub fn new(k: &'a DMatrix<f64>) -> Self {
        let eig = SymEigen::new(k * k.transpose());
        Self { k, eig }
    }

    /// `J = K^T (K K^T + alpha I)^+ Phi`.
    pub fn solve(&self, phi: &DVector<f64>, alpha: f64) -> Result<SourceEstimate> {
        check_dims(phi, self.k)?;
        if !(alpha >= 0.0) {
            return Err(Error::Contract(format!("alpha must be >= 0, got {alpha}")));
        }
        let y = self.eig.shifted_pinv_solve(phi, alpha, GRAM_RCOND);
        let j = self.k.transpose() * y;
        Ok(SourceEstimate::new(self.k, phi, j, "sloreta", Some(alpha), 1))
    }

    /// `trace(K K^T) / N`, the scale of the default regularization grid.
    pub fn mean_eigenvalue(&self) -> f64 {
        self.eig.values.sum() / self.eig.values.len() as f64
    }

    /// Default candidate set: 40 log-spaced values in `[1e-6, 1e2]` times
    /// `trace(K K^T) / N`.
    pub fn default_candidates(&self) -> Vec<f64> {
        let scale = self.mean_eigenvalue();
        (0..40)
            .map(|i| scale * 10f64.powf(-6.0 + 8.0 * i as f64 / 39.0))
            .collect()
    }

    /// Mean squared leave-one-channel-out prediction error for `alpha`.
    ///
    /// With `H = K K^T + alpha I` and `c = H^-1 Phi`, the error of predicting
    /// channel `i` from a fit on the other channels is `c_i / (H^-1)_ii`.
    pub fn loo_error(&self, phi: &DVector<f64>, alpha: f64) -> f64 {
        let values = &self.eig.values;
        let vectors = &self.eig.vectors;
        let inv: Vec<f64> = values.iter().map(|&l| 1.0 / (l + alpha)).collect();
        let mut coeffs = vectors.transpose() * phi;
        for (c, d) in coeffs.iter_mut().zip(&inv) {
            *c *= d;
        }
        let c = vectors * coeffs;
        let n = phi.len();
        let mut total = 0.0;
        for i in 0..n {
            let row = vectors.row(i);
            let hii: f64 = row.iter().zip(&inv).map(|(u, d)| u * u * d).sum();
            let e = c[i] / hii;
            total += e * e;
        }
        total / n as f64
    }

    /// Candidate with the smallest leave-one-channel-out error. Ties go to
    /// the earlier candidate.
    pub fn select_alpha(&self, phi: &DVector<f64>, candidates: &[f64]) -> Result<f64> {
        check_dims(phi, self.k)?;
        if phi.len() < 8 {
            return Err(Error::Contract(format!(
                "cross-validation needs at least 8 channels, got {}",
                phi.len()
            )));
        }
        if candidates.is_empty() {
            return Err(Error::Contract("empty regularization candidate list".into()));
        }
        if candidates.len() == 1 {
            return Ok(candidates[0]);
        }
        candidates
            .iter()
            .map(|&a| (a, self.loo_error(phi, a)))
            .filter(|(_, e)| e.is_finite())
            .fold(None, |best: Option<(f64, f64)>, cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            })
            .map(|(a, _)| a)
            .ok_or_else(|| Error::Solver("cross-validation error is non-finite for every candidate".into()))
    }
}

/// One-shot `J = K^T (K K^T + alpha I)^+ Phi`.
pub fn regularized_min_norm(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    alpha: f64,
) -> Result<SourceEstimate> {
    RegularizedMinNorm::new(k).solve(phi, alpha)
}

/// Leave-one-channel-out choice of `alpha`; `None` uses the default grid.
pub fn select_alpha(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    candidates: Option<&[f64]>,
) -> Result<f64> {
    let solver = RegularizedMinNorm::new(k);
    match candidates {
        Some(c) => solver.select_alpha(phi, c),
        None => solver.select_alpha(phi, &solver.default_candidates()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocussConfig {
    pub max_iter: usize,
    /// Stop when `|J_i - J_{i-1}|^2 <= tol`.
    pub tol: f64,
    /// Relative singular-value cutoff for `(K C_i)^+`.
    pub rcond: f64,
    /// Entries below `prune * max|J|` are set to zero and stay zero.
    pub prune: f64,
}

impl Default for FocussConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            rcond: 1e-10,
            prune: 1e-12,
        }
    }
}

/// FOCUSS reweighting: `C_i = diag(J_{i-1})`, `q_i = (K C_i)^+ Phi`,
/// `J_i = C_i q_i`.
pub fn focuss(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    j0: &DVector<f64>,
    config: &FocussConfig,
) -> Result<SourceEstimate> {
    focuss_traced(phi, k, j0, config).map(|(est, _)| est)
}

/// Like [`focuss`], also returning the residual `|Phi - K J_i|` after each
/// iteration.
pub fn focuss_traced(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    j0: &DVector<f64>,
    config: &FocussConfig,
) -> Result<(SourceEstimate, Vec<f64>)> {
    check_dims(phi, k)?;
    if j0.len() != k.ncols() {
        return Err(Error::Dimension {
            what: "FOCUSS initial estimate length",
            expected: k.ncols(),
            actual: j0.len(),
        });
    }
    if config.max_iter == 0 {
        return Err(Error::Contract("FOCUSS needs max_iter >= 1".into()));
    }
    let mut j = j0.clone();
    let mut trace = Vec::new();
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        let active: Vec<usize> = (0..j.len()).filter(|&i| j[i] != 0.0).collect();
        if active.is_empty() {
            break;
        }
        let mut a = k.select_columns(&active);
        for (mut col, &i) in a.column_iter_mut().zip(&active) {
            col *= j[i];
        }
        let q = pinv_solve(&a, phi, config.rcond);
        let mut next = DVector::zeros(j.len());
        for (&i, qi) in active.iter().zip(q.iter()) {
            next[i] = j[i] * qi;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: it,
                last_finite: j.as_slice().to_vec(),
            });
        }
        let peak = next.amax();
        let floor = config.prune * peak;
        next.iter_mut().filter(|v| v.abs() <= floor).for_each(|v| *v = 0.0);
        let change = (&next - &j).norm_squared();
        j = next;
        iterations = it;
        trace.push((phi - k * &j).norm());
        if change <= config.tol {
            break;
        }
    }
    Ok((SourceEstimate::new(k, phi, j, "focuss", None, iterations), trace))
}
