// SPDX-License-Identifier: Apache-2.0

//! Dense real-matrix kernel: thin SVD, pseudo-inverse, minimum-norm least
//! squares, norms and orthogonal projections.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. File formats and constructors that
//! take flat buffers use row-major order; the in-memory storage order is an
//! implementation detail of the backend.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Dense real matrix used for data, noise and operators.
pub type Matrix = DMatrix<f64>;

/// Relative threshold (times the largest singular value) below which
/// singular values are treated as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 10_000;

/// Builds a matrix from a row-major buffer, rejecting NaN and infinities.
pub fn matrix_from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::BadDimensions(format!("{rows}x{cols} matrix is empty")));
    }
    if data.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{} values supplied for a {rows}x{cols} matrix",
            data.len()
        )));
    }
    let m = Matrix::from_row_slice(rows, cols, data);
    ensure_finite(&m)?;
    Ok(m)
}

/// Flattens a matrix into row-major order.
pub fn to_row_major(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Returns an error naming the first non-finite entry, if any.
pub fn ensure_finite(m: &Matrix) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Thin singular value decomposition `m ≈ u · diag(s) · vt` with `s`
/// sorted non-increasing.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, &sj) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(sj);
        }
        us * &self.vt
    }

    /// Keeps only the leading `k` singular triplets.
    pub fn truncate(&self, k: usize) -> SvdFactors {
        let k = k.min(self.s.len());
        SvdFactors {
            u: self.u.columns(0, k).into_owned(),
            s: self.s[..k].to_vec(),
            vt: self.vt.rows(0, k).into_owned(),
        }
    }
}

/// Thin SVD with singular values below `rank_tol · s_max` dropped.
pub fn svd(m: &Matrix, rank_tol: f64) -> Result<SvdFactors> {
    ensure_finite(m)?;
    let dec = m
        .clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or(Error::ConvergenceFailure)?;
    let u = dec.u.ok_or(Error::ConvergenceFailure)?;
    let vt = dec.v_t.ok_or(Error::ConvergenceFailure)?;
    let s = dec.singular_values;

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let s_max = order.first().map(|&i| s[i]).unwrap_or(0.0);
    let cutoff = rank_tol * s_max;
    let kept: Vec<usize> = order.into_iter().filter(|&i| s[i] > cutoff && s[i] > 0.0).collect();

    let k = kept.len();
    let mut u_out = Matrix::zeros(m.nrows(), k);
    let mut vt_out = Matrix::zeros(k, m.ncols());
    let mut s_out = Vec::with_capacity(k);
    for (dst, &src) in kept.iter().enumerate() {
        u_out.set_column(dst, &u.column(src));
        vt_out.set_row(dst, &vt.row(src));
        s_out.push(s[src]);
    }
    Ok(SvdFactors { u: u_out, s: s_out, vt: vt_out })
}

/// Moore-Penrose pseudo-inverse computed from the truncated SVD.
pub fn pinv(m: &Matrix, rank_tol: f64) -> Result<Matrix> {
    let f = svd(m, rank_tol)?;
    let mut v_sinv = f.vt.transpose();
    for (j, &sj) in f.s.iter().enumerate() {
        v_sinv.column_mut(j).scale_mut(1.0 / sj);
    }
    Ok(v_sinv * f.u.transpose())
}

/// Pseudo-inverse of a matrix expected to have full rank, via Householder QR.
/// Falls back to the SVD route when the triangular factor is numerically
/// singular.
pub fn pinv_full_rank(m: &Matrix) -> Result<Matrix> {
    let eye = Matrix::identity(m.ncols(), m.ncols());
    min_norm_lstsq(&eye, m)
}

/// The map `t ↦ y · x† · t`, stored in factored form so that products with a
/// few test vectors never materialize `x†`.
#[derive(Debug, Clone)]
pub struct MinNormMap {
    inner: MapRepr,
    out_rows: usize,
    in_dim: usize,
}

#[derive(Debug, Clone)]
enum MapRepr {
    /// `x = QR` with `x` tall; `W = Z Qᵀ` with `Z = y R⁻¹`.
    Tall { qr: nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>, z: Matrix },
    /// `W` held explicitly.
    Dense(Matrix),
}

impl MinNormMap {
    /// Number of rows of `W` (rows of `y`).
    pub fn out_rows(&self) -> usize {
        self.out_rows
    }

    /// Number of columns of `W` (rows of `x`).
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Computes `W · t`.
    pub fn apply(&self, t: &Matrix) -> Result<Matrix> {
        if t.nrows() != self.in_dim {
            return Err(Error::DimensionMismatch(format!(
                "operand has {} rows, map expects {}",
                t.nrows(),
                self.in_dim
            )));
        }
        Ok(match &self.inner {
            MapRepr::Tall { qr, z } => {
                let mut qt = t.clone();
                qr.q_tr_mul(&mut qt);
                let k = z.ncols();
                z * qt.rows(0, k)
            }
            MapRepr::Dense(w) => w * t,
        })
    }

    /// Computes `W Wᵀ`.
    pub fn gram(&self) -> Matrix {
        match &self.inner {
            MapRepr::Tall { z, .. } => z * z.transpose(),
            MapRepr::Dense(w) => w * w.transpose(),
        }
    }

    /// Squared Frobenius norm of `W`.
    pub fn frobenius_sq(&self) -> f64 {
        match &self.inner {
            MapRepr::Tall { z, .. } => z.norm_squared(),
            MapRepr::Dense(w) => w.norm_squared(),
        }
    }

    /// Materializes `W`.
    pub fn to_matrix(&self) -> Matrix {
        match &self.inner {
            MapRepr::Tall { qr, z } => z * qr.q().transpose(),
            MapRepr::Dense(w) => w.clone(),
        }
    }
}

fn triangular_is_well_posed(r: &Matrix) -> bool {
    let n = r.nrows().min(r.ncols());
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..n {
        let a = r[(i, i)].abs();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    hi > 0.0 && lo.is_finite() && lo > 1e-12 * hi
}

/// Factored minimum-norm least-squares map `W = y · x†`.
pub fn min_norm_map(y: &Matrix, x: &Matrix) -> Result<MinNormMap> {
    if y.ncols() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "y has {} columns, x has {}",
            y.ncols(),
            x.ncols()
        )));
    }
    ensure_finite(x)?;
    ensure_finite(y)?;
    let (d, n) = x.shape();
    let out_rows = y.nrows();

    if d >= n {
        let qr = x.clone().qr();
        let r = qr.r();
        if triangular_is_well_posed(&r) {
            if let Some(zt) = r.tr_solve_upper_triangular(&y.transpose()) {
                let z = zt.transpose();
                if z.iter().all(|v| v.is_finite()) {
                    return Ok(MinNormMap { inner: MapRepr::Tall { qr, z }, out_rows, in_dim: d });
                }
            }
        }
    } else {
        let qr = x.transpose().qr();
        let r = qr.r();
        if triangular_is_well_posed(&r) {
            let mut yt = y.transpose();
            qr.q_tr_mul(&mut yt);
            let yq_t = yt.rows(0, d).into_owned();
            if let Some(wt) = r.solve_upper_triangular(&yq_t) {
                if wt.iter().all(|v| v.is_finite()) {
                    return Ok(MinNormMap { inner: MapRepr::Dense(wt.transpose()), out_rows, in_dim: d });
                }
            }
        }
    }

    let w = y * pinv(x, DEFAULT_RANK_TOL)?;
    Ok(MinNormMap { inner: MapRepr::Dense(w), out_rows, in_dim: d })
}

/// Minimum-norm minimizer of `‖y − W x‖_F`, i.e. `W = y · x†`.
pub fn min_norm_lstsq(y: &Matrix, x: &Matrix) -> Result<Matrix> {
    Ok(min_norm_map(y, x)?.to_matrix())
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    ensure_finite(m)?;
    let s = m
        .clone()
        .try_svd(false, false, SVD_EPS, SVD_MAX_ITER)
        .ok_or(Error::ConvergenceFailure)?
        .singular_values;
    Ok(s.iter().cloned().fold(0.0, f64::max))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.norm()
}

/// Orthogonal projection `u uᵀ x` onto the column span of `u`.
pub fn project_onto(u: &Matrix, x: &Matrix) -> Result<Matrix> {
    if u.nrows() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "basis has {} rows, data has {}",
            u.nrows(),
            x.nrows()
        )));
    }
    Ok(u * (u.transpose() * x))
}

/// Largest singular value of `I − u g` for `u` with orthonormal columns.
///
/// `(I − ug)ᵀ(I − ug) − I` has rank at most `2k` and lives on the span of
/// `[u, gᵀ]`, so the spectrum reduces to a `2k × 2k` eigenproblem.
pub fn spectral_norm_identity_minus(u: &Matrix, g: &Matrix) -> Result<f64> {
    let (d, k) = u.shape();
    if g.shape() != (k, d) {
        return Err(Error::DimensionMismatch(format!(
            "u is {d}x{k}, g must be {k}x{d}, got {}x{}",
            g.nrows(),
            g.ncols()
        )));
    }
    let mut basis = Matrix::zeros(d, 2 * k);
    basis.columns_mut(0, k).copy_from(u);
    basis.columns_mut(k, k).copy_from(&g.transpose());
    let f = svd(&basis, 1e-12)?;
    let q = f.u;
    let image = &q - u * (g * &q);
    let small = image.transpose() * image;
    let eig = sym_eigen(&small)?;
    let mut top = eig.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if q.ncols() < d {
        top = top.max(1.0);
    }
    Ok(top.max(0.0).sqrt())
}

/// Eigen-decomposition of a symmetric matrix; eigenvalues ascending.
pub fn sym_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!("{}x{} is not square", m.nrows(), m.ncols())));
    }
    ensure_finite(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::try_new(sym, SVD_EPS, SVD_MAX_ITER).ok_or(Error::ConvergenceFailure)?;
    let mut order: Vec<usize> = (0..e.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let mut vecs = Matrix::zeros(m.nrows(), m.ncols());
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &e.eigenvectors.column(src));
    }
    Ok((vals, vecs))
}

/// Symmetric PSD square root. Eigenvalues below `-tol · max(1, λ_max)` are
/// rejected; small negative ones are clamped to zero.
pub fn psd_sqrt(m: &Matrix, tol: f64) -> Result<Matrix> {
    let (vals, vecs) = sym_eigen(m)?;
    let scale = vals.iter().cloned().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(&lo) = vals.first() {
        if lo < -tol * scale {
            return Err(Error::NotPsd(lo));
        }
    }
    let roots = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt()));
    let mut scaled = vecs.clone();
    for (j, r) in roots.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*r);
    }
    Ok(scaled * vecs.transpose())
}

/// Checks that a matrix is symmetric and PSD within `tol`.
pub fn check_psd(m: &Matrix, tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!("{}x{} is not square", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).amax();
    let scale = m.amax().max(1.0);
    if asym > tol * scale {
        return Err(Error::NotPsd(-asym));
    }
    psd_sqrt(m, tol).map(|_| ())
}

/// Diagonal matrix from a slice.
pub fn diag(values: &[f64]) -> Matrix {
    Matrix::from_diagonal(&DVector::from_column_slice(values))
}

/// `‖uᵀu − I‖_F`.
pub fn orthonormality_defect(u: &Matrix) -> f64 {
    let g = u.transpose() * u;
    (g - Matrix::identity(u.ncols(), u.ncols())).norm()
}

/// Serializes a matrix as a list of rows.
pub mod serde_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Matrix;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("rows differ in length"));
        }
        Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_svd_has_unit_values() {
        let f = svd(&Matrix::identity(3, 3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(f.s.len(), 3);
        for s in &f.s {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_singular_value_is_truncated() {
        let f = svd(&diag(&[3.0, 0.0]), 1e-12).unwrap();
        assert_eq!(f.rank(), 1);
        assert!((f.s[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn svd_reconstructs_rectangular_matrix() {
        for (r, c) in [(50, 30), (30, 50)] {
            let m = gaussian(r, c, 7);
            let f = svd(&m, DEFAULT_RANK_TOL).unwrap();
            assert!((f.reconstruct() - &m).norm() <= 1e-8 * m.norm());
            assert!(orthonormality_defect(&f.u) < 1e-10);
            assert!(orthonormality_defect(&f.vt.transpose()) < 1e-10);
            assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn pinv_examples() {
        let p = pinv(&Matrix::identity(3, 3), DEFAULT_RANK_TOL).unwrap();
        assert!((p - Matrix::identity(3, 3)).norm() < 1e-14);
        let p = pinv(&diag(&[2.0, 0.0]), DEFAULT_RANK_TOL).unwrap();
        assert!((p - diag(&[0.5, 0.0])).norm() < 1e-14);
        let m = gaussian(5, 3, 1);
        let p = pinv(&m, DEFAULT_RANK_TOL).unwrap();
        assert!((&p * &m - Matrix::identity(3, 3)).norm() < 1e-8);
    }

    #[test]
    fn qr_map_matches_svd_pseudo_inverse() {
        for (d, n) in [(40, 15), (15, 40), (20, 20)] {
            let x = gaussian(d, n, 3);
            let y = gaussian(4, n, 4);
            let reference = &y * pinv(&x, DEFAULT_RANK_TOL).unwrap();
            let map = min_norm_map(&y, &x).unwrap();
            assert!((map.to_matrix() - &reference).norm() <= 1e-9 * reference.norm());
            let t = gaussian(d, 6, 5);
            assert!((map.apply(&t).unwrap() - &reference * &t).norm() <= 1e-9 * (reference.norm() * t.norm()));
            assert!((map.gram() - &reference * reference.transpose()).norm() <= 1e-9 * reference.norm_squared());
            assert!((map.frobenius_sq() - reference.norm_squared()).abs() <= 1e-9 * reference.norm_squared());
        }
    }

    #[test]
    fn rank_deficient_input_falls_back_to_svd() {
        let base = gaussian(12, 3, 9);
        let x = &base * gaussian(3, 8, 10);
        let y = gaussian(2, 8, 11);
        let w = min_norm_lstsq(&y, &x).unwrap();
        let reference = &y * pinv(&x, DEFAULT_RANK_TOL).unwrap();
        assert!((w - &reference).norm() <= 1e-7 * reference.norm().max(1.0));
    }

    #[test]
    fn min_norm_examples() {
        let y = gaussian(3, 4, 12);
        let w = min_norm_lstsq(&y, &Matrix::identity(4, 4)).unwrap();
        assert!((w - &y).norm() < 1e-12);

        let x = gaussian(4, 9, 13);
        let beta = gaussian(4, 2, 14);
        let y = beta.transpose() * &x;
        let w = min_norm_lstsq(&y, &x).unwrap();
        assert!((&y - &w * &x).norm() <= 1e-8);
    }

    #[test]
    fn min_norm_beats_null_space_perturbations() {
        // Ten unknown coefficients per output row, three samples.
        let x = gaussian(10, 3, 15);
        let y = gaussian(2, 3, 16);
        let w = min_norm_lstsq(&y, &x).unwrap();
        let left_null = Matrix::identity(10, 10) - &x * pinv(&x, DEFAULT_RANK_TOL).unwrap();
        for seed in 0..5 {
            let alt = &w + gaussian(2, 10, 100 + seed) * &left_null;
            assert!((&alt * &x - &w * &x).norm() < 1e-9);
            assert!(w.norm() <= alt.norm() + 1e-12);
        }
    }

    #[test]
    fn spectral_and_projection_examples() {
        assert!((spectral_norm(&diag(&[3.0, 1.0])).unwrap() - 3.0).abs() < 1e-14);
        let u = svd(&gaussian(10, 3, 18), DEFAULT_RANK_TOL).unwrap().u;
        let uz = &u * gaussian(3, 4, 19);
        assert!((project_onto(&u, &uz).unwrap() - &uz).norm() < 1e-12);
    }

    #[test]
    fn projection_residual_equals_trailing_singular_block() {
        let x = gaussian(12, 9, 20);
        let f = svd(&x, DEFAULT_RANK_TOL).unwrap();
        let top = f.truncate(4);
        let resid = (&x - project_onto(&top.u, &x).unwrap()).norm();
        let tail: f64 = f.s[4..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((resid - tail).abs() < 1e-10 * x.norm());
    }

    #[test]
    fn reduced_spectral_norm_matches_dense() {
        let u = svd(&gaussian(30, 4, 21), DEFAULT_RANK_TOL).unwrap().u;
        let g = gaussian(4, 30, 22) * 0.3;
        let dense = spectral_norm(&(Matrix::identity(30, 30) - &u * &g)).unwrap();
        let reduced = spectral_norm_identity_minus(&u, &g).unwrap();
        assert!((dense - reduced).abs() < 1e-10 * dense);
    }

    #[test]
    fn psd_sqrt_squares_back_and_rejects_indefinite() {
        let a = gaussian(5, 5, 23);
        let s = &a * a.transpose();
        let root = psd_sqrt(&s, 1e-10).unwrap();
        assert!((&root * &root - &s).norm() < 1e-9 * s.norm());
        assert!(matches!(psd_sqrt(&diag(&[1.0, -1.0]), 1e-10), Err(Error::NotPsd(_))));
    }

    #[test]
    fn constructor_rejects_bad_buffers() {
        assert!(matrix_from_row_major(2, 2, &[1.0, 2.0, 3.0]).is_err());
        assert!(matches!(
            matrix_from_row_major(1, 2, &[1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        let m = matrix_from_row_major(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(to_row_major(&m), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
