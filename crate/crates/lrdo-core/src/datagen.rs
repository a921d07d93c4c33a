// SPDX-License-Identifier: Apache-2.0

//! Problem instances: low-rank training factors, targets, noise, test data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, DEFAULT_RANK_TOL};
use crate::rng::{self, Purpose};

/// Linear target map `β` applied to clean inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `β = I_d` (denoising).
    Identity,
    /// Explicit `d × k` matrix.
    Matrix(Matrix),
}

impl Target {
    pub fn out_dim(&self, d: usize) -> usize {
        match self {
            Target::Identity => d,
            Target::Matrix(b) => b.ncols(),
        }
    }

    /// `Uᵀβ`.
    pub fn project(&self, u: &Matrix) -> Matrix {
        match self {
            Target::Identity => u.transpose(),
            Target::Matrix(b) => u.transpose() * b,
        }
    }

    /// `βᵀx`.
    pub fn apply_transpose(&self, x: &Matrix) -> Matrix {
        match self {
            Target::Identity => x.clone(),
            Target::Matrix(b) => b.transpose() * x,
        }
    }

    /// Largest singular value of `β`.
    pub fn spectral_norm(&self) -> Result<f64> {
        match self {
            Target::Identity => Ok(1.0),
            Target::Matrix(b) => linalg::spectral_norm(b),
        }
    }

    pub fn to_matrix(&self, d: usize) -> Matrix {
        match self {
            Target::Identity => Matrix::identity(d, d),
            Target::Matrix(b) => b.clone(),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        match self {
            Target::Identity => Ok(()),
            Target::Matrix(b) if b.nrows() == d && b.ncols() > 0 => linalg::ensure_finite(b),
            Target::Matrix(b) => Err(Error::ShapeMismatch(format!(
                "target has {} rows, expected d = {d}",
                b.nrows()
            ))),
        }
    }
}

/// Training factors `X_trn = U diag(σ) V_trnᵀ`, the target and noise levels.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    /// `d × r`, orthonormal columns.
    pub u: Matrix,
    /// Positive singular values of `X_trn`, length `r`.
    pub sigma_trn: Vec<f64>,
    /// `N × r`, orthonormal columns.
    pub v_trn: Matrix,
    pub beta: Target,
    pub eta_trn: f64,
    pub eta_tst: f64,
    pub d: usize,
    pub n: usize,
    pub n_tst: usize,
    pub r: usize,
}

impl ProblemInstance {
    /// Validates shapes, positivity and orthonormality.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        u: Matrix,
        sigma_trn: Vec<f64>,
        v_trn: Matrix,
        beta: Target,
        eta_trn: f64,
        eta_tst: f64,
        n_tst: usize,
    ) -> Result<Self> {
        let (d, r) = u.shape();
        let n = v_trn.nrows();
        if r == 0 || d == 0 || n == 0 || n_tst == 0 {
            return Err(Error::BadDimensions(format!("d = {d}, N = {n}, r = {r}, N_tst = {n_tst}")));
        }
        if v_trn.ncols() != r || sigma_trn.len() != r {
            return Err(Error::ShapeMismatch(format!(
                "U has {r} columns, V has {}, sigma has {}",
                v_trn.ncols(),
                sigma_trn.len()
            )));
        }
        if r > d.min(n) {
            return Err(Error::RankTooLarge { r, limit: d.min(n) });
        }
        if let Some(s) = sigma_trn.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Domain(format!("singular value {s} is not positive")));
        }
        if !(eta_trn.is_finite() && eta_trn >= 0.0 && eta_tst.is_finite() && eta_tst >= 0.0) {
            return Err(Error::Domain(format!("noise levels must be finite and non-negative, got {eta_trn}, {eta_tst}")));
        }
        linalg::ensure_finite(&u)?;
        linalg::ensure_finite(&v_trn)?;
        if linalg::orthonormality_defect(&u) > 1e-10 {
            return Err(Error::Domain("U does not have orthonormal columns".into()));
        }
        if linalg::orthonormality_defect(&v_trn) > 1e-8 {
            return Err(Error::Domain("V_trn does not have orthonormal columns".into()));
        }
        beta.check(d)?;
        Ok(Self { u, sigma_trn, v_trn, beta, eta_trn, eta_tst, d, n, n_tst, r })
    }

    /// Instance with random `U`, `V_trn` and the given singular values.
    #[allow(clippy::too_many_arguments)]
    pub fn synthetic(
        d: usize,
        n: usize,
        n_tst: usize,
        sigma_trn: Vec<f64>,
        beta: Target,
        eta_trn: f64,
        eta_tst: f64,
        seed: u64,
    ) -> Result<Self> {
        let r = sigma_trn.len();
        if r > d.min(n) {
            return Err(Error::RankTooLarge { r, limit: d.min(n) });
        }
        let u = gen_orthonormal(d, r, rng::derive_seed(seed, Purpose::Basis, 0))?;
        let v = gen_orthonormal(n, r, rng::derive_seed(seed, Purpose::Basis, 1))?;
        Self::new(u, sigma_trn, v, beta, eta_trn, eta_tst, n_tst)
    }

    /// Instance with `X_trn = U C` for an `r × N` coefficient matrix `C`.
    ///
    /// Returns the instance and the `r × r` rotation `P` with `U_inst = U P`,
    /// so test inputs `U L` have coordinates `Pᵀ L`.
    pub fn from_coefficients(
        u: &Matrix,
        coeffs: &Matrix,
        beta: Target,
        eta_trn: f64,
        eta_tst: f64,
        n_tst: usize,
    ) -> Result<(Self, Matrix)> {
        if coeffs.nrows() != u.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "coefficients have {} rows, basis has {} columns",
                coeffs.nrows(),
                u.ncols()
            )));
        }
        let f = linalg::svd(coeffs, DEFAULT_RANK_TOL)?;
        if f.rank() < coeffs.nrows() {
            return Err(Error::RankTooLarge { r: coeffs.nrows(), limit: f.rank() });
        }
        let inst = Self::new(u * &f.u, f.s, f.vt.transpose(), beta, eta_trn, eta_tst, n_tst)?;
        Ok((inst, f.u))
    }

    /// Instance whose factors come from the SVD of an explicit training matrix.
    pub fn from_training(x_trn: &Matrix, r: usize, beta: Target, eta_trn: f64, eta_tst: f64, n_tst: usize) -> Result<Self> {
        let f = linalg::svd(x_trn, DEFAULT_RANK_TOL)?;
        let limit = x_trn.nrows().min(x_trn.ncols());
        if r > f.rank() {
            return Err(Error::RankTooLarge { r, limit: f.rank().min(limit) });
        }
        let f = f.truncate(r);
        Self::new(f.u, f.s, f.vt.transpose(), beta, eta_trn, eta_tst, n_tst)
    }

    /// Aspect ratio `c = d / N`.
    pub fn c(&self) -> f64 {
        self.d as f64 / self.n as f64
    }

    /// `β_U = Uᵀβ`, shape `r × k`.
    pub fn beta_u(&self) -> Matrix {
        self.beta.project(&self.u)
    }

    /// `diag(σ) V_trnᵀ`, the training coordinates in the basis `U`.
    pub fn coords_trn(&self) -> Matrix {
        let mut m = self.v_trn.transpose();
        for (i, s) in self.sigma_trn.iter().enumerate() {
            m.row_mut(i).scale_mut(*s);
        }
        m
    }

    /// `X_trn = U diag(σ) V_trnᵀ`.
    pub fn x_trn(&self) -> Matrix {
        &self.u * self.coords_trn()
    }

    pub fn rank_gap_ok(&self) -> bool {
        self.r < self.d.abs_diff(self.n)
    }

    /// Copy with replaced singular values.
    pub fn with_sigma(&self, sigma_trn: Vec<f64>) -> Result<Self> {
        Self::new(self.u.clone(), sigma_trn, self.v_trn.clone(), self.beta.clone(), self.eta_trn, self.eta_tst, self.n_tst)
    }

    /// Copy with a replaced training noise level.
    pub fn with_eta_trn(&self, eta_trn: f64) -> Self {
        Self { eta_trn, ..self.clone() }
    }
}

/// How test inputs are specified.
#[derive(Debug, Clone)]
pub enum TestData {
    /// `X_tst = U L` with `L` of shape `r × N_tst`.
    InSubspace(Matrix),
    /// Arbitrary `d × N_tst` inputs, optionally with the in-subspace surrogate `L`.
    Raw { x_tst: Matrix, companion: Option<Matrix> },
    /// Columns of `L` drawn IID Gaussian with mean `mu` and covariance `cov`.
    Distribution { mu: Vec<f64>, cov: Matrix },
}

/// Test inputs plus an optional shifted target for transfer.
#[derive(Debug, Clone)]
pub struct TestSpec {
    pub data: TestData,
    pub beta_tst: Option<Target>,
}

impl TestSpec {
    pub fn in_subspace(l: Matrix) -> Self {
        Self { data: TestData::InSubspace(l), beta_tst: None }
    }

    pub fn raw(x_tst: Matrix, companion: Option<Matrix>) -> Self {
        Self { data: TestData::Raw { x_tst, companion }, beta_tst: None }
    }

    /// Validates a Gaussian test distribution.
    pub fn distribution(mu: Vec<f64>, cov: Matrix) -> Result<Self> {
        if cov.nrows() != mu.len() || cov.ncols() != mu.len() {
            return Err(Error::ShapeMismatch(format!(
                "mean has length {}, covariance is {}x{}",
                mu.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        linalg::check_psd(&cov, 1e-10)?;
        Ok(Self { data: TestData::Distribution { mu, cov }, beta_tst: None })
    }

    pub fn with_beta_tst(mut self, beta_tst: Target) -> Self {
        self.beta_tst = Some(beta_tst);
        self
    }

    /// Checks this test specification against an instance.
    pub fn check(&self, inst: &ProblemInstance) -> Result<()> {
        match &self.data {
            TestData::InSubspace(l) => {
                if l.nrows() != inst.r || l.ncols() == 0 {
                    return Err(Error::ShapeMismatch(format!("L is {}x{}, need r = {} rows", l.nrows(), l.ncols(), inst.r)));
                }
                linalg::ensure_finite(l)?;
            }
            TestData::Raw { x_tst, companion } => {
                if x_tst.nrows() != inst.d || x_tst.ncols() == 0 {
                    return Err(Error::ShapeMismatch(format!("X_tst has {} rows, need d = {}", x_tst.nrows(), inst.d)));
                }
                linalg::ensure_finite(x_tst)?;
                if let Some(l) = companion {
                    if l.shape() != (inst.r, x_tst.ncols()) {
                        return Err(Error::ShapeMismatch("companion L does not match X_tst".into()));
                    }
                }
            }
            TestData::Distribution { mu, .. } => {
                if mu.len() != inst.r {
                    return Err(Error::ShapeMismatch(format!("mean has length {}, need r = {}", mu.len(), inst.r)));
                }
            }
        }
        if let Some(bt) = &self.beta_tst {
            bt.check(inst.d)?;
            if bt.out_dim(inst.d) != inst.beta.out_dim(inst.d) {
                return Err(Error::ShapeMismatch("beta_tst and beta differ in output dimension".into()));
            }
        }
        Ok(())
    }
}

/// Non-IID coefficient processes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CoeffMode {
    /// One `block`-column IID block tiled `n / block` times.
    RepeatBlock { block: usize },
    /// Columns follow `z_j = ρ z_{j−1} + √(1−ρ²) ε_j`.
    Ar1 { rho: f64 },
}

/// `d × r` matrix with orthonormal columns from the QR of a Gaussian matrix.
pub fn gen_orthonormal(d: usize, r: usize, seed: u64) -> Result<Matrix> {
    if r == 0 || r > d {
        return Err(Error::BadDimensions(format!("need 0 < r <= d, got r = {r}, d = {d}")));
    }
    let g = rng::gaussian_matrix(d, r, seed, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let rmat = qr.r();
    for j in 0..r {
        if rmat[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// `r × n` IID Gaussian coefficients with variance `1/r`.
pub fn gen_iso_coeffs(r: usize, n: usize, seed: u64) -> Matrix {
    rng::gaussian_matrix(r, n, seed, 1.0 / (r as f64).sqrt())
}

/// Dependent coefficient matrices with entry variance `1/r`.
pub fn gen_noniid_coeffs(r: usize, n: usize, mode: CoeffMode, seed: u64) -> Result<Matrix> {
    match mode {
        CoeffMode::RepeatBlock { block } => {
            if block == 0 || block > n || n % block != 0 {
                return Err(Error::BadMode(format!("block size {block} does not divide n = {n}")));
            }
            let base = gen_iso_coeffs(r, block, seed);
            let mut m = Matrix::zeros(r, n);
            for t in 0..n / block {
                m.columns_mut(t * block, block).copy_from(&base);
            }
            Ok(m)
        }
        CoeffMode::Ar1 { rho } => {
            if !(rho > -1.0 && rho < 1.0) {
                return Err(Error::BadMode(format!("AR(1) parameter {rho} outside (-1, 1)")));
            }
            let eps = gen_iso_coeffs(r, n, seed);
            let mut m = Matrix::zeros(r, n);
            if n > 0 {
                m.set_column(0, &eps.column(0));
            }
            let innov = (1.0 - rho * rho).sqrt();
            for j in 1..n {
                let col = m.column(j - 1) * rho + eps.column(j) * innov;
                m.set_column(j, &col);
            }
            Ok(m)
        }
    }
}

/// `d × n` noise with IID `N(0, η²/d)` entries; column `j` uses stream `j`.
pub fn gen_noise(d: usize, n: usize, eta: f64, seed: u64) -> Matrix {
    let keys: Vec<u64> = (0..n as u64).collect();
    gen_noise_keyed(d, &keys, eta, seed)
}

/// Noise whose column `j` is drawn from stream `keys[j]`.
pub fn gen_noise_keyed(d: usize, keys: &[u64], eta: f64, seed: u64) -> Matrix {
    rng::column_keyed_gaussian(d, keys, seed, eta / (d as f64).sqrt())
}

/// Training and test data for a mixture of point clusters at orthogonal means.
#[derive(Debug, Clone)]
pub struct GmmData {
    pub instance: ProblemInstance,
    pub test: TestSpec,
    /// Cluster index of every test column.
    pub labels_tst: Vec<usize>,
    /// Cluster index of every training column.
    pub labels_trn: Vec<usize>,
    /// `d × k` matrix of means, also the target `β`.
    pub means: Matrix,
}

/// Builds clustered data with `X` columns equal to their cluster mean and the
/// target `β = [μ₁ … μ_k]`, so `βᵀμ_j = ‖μ_j‖² e_j`.
pub fn gen_gmm(
    means: &[Vec<f64>],
    n: usize,
    n_tst: usize,
    eta_trn: f64,
    eta_tst: f64,
    seed: u64,
) -> Result<GmmData> {
    let k = means.len();
    if k == 0 {
        return Err(Error::BadDimensions("need at least one cluster mean".into()));
    }
    let d = means[0].len();
    if means.iter().any(|m| m.len() != d) {
        return Err(Error::DimensionMismatch("cluster means differ in length".into()));
    }
    for i in 0..k {
        for j in i + 1..k {
            let inner: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| a * b).sum();
            let scale = norm(&means[i]) * norm(&means[j]);
            if inner.abs() > 1e-8 * scale.max(1.0) {
                return Err(Error::NonOrthogonalMeans { i, j, inner });
            }
        }
    }
    let mut mu = Matrix::zeros(d, k);
    for (j, m) in means.iter().enumerate() {
        mu.set_column(j, &nalgebra::DVector::from_column_slice(m));
    }
    let labels_trn = draw_labels(n, k, rng::derive_seed(seed, Purpose::Labels, 0));
    let labels_tst = draw_labels(n_tst, k, rng::derive_seed(seed, Purpose::Labels, 1));
    let x_trn = assemble(&mu, &labels_trn);
    let x_tst = assemble(&mu, &labels_tst);
    let rank = linalg::svd(&x_trn, DEFAULT_RANK_TOL)?.rank();
    let instance = ProblemInstance::from_training(&x_trn, rank, Target::Matrix(mu.clone()), eta_trn, eta_tst, n_tst)?;
    let l = instance.u.transpose() * &x_tst;
    Ok(GmmData { instance, test: TestSpec::in_subspace(l), labels_tst, labels_trn, means: mu })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn draw_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut g = rng::stream_rng(seed, 0);
    let mut labels: Vec<usize> = (0..n).map(|j| j % k).collect();
    for i in (1..n).rev() {
        let j = g.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

fn assemble(mu: &Matrix, labels: &[usize]) -> Matrix {
    let mut x = Matrix::zeros(mu.nrows(), labels.len());
    for (j, &l) in labels.iter().enumerate() {
        x.set_column(j, &mu.column(l));
    }
    x
}

/// Standard deviation used when normalizing ingested data.
pub const NORMALIZED_STD: f64 = 5.0;

/// Result of projecting a data matrix onto its top principal directions.
#[derive(Debug, Clone)]
pub struct PcrFragment {
    /// `d × r` principal directions.
    pub u: Matrix,
    pub sigma: Vec<f64>,
    /// `N × r`.
    pub v_trn: Matrix,
    /// Input after optional normalization.
    pub data: Matrix,
    /// `U Uᵀ data`.
    pub projected: Matrix,
}

impl PcrFragment {
    /// Projects further data onto the retained directions.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        linalg::project_onto(&self.u, x)
    }

    pub fn into_instance(self, beta: Target, eta_trn: f64, eta_tst: f64, n_tst: usize) -> Result<ProblemInstance> {
        ProblemInstance::new(self.u, self.sigma, self.v_trn, beta, eta_trn, eta_tst, n_tst)
    }
}

/// Shifts every row to mean zero and rescales it to standard deviation 5.
/// Constant rows are left at zero.
pub fn normalize_rows(x: &Matrix) -> Matrix {
    let n = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.iter().sum::<f64>() / n;
        row.add_scalar_mut(-mean);
        let sd = (row.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            row.scale_mut(NORMALIZED_STD / sd);
        }
    }
    out
}

/// Principal component projection of a `d × N` data matrix.
pub fn pcr(x: &Matrix, r: usize, normalize: bool) -> Result<PcrFragment> {
    linalg::ensure_finite(x)?;
    let limit = x.nrows().min(x.ncols());
    if r == 0 || r > limit {
        return Err(Error::RankTooLarge { r, limit });
    }
    let data = if normalize { normalize_rows(x) } else { x.clone() };
    let f = linalg::svd(&data, 0.0)?;
    if f.rank() < r {
        return Err(Error::RankTooLarge { r, limit: f.rank() });
    }
    let f = f.truncate(r);
    let projected = linalg::project_onto(&f.u, &data)?;
    Ok(PcrFragment { u: f.u, sigma: f.s, v_trn: f.vt.transpose(), data, projected })
}

/// Reads a matrix file and applies [`pcr`].
pub fn ingest_and_pcr(path: &std::path::Path, r: usize, normalize: bool) -> Result<PcrFragment> {
    let x = crate::matfile::read_matrix(path)?;
    pcr(&x, r, normalize)
}

/// Diagnostics for the low-rank, well-conditioned data assumptions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssumptionReport {
    pub fro_sq_over_n: f64,
    pub cond_ratio: f64,
    pub inv_sigma_r: f64,
    pub rank_gap_ok: bool,
    pub noise_model: String,
}

pub fn validate_assumptions(inst: &ProblemInstance) -> AssumptionReport {
    let fro: f64 = inst.sigma_trn.iter().map(|s| s * s).sum();
    let hi = inst.sigma_trn.iter().cloned().fold(0.0, f64::max);
    let lo = inst.sigma_trn.iter().cloned().fold(f64::INFINITY, f64::min);
    AssumptionReport {
        fro_sq_over_n: fro / inst.n as f64,
        cond_ratio: hi / lo,
        inv_sigma_r: 1.0 / lo,
        rank_gap_ok: inst.rank_gap_ok(),
        noise_model: "iid gaussian, entry variance eta^2/d".into(),
    }
}
