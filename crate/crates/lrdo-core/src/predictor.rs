// SPDX-License-Identifier: Apache-2.0

//! Closed-form test-error predictions and bounds.
//!
//! All in-subspace formulas depend on the instance only through `σ`, the
//! `r × r` Gram `B = β_U β_Uᵀ` and the test second moment `M = L Lᵀ / N_tst`,
//! so they are evaluated in that reduced form.

use serde::{Deserialize, Serialize};

use crate::datagen::{ProblemInstance, Target};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::mp::{self, Regime, TValues};

/// Closed forms are rejected when `|c − 1|` is below this.
pub const AT_PEAK_TOL: f64 = 1e-9;

/// Bias/variance split of a predicted risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub bias: f64,
    pub variance: f64,
    pub total: f64,
    pub regime: Regime,
    /// Order of the neglected remainder.
    pub deviation_note: String,
}

impl RiskBreakdown {
    fn new(bias: f64, variance: f64, regime: Regime) -> Self {
        let deviation_note = match regime {
            Regime::Under => "o(1/N)".to_string(),
            Regime::Over => "O(|Sigma_trn|^2/N^2) + o(1/N)".to_string(),
        };
        Self { bias, variance, total: bias + variance, regime, deviation_note }
    }
}

fn check_c(c: f64) -> Result<Regime> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Domain(format!("c must be positive, got {c}")));
    }
    if (c - 1.0).abs() < AT_PEAK_TOL {
        return Err(Error::AtPeak(c));
    }
    Ok(Regime::of(c))
}

fn check_instance(inst: &ProblemInstance) -> Result<Regime> {
    if !inst.rank_gap_ok() {
        return Err(Error::RankGapViolation { r: inst.r, d: inst.d, n: inst.n });
    }
    if !(inst.eta_trn > 0.0) {
        return Err(Error::Domain("training noise level must be positive".into()));
    }
    check_c(inst.c())
}

/// Reduced description of an instance and a test second moment.
#[derive(Debug, Clone)]
pub struct Reduced {
    pub sigma: Vec<f64>,
    /// `β_U β_Uᵀ`.
    pub b: Matrix,
    /// `L Lᵀ / N_tst` (or `Σ + μμᵀ` for a test distribution).
    pub m: Matrix,
    pub c: f64,
    pub d: usize,
    pub eta_tst: f64,
}

impl Reduced {
    pub fn new(inst: &ProblemInstance, m: Matrix) -> Result<Self> {
        if m.shape() != (inst.r, inst.r) {
            return Err(Error::ShapeMismatch(format!("second moment must be {0}x{0}", inst.r)));
        }
        let bu = inst.beta_u();
        Ok(Self {
            sigma: inst.sigma_trn.clone(),
            b: &bu * bu.transpose(),
            m,
            c: inst.c(),
            d: inst.d,
            eta_tst: inst.eta_tst,
        })
    }

    pub fn from_l(inst: &ProblemInstance, l: &Matrix) -> Result<Self> {
        check_l(inst, l)?;
        let m = l * l.transpose() / l.ncols() as f64;
        Self::new(inst, m)
    }

    /// `Σ_ij D_i D_j B_ij M_ij`, i.e. `‖β_Uᵀ D L‖² / N_tst` with `D` diagonal.
    fn weighted(&self, dv: &[f64]) -> f64 {
        let r = dv.len();
        let mut s = 0.0;
        for j in 0..r {
            for i in 0..r {
                s += dv[i] * dv[j] * self.b[(i, j)] * self.m[(i, j)];
            }
        }
        s
    }

    /// Risk of the minimum-norm solution at training noise `eta`.
    pub fn risk(&self, eta: f64) -> Result<RiskBreakdown> {
        let regime = check_c(self.c)?;
        if !(eta > 0.0) {
            return Err(Error::Domain("training noise level must be positive".into()));
        }
        let c = self.c;
        let e2 = eta * eta;
        let pre = self.eta_tst * self.eta_tst / self.d as f64;
        let (dv, var) = match regime {
            Regime::Under => {
                let dv: Vec<f64> = self.sigma.iter().map(|s| 1.0 / (c * s * s + e2)).collect();
                let tr: f64 = self
                    .sigma
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let s2 = s * s;
                        self.b[(i, i)] * s2 * (s2 + e2) * dv[i] * dv[i]
                    })
                    .sum();
                (dv, pre * c * c / (1.0 - c) * tr)
            }
            Regime::Over => {
                let dv: Vec<f64> = self.sigma.iter().map(|s| 1.0 / (s * s + e2)).collect();
                let tr: f64 = self
                    .sigma
                    .iter()
                    .enumerate()
                    .map(|(i, s)| self.b[(i, i)] * s * s * dv[i])
                    .sum();
                (dv, pre * c / (c - 1.0) * tr)
            }
        };
        let bias = e2 * e2 * self.weighted(&dv);
        Ok(RiskBreakdown::new(bias, var, regime))
    }

    /// Diagonal of the bias resolvent at noise `eta`.
    pub fn resolvent_diag(&self, eta: f64) -> Vec<f64> {
        let e2 = eta * eta;
        match Regime::of(self.c) {
            Regime::Under => self.sigma.iter().map(|s| 1.0 / (self.c * s * s + e2)).collect(),
            Regime::Over => self.sigma.iter().map(|s| 1.0 / (s * s + e2)).collect(),
        }
    }
}

fn check_l(inst: &ProblemInstance, l: &Matrix) -> Result<()> {
    if l.nrows() != inst.r || l.ncols() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "L is {}x{}, need {} rows and at least one column",
            l.nrows(),
            l.ncols(),
            inst.r
        )));
    }
    linalg::ensure_finite(l)
}

/// In-subspace test error of the minimum-norm solution for test inputs `U L`.
pub fn predict_main(inst: &ProblemInstance, l: &Matrix) -> Result<RiskBreakdown> {
    check_instance(inst)?;
    Reduced::from_l(inst, l)?.risk(inst.eta_trn)
}

/// [`predict_main`] with `L = u_align · diag(sigma_tst)`.
pub fn predict_aligned(inst: &ProblemInstance, sigma_tst: &[f64], u_align: &Matrix) -> Result<RiskBreakdown> {
    if u_align.ncols() != sigma_tst.len() {
        return Err(Error::ShapeMismatch(format!(
            "alignment has {} columns, {} test singular values given",
            u_align.ncols(),
            sigma_tst.len()
        )));
    }
    let l = u_align * linalg::diag(sigma_tst);
    predict_main(inst, &l)
}

/// Coefficient multiplying `(2/N_tst) Tr(β_Uᵀ D L Lᵀ (β_tst,U − β_U))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossCoefficient {
    /// `+η_trn²`, the value that follows from expanding the residual.
    #[default]
    PlusTrainNoise,
    /// `−η_tst²`.
    MinusTestNoise,
}

impl CrossCoefficient {
    pub fn value(&self, eta_trn: f64, eta_tst: f64) -> f64 {
        match self {
            CrossCoefficient::PlusTrainNoise => eta_trn * eta_trn,
            CrossCoefficient::MinusTestNoise => -eta_tst * eta_tst,
        }
    }
}

/// Transfer prediction: the in-subspace terms plus target-shift terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRisk {
    pub base: RiskBreakdown,
    /// `‖(β_tst,U − β_U)ᵀ L‖² / N_tst`.
    pub shift: f64,
    pub cross: f64,
    pub total: f64,
    pub coefficient: CrossCoefficient,
}

pub fn predict_transfer(
    inst: &ProblemInstance,
    l: &Matrix,
    beta_tst: &Target,
    coefficient: CrossCoefficient,
) -> Result<TransferRisk> {
    let base = predict_main(inst, l)?;
    beta_tst_check(inst, beta_tst)?;
    let bu = inst.beta_u();
    let delta = beta_tst.project(&inst.u) - &bu;
    let nt = l.ncols() as f64;
    let dl = Reduced::from_l(inst, l)?.resolvent_diag(inst.eta_trn);
    let dt_l = delta.transpose() * l;
    let shift = dt_l.norm_squared() / nt;
    let mut bd_l = bu.transpose() * linalg::diag(&dl);
    bd_l *= l;
    let inner = bd_l.dot(&dt_l);
    let cross = coefficient.value(inst.eta_trn, inst.eta_tst) * 2.0 / nt * inner;
    let total = base.total + shift + cross;
    Ok(TransferRisk { base, shift, cross, total, coefficient })
}

fn beta_tst_check(inst: &ProblemInstance, beta_tst: &Target) -> Result<()> {
    if beta_tst.out_dim(inst.d) != inst.beta.out_dim(inst.d) {
        return Err(Error::ShapeMismatch("beta_tst and beta differ in output dimension".into()));
    }
    if let Target::Matrix(b) = beta_tst {
        if b.nrows() != inst.d {
            return Err(Error::ShapeMismatch(format!("beta_tst has {} rows, need {}", b.nrows(), inst.d)));
        }
    }
    Ok(())
}

/// `W* = β_Uᵀ diag(σ²/(σ² + η²/c)) Uᵀ`, kept in factored form.
#[derive(Debug, Clone)]
pub struct WStar {
    /// `k × r` coefficient `β_Uᵀ diag(f)`.
    pub coeff: Matrix,
    /// `d × r` basis.
    pub u: Matrix,
    /// Shrinkage factors `σ²/(σ² + η²/c)`.
    pub shrink: Vec<f64>,
}

impl WStar {
    pub fn to_matrix(&self) -> Matrix {
        &self.coeff * self.u.transpose()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        &self.coeff * (self.u.transpose() * x)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.coeff.norm_squared()
    }
}

/// The minimizer of the noise-averaged training loss and its test error.
pub fn predict_wstar(inst: &ProblemInstance, l: &Matrix) -> Result<(WStar, RiskBreakdown)> {
    check_l(inst, l)?;
    let c = inst.c();
    let mu2 = inst.eta_trn * inst.eta_trn / c;
    let shrink: Vec<f64> = inst.sigma_trn.iter().map(|s| s * s / (s * s + mu2)).collect();
    let bu = inst.beta_u();
    let coeff = bu.transpose() * linalg::diag(&shrink);
    let red = Reduced::from_l(inst, l)?;
    let resid: Vec<f64> = inst.sigma_trn.iter().map(|s| mu2 / (s * s + mu2)).collect();
    let bias = red.weighted(&resid);
    let var: f64 = shrink.iter().enumerate().map(|(i, f)| red.b[(i, i)] * f * f).sum::<f64>() * inst.eta_tst * inst.eta_tst
        / inst.d as f64;
    let regime = Regime::of(c);
    let mut rb = RiskBreakdown::new(bias, var, regime);
    rb.deviation_note = "exact".into();
    Ok((WStar { coeff, u: inst.u.clone(), shrink }, rb))
}

/// How fast `‖Σ_trn‖_F²` grows with `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaGrowth {
    SubLinear,
    Linear,
}

/// Limiting relative excess error of the minimum-norm solution over `W*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RelativeExcess {
    Value { value: f64 },
    /// Lower end known, upper end shifted by an unknown constant.
    Interval { lo: f64, hi: Option<f64> },
}

pub fn relative_excess(c: f64, growth: SigmaGrowth) -> Result<RelativeExcess> {
    match check_c(c)? {
        Regime::Under => Ok(RelativeExcess::Value { value: c / (1.0 - c) }),
        Regime::Over => match growth {
            SigmaGrowth::SubLinear => Ok(RelativeExcess::Value { value: 1.0 / (c - 1.0) }),
            SigmaGrowth::Linear => Ok(RelativeExcess::Interval { lo: 1.0 / (c - 1.0), hi: None }),
        },
    }
}

/// Which bound a [`BoundValue`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    DistShift,
    TestSetShift,
    OutOfSubspace,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    pub kind: BoundKind,
    pub deviation_note: Option<String>,
}

fn shift_factor(inst: &ProblemInstance) -> Result<f64> {
    let c = inst.c();
    let f = if c < 1.0 { c } else { 1.0 };
    let s_r = inst.sigma_trn.iter().cloned().fold(f64::INFINITY, f64::min);
    let b1 = inst.beta.spectral_norm()?;
    let e2 = inst.eta_trn * inst.eta_trn;
    Ok(b1 * b1 * e2 * e2 * inst.r as f64 / (s_r * s_r * f + e2).powi(2))
}

fn over_note(inst: &ProblemInstance) -> Option<String> {
    (inst.c() >= 1.0).then(|| "plus O(|Sigma_trn|_F^2/N^2)".to_string())
}

/// Bound on the change in expected risk between two test distributions.
pub fn bound_dist_shift(inst: &ProblemInstance, dist1: (&[f64], &Matrix), dist2: (&[f64], &Matrix)) -> Result<BoundValue> {
    let r = inst.r;
    let mut diff = Matrix::zeros(r, r);
    for (sign, (mu, cov)) in [(-1.0, dist1), (1.0, dist2)] {
        if mu.len() != r || cov.shape() != (r, r) {
            return Err(Error::ShapeMismatch(format!("distribution must have dimension r = {r}")));
        }
        linalg::check_psd(cov, 1e-10)?;
        let m = nalgebra::DVector::from_column_slice(mu);
        diff += (cov + &m * m.transpose()) * sign;
    }
    Ok(BoundValue { value: shift_factor(inst)? * diff.norm(), kind: BoundKind::DistShift, deviation_note: over_note(inst) })
}

/// Bound on the change in risk between two in-subspace test sets.
pub fn bound_test_set_shift(inst: &ProblemInstance, l1: &Matrix, l2: &Matrix) -> Result<BoundValue> {
    check_l(inst, l1)?;
    check_l(inst, l2)?;
    if l1.ncols() != l2.ncols() {
        return Err(Error::ShapeMismatch(format!("test sets have {} and {} columns", l1.ncols(), l2.ncols())));
    }
    let diff = l2 * l2.transpose() - l1 * l1.transpose();
    let value = shift_factor(inst)? / l1.ncols() as f64 * diff.norm();
    Ok(BoundValue { value, kind: BoundKind::TestSetShift, deviation_note: over_note(inst) })
}

/// Out-of-subspace bound in both scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutOfSubspaceBound {
    /// `σ₁(I − W)`.
    pub sigma1: f64,
    pub alpha: f64,
    /// `α² σ₁(I − W)²`.
    pub squared: f64,
}

impl OutOfSubspaceBound {
    pub fn from_sigma1(sigma1: f64, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Domain(format!("alpha must be non-negative, got {alpha}")));
        }
        Ok(Self { sigma1, alpha, squared: alpha * alpha * sigma1 * sigma1 })
    }

    /// `[√R(UL), √R(UL) + α σ₁]`.
    pub fn envelope(&self, risk_in_subspace: f64) -> (f64, f64) {
        let root = risk_in_subspace.max(0.0).sqrt();
        (root, root + self.alpha * self.sigma1)
    }

    pub fn value(&self) -> BoundValue {
        BoundValue { value: self.squared, kind: BoundKind::OutOfSubspace, deviation_note: None }
    }
}

/// Out-of-subspace bound for an explicit `d × d` map `W`.
pub fn bound_out_of_subspace(w: &Matrix, alpha: f64) -> Result<OutOfSubspaceBound> {
    if w.nrows() != w.ncols() {
        return Err(Error::ShapeMismatch(format!("W must be square, got {}x{}", w.nrows(), w.ncols())));
    }
    let resid = Matrix::identity(w.nrows(), w.ncols()) - w;
    OutOfSubspaceBound::from_sigma1(linalg::spectral_norm(&resid)?, alpha)
}

/// Sum of the out-of-subspace terms for two test sets and the test-set-shift term.
pub fn bound_combined(
    inst: &ProblemInstance,
    sigma1: f64,
    alpha1: f64,
    alpha2: f64,
    l1: &Matrix,
    l2: &Matrix,
) -> Result<BoundValue> {
    let a = OutOfSubspaceBound::from_sigma1(sigma1, alpha1)?;
    let b = OutOfSubspaceBound::from_sigma1(sigma1, alpha2)?;
    let t = bound_test_set_shift(inst, l1, l2)?;
    Ok(BoundValue { value: a.squared + b.squared + t.value, kind: BoundKind::Combined, deviation_note: t.deviation_note })
}

/// Expected risk when test columns are IID with mean `mu` and covariance `cov`.
pub fn predict_gen_error(inst: &ProblemInstance, mu: &[f64], cov: &Matrix) -> Result<RiskBreakdown> {
    check_instance(inst)?;
    if mu.len() != inst.r || cov.shape() != (inst.r, inst.r) {
        return Err(Error::ShapeMismatch(format!("distribution must have dimension r = {}", inst.r)));
    }
    let m = nalgebra::DVector::from_column_slice(mu);
    let second = cov + &m * m.transpose();
    let root = linalg::psd_sqrt(&second, 1e-10)?;
    Reduced::new(inst, &root * &root)?.risk(inst.eta_trn)
}

/// Prediction for isotropic Gaussian training coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IidPrediction {
    pub risk: RiskBreakdown,
    /// `T` values at the argument used by the bias and variance terms.
    pub t: TValues,
    /// Argument `z` of the `T` functions.
    pub z: f64,
}

fn iid_parts(d: usize, n: usize, r: usize, eta_trn: f64, eta_tst: f64) -> Result<(Regime, f64, TValues, f64, f64)> {
    if d == 0 || n == 0 || r == 0 {
        return Err(Error::Domain("dimensions must be positive".into()));
    }
    let c = d as f64 / n as f64;
    let c_r = r as f64 / n as f64;
    let regime = check_c(c)?;
    if !(eta_trn > 0.0) {
        return Err(Error::Domain("training noise level must be positive".into()));
    }
    let e2 = eta_trn * eta_trn;
    let z = match regime {
        Regime::Under => e2 / c,
        Regime::Over => e2,
    };
    let t = mp::t_functions(c_r, z)?;
    let pre = eta_tst * eta_tst * c_r / c;
    let variance = match regime {
        Regime::Under => pre / (1.0 - c) * (t.t1() + e2 * t.t2()),
        Regime::Over => pre * c / (c - 1.0) * t.t3(),
    };
    let bias_scale = match regime {
        Regime::Under => e2 * e2 / (c * c) * t.t4(),
        Regime::Over => e2 * e2 * t.t4(),
    };
    Ok((regime, z, t, variance, bias_scale))
}

/// Expected risk over training coefficients with IID entries of variance
/// `1/r`, for fixed test coordinates `L`.
pub fn predict_iid_train(d: usize, n: usize, r: usize, eta_trn: f64, eta_tst: f64, l: &Matrix) -> Result<IidPrediction> {
    if l.nrows() != r || l.ncols() == 0 {
        return Err(Error::ShapeMismatch(format!("L must have r = {r} rows")));
    }
    let (regime, z, t, variance, bias_scale) = iid_parts(d, n, r, eta_trn, eta_tst)?;
    let bias = bias_scale * l.norm_squared() / l.ncols() as f64;
    Ok(IidPrediction { risk: RiskBreakdown::new(bias, variance, regime), t, z })
}

/// Expected risk when test columns are also IID with covariance `κ I_r`.
pub fn predict_iid_both(d: usize, n: usize, r: usize, eta_trn: f64, eta_tst: f64, kappa: f64) -> Result<IidPrediction> {
    if !(kappa >= 0.0) {
        return Err(Error::Domain(format!("kappa must be non-negative, got {kappa}")));
    }
    let (regime, z, t, variance, bias_scale) = iid_parts(d, n, r, eta_trn, eta_tst)?;
    let bias = bias_scale * r as f64 * kappa;
    Ok(IidPrediction { risk: RiskBreakdown::new(bias, variance, regime), t, z })
}

/// Linear grid of training noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaGrid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Default for EtaGrid {
    fn default() -> Self {
        Self { lo: 1.0 / 3.5, hi: 100.0, count: 2000 }
    }
}

impl EtaGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.lo > 0.0 && self.lo < self.hi && self.hi.is_finite()) || self.count < 2 {
            return Err(Error::Domain(format!("invalid eta grid {self:?}")));
        }
        let step = (self.hi - self.lo) / (self.count - 1) as f64;
        Ok((0..self.count).map(|i| if i + 1 == self.count { self.hi } else { self.lo + step * i as f64 }).collect())
    }
}

/// Grid minimizer of the predicted total risk; ties go to the smaller `η`.
pub fn optimal_eta(inst: &ProblemInstance, l: &Matrix, grid: EtaGrid) -> Result<(f64, f64)> {
    check_instance(inst)?;
    let red = Reduced::from_l(inst, l)?;
    let mut best = (f64::NAN, f64::INFINITY);
    for eta in grid.values()? {
        let risk = red.risk(eta)?.total;
        if risk < best.1 {
            best = (eta, risk);
        }
    }
    Ok(best)
}
