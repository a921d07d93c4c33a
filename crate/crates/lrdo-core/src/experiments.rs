// SPDX-License-Identifier: Apache-2.0

//! Experiment drivers: aspect-ratio sweeps, peak detection, augmentation,
//! out-of-subspace perturbation, optimal-noise curves, IID instantiations and
//! classification.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, ProblemInstance, Target, TestSpec};
use crate::empirics::{self, Accuracy, EmpiricalRisk, TrialPlan};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::predictor::{self, EtaGrid, RiskBreakdown};
use crate::rng::{self, derive_seed, Purpose};

/// How training singular values depend on `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SigmaSpec {
    /// Every `σ_i = scale·√N`.
    SqrtN { scale: f64 },
    /// `σ_i` evenly spaced from `hi·√N` down to `lo·√N`.
    LinspaceSqrtN { hi: f64, lo: f64 },
    /// `‖Σ‖_F² = scale·N^exponent`, spread equally.
    Power { scale: f64, exponent: f64 },
    /// The same values at every `N`.
    Fixed { values: Vec<f64> },
}

impl SigmaSpec {
    pub fn values(&self, n: usize, r: usize) -> Result<Vec<f64>> {
        let sn = (n as f64).sqrt();
        let v = match self {
            SigmaSpec::SqrtN { scale } => vec![scale * sn; r],
            SigmaSpec::LinspaceSqrtN { hi, lo } => {
                if r == 1 {
                    vec![hi * sn]
                } else {
                    (0..r).map(|i| (hi + (lo - hi) * i as f64 / (r - 1) as f64) * sn).collect()
                }
            }
            SigmaSpec::Power { scale, exponent } => {
                vec![(scale * (n as f64).powf(*exponent) / r as f64).sqrt(); r]
            }
            SigmaSpec::Fixed { values } => {
                if values.len() != r {
                    return Err(Error::ShapeMismatch(format!("{} fixed singular values for r = {r}", values.len())));
                }
                values.clone()
            }
        };
        if v.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain(format!("singular values must be positive, got {v:?}")));
        }
        Ok(v)
    }
}

/// Everything needed to build the instance of one sweep cell.
#[derive(Debug, Clone)]
pub struct InstanceTemplate {
    pub n_tst: usize,
    pub sigma: SigmaSpec,
    pub beta: Target,
    pub eta_trn: f64,
    pub eta_tst: f64,
    pub seed: u64,
}

impl InstanceTemplate {
    pub fn instantiate(&self, d: usize, n: usize, r: usize) -> Result<ProblemInstance> {
        let sigma = self.sigma.values(n, r)?;
        ProblemInstance::synthetic(d, n, self.n_tst, sigma, self.beta.clone(), self.eta_trn, self.eta_tst, self.seed)
    }
}

/// In-subspace test coordinates for each sweep cell.
#[derive(Debug, Clone)]
pub enum TestTemplate {
    /// `L` with IID `N(0, scale²)` entries, shared by all cells with the same `r`.
    Gaussian { scale: f64 },
    Fixed(Matrix),
}

impl TestTemplate {
    pub fn coordinates(&self, r: usize, n_tst: usize, seed: u64) -> Result<Matrix> {
        match self {
            TestTemplate::Gaussian { scale } => {
                Ok(rng::gaussian_matrix(r, n_tst, derive_seed(seed, Purpose::TestData, r as u64), *scale))
            }
            TestTemplate::Fixed(l) if l.nrows() == r => Ok(l.clone()),
            TestTemplate::Fixed(l) => Err(Error::ShapeMismatch(format!("fixed L has {} rows, cell has r = {r}", l.nrows()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub d: usize,
    pub n_values: Vec<usize>,
    pub r_values: Vec<usize>,
}

impl SweepGrid {
    pub fn check(&self) -> Result<()> {
        if self.d == 0 || self.n_values.is_empty() || self.r_values.is_empty() {
            return Err(Error::BadDimensions("grid needs d > 0 and non-empty n and r lists".into()));
        }
        if self.n_values.windows(2).any(|w| w[0] >= w[1]) || self.n_values[0] == 0 {
            return Err(Error::BadDimensions("n values must be positive and strictly increasing".into()));
        }
        if self.r_values.contains(&0) {
            return Err(Error::BadDimensions("r values must be positive".into()));
        }
        Ok(())
    }

    /// Cells in emission order: `r` outer, `n` inner.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.r_values.iter().flat_map(|&r| self.n_values.iter().map(move |&n| (n, r))).collect()
    }

    /// Why a cell is not evaluated, if it is not.
    pub fn skip_reason(&self, n: usize, r: usize) -> Option<String> {
        (r >= self.d.abs_diff(n)).then(|| format!("r = {r} >= |d - N| = {}", self.d.abs_diff(n)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum RowStatus {
    Ok,
    Skipped(String),
    Failed(String),
}

/// Theory and simulation for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub c: f64,
    pub r: usize,
    pub theory: Option<RiskBreakdown>,
    pub empirical: Option<EmpiricalRisk>,
    pub rel_dev: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Accuracy>,
    pub status: RowStatus,
}

impl SweepRow {
    fn skipped(n: usize, d: usize, r: usize, why: String) -> Self {
        Self {
            n,
            c: d as f64 / n as f64,
            r,
            theory: None,
            empirical: None,
            rel_dev: None,
            accuracy: None,
            status: RowStatus::Skipped(why),
        }
    }

    fn failed(n: usize, d: usize, r: usize, e: &Error) -> Self {
        Self { status: RowStatus::Failed(e.to_string()), ..Self::skipped(n, d, r, String::new()) }
    }

    fn evaluated(n: usize, d: usize, r: usize, theory: RiskBreakdown, empirical: EmpiricalRisk) -> Self {
        let rel_dev = relative_deviation(empirical.mean, theory.total);
        Self {
            n,
            c: d as f64 / n as f64,
            r,
            theory: Some(theory),
            empirical: Some(empirical),
            rel_dev,
            accuracy: None,
            status: RowStatus::Ok,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RowStatus::Ok
    }
}

/// `|emp − theory| / theory`, undefined for a zero prediction.
pub fn relative_deviation(emp: f64, theory: f64) -> Option<f64> {
    (theory > 0.0).then(|| (emp - theory).abs() / theory)
}

/// Evaluates theory and Monte Carlo on every grid cell, in grid order.
pub fn sweep(template: &InstanceTemplate, test: &TestTemplate, grid: &SweepGrid, plan: &TrialPlan) -> Result<Vec<SweepRow>> {
    grid.check()?;
    plan.check()?;
    let d = grid.d;
    let rows = grid
        .cells()
        .into_par_iter()
        .map(|(n, r)| {
            if let Some(why) = grid.skip_reason(n, r) {
                return SweepRow::skipped(n, d, r, why);
            }
            let cell = || -> Result<SweepRow> {
                let inst = template.instantiate(d, n, r)?;
                let l = test.coordinates(r, template.n_tst, template.seed)?;
                let theory = predictor::predict_main(&inst, &l)?;
                let emp = empirics::run_risk(&inst, &TestSpec::in_subspace(l), plan)?;
                Ok(SweepRow::evaluated(n, d, r, theory, emp))
            };
            cell().unwrap_or_else(|e| SweepRow::failed(n, d, r, &e))
        })
        .collect();
    Ok(rows)
}

/// Interior maximum of a curve sampled against `1/c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub found: bool,
    pub c_star: Option<f64>,
    pub value: Option<f64>,
    /// Whether `c*` lies in `(0.8, 1.25)`.
    pub in_window: bool,
}

pub const PEAK_WINDOW: (f64, f64) = (0.8, 1.25);

/// Finds the highest interior local maximum of `value` against `1/c`.
pub fn detect_peak(points: &[(f64, f64)]) -> Result<PeakReport> {
    if points.len() < 5 {
        return Err(Error::InsufficientPoints { needed: 5, got: points.len() });
    }
    if !(points.iter().any(|p| p.0 < 1.0) && points.iter().any(|p| p.0 > 1.0)) {
        return Err(Error::InsufficientSpan("points must include c < 1 and c > 1".into()));
    }
    let mut pts: Vec<(f64, f64)> = points.iter().map(|&(c, v)| (1.0 / c, v)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for i in 1..pts.len() - 1 {
        let (x, y) = pts[i];
        if y > pts[i - 1].1 && y >= pts[i + 1].1 && best.map_or(true, |b| y > b.1) {
            best = Some((1.0 / x, y));
        }
    }
    Ok(match best {
        Some((c, v)) => PeakReport {
            found: true,
            c_star: Some(c),
            value: Some(v),
            in_window: c > PEAK_WINDOW.0 && c < PEAK_WINDOW.1,
        },
        None => PeakReport { found: false, c_star: None, value: None, in_window: false },
    })
}

/// Peak of the empirical risk over the evaluated rows of a sweep.
pub fn detect_double_descent(rows: &[SweepRow]) -> Result<PeakReport> {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.empirical.as_ref().map(|e| (r.c, e.mean))).collect();
    detect_peak(&pts)
}

/// Peak of the predicted risk over the evaluated rows of a sweep.
pub fn detect_theory_peak(rows: &[SweepRow]) -> Result<PeakReport> {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.theory.as_ref().map(|t| (r.c, t.total))).collect();
    detect_peak(&pts)
}

/// `m` side-by-side copies of `x`.
pub fn tile_columns(x: &Matrix, m: usize) -> Matrix {
    let n = x.ncols();
    let mut out = Matrix::zeros(x.nrows(), n * m);
    for k in 0..m {
        out.columns_mut(k * n, n).copy_from(x);
    }
    out
}

/// Power of `m` applied to the singular values when modeling `m` copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentScaling {
    /// `σ ↦ √m σ`.
    SqrtM,
    /// `σ ↦ m σ`.
    M,
}

/// Instance describing `m` copies of the base training data.
pub fn augmented_instance(base: &ProblemInstance, m: usize, scaling: AugmentScaling) -> Result<ProblemInstance> {
    if m == 0 {
        return Err(Error::Domain("multiplier must be at least 1".into()));
    }
    let f = match scaling {
        AugmentScaling::SqrtM => (m as f64).sqrt(),
        AugmentScaling::M => m as f64,
    };
    let v = tile_columns(&base.v_trn.transpose(), m).transpose() / (m as f64).sqrt();
    let sigma = base.sigma_trn.iter().map(|s| s * f).collect();
    ProblemInstance::new(base.u.clone(), sigma, v, base.beta.clone(), base.eta_trn, base.eta_tst, base.n_tst)
}

/// Trains on `m` copies of the base data with fresh noise on every copy.
///
/// The simulation works from the literal tiled matrix; the prediction uses
/// the base factors with rescaled singular values.
pub fn augment_fresh_noise(
    base: &ProblemInstance,
    m: usize,
    l: &Matrix,
    scaling: AugmentScaling,
    plan: &TrialPlan,
) -> Result<SweepRow> {
    let model = augmented_instance(base, m, scaling)?;
    let theory = predictor::predict_main(&model, l)?;
    let tiled = tile_columns(&base.x_trn(), m);
    let sim = ProblemInstance::from_training(&tiled, base.r, base.beta.clone(), base.eta_trn, base.eta_tst, l.ncols())?;
    let spec = TestSpec::raw(&base.u * l, None);
    let emp = empirics::run_risk(&sim, &spec, plan)?;
    Ok(SweepRow::evaluated(model.n, model.d, model.r, theory, emp))
}

/// Result of training on the union of two datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    pub rank_a: usize,
    pub rank_b: usize,
    pub rank_union: usize,
    pub r_used: usize,
    /// One row per named test set.
    pub rows: Vec<(String, SweepRow)>,
}

/// Concatenates two `d × N` datasets, projects onto the top principal
/// directions and evaluates each test set on the mixed model.
#[allow(clippy::too_many_arguments)]
pub fn augment_mix(
    xa: &Matrix,
    xb: &Matrix,
    r: Option<usize>,
    tests: &[(String, Matrix)],
    beta: Target,
    eta_trn: f64,
    eta_tst: f64,
    plan: &TrialPlan,
) -> Result<MixReport> {
    if xa.nrows() != xb.nrows() {
        return Err(Error::DimensionMismatch(format!("datasets have {} and {} rows", xa.nrows(), xb.nrows())));
    }
    let d = xa.nrows();
    let mut x = Matrix::zeros(d, xa.ncols() + xb.ncols());
    x.columns_mut(0, xa.ncols()).copy_from(xa);
    x.columns_mut(xa.ncols(), xb.ncols()).copy_from(xb);
    let rank = |m: &Matrix| linalg::svd(m, 1e-10).map(|f| f.rank());
    let (rank_a, rank_b, rank_union) = (rank(xa)?, rank(xb)?, rank(&x)?);
    let r_used = r.unwrap_or(rank_union);
    let frag = datagen::pcr(&x, r_used, false)?;
    let u = frag.u.clone();
    let mut rows = Vec::new();
    for (name, x_tst) in tests {
        if x_tst.nrows() != d {
            return Err(Error::DimensionMismatch(format!("test set `{name}` has {} rows, need {d}", x_tst.nrows())));
        }
        let inst = frag.clone().into_instance(beta.clone(), eta_trn, eta_tst, x_tst.ncols())?;
        let l = u.transpose() * x_tst;
        let theory = predictor::predict_main(&inst, &l)?;
        let emp = empirics::run_risk(&inst, &TestSpec::in_subspace(l), plan)?;
        rows.push((name.clone(), SweepRow::evaluated(inst.n, d, r_used, theory, emp)));
    }
    Ok(MixReport { rank_a, rank_b, rank_union, r_used, rows })
}

/// Perturbed-test-set result against the out-of-subspace envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub n: usize,
    pub c: f64,
    pub alpha: f64,
    pub sqrt_risk: f64,
    /// `√R(UL)` from the closed form.
    pub lower: f64,
    /// `√R(UL) + α·mean σ₁(I − W)`.
    pub upper: f64,
    pub sigma1_mean: f64,
    /// Whether the 3-SE interval of the simulated risk meets the envelope.
    pub inside: bool,
    /// The lower end is conjectured rather than proven once `α > 0`.
    pub lower_is_conjectural: bool,
    pub violations: usize,
    pub empirical: EmpiricalRisk,
}

/// Adds a Gaussian perturbation of Frobenius norm exactly `alpha` to `U L`.
pub fn perturb_out_of_subspace(inst: &ProblemInstance, l: &Matrix, alpha: f64, plan: &TrialPlan) -> Result<EnvelopeRow> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be non-negative, got {alpha}")));
    }
    if inst.beta.out_dim(inst.d) != inst.d {
        return Err(Error::ShapeMismatch("out-of-subspace bound needs a square map".into()));
    }
    let theory = predictor::predict_main(inst, l)?;
    let mut k = rng::gaussian_matrix(inst.d, l.ncols(), derive_seed(plan.master_seed, Purpose::Perturbation, 0), 1.0);
    let kn = k.norm();
    if alpha == 0.0 || kn == 0.0 {
        k.fill(0.0);
    } else {
        k *= alpha / kn;
    }
    let x_tst = &inst.u * l + k;
    let emp = empirics::run_risk(inst, &TestSpec::raw(x_tst, Some(l.clone())), plan)?;
    let oos = emp.out_of_subspace.expect("companion given");
    let lower = theory.total.sqrt();
    let upper = lower + alpha * oos.sigma1_mean;
    let se = emp.std_err.unwrap_or(0.0);
    let lo_emp = (emp.mean - 3.0 * se).max(0.0).sqrt();
    let hi_emp = (emp.mean + 3.0 * se).sqrt();
    Ok(EnvelopeRow {
        n: inst.n,
        c: inst.c(),
        alpha,
        sqrt_risk: emp.mean.sqrt(),
        lower,
        upper,
        sigma1_mean: oos.sigma1_mean,
        inside: hi_emp >= lower && lo_emp <= upper,
        lower_is_conjectural: alpha > 0.0,
        violations: oos.violations,
        empirical: emp,
    })
}

/// Grid-optimal training noise for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptEtaRow {
    pub n: usize,
    pub c: f64,
    pub r: usize,
    pub eta_star: Option<f64>,
    pub risk_star: Option<f64>,
    pub status: RowStatus,
}

pub fn optimal_eta_curve(
    template: &InstanceTemplate,
    test: &TestTemplate,
    grid: &SweepGrid,
    eta_grid: EtaGrid,
) -> Result<Vec<OptEtaRow>> {
    grid.check()?;
    eta_grid.values()?;
    let d = grid.d;
    Ok(grid
        .cells()
        .into_par_iter()
        .map(|(n, r)| {
            let c = d as f64 / n as f64;
            let base = OptEtaRow { n, c, r, eta_star: None, risk_star: None, status: RowStatus::Ok };
            if let Some(why) = grid.skip_reason(n, r) {
                return OptEtaRow { status: RowStatus::Skipped(why), ..base };
            }
            let cell = || -> Result<(f64, f64)> {
                let inst = template.instantiate(d, n, r)?;
                let l = test.coordinates(r, template.n_tst, template.seed)?;
                predictor::optimal_eta(&inst, &l, eta_grid)
            };
            match cell() {
                Ok((e, risk)) => OptEtaRow { eta_star: Some(e), risk_star: Some(risk), ..base },
                Err(e) => OptEtaRow { status: RowStatus::Failed(e.to_string()), ..base },
            }
        })
        .collect())
}

/// Simulation over fresh draws of both noise and `extra` randomness per trial.
fn resampled_trials(
    plan: &TrialPlan,
    draw: impl Fn(usize, &TrialPlan) -> Result<EmpiricalRisk> + Sync + Send,
) -> Result<EmpiricalRisk> {
    plan.check()?;
    let (runs, failed) = empirics::run_trials(plan.trials, |t| {
        let sub = TrialPlan {
            trials: 1,
            master_seed: derive_seed(plan.master_seed, Purpose::Coefficients, t as u64),
            integrate_test_noise: plan.integrate_test_noise,
            noise_keys: None,
        };
        draw(t, &sub)
    })?;
    let mut pooled = empirics::pool(&runs)?;
    pooled.failed += failed;
    Ok(pooled)
}

/// Gaussian-coefficient training data: theory against simulation that
/// redraws the coefficients `C` (entries `N(0, 1/r)`) in every trial.
#[allow(clippy::too_many_arguments)]
pub fn run_iid_train(
    d: usize,
    n: usize,
    eta_trn: f64,
    eta_tst: f64,
    l: &Matrix,
    plan: &TrialPlan,
    seed: u64,
) -> Result<(SweepRow, predictor::IidPrediction)> {
    let r = l.nrows();
    let pred = predictor::predict_iid_train(d, n, r, eta_trn, eta_tst, l)?;
    let u = datagen::gen_orthonormal(d, r, derive_seed(seed, Purpose::Basis, 0))?;
    let emp = resampled_trials(plan, |t, sub| {
        let coeffs = datagen::gen_iso_coeffs(r, n, derive_seed(seed, Purpose::Coefficients, t as u64));
        let (inst, rot) = ProblemInstance::from_coefficients(&u, &coeffs, Target::Identity, eta_trn, eta_tst, l.ncols())?;
        empirics::run_risk(&inst, &TestSpec::in_subspace(rot.transpose() * l), sub)
    })?;
    Ok((SweepRow::evaluated(n, d, r, pred.risk.clone(), emp), pred))
}

/// Gaussian coefficients for training and test data (test covariance `κ I`).
#[allow(clippy::too_many_arguments)]
pub fn run_iid_both(
    d: usize,
    n: usize,
    r: usize,
    eta_trn: f64,
    eta_tst: f64,
    kappa: f64,
    n_tst: usize,
    plan: &TrialPlan,
    seed: u64,
) -> Result<(SweepRow, predictor::IidPrediction)> {
    let pred = predictor::predict_iid_both(d, n, r, eta_trn, eta_tst, kappa)?;
    let u = datagen::gen_orthonormal(d, r, derive_seed(seed, Purpose::Basis, 0))?;
    let spec = TestSpec::distribution(vec![0.0; r], Matrix::identity(r, r) * kappa)?;
    let emp = resampled_trials(plan, |t, sub| {
        let coeffs = datagen::gen_iso_coeffs(r, n, derive_seed(seed, Purpose::Coefficients, t as u64));
        let (inst, _) = ProblemInstance::from_coefficients(&u, &coeffs, Target::Identity, eta_trn, eta_tst, n_tst)?;
        empirics::run_risk(&inst, &spec, sub)
    })?;
    Ok((SweepRow::evaluated(n, d, r, pred.risk.clone(), emp), pred))
}

/// Squared error (theory and simulation) and accuracy on clustered data over
/// a range of training-set sizes.
pub fn classification_sweep(
    means: &[Vec<f64>],
    n_values: &[usize],
    n_tst: usize,
    eta_trn: f64,
    eta_tst: f64,
    seed: u64,
    plan: &TrialPlan,
) -> Result<Vec<SweepRow>> {
    let d = means.first().map_or(0, Vec::len);
    let k = means.len();
    let grid = SweepGrid { d, n_values: n_values.to_vec(), r_values: vec![k] };
    grid.check()?;
    Ok(n_values
        .par_iter()
        .map(|&n| {
            if let Some(why) = grid.skip_reason(n, k) {
                return SweepRow::skipped(n, d, k, why);
            }
            let cell = || -> Result<SweepRow> {
                let data = datagen::gen_gmm(means, n, n_tst, eta_trn, eta_tst, seed)?;
                let l = match &data.test.data {
                    datagen::TestData::InSubspace(l) => l.clone(),
                    _ => unreachable!("clustered test data is in-subspace"),
                };
                let theory = predictor::predict_main(&data.instance, &l)?;
                let (emp, acc) = empirics::run_classification(&data, plan)?;
                let mut row = SweepRow::evaluated(n, d, data.instance.r, theory, emp);
                row.accuracy = Some(acc);
                Ok(row)
            };
            cell().unwrap_or_else(|e| SweepRow::failed(n, d, k, &e))
        })
        .collect())
}
