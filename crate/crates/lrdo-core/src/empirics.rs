// SPDX-License-Identifier: Apache-2.0

//! Monte-Carlo estimates of test error and of the resolvent-lemma matrices.
//!
//! Trial `t` draws its training noise from `derive_seed(master, TrainNoise, t)`
//! and is otherwise a pure function of its inputs, so results do not depend on
//! the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, GmmData, ProblemInstance, Target, TestData, TestSpec};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::mp::{self, Regime};
use crate::rng::{self, derive_seed, mean_and_se, pairwise_sum, Purpose};

/// Number of Monte-Carlo trials and their seeding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub trials: usize,
    pub master_seed: u64,
    /// Replace the test-noise draw by its exact expectation.
    pub integrate_test_noise: bool,
    /// Stream keys for the training-noise columns; `0..N` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_keys: Option<Vec<u64>>,
}

impl Default for TrialPlan {
    fn default() -> Self {
        Self { trials: 200, master_seed: 0, integrate_test_noise: true, noise_keys: None }
    }
}

impl TrialPlan {
    pub fn new(trials: usize, master_seed: u64) -> Result<Self> {
        let p = Self { trials, master_seed, ..Self::default() };
        p.check()?;
        Ok(p)
    }

    pub fn with_sampled_test_noise(mut self) -> Self {
        self.integrate_test_noise = false;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Domain("trials must be at least 1".into()));
        }
        Ok(())
    }

    fn train_noise(&self, inst: &ProblemInstance, t: usize) -> Result<Matrix> {
        let seed = derive_seed(self.master_seed, Purpose::TrainNoise, t as u64);
        match &self.noise_keys {
            Some(keys) if keys.len() != inst.n => Err(Error::DimensionMismatch(format!(
                "{} noise keys for {} training columns",
                keys.len(),
                inst.n
            ))),
            Some(keys) => Ok(datagen::gen_noise_keyed(inst.d, keys, inst.eta_trn, seed)),
            None => Ok(datagen::gen_noise(inst.d, inst.n, inst.eta_trn, seed)),
        }
    }
}

/// Statistics of `σ₁(I − W)` over trials, collected for raw test inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutOfSubspaceStats {
    pub sigma1_mean: f64,
    pub sigma1_max: f64,
    /// Trials where `‖(I−W)(X_tst − UL)‖ > σ₁(I−W)‖X_tst − UL‖`.
    pub violations: usize,
}

/// Aggregated Monte-Carlo risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRisk {
    /// Always `bias_mean + variance_mean`.
    pub mean: f64,
    /// `None` with a single trial.
    pub std_err: Option<f64>,
    pub bias_mean: f64,
    pub variance_mean: f64,
    /// Successful trials.
    pub trials: usize,
    pub failed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_of_subspace: Option<OutOfSubspaceStats>,
}

/// `G = ΣVᵀ(X + A)†`, returned transposed (`d × r`).
///
/// Uses the normal equations of the smaller Gram matrix when it is well
/// conditioned and the QR-based map otherwise.
pub fn solve_coords(coords: &Matrix, xa: &Matrix) -> Result<Matrix> {
    let (d, n) = xa.shape();
    let fast = if d <= n {
        let s = xa * xa.transpose();
        cholesky_checked(s).map(|ch| ch.solve(&(xa * coords.transpose())))
    } else {
        let s = xa.transpose() * xa;
        cholesky_checked(s).map(|ch| xa * ch.solve(&coords.transpose()))
    };
    match fast {
        Some(gt) if gt.iter().all(|v| v.is_finite()) => Ok(gt),
        _ => Ok(linalg::min_norm_map(coords, xa)?.to_matrix().transpose()),
    }
}

fn cholesky_checked(s: Matrix) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let ch = s.cholesky()?;
    let l = ch.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..l.nrows() {
        let v = l[(i, i)].abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (hi > 0.0 && lo > 1e-5 * hi).then_some(ch)
}

/// Moore-Penrose inverse of a matrix expected to have full rank.
pub fn full_rank_pinv(m: &Matrix) -> Result<Matrix> {
    let (d, n) = m.shape();
    let fast = if d <= n {
        cholesky_checked(m * m.transpose()).map(|ch| ch.solve(m).transpose())
    } else {
        cholesky_checked(m.transpose() * m).map(|ch| ch.solve(&m.transpose()))
    };
    match fast {
        Some(p) if p.iter().all(|v| v.is_finite()) => Ok(p),
        _ => linalg::pinv(m, linalg::DEFAULT_RANK_TOL),
    }
}

/// `Σ_ij x_ij y_ji`.
fn tr_prod(x: &Matrix, y: &Matrix) -> f64 {
    x.component_mul(&y.transpose()).sum()
}

struct Context<'a> {
    inst: &'a ProblemInstance,
    plan: &'a TrialPlan,
    spec: &'a TestSpec,
    x_trn: Matrix,
    coords: Matrix,
    /// `β_Uᵀ`, `k × r`.
    bu_t: Matrix,
    b: Matrix,
    /// Target-shift terms `ΔΔᵀ` and `Δβ_Uᵀ`, with `Δ = β_tst,U − β_U`.
    shift: Option<(Matrix, Matrix, Matrix)>,
    /// Fixed in-subspace test coordinates with `L Lᵀ`.
    fixed_l: Option<(Matrix, Matrix)>,
    dist_root: Option<(Matrix, Matrix)>,
    labels: Option<&'a [usize]>,
}

struct TrialOut {
    bias: f64,
    variance: f64,
    sigma1: Option<f64>,
    violation: bool,
    accuracy: Option<f64>,
}

impl<'a> Context<'a> {
    fn new(inst: &'a ProblemInstance, spec: &'a TestSpec, plan: &'a TrialPlan, labels: Option<&'a [usize]>) -> Result<Self> {
        plan.check()?;
        spec.check(inst)?;
        let bu = inst.beta_u();
        let b = &bu * bu.transpose();
        let shift = match &spec.beta_tst {
            Some(bt) => {
                let delta = bt.project(&inst.u) - &bu;
                Some((&delta * delta.transpose(), &delta * bu.transpose(), delta))
            }
            None => None,
        };
        let fixed_l = match &spec.data {
            TestData::InSubspace(l) => Some((l.clone(), l * l.transpose())),
            _ => None,
        };
        let dist_root = match &spec.data {
            TestData::Distribution { mu, cov } => {
                Some((Matrix::from_column_slice(mu.len(), 1, mu), linalg::psd_sqrt(cov, 1e-10)?))
            }
            _ => None,
        };
        if let Some(lab) = labels {
            let n_tst = match &spec.data {
                TestData::InSubspace(l) => l.ncols(),
                TestData::Raw { x_tst, .. } => x_tst.ncols(),
                TestData::Distribution { .. } => {
                    return Err(Error::Domain("labels need fixed test inputs".into()));
                }
            };
            if lab.len() != n_tst {
                return Err(Error::DimensionMismatch(format!("{} labels for {n_tst} test columns", lab.len())));
            }
        }
        Ok(Self {
            inst,
            plan,
            spec,
            x_trn: inst.x_trn(),
            coords: inst.coords_trn(),
            bu_t: bu.transpose(),
            b,
            shift,
            fixed_l,
            dist_root,
            labels,
        })
    }

    fn draw_l(&self, t: usize) -> Matrix {
        let (mu, root) = self.dist_root.as_ref().expect("distribution spec");
        let seed = derive_seed(self.plan.master_seed, Purpose::TestData, t as u64);
        let z = rng::gaussian_matrix(self.inst.r, self.inst.n_tst, seed, 1.0);
        let mut l = root * z;
        for mut col in l.column_iter_mut() {
            col += mu.column(0);
        }
        l
    }

    /// Explicit `k × N_tst` residual `Y_tst − W X_tst` for in-subspace inputs.
    fn residual_in_subspace(&self, l: &Matrix, r: &Matrix) -> Matrix {
        let mut res = &self.bu_t * r;
        if let Some((_, _, delta)) = &self.shift {
            res += delta.transpose() * l;
        }
        res
    }

    fn trial(&self, t: usize) -> Result<TrialOut> {
        let inst = self.inst;
        let a = self.plan.train_noise(inst, t)?;
        let xa = &self.x_trn + a;
        let gt = solve_coords(&self.coords, &xa)?;
        let g = gt.transpose();
        let ggt = &g * &gt;
        let var_integrated = inst.eta_tst * inst.eta_tst / inst.d as f64 * tr_prod(&self.b, &ggt);
        let test_noise = || {
            let seed = derive_seed(self.plan.master_seed, Purpose::TestNoise, t as u64);
            let n_tst = match &self.spec.data {
                TestData::Raw { x_tst, .. } => x_tst.ncols(),
                TestData::InSubspace(l) => l.ncols(),
                TestData::Distribution { .. } => inst.n_tst,
            };
            rng::gaussian_matrix(inst.d, n_tst, seed, inst.eta_tst / (inst.d as f64).sqrt())
        };
        let need_sample = !self.plan.integrate_test_noise || self.labels.is_some();

        let mut out = TrialOut { bias: 0.0, variance: var_integrated, sigma1: None, violation: false, accuracy: None };
        let (resid, x_tst) = match &self.spec.data {
            TestData::InSubspace(_) | TestData::Distribution { .. } => {
                let drawn;
                let (l, llt) = match &self.fixed_l {
                    Some((l, llt)) => (l, llt.clone()),
                    None => {
                        drawn = self.draw_l(t);
                        let llt = &drawn * drawn.transpose();
                        (&drawn, llt)
                    }
                };
                let gu = &g * &inst.u;
                let r = l - gu * l;
                let nt = l.ncols() as f64;
                let mut bias = tr_prod(&self.b, &(&r * r.transpose()));
                if let Some((ddt, dbt, _)) = &self.shift {
                    bias += tr_prod(ddt, &llt) + 2.0 * tr_prod(dbt, &(&r * l.transpose()));
                }
                out.bias = bias / nt;
                if need_sample {
                    (Some(self.residual_in_subspace(l, &r)), Some(&inst.u * l))
                } else {
                    (None, None)
                }
            }
            TestData::Raw { x_tst, companion } => {
                let target = self.spec.beta_tst.as_ref().unwrap_or(&inst.beta);
                let resid = target.apply_transpose(x_tst) - &self.bu_t * (&g * x_tst);
                out.bias = resid.norm_squared() / x_tst.ncols() as f64;
                if let Some(l) = companion {
                    if self.bu_t.nrows() == inst.d {
                        let s1 = linalg::spectral_norm_identity_minus(&self.bu_t, &g)?;
                        let diff = x_tst - &inst.u * l;
                        let lhs = (&diff - &self.bu_t * (&g * &diff)).norm();
                        let rhs = s1 * diff.norm();
                        out.violation = lhs > rhs * (1.0 + 1e-10) + 1e-12;
                        out.sigma1 = Some(s1);
                    }
                }
                (Some(resid), None)
            }
        };

        if need_sample {
            let a_tst = test_noise();
            let resid = resid.expect("residual kept when sampling");
            let wa = &self.bu_t * (&g * &a_tst);
            let nt = a_tst.ncols() as f64;
            if !self.plan.integrate_test_noise {
                let total = (&resid - &wa).norm_squared() / nt;
                out.variance = total - out.bias;
            }
            if let Some(labels) = self.labels {
                let x = match (&self.spec.data, &x_tst) {
                    (TestData::Raw { x_tst, .. }, _) => x_tst.clone(),
                    (_, Some(x)) => x.clone(),
                    _ => unreachable!("labels need fixed test inputs"),
                };
                let pred = &self.bu_t * (&g * (x + &a_tst));
                let hits = labels.iter().enumerate().filter(|(j, &lab)| argmax(pred.column(*j).iter()) == lab).count();
                out.accuracy = Some(hits as f64 / labels.len() as f64);
            }
        }
        Ok(out)
    }
}

fn argmax<'a>(it: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Runs all trials in parallel and keeps the successes in trial order.
pub(crate) fn run_trials<T: Send>(trials: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<(Vec<T>, usize)> {
    let results: Vec<Result<T>> = (0..trials).into_par_iter().map(f).collect();
    let mut ok = Vec::with_capacity(trials);
    let mut failed = 0;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                first_err.get_or_insert(e);
            }
        }
    }
    if ok.is_empty() {
        return Err(first_err.expect("at least one trial"));
    }
    if failed * 100 > trials {
        return Err(Error::TooManyFailures { failed, trials });
    }
    Ok((ok, failed))
}

fn aggregate(outs: &[TrialOut], failed: usize) -> EmpiricalRisk {
    let bias: Vec<f64> = outs.iter().map(|o| o.bias).collect();
    let var: Vec<f64> = outs.iter().map(|o| o.variance).collect();
    let total: Vec<f64> = outs.iter().map(|o| o.bias + o.variance).collect();
    let n = outs.len() as f64;
    let bias_mean = pairwise_sum(&bias) / n;
    let variance_mean = pairwise_sum(&var) / n;
    let (_, std_err) = mean_and_se(&total);
    let s1: Vec<f64> = outs.iter().filter_map(|o| o.sigma1).collect();
    let out_of_subspace = (!s1.is_empty()).then(|| OutOfSubspaceStats {
        sigma1_mean: pairwise_sum(&s1) / s1.len() as f64,
        sigma1_max: s1.iter().cloned().fold(0.0, f64::max),
        violations: outs.iter().filter(|o| o.violation).count(),
    });
    EmpiricalRisk {
        mean: bias_mean + variance_mean,
        std_err,
        bias_mean,
        variance_mean,
        trials: outs.len(),
        failed,
        out_of_subspace,
    }
}

/// Treats each run as one sample and averages them.
pub fn pool(runs: &[EmpiricalRisk]) -> Result<EmpiricalRisk> {
    if runs.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    let n = runs.len() as f64;
    let bias: Vec<f64> = runs.iter().map(|r| r.bias_mean).collect();
    let var: Vec<f64> = runs.iter().map(|r| r.variance_mean).collect();
    let total: Vec<f64> = runs.iter().map(|r| r.mean).collect();
    let bias_mean = pairwise_sum(&bias) / n;
    let variance_mean = pairwise_sum(&var) / n;
    Ok(EmpiricalRisk {
        mean: bias_mean + variance_mean,
        std_err: mean_and_se(&total).1,
        bias_mean,
        variance_mean,
        trials: runs.iter().map(|r| r.trials).sum(),
        failed: runs.iter().map(|r| r.failed).sum(),
        out_of_subspace: None,
    })
}

/// Mean test error of `W = βᵀX(X + A)†` over fresh training-noise draws.
pub fn run_risk(inst: &ProblemInstance, spec: &TestSpec, plan: &TrialPlan) -> Result<EmpiricalRisk> {
    let ctx = Context::new(inst, spec, plan, None)?;
    let (outs, failed) = run_trials(plan.trials, |t| ctx.trial(t))?;
    Ok(aggregate(&outs, failed))
}

/// [`run_risk`] with test targets `β_tstᵀ X_tst`.
pub fn run_transfer_risk(inst: &ProblemInstance, spec: &TestSpec, beta_tst: &Target, plan: &TrialPlan) -> Result<EmpiricalRisk> {
    let spec = spec.clone().with_beta_tst(beta_tst.clone());
    run_risk(inst, &spec, plan)
}

/// Accuracy of arg-max decoding over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub mean: f64,
    pub std_err: Option<f64>,
}

/// Squared error and arg-max accuracy on clustered test data.
pub fn run_classification(data: &GmmData, plan: &TrialPlan) -> Result<(EmpiricalRisk, Accuracy)> {
    if data.means.ncols() < 2 {
        return Err(Error::Domain("classification needs at least two clusters".into()));
    }
    let ctx = Context::new(&data.instance, &data.test, plan, Some(&data.labels_tst))?;
    let (outs, failed) = run_trials(plan.trials, |t| ctx.trial(t))?;
    let acc: Vec<f64> = outs.iter().map(|o| o.accuracy.expect("labels given")).collect();
    let (mean, std_err) = mean_and_se(&acc);
    Ok((aggregate(&outs, failed), Accuracy { mean, std_err }))
}

/// Named resolvent-lemma quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LemmaName {
    /// `HHᵀ`.
    HH,
    /// `Σ⁻¹PᵀPΣ⁻¹`.
    PNorm,
    /// `Σ(PᵀP)⁻¹Σ`.
    PInv,
    Z,
    /// `K₁⁻¹`.
    K1Inv,
    /// `QQᵀ`.
    QQ,
    /// `(QQᵀ)⁻¹`.
    QQInv,
    /// `Σ⁻¹KᵀKΣ⁻¹`.
    KK,
    /// `Σ⁻¹KᵀA†A†ᵀKΣ⁻¹`.
    KA,
    /// `ΣH₁⁻¹Σ`.
    H1,
    /// `‖W‖_F²`.
    WNorm,
}

impl LemmaName {
    pub const ALL: [LemmaName; 11] = [
        LemmaName::HH,
        LemmaName::PNorm,
        LemmaName::PInv,
        LemmaName::Z,
        LemmaName::K1Inv,
        LemmaName::QQ,
        LemmaName::QQInv,
        LemmaName::KK,
        LemmaName::KA,
        LemmaName::H1,
        LemmaName::WNorm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LemmaName::HH => "HH",
            LemmaName::PNorm => "P_norm",
            LemmaName::PInv => "P_inv",
            LemmaName::Z => "Z",
            LemmaName::K1Inv => "K1_inv",
            LemmaName::QQ => "QQ",
            LemmaName::QQInv => "QQ_inv",
            LemmaName::KK => "KK",
            LemmaName::KA => "KA",
            LemmaName::H1 => "H1",
            LemmaName::WNorm => "W_norm",
        }
    }

    /// Regime in which the quantity is defined; `None` for both.
    pub fn regime(&self) -> Option<Regime> {
        match self {
            LemmaName::HH | LemmaName::Z | LemmaName::WNorm => None,
            LemmaName::PNorm | LemmaName::PInv | LemmaName::K1Inv => Some(Regime::Over),
            _ => Some(Regime::Under),
        }
    }

    pub fn available(regime: Regime) -> Vec<LemmaName> {
        Self::ALL.iter().copied().filter(|n| n.regime().map_or(true, |r| r == regime)).collect()
    }
}

/// Monte-Carlo mean of one lemma quantity against its limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaEstimate {
    pub name: LemmaName,
    #[serde(with = "linalg::serde_rows")]
    pub mc_mean: Matrix,
    #[serde(with = "linalg::serde_rows")]
    pub mc_se: Matrix,
    #[serde(with = "linalg::serde_rows")]
    pub predicted: Matrix,
    #[serde(with = "linalg::serde_rows")]
    pub z_scores: Matrix,
}

impl LemmaEstimate {
    pub fn max_abs_z(&self) -> f64 {
        self.z_scores.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub c: f64,
    pub eta: f64,
    pub trials: usize,
    pub failed: usize,
    pub estimates: Vec<LemmaEstimate>,
    /// Largest entry of `P†Hᵀ` over trials, over-parameterized only.
    pub pinv_identity_max: Option<f64>,
    /// Largest relative gap between the expanded and the direct `W`.
    pub expanded_w_max_rel: f64,
}

impl LemmaReport {
    pub fn get(&self, name: LemmaName) -> Option<&LemmaEstimate> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

struct LemmaTrial {
    values: Vec<(LemmaName, Matrix)>,
    pinv_identity: Option<f64>,
    expanded_rel: f64,
}

fn inv(m: &Matrix) -> Result<Matrix> {
    m.clone().try_inverse().ok_or_else(|| Error::SolveFailure("singular lemma matrix".into()))
}

fn lemma_trial(inst: &ProblemInstance, x_trn: &Matrix, names: &[LemmaName], plan: &TrialPlan, t: usize) -> Result<LemmaTrial> {
    let r = inst.r;
    let a = plan.train_noise(inst, t)?;
    let a_pinv = full_rank_pinv(&a)?;
    let sig = linalg::diag(&inst.sigma_trn);
    let sig_inv = linalg::diag(&inst.sigma_trn.iter().map(|s| 1.0 / s).collect::<Vec<_>>());
    let u = &inst.u;
    let vt = inst.v_trn.transpose();
    let apu = &a_pinv * u;
    let h = &vt * &a_pinv;
    let hht = &h * h.transpose();
    let z = Matrix::identity(r, r) + &vt * &apu * &sig;
    let direct = &vt * full_rank_pinv(&(x_trn + &a))?;
    let bu_t = inst.beta_u().transpose();
    let mut values = Vec::new();
    let mut push = |name: LemmaName, m: Matrix| {
        if names.contains(&name) {
            values.push((name, m));
        }
    };
    push(LemmaName::HH, hht.clone());
    push(LemmaName::Z, z.clone());
    push(LemmaName::WNorm, Matrix::from_element(1, 1, (&bu_t * &sig * &direct).norm_squared()));

    let (core, pinv_identity) = match Regime::of(inst.c()) {
        Regime::Over => {
            let p = -(u - &a * &apu) * &sig;
            let ptp = p.transpose() * &p;
            let ptp_inv = inv(&ptp)?;
            let k1 = &hht + &z * &ptp_inv * z.transpose();
            let k1_inv = inv(&k1)?;
            let p_dag = &ptp_inv * p.transpose();
            let identity = (&p_dag * h.transpose()).amax();
            let core = &ptp_inv * z.transpose() * &k1_inv * &h - inv(&z)? * &hht * &k1_inv * &z * &p_dag;
            push(LemmaName::PNorm, &sig_inv * &ptp * &sig_inv);
            push(LemmaName::PInv, &sig * &ptp_inv * &sig);
            push(LemmaName::K1Inv, k1_inv);
            (core, Some(identity))
        }
        Regime::Under => {
            let q = &vt - &h * &a;
            let qqt = &q * q.transpose();
            let qqt_inv = inv(&qqt)?;
            let k = -&apu * &sig;
            let h1 = k.transpose() * &k + z.transpose() * &qqt_inv * &z;
            let h1_inv = inv(&h1)?;
            let core = -&h1_inv * k.transpose() * &a_pinv + &h1_inv * z.transpose() * &qqt_inv * &h;
            let ta = a_pinv.transpose() * &apu;
            push(LemmaName::KK, apu.transpose() * &apu);
            push(LemmaName::KA, ta.transpose() * ta);
            push(LemmaName::QQ, qqt);
            push(LemmaName::QQInv, qqt_inv);
            push(LemmaName::H1, &sig * h1_inv * &sig);
            (core, None)
        }
    };
    let full = &sig * &direct;
    let expanded_rel = (&sig * core - &full).norm() / full.norm();
    Ok(LemmaTrial { values, pinv_identity, expanded_rel })
}

fn lemma_prediction(inst: &ProblemInstance, name: LemmaName) -> Result<Matrix> {
    let c = inst.c();
    let eta = inst.eta_trn;
    let e2 = eta * eta;
    let rc = mp::resolvent_constants(c, eta)?;
    let r = inst.r;
    let scalar = |v: Option<f64>| -> Result<Matrix> {
        v.map(|v| Matrix::identity(r, r) * v).ok_or(Error::RegimeMismatch(format!("{} is not defined at c = {c}", name.as_str())))
    };
    match name {
        LemmaName::HH => scalar(Some(rc.hh)),
        LemmaName::Z => scalar(Some(rc.z)),
        LemmaName::PNorm => scalar(rc.p_norm),
        LemmaName::PInv => scalar(rc.p_inv),
        LemmaName::QQ => scalar(rc.qq),
        LemmaName::QQInv => scalar(rc.qq_inv),
        LemmaName::KK => scalar(rc.kk),
        LemmaName::KA => scalar(rc.ka_derived),
        LemmaName::K1Inv => Ok(linalg::diag(
            &inst.sigma_trn.iter().map(|s| e2 * (1.0 - 1.0 / c) / (e2 / (s * s) + 1.0)).collect::<Vec<_>>(),
        )),
        LemmaName::H1 => Ok(linalg::diag(
            &inst.sigma_trn.iter().map(|s| (1.0 - c) * e2 / (e2 / (s * s) + c)).collect::<Vec<_>>(),
        )),
        LemmaName::WNorm => {
            let bu = inst.beta_u();
            let b = &bu * bu.transpose();
            let tr: f64 = match Regime::of(c) {
                Regime::Over => inst
                    .sigma_trn
                    .iter()
                    .enumerate()
                    .map(|(i, s)| b[(i, i)] * s * s / (s * s + e2))
                    .sum::<f64>()
                    * c
                    / (c - 1.0),
                Regime::Under => inst
                    .sigma_trn
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let s2 = s * s;
                        b[(i, i)] * s2 * (s2 + e2) / (c * s2 + e2).powi(2)
                    })
                    .sum::<f64>()
                    * c
                    * c
                    / (1.0 - c),
            };
            Ok(Matrix::from_element(1, 1, tr))
        }
    }
}

/// Entrywise mean, standard error and sample variance over trials.
fn entry_stats(samples: &[&Matrix]) -> (Matrix, Matrix, Matrix) {
    let (rows, cols) = samples[0].shape();
    let n = samples.len();
    let mut mean = Matrix::zeros(rows, cols);
    let mut se = Matrix::zeros(rows, cols);
    let mut var = Matrix::zeros(rows, cols);
    let mut buf = vec![0.0; n];
    for j in 0..cols {
        for i in 0..rows {
            for (k, s) in samples.iter().enumerate() {
                buf[k] = s[(i, j)];
            }
            let (m, e) = mean_and_se(&buf);
            mean[(i, j)] = m;
            if let Some(e) = e {
                se[(i, j)] = e;
                var[(i, j)] = e * e * n as f64;
            }
        }
    }
    (mean, se, var)
}

fn check_lemma_instance(inst: &ProblemInstance, names: &[LemmaName]) -> Result<Regime> {
    let c = inst.c();
    if (c - 1.0).abs() < mp::PEAK_GUARD {
        return Err(Error::AtPeak(c));
    }
    if !(inst.eta_trn > 0.0) {
        return Err(Error::Domain("lemma estimates need positive training noise".into()));
    }
    let regime = Regime::of(c);
    for n in names {
        if n.regime().is_some_and(|r| r != regime) {
            return Err(Error::RegimeMismatch(format!("{} is not defined at c = {c}", n.as_str())));
        }
    }
    Ok(regime)
}

fn lemma_trials(inst: &ProblemInstance, names: &[LemmaName], plan: &TrialPlan) -> Result<(Vec<LemmaTrial>, usize)> {
    plan.check()?;
    check_lemma_instance(inst, names)?;
    let x_trn = inst.x_trn();
    run_trials(plan.trials, |t| lemma_trial(inst, &x_trn, names, plan, t))
}

/// Estimates the requested lemma quantities.
pub fn estimate_lemmas_for(inst: &ProblemInstance, names: &[LemmaName], plan: &TrialPlan) -> Result<LemmaReport> {
    let (trials, failed) = lemma_trials(inst, names, plan)?;
    let mut estimates = Vec::new();
    for &name in names {
        let samples: Vec<&Matrix> =
            trials.iter().map(|t| &t.values.iter().find(|(n, _)| *n == name).expect("computed").1).collect();
        let (mc_mean, mc_se, _) = entry_stats(&samples);
        let predicted = lemma_prediction(inst, name)?;
        let z_scores = Matrix::from_fn(mc_mean.nrows(), mc_mean.ncols(), |i, j| {
            let diff = mc_mean[(i, j)] - predicted[(i, j)];
            let se = mc_se[(i, j)];
            if se > 0.0 {
                diff / se
            } else if diff == 0.0 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            }
        });
        estimates.push(LemmaEstimate { name, mc_mean, mc_se, predicted, z_scores });
    }
    let pinv_identity_max = trials.iter().filter_map(|t| t.pinv_identity).reduce(f64::max);
    let expanded_w_max_rel = trials.iter().map(|t| t.expanded_rel).fold(0.0, f64::max);
    Ok(LemmaReport {
        c: inst.c(),
        eta: inst.eta_trn,
        trials: trials.len(),
        failed,
        estimates,
        pinv_identity_max,
        expanded_w_max_rel,
    })
}

/// Estimates every lemma quantity defined in the instance's regime.
pub fn estimate_lemmas(inst: &ProblemInstance, plan: &TrialPlan) -> Result<LemmaReport> {
    let names = LemmaName::available(Regime::of(inst.c()));
    estimate_lemmas_for(inst, &names, plan)
}

/// Ordinary least-squares slope of `ln y` on `ln x` with its standard error.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch("x and y differ in length".into()));
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: xs.len() });
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = pairwise_sum(&lx) / n;
    let my = pairwise_sum(&ly) / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientSpan("all x values coincide".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    let se = if lx.len() > 2 { (rss / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok((slope, se))
}

/// Log-log fit of one quantity's mean entry variance against `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub name: LemmaName,
    pub entry_variance: Vec<f64>,
    pub slope: f64,
    pub slope_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub n_values: Vec<usize>,
    pub fits: Vec<DecayFit>,
}

/// Fits how the entry variance of lemma quantities shrinks with `N`.
pub fn estimate_variance_decay(family: &[ProblemInstance], names: &[LemmaName], plan: &TrialPlan) -> Result<DecayReport> {
    if family.len() < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: family.len() });
    }
    if plan.trials < 2 {
        return Err(Error::Domain("variance estimates need at least two trials".into()));
    }
    let mut per_n: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for inst in family {
        let (trials, _) = lemma_trials(inst, names, plan)?;
        for (k, &name) in names.iter().enumerate() {
            let samples: Vec<&Matrix> =
                trials.iter().map(|t| &t.values.iter().find(|(n, _)| *n == name).expect("computed").1).collect();
            let (_, _, var) = entry_stats(&samples);
            per_n[k].push(var.mean());
        }
    }
    let xs: Vec<f64> = family.iter().map(|i| i.n as f64).collect();
    let mut fits = Vec::new();
    for (k, &name) in names.iter().enumerate() {
        let (slope, slope_se) = loglog_slope(&xs, &per_n[k])?;
        fits.push(DecayFit { name, entry_variance: per_n[k].clone(), slope, slope_se });
    }
    Ok(DecayReport { n_values: family.iter().map(|i| i.n).collect(), fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor;
    use crate::rng::gaussian_matrix;

    fn inst(d: usize, n: usize, r: usize, eta: f64) -> ProblemInstance {
        let sigma = vec![(n as f64).sqrt(); r];
        ProblemInstance::synthetic(d, n, 40, sigma, Target::Identity, eta, eta, 3).unwrap()
    }

    #[test]
    fn solve_coords_matches_qr_map() {
        for (d, n) in [(30, 70), (70, 30)] {
            let p = inst(d, n, 3, 1.0);
            let xa = p.x_trn() + datagen::gen_noise(d, n, 1.0, 5);
            let fast = solve_coords(&p.coords_trn(), &xa).unwrap();
            let slow = linalg::min_norm_map(&p.coords_trn(), &xa).unwrap().to_matrix().transpose();
            assert!((&fast - &slow).norm() < 1e-9 * slow.norm());
            let pinv = full_rank_pinv(&xa).unwrap();
            let reference = linalg::pinv(&xa, 1e-12).unwrap();
            assert!((pinv - &reference).norm() < 1e-9 * reference.norm());
        }
    }

    #[test]
    fn noiseless_interpolation_has_zero_risk() {
        let p = inst(30, 60, 3, 0.0);
        let l = gaussian_matrix(3, 20, 1, 1.0);
        let e = run_risk(&p, &TestSpec::in_subspace(l), &TrialPlan::new(3, 1).unwrap()).unwrap();
        assert!(e.mean.abs() < 1e-18, "{}", e.mean);
        assert_eq!(e.variance_mean, 0.0);
    }

    #[test]
    fn mean_is_exact_sum_and_single_trial_has_no_se() {
        let p = inst(30, 60, 3, 1.0);
        let spec = TestSpec::in_subspace(gaussian_matrix(3, 20, 1, 1.0));
        let e = run_risk(&p, &spec, &TrialPlan::new(5, 2).unwrap()).unwrap();
        assert_eq!(e.mean, e.bias_mean + e.variance_mean);
        assert!(e.std_err.unwrap() >= 0.0);
        let one = run_risk(&p, &spec, &TrialPlan::new(1, 2).unwrap()).unwrap();
        assert!(one.std_err.is_none());
        assert_eq!(one.trials, 1);
    }

    #[test]
    fn reduced_and_raw_paths_agree() {
        let p = inst(30, 60, 3, 1.0);
        let l = gaussian_matrix(3, 20, 1, 1.0);
        let plan = TrialPlan::new(4, 9).unwrap();
        let a = run_risk(&p, &TestSpec::in_subspace(l.clone()), &plan).unwrap();
        let b = run_risk(&p, &TestSpec::raw(&p.u * &l, Some(l)), &plan).unwrap();
        assert!((a.bias_mean - b.bias_mean).abs() < 1e-10 * a.bias_mean);
        assert_eq!(a.variance_mean, b.variance_mean);
        let oos = b.out_of_subspace.unwrap();
        assert_eq!(oos.violations, 0);
        assert!(oos.sigma1_mean >= 1.0 - 1e-12);
    }

    #[test]
    fn transfer_with_same_target_equals_plain_risk() {
        let bm = gaussian_matrix(30, 4, 8, 1.0);
        let p = ProblemInstance::synthetic(30, 60, 20, vec![6.0, 5.0, 4.0], Target::Matrix(bm.clone()), 1.0, 1.0, 2).unwrap();
        let spec = TestSpec::in_subspace(gaussian_matrix(3, 20, 1, 1.0));
        let plan = TrialPlan::new(3, 4).unwrap();
        let a = run_risk(&p, &spec, &plan).unwrap();
        let b = run_transfer_risk(&p, &spec, &Target::Matrix(bm), &plan).unwrap();
        assert_eq!(a, b);
        let zero = run_transfer_risk(&p, &spec, &Target::Matrix(Matrix::zeros(30, 4)), &plan).unwrap();
        assert!(zero.mean >= 0.0);
    }

    #[test]
    fn transfer_reduced_form_matches_explicit_residual() {
        let bm = gaussian_matrix(30, 4, 8, 1.0);
        let bt = gaussian_matrix(30, 4, 9, 1.0);
        let p = ProblemInstance::synthetic(30, 60, 20, vec![6.0, 5.0, 4.0], Target::Matrix(bm), 1.0, 1.0, 2).unwrap();
        let l = gaussian_matrix(3, 20, 1, 1.0);
        let plan = TrialPlan::new(2, 4).unwrap();
        let spec = TestSpec::in_subspace(l.clone()).with_beta_tst(Target::Matrix(bt.clone()));
        let a = run_risk(&p, &spec, &plan).unwrap();
        let raw = TestSpec::raw(&p.u * &l, None).with_beta_tst(Target::Matrix(bt));
        let b = run_risk(&p, &raw, &plan).unwrap();
        assert!((a.bias_mean - b.bias_mean).abs() < 1e-10 * b.bias_mean);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let p = inst(40, 90, 4, 1.0);
        let spec = TestSpec::in_subspace(gaussian_matrix(4, 30, 1, 1.0));
        let plan = TrialPlan::new(16, 77).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_risk(&p, &spec, &plan).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn permuting_training_columns_with_their_keys_is_invariant() {
        let p = inst(30, 50, 3, 1.0);
        let perm: Vec<usize> = (0..50).map(|j| (j * 7 + 3) % 50).collect();
        let v = Matrix::from_fn(50, 3, |i, j| p.v_trn[(perm[i], j)]);
        let q = ProblemInstance::new(p.u.clone(), p.sigma_trn.clone(), v, Target::Identity, 1.0, 1.0, 40).unwrap();
        let spec = TestSpec::in_subspace(gaussian_matrix(3, 20, 1, 1.0));
        let base = TrialPlan::new(3, 5).unwrap();
        let keyed = TrialPlan { noise_keys: Some(perm.iter().map(|&k| k as u64).collect()), ..base.clone() };
        let a = run_risk(&p, &spec, &base).unwrap();
        let b = run_risk(&q, &spec, &keyed).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-10 * a.mean);
    }

    #[test]
    fn distribution_spec_tracks_generalization_prediction() {
        let p = ProblemInstance::synthetic(40, 100, 200, vec![8.0, 6.0], Target::Identity, 1.0, 1.0, 4).unwrap();
        let cov = Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let spec = TestSpec::distribution(vec![0.5, -1.0], cov.clone()).unwrap();
        let e = run_risk(&p, &spec, &TrialPlan::new(200, 1).unwrap()).unwrap();
        let th = predictor::predict_gen_error(&p, &[0.5, -1.0], &cov).unwrap();
        assert!((e.mean - th.total).abs() < 0.15 * th.total, "{} vs {}", e.mean, th.total);
    }

    #[test]
    fn lemma_identities_hold_per_trial() {
        for (d, n) in [(60, 30), (30, 60)] {
            let p = inst(d, n, 2, 1.0);
            let rep = estimate_lemmas(&p, &TrialPlan::new(4, 1).unwrap()).unwrap();
            assert!(rep.expanded_w_max_rel < 1e-8, "{}", rep.expanded_w_max_rel);
            if d > n {
                assert!(rep.pinv_identity_max.unwrap() < 1e-8);
            } else {
                assert!(rep.pinv_identity_max.is_none());
            }
        }
        let under = inst(30, 60, 2, 1.0);
        assert!(matches!(
            estimate_lemmas_for(&under, &[LemmaName::PInv], &TrialPlan::new(2, 1).unwrap()),
            Err(Error::RegimeMismatch(_))
        ));
    }

    #[test]
    fn loglog_slope_recovers_powers() {
        let xs = [100.0, 200.0, 400.0];
        let (s, se) = loglog_slope(&xs, &[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(se, 0.0);
        let (s, _) = loglog_slope(&xs, &xs.map(|x| 5.0 / x)).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
        assert!(matches!(loglog_slope(&xs[..2], &[1.0, 2.0]), Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn sampled_and_integrated_test_noise_agree() {
        let p = inst(30, 60, 3, 1.0);
        let spec = TestSpec::in_subspace(gaussian_matrix(3, 50, 1, 1.0));
        let plan = TrialPlan::new(400, 3).unwrap();
        let a = run_risk(&p, &spec, &plan).unwrap();
        let b = run_risk(&p, &spec, &plan.clone().with_sampled_test_noise()).unwrap();
        let se = (a.std_err.unwrap().powi(2) + b.std_err.unwrap().powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() < 3.0 * se);
    }
}
