// SPDX-License-Identifier: Apache-2.0

//! Marchenko-Pastur law: density, atom, quadrature moments, closed-form
//! resolvent moments `T1..T4` and the scalar constants of the resolvent
//! lemmas.
//!
//! Moments are integrated with Gauss-Legendre quadrature after the change of
//! variables `x = c₋ + (c₊ − c₋) sin²θ`, which turns the square-root edges of
//! the density into a smooth integrand on `θ ∈ [0, π/2]`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of quadrature nodes for the primary rule.
pub const QUAD_NODES: usize = 256;

/// Marchenko-Pastur law with shape `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpShape {
    c: f64,
}

impl MpShape {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Domain(format!("MP shape must be positive, got {c}")));
        }
        Ok(Self { c })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// Support endpoints `((1 − √c)², (1 + √c)²)`.
    pub fn support(&self) -> (f64, f64) {
        let s = self.c.sqrt();
        ((1.0 - s).powi(2), (1.0 + s).powi(2))
    }

    /// Point mass at zero: `1 − 1/c` when `c > 1`, else zero.
    pub fn atom_mass(&self) -> f64 {
        if self.c > 1.0 {
            1.0 - 1.0 / self.c
        } else {
            0.0
        }
    }
}

/// Density of the continuous part; zero outside the support.
pub fn mp_density(shape: MpShape, x: f64) -> f64 {
    let (lo, hi) = shape.support();
    if x <= lo || x >= hi || x <= 0.0 {
        return 0.0;
    }
    ((hi - x) * (x - lo)).sqrt() / (2.0 * PI * x * shape.c)
}

/// Integrand families used by the risk formulas, with `z ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MomentKind {
    /// `λ / (λ + z)`
    LamOverLamPlusZ,
    /// `λ / (λ + z)²`
    LamOverSq,
    /// `λ² / (λ + z)²`
    LamSqOverSq,
    /// `1 / (λ + z)²`
    OneOverSq,
    /// `1 / (λ + z)`
    OneOverLamPlusZ,
    /// `λᵏ`
    Power { k: i32 },
}

impl MomentKind {
    pub fn eval(&self, lam: f64, z: f64) -> f64 {
        match self {
            MomentKind::LamOverLamPlusZ => lam / (lam + z),
            MomentKind::LamOverSq => lam / (lam + z).powi(2),
            MomentKind::LamSqOverSq => (lam / (lam + z)).powi(2),
            MomentKind::OneOverSq => 1.0 / (lam + z).powi(2),
            MomentKind::OneOverLamPlusZ => 1.0 / (lam + z),
            MomentKind::Power { k } => lam.powi(*k),
        }
    }

    /// Whether the integrand fails to be bounded (or defined) at `λ = 0`.
    fn singular_at_zero(&self, z: f64) -> bool {
        match self {
            MomentKind::Power { k } => *k < 0,
            MomentKind::LamSqOverSq => false,
            _ => z == 0.0,
        }
    }
}

/// A moment `E[f(λ)]` under `MP(shape)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRequest {
    pub kind: MomentKind,
    pub z: f64,
    pub shape: MpShape,
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut t = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { t } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (t * pn - pm) / (t * t - 1.0);
            let step = pn / dp;
            t -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -t;
        x[n - 1 - i] = t;
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn rule(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static R256: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static R512: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    match n {
        256 => R256.get_or_init(|| gauss_legendre(256)),
        512 => R512.get_or_init(|| gauss_legendre(512)),
        _ => panic!("no cached rule with {n} nodes"),
    }
}

/// `∫ f dν` over the continuous part using an `nodes`-point rule.
fn continuous_integral(shape: MpShape, f: &dyn Fn(f64) -> f64, nodes: usize) -> f64 {
    let (lo, hi) = shape.support();
    let width = hi - lo;
    let (xs, ws) = rule(nodes);
    let half = PI / 4.0;
    let mut terms = Vec::with_capacity(nodes);
    for (t, w) in xs.iter().zip(ws) {
        let theta = half * (t + 1.0);
        let (s, c) = theta.sin_cos();
        let x = lo + width * s * s;
        if x <= 0.0 {
            terms.push(0.0);
            continue;
        }
        let jac = 2.0 * width * s * c;
        let root = width * s * c;
        let dens = root / (2.0 * PI * x * shape.c);
        terms.push(w * half * f(x) * dens * jac);
    }
    crate::rng::pairwise_sum(&terms)
}

/// `E[f(λ)]` for an arbitrary integrand; `f(0)` is used for the atom.
pub fn mp_expectation(shape: MpShape, f: &dyn Fn(f64) -> f64) -> f64 {
    mp_expectation_with(shape, f, QUAD_NODES)
}

fn mp_expectation_with(shape: MpShape, f: &dyn Fn(f64) -> f64, nodes: usize) -> f64 {
    let mut v = continuous_integral(shape, f, nodes);
    let atom = shape.atom_mass();
    if atom > 0.0 {
        v += atom * f(0.0);
    }
    v
}

fn check_request(req: &MomentRequest) -> Result<()> {
    if !(req.z.is_finite() && req.z >= 0.0) {
        return Err(Error::Domain(format!("z must be finite and non-negative, got {}", req.z)));
    }
    if req.kind.singular_at_zero(req.z) {
        let (lo, _) = req.shape.support();
        if req.shape.atom_mass() > 0.0 {
            return Err(Error::SingularIntegrand(format!(
                "{:?} at z = {} is unbounded at the atom at zero",
                req.kind, req.z
            )));
        }
        if lo <= 1e-12 {
            return Err(Error::SingularIntegrand(format!(
                "{:?} at z = {} is unbounded at the support edge 0",
                req.kind, req.z
            )));
        }
    }
    Ok(())
}

/// Quadrature value of a moment.
pub fn mp_moment_quad(req: &MomentRequest) -> Result<f64> {
    check_request(req)?;
    let (kind, z) = (req.kind, req.z);
    Ok(mp_expectation(req.shape, &|l| kind.eval(l, z)))
}

/// Quadrature value and its change when the node count is doubled.
pub fn mp_moment_quad_checked(req: &MomentRequest) -> Result<(f64, f64)> {
    check_request(req)?;
    let (kind, z) = (req.kind, req.z);
    let a = mp_expectation_with(req.shape, &|l| kind.eval(l, z), 256);
    let b = mp_expectation_with(req.shape, &|l| kind.eval(l, z), 512);
    Ok((a, (a - b).abs()))
}

/// Total mass of the law (continuous part plus atom).
pub fn total_mass(shape: MpShape) -> f64 {
    mp_expectation(shape, &|_| 1.0)
}

/// Relative tolerance at which a closed form counts as confirmed.
pub const T_AGREE_TOL: f64 = 1e-8;

/// The four resolvent moments in three forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TValues {
    /// Closed-form expressions, `[T1, T2, T3, T4]`.
    pub closed_form: [f64; 4],
    /// Quadrature values of the integrals each `T` represents.
    pub quadrature: [f64; 4],
    /// Whether each closed form matches its quadrature value.
    pub agree: [bool; 4],
    /// Values used downstream: quadrature, with `T1 = T3 − z·T2` enforced.
    pub canonical: [f64; 4],
}

impl TValues {
    pub fn t1(&self) -> f64 {
        self.canonical[0]
    }
    pub fn t2(&self) -> f64 {
        self.canonical[1]
    }
    pub fn t3(&self) -> f64 {
        self.canonical[2]
    }
    pub fn t4(&self) -> f64 {
        self.canonical[3]
    }
    /// True when at least one closed form was overridden by quadrature.
    pub fn any_disagreement(&self) -> bool {
        self.agree.iter().any(|a| !a)
    }
}

/// Closed-form expressions for `T1..T4`, `[T1, T2, T3, T4]`.
pub fn t_closed_form(c_r: f64, z: f64) -> [f64; 4] {
    let s = ((1.0 - c_r + c_r * z).powi(2) + 4.0 * c_r * c_r * z).sqrt();
    let t2 = (1.0 + c_r + z * c_r) / (2.0 * s) - 0.5;
    let t3 = 0.5 + (1.0 + z * c_r - s) / (2.0 * c_r);
    let t1 = t3 - z * t2;
    let t4 = (z * c_r * c_r + c_r * c_r + z * c_r - 2.0 * c_r + 1.0) / (2.0 * z * z * c_r * s)
        - (1.0 - 1.0 / c_r) / (2.0 * z * z);
    [t1, t2, t3, t4]
}

/// With `σ² = λ / c_r` and `λ ~ MP(c_r)`:
/// `T1 = E[σ⁴/(σ²+z)²]`, `T2 = E[σ²/(σ²+z)²]`, `T3 = E[σ²/(σ²+z)]`,
/// `T4 = E[1/(σ²+z)²]`.
pub fn t_quadrature(c_r: f64, z: f64) -> Result<[f64; 4]> {
    let shape = MpShape::new(c_r)?;
    let w = c_r * z;
    let t1 = mp_expectation(shape, &|l| (l / (l + w)).powi(2));
    let t2 = c_r * mp_expectation(shape, &|l| l / (l + w).powi(2));
    let t3 = mp_expectation(shape, &|l| l / (l + w));
    let t4 = c_r * c_r * mp_expectation(shape, &|l| 1.0 / (l + w).powi(2));
    Ok([t1, t2, t3, t4])
}

/// Evaluates `T1..T4` and reconciles the closed forms with quadrature.
pub fn t_functions(c_r: f64, z: f64) -> Result<TValues> {
    if !(c_r > 0.0 && c_r < 1.0) {
        return Err(Error::Domain(format!("c_r must lie in (0, 1), got {c_r}")));
    }
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::Domain(format!("z must be positive, got {z}")));
    }
    let closed_form = t_closed_form(c_r, z);
    let quadrature = t_quadrature(c_r, z)?;
    let mut agree = [false; 4];
    for i in 0..4 {
        let scale = quadrature[i].abs().max(1.0);
        agree[i] = (closed_form[i] - quadrature[i]).abs() <= T_AGREE_TOL * scale;
    }
    let [_, t2, t3, t4] = quadrature;
    let canonical = [t3 - z * t2, t2, t3, t4];
    Ok(TValues { closed_form, quadrature, agree, canonical })
}

/// Which side of the interpolation peak a shape lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Under,
    Over,
}

impl Regime {
    pub fn of(c: f64) -> Self {
        if c < 1.0 {
            Regime::Under
        } else {
            Regime::Over
        }
    }
}

/// Scalar limits of the resolvent-lemma matrices for a given `(c, η)`.
///
/// Members that do not exist in the active regime are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolventConstants {
    pub c: f64,
    pub eta: f64,
    pub regime: Regime,
    /// `E[HHᵀ]` coefficient.
    pub hh: f64,
    /// `E[Σ⁻¹PᵀPΣ⁻¹]` coefficient.
    pub p_norm: Option<f64>,
    /// `E[Σ(PᵀP)⁻¹Σ]` coefficient.
    pub p_inv: Option<f64>,
    /// `E[Z]` coefficient.
    pub z: f64,
    /// `E[QQᵀ]` coefficient.
    pub qq: Option<f64>,
    /// `E[(QQᵀ)⁻¹]` coefficient.
    pub qq_inv: Option<f64>,
    /// `E[Σ⁻¹KᵀKΣ⁻¹]` coefficient.
    pub kk: Option<f64>,
    /// `E[Σ⁻¹KᵀA†A†ᵀKΣ⁻¹]` coefficient as `c²/(η²(1−c)³)`.
    pub ka: Option<f64>,
    /// The same quantity as `c²/(η⁴(1−c)³)`.
    pub ka_derived: Option<f64>,
}

/// Peak guard used throughout: `|c − 1|` below this is rejected.
pub const PEAK_GUARD: f64 = 1e-6;

pub fn resolvent_constants(c: f64, eta: f64) -> Result<ResolventConstants> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Domain(format!("c must be positive, got {c}")));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    if (c - 1.0).abs() < PEAK_GUARD {
        return Err(Error::AtPeak(c));
    }
    let e2 = eta * eta;
    Ok(if c > 1.0 {
        ResolventConstants {
            c,
            eta,
            regime: Regime::Over,
            hh: c / (e2 * (c - 1.0)),
            p_norm: Some(1.0 - 1.0 / c),
            p_inv: Some(c / (c - 1.0)),
            z: 1.0,
            qq: None,
            qq_inv: None,
            kk: None,
            ka: None,
            ka_derived: None,
        }
    } else {
        let one_m = 1.0 - c;
        ResolventConstants {
            c,
            eta,
            regime: Regime::Under,
            hh: c * c / (e2 * one_m),
            p_norm: None,
            p_inv: None,
            z: 1.0,
            qq: Some(one_m),
            qq_inv: Some(1.0 / one_m),
            kk: Some(c / (e2 * one_m)),
            ka: Some(c * c / (e2 * one_m.powi(3))),
            ka_derived: Some(c * c / (e2 * e2 * one_m.powi(3))),
        }
    })
}
