// SPDX-License-Identifier: Apache-2.0

//! TOML run configuration.
//!
//! Every block has defaults, so an empty file is a valid configuration for
//! commands that only need the `[instance]` block. Unknown keys are errors.

use std::path::{Path, PathBuf};

use lrdo_core::empirics::TrialPlan;
use lrdo_core::experiments::{AugmentScaling, InstanceTemplate, SigmaSpec, SweepGrid, TestTemplate};
use lrdo_core::predictor::{CrossCoefficient, EtaGrid};
use lrdo_core::{matfile, Matrix, Target};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub instance: InstanceBlock,
    #[serde(default)]
    pub test: TestBlock,
    #[serde(default)]
    pub plan: PlanBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mp: Option<MpBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmm: Option<GmmBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceBlock {
    pub d: usize,
    pub n: usize,
    pub n_tst: usize,
    pub r: usize,
    pub eta_trn: f64,
    pub eta_tst: f64,
    pub sigma: SigmaSpec,
    /// `d × k` target matrix file; the identity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for InstanceBlock {
    fn default() -> Self {
        Self {
            d: 300,
            n: 600,
            n_tst: 1000,
            r: 10,
            eta_trn: 1.0,
            eta_tst: 1.0,
            sigma: SigmaSpec::SqrtN { scale: 1.0 },
            beta_path: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// In-subspace coordinates with IID Gaussian entries.
    #[default]
    Gaussian,
    /// `r × N_tst` coordinate matrix read from `path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestBlock {
    pub kind: TestKind,
    pub scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Target used at test time; enables the transfer prediction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_tst_path: Option<PathBuf>,
    pub cross: CrossCoefficient,
}

impl Default for TestBlock {
    fn default() -> Self {
        Self { kind: TestKind::Gaussian, scale: 1.0, path: None, beta_tst_path: None, cross: CrossCoefficient::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanBlock {
    pub trials: usize,
    pub master_seed: u64,
    pub integrate_test_noise: bool,
}

impl Default for PlanBlock {
    fn default() -> Self {
        Self { trials: 200, master_seed: 0, integrate_test_noise: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_values: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_stop: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_values: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub path: PathBuf,
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpBlock {
    pub shape: f64,
    /// Optional `(c_r, z)` pair at which `T1..T4` are reported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmBlock {
    pub clusters: usize,
    /// Euclidean norm of every cluster mean.
    pub mean_norm: f64,
}

impl Default for GmmBlock {
    fn default() -> Self {
        Self { clusters: 3, mean_norm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentBlock {
    pub multipliers: Vec<usize>,
    pub scaling: AugmentScaling,
}

impl Default for AugmentBlock {
    fn default() -> Self {
        Self { multipliers: vec![1, 2, 4], scaling: AugmentScaling::SqrtM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path`, resolving relative file references against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = self.instance.beta_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.test.path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.test.beta_tst_path.as_mut() {
            fix(p);
        }
        if let Some(d) = self.data.as_mut() {
            fix(&mut d.path);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.plan.master_seed = s;
        }
        if let Some(t) = o.trials {
            self.plan.trials = t;
        }
        if let Some(f) = o.format {
            self.output.format = Some(f);
        }
        if let Some(p) = &o.out {
            self.output.path = Some(p.clone());
        }
    }

    pub fn format(&self) -> Format {
        self.output.format.unwrap_or_default()
    }

    /// Checks every scalar field; file contents are checked by [`Inputs::load`].
    pub fn validate(&self) -> Result<(), CliError> {
        let i = &self.instance;
        let bad = |m: String| Err(CliError::Config(m));
        if i.d == 0 || i.n == 0 || i.n_tst == 0 || i.r == 0 {
            return bad("instance sizes d, n, n_tst and r must be positive".into());
        }
        if !(i.eta_trn.is_finite() && i.eta_trn > 0.0) {
            return bad(format!("instance.eta_trn must be positive, got {}", i.eta_trn));
        }
        if !(i.eta_tst.is_finite() && i.eta_tst >= 0.0) {
            return bad(format!("instance.eta_tst must be non-negative, got {}", i.eta_tst));
        }
        if let Err(e) = i.sigma.values(i.n, i.r) {
            return bad(format!("instance.sigma: {e}"));
        }
        if !(self.test.scale.is_finite() && self.test.scale > 0.0) {
            return bad(format!("test.scale must be positive, got {}", self.test.scale));
        }
        if self.test.kind == TestKind::File && self.test.path.is_none() {
            return bad("test.kind = \"file\" needs test.path".into());
        }
        if self.plan.trials == 0 {
            return bad("plan.trials must be at least 1".into());
        }
        if let Some(g) = &self.grid {
            let explicit = g.n_values.is_some();
            let ranged = g.n_start.is_some() || g.n_stop.is_some() || g.n_step.is_some();
            if explicit && ranged {
                return bad("grid: give either n_values or n_start/n_stop/n_step, not both".into());
            }
            if ranged && (g.n_start.is_none() || g.n_stop.is_none() || g.n_step.is_none()) {
                return bad("grid: n_start, n_stop and n_step go together".into());
            }
            if g.n_step == Some(0) {
                return bad("grid.n_step must be positive".into());
            }
            if let Err(e) = self.eta_grid().values() {
                return bad(format!("grid eta range: {e}"));
            }
        }
        if let Some(m) = &self.mp {
            if !(m.shape.is_finite() && m.shape > 0.0) {
                return bad(format!("mp.shape must be positive, got {}", m.shape));
            }
            if m.c_r.is_some() != m.z.is_some() {
                return bad("mp.c_r and mp.z go together".into());
            }
        }
        if let Some(g) = &self.gmm {
            if g.clusters == 0 || g.clusters > i.d {
                return bad(format!("gmm.clusters must be in 1..={}", i.d));
            }
            if !(g.mean_norm.is_finite() && g.mean_norm > 0.0) {
                return bad("gmm.mean_norm must be positive".into());
            }
        }
        if let Some(a) = &self.augment {
            if a.multipliers.is_empty() || a.multipliers.contains(&0) {
                return bad("augment.multipliers must be non-empty and positive".into());
            }
        }
        Ok(())
    }

    pub fn n_values(&self) -> Vec<usize> {
        match &self.grid {
            Some(GridBlock { n_values: Some(v), .. }) => v.clone(),
            Some(GridBlock { n_start: Some(a), n_stop: Some(b), n_step: Some(s), .. }) => (*a..=*b).step_by(*s).collect(),
            _ => vec![self.instance.n],
        }
    }

    pub fn sweep_grid(&self) -> SweepGrid {
        let r_values = self.grid.as_ref().and_then(|g| g.r_values.clone()).unwrap_or_else(|| vec![self.instance.r]);
        SweepGrid { d: self.instance.d, n_values: self.n_values(), r_values }
    }

    pub fn eta_grid(&self) -> EtaGrid {
        let base = EtaGrid::default();
        match &self.grid {
            Some(g) => EtaGrid {
                lo: g.eta_lo.unwrap_or(base.lo),
                hi: g.eta_hi.unwrap_or(base.hi),
                count: g.eta_count.unwrap_or(base.count),
            },
            None => base,
        }
    }

    pub fn plan(&self) -> Result<TrialPlan, CliError> {
        let mut plan = TrialPlan::new(self.plan.trials, self.plan.master_seed)?;
        if !self.plan.integrate_test_noise {
            plan = plan.with_sampled_test_noise();
        }
        Ok(plan)
    }
}

/// Matrices referenced by the configuration, loaded before any computation.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub beta: Target,
    pub beta_tst: Option<Target>,
    pub test: TestTemplate,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let read = |p: &Path| matfile::read_matrix(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())));
        let d = cfg.instance.d;
        let beta = match &cfg.instance.beta_path {
            Some(p) => Target::Matrix(check_rows(read(p)?, d, "instance.beta_path")?),
            None => Target::Identity,
        };
        let beta_tst = match &cfg.test.beta_tst_path {
            Some(p) => {
                let m = check_rows(read(p)?, d, "test.beta_tst_path")?;
                if m.ncols() != beta.out_dim(d) {
                    return Err(CliError::Config(format!(
                        "test.beta_tst_path has {} columns, the training target has {}",
                        m.ncols(),
                        beta.out_dim(d)
                    )));
                }
                Some(Target::Matrix(m))
            }
            None => None,
        };
        let test = match cfg.test.kind {
            TestKind::Gaussian => TestTemplate::Gaussian { scale: cfg.test.scale },
            TestKind::File => {
                let p = cfg.test.path.as_deref().expect("validated");
                TestTemplate::Fixed(check_rows(read(p)?, cfg.instance.r, "test.path")?)
            }
        };
        Ok(Self { beta, beta_tst, test })
    }

    pub fn template(&self, cfg: &RunConfig) -> InstanceTemplate {
        let i = &cfg.instance;
        let n_tst = match &self.test {
            TestTemplate::Fixed(l) => l.ncols(),
            TestTemplate::Gaussian { .. } => i.n_tst,
        };
        InstanceTemplate {
            n_tst,
            sigma: i.sigma.clone(),
            beta: self.beta.clone(),
            eta_trn: i.eta_trn,
            eta_tst: i.eta_tst,
            seed: i.seed,
        }
    }
}

fn check_rows(m: Matrix, rows: usize, what: &str) -> Result<Matrix, CliError> {
    if m.nrows() != rows {
        return Err(CliError::Config(format!("{what}: expected {rows} rows, found {}", m.nrows())));
    }
    Ok(m)
}
