// SPDX-License-Identifier: Apache-2.0

use lrdo_core::datagen::{self, validate_assumptions};
use lrdo_core::empirics::{self, EmpiricalRisk};
use lrdo_core::experiments::{self, AugmentScaling, RowStatus, SweepRow};
use lrdo_core::mp::{self, MpShape, Regime};
use lrdo_core::predictor::{self, CrossCoefficient, RiskBreakdown};
use lrdo_core::{ProblemInstance, TestSpec};
use serde_json::{json, Value};

use crate::config::{GmmBlock, Inputs, RunConfig};
use crate::output::{Cell, Table, SWEEP_HEADER};
use crate::{CliError, Command};

/// Result of a command before it is rendered.
pub struct Outcome {
    pub payload: Value,
    pub table: Table,
    pub warnings: Vec<String>,
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let inputs = Inputs::load(cfg)?;
    let plan = cfg.plan()?;
    let mut warnings = Vec::new();
    let (payload, table) = match cmd {
        Command::Predict => predict(cfg, &inputs, &mut warnings)?,
        Command::Simulate => simulate(cfg, &inputs, &plan, &mut warnings)?,
        Command::Sweep => sweep(cfg, &inputs, &plan, &mut warnings)?,
        Command::RmtCheck => rmt_check(cfg, &inputs, &plan, &mut warnings)?,
        Command::Mp => mp_report(cfg, &mut warnings)?,
        Command::OptNoise => opt_noise(cfg, &inputs, &mut warnings)?,
        Command::Classify => classify(cfg, &plan, &mut warnings)?,
        Command::Augment => augment(cfg, &inputs, &plan, &mut warnings)?,
        Command::Ingest => ingest(cfg, &inputs)?,
    };
    Ok(Outcome { payload, table, warnings })
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("result types are serializable")
}

fn variance_warning(c: f64, eta_trn: f64, warnings: &mut Vec<String>) {
    let msg = "under-parameterized variance uses the rederived factor Sigma^2 (Sigma^2 + eta_trn^2 I); \
               the alternative Sigma^2 (Sigma^2 + I/eta_trn^2) disagrees with simulation";
    if c < 1.0 && eta_trn != 1.0 && !warnings.iter().any(|w| w == msg) {
        warnings.push(msg.into());
    }
}

fn sweep_cells(n: usize, c: f64, r: usize, theory: Option<&RiskBreakdown>, emp: Option<&EmpiricalRisk>, rel: Option<f64>) -> Vec<Cell> {
    vec![
        Cell::Int(n as u64),
        Cell::Float(c),
        Cell::Int(r as u64),
        Cell::opt(theory.map(|t| t.bias)),
        Cell::opt(theory.map(|t| t.variance)),
        Cell::opt(theory.map(|t| t.total)),
        Cell::opt(emp.map(|e| e.mean)),
        Cell::opt(emp.and_then(|e| e.std_err)),
        Cell::opt(rel),
    ]
}

fn row_cells(row: &SweepRow) -> Vec<Cell> {
    sweep_cells(row.n, row.c, row.r, row.theory.as_ref(), row.empirical.as_ref(), row.rel_dev)
}

fn note_rows(rows: &[SweepRow], warnings: &mut Vec<String>) {
    for row in rows {
        match &row.status {
            RowStatus::Ok => {}
            RowStatus::Skipped(why) => warnings.push(format!("cell n = {}, r = {} skipped: {why}", row.n, row.r)),
            RowStatus::Failed(why) => warnings.push(format!("cell n = {}, r = {} failed: {why}", row.n, row.r)),
        }
    }
}

fn single_instance(cfg: &RunConfig, inputs: &Inputs) -> Result<(ProblemInstance, lrdo_core::Matrix), CliError> {
    let t = inputs.template(cfg);
    let i = &cfg.instance;
    let inst = t.instantiate(i.d, i.n, i.r)?;
    let l = inputs.test.coordinates(i.r, t.n_tst, t.seed)?;
    Ok((inst, l))
}

fn transfer_warning(coef: CrossCoefficient, warnings: &mut Vec<String>) {
    warnings.push(format!(
        "transfer cross term coefficient = {}; plus_train_noise was selected by a Monte-Carlo oracle over minus_test_noise",
        to_value(&coef).as_str().unwrap_or("?")
    ));
}

fn predict(cfg: &RunConfig, inputs: &Inputs, warnings: &mut Vec<String>) -> Result<(Value, Table), CliError> {
    let (inst, l) = single_instance(cfg, inputs)?;
    let c = inst.c();
    let main = predictor::predict_main(&inst, &l)?;
    let (_, wstar) = predictor::predict_wstar(&inst, &l)?;
    let excess = (wstar.total > 0.0).then(|| (main.total - wstar.total) / wstar.total);
    variance_warning(c, inst.eta_trn, warnings);
    let transfer = match &inputs.beta_tst {
        Some(bt) => {
            transfer_warning(cfg.test.cross, warnings);
            Some(predictor::predict_transfer(&inst, &l, bt, cfg.test.cross)?)
        }
        None => None,
    };
    let mut table = Table::new(&SWEEP_HEADER);
    table.push(sweep_cells(inst.n, c, inst.r, Some(&main), None, None));
    let payload = json!({
        "d": inst.d,
        "n": inst.n,
        "r": inst.r,
        "c": c,
        "main": main,
        "wstar": wstar,
        "relative_excess": excess,
        "transfer": transfer,
        "assumptions": validate_assumptions(&inst),
    });
    Ok((payload, table))
}

fn simulate(
    cfg: &RunConfig,
    inputs: &Inputs,
    plan: &empirics::TrialPlan,
    warnings: &mut Vec<String>,
) -> Result<(Value, Table), CliError> {
    let (inst, l) = single_instance(cfg, inputs)?;
    let c = inst.c();
    variance_warning(c, inst.eta_trn, warnings);
    let spec = TestSpec::in_subspace(l.clone());
    let mut table = Table::new(&SWEEP_HEADER);
    let payload = match &inputs.beta_tst {
        Some(bt) => {
            transfer_warning(cfg.test.cross, warnings);
            let th = predictor::predict_transfer(&inst, &l, bt, cfg.test.cross)?;
            let emp = empirics::run_transfer_risk(&inst, &spec, bt, plan)?;
            let rel = experiments::relative_deviation(emp.mean, th.total);
            let flat = RiskBreakdown { bias: th.total - th.base.variance, total: th.total, ..th.base.clone() };
            table.push(sweep_cells(inst.n, c, inst.r, Some(&flat), Some(&emp), rel));
            json!({ "c": c, "theory": th, "empirical": emp, "rel_dev": rel })
        }
        None => {
            let th = predictor::predict_main(&inst, &l)?;
            let emp = empirics::run_risk(&inst, &spec, plan)?;
            let rel = experiments::relative_deviation(emp.mean, th.total);
            table.push(sweep_cells(inst.n, c, inst.r, Some(&th), Some(&emp), rel));
            json!({ "c": c, "theory": th, "empirical": emp, "rel_dev": rel })
        }
    };
    Ok((payload, table))
}

fn peak_value(r: lrdo_core::Result<experiments::PeakReport>) -> Value {
    match r {
        Ok(p) => to_value(&p),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn sweep(cfg: &RunConfig, inputs: &Inputs, plan: &empirics::TrialPlan, warnings: &mut Vec<String>) -> Result<(Value, Table), CliError> {
    let grid = cfg.sweep_grid();
    let t = inputs.template(cfg);
    let rows = experiments::sweep(&t, &inputs.test, &grid, plan)?;
    note_rows(&rows, warnings);
    for row in rows.iter().filter(|r| r.is_ok()) {
        variance_warning(row.c, t.eta_trn, warnings);
    }
    let mut table = Table::new(&SWEEP_HEADER);
    for row in &rows {
        table.push(row_cells(row));
    }
    let payload = json!({
        "rows": rows,
        "empirical_peak": peak_value(experiments::detect_double_descent(&rows)),
        "theory_peak": peak_value(experiments::detect_theory_peak(&rows)),
    });
    Ok((payload, table))
}

fn rmt_check(cfg: &RunConfig, inputs: &Inputs, plan: &empirics::TrialPlan, warnings: &mut Vec<String>) -> Result<(Value, Table), CliError> {
    let (inst, _) = single_instance(cfg, inputs)?;
    let report = empirics::estimate_lemmas(&inst, plan)?;
    if report.get(empirics::LemmaName::KA).is_some() {
        warnings.push("KA lemma constant uses the dimensionally consistent c^2/(eta^4 (1-c)^3)".into());
    }
    variance_warning(inst.c(), inst.eta_trn, warnings);
    let mut table = Table::new(&["lemma", "entries", "max_abs_z", "mean_abs_z"]);
    for e in &report.estimates {
        let z = &e.z_scores;
        let finite: Vec<f64> = z.iter().filter(|v| v.is_finite()).map(|v| v.abs()).collect();
        let mean = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        table.push(vec![Cell::Text(e.name.as_str().into()), Cell::Int(z.len() as u64), Cell::Float(e.max_abs_z()), Cell::opt(mean)]);
    }
    Ok((to_value(&report), table))
}

fn mp_report(cfg: &RunConfig, warnings: &mut Vec<String>) -> Result<(Value, Table), CliError> {
    let block = cfg.mp.as_ref().ok_or_else(|| CliError::Config("the mp command needs an [mp] block".into()))?;
    let shape = MpShape::new(block.shape)?;
    let (lo, hi) = shape.support();
    let mass = mp::total_mass(shape);
    let mean = mp::mp_expectation(shape, &|l| l);
    let mut table = Table::new(&["quantity", "value"]);
    let mut push = |k: &str, v: f64| table.push(vec![Cell::Text(k.into()), Cell::Float(v)]);
    push("support_lo", lo);
    push("support_hi", hi);
    push("atom_mass", shape.atom_mass());
    push("total_mass", mass);
    push("mean", mean);
    let t = match (block.c_r, block.z) {
        (Some(c_r), Some(z)) => {
            let t = mp::t_functions(c_r, z)?;
            for (k, v) in ["t1", "t2", "t3", "t4"].iter().zip(t.canonical) {
                push(k, v);
            }
            for (k, ok) in ["T1", "T2", "T3", "T4"].iter().zip(t.agree) {
                if !ok {
                    warnings.push(format!("{k} closed form disagrees with quadrature at c_r = {c_r}, z = {z}; quadrature value used"));
                }
            }
            Some(t)
        }
        _ => None,
    };
    let payload = json!({
        "shape": block.shape,
        "support": [lo, hi],
        "atom_mass": shape.atom_mass(),
        "total_mass": mass,
        "mean": mean,
        "t_values": t,
    });
    Ok((payload, table))
}

fn opt_noise(cfg: &RunConfig, inputs: &Inputs, warnings: &mut Vec<String>) -> Result<(Value, Table), CliError> {
    let grid = cfg.sweep_grid();
    let t = inputs.template(cfg);
    let eta_grid = cfg.eta_grid();
    let rows = experiments::optimal_eta_curve(&t, &inputs.test, &grid, eta_grid)?;
    let mut table = Table::new(&["n", "c", "r", "eta_star", "risk_star"]);
    for row in &rows {
        match &row.status {
            RowStatus::Ok => {}
            RowStatus::Skipped(w) | RowStatus::Failed(w) => warnings.push(format!("cell n = {}, r = {}: {w}", row.n, row.r)),
        }
        if row.c < 1.0 {
            variance_warning(row.c, 0.0, warnings);
        }
        table.push(vec![Cell::Int(row.n as u64), Cell::Float(row.c), Cell::Int(row.r as u64), Cell::opt(row.eta_star), Cell::opt(row.risk_star)]);
    }
    let pts = |f: fn(&experiments::OptEtaRow) -> Option<f64>| rows.iter().filter_map(|r| f(r).map(|v| (r.c, v))).collect::<Vec<_>>();
    let payload = json!({
        "eta_grid": eta_grid,
        "rows": rows,
        "eta_star_peak": peak_value(experiments::detect_peak(&pts(|r| r.eta_star))),
        "risk_star_peak": peak_value(experiments::detect_peak(&pts(|r| r.risk_star))),
    });
    Ok((payload, table))
}

/// `k` orthogonal means `norm · e_j` in `d` dimensions.
pub fn cluster_means(d: usize, g: &GmmBlock) -> Vec<Vec<f64>> {
    (0..g.clusters).map(|j| (0..d).map(|i| if i == j { g.mean_norm } else { 0.0 }).collect()).collect()
}

fn classify(cfg: &RunConfig, plan: &empirics::TrialPlan, warnings: &mut Vec<String>) -> Result<(Value, Table), CliError> {
    let g = cfg.gmm.clone().unwrap_or_default();
    let i = &cfg.instance;
    let means = cluster_means(i.d, &g);
    let rows = experiments::classification_sweep(&means, &cfg.n_values(), i.n_tst, i.eta_trn, i.eta_tst, i.seed, plan)?;
    note_rows(&rows, warnings);
    for row in rows.iter().filter(|r| r.is_ok()) {
        variance_warning(row.c, i.eta_trn, warnings);
    }
    let mut header: Vec<&str> = SWEEP_HEADER.to_vec();
    header.extend(["acc_mean", "acc_se"]);
    let mut table = Table::new(&header);
    for row in &rows {
        let mut cells = row_cells(row);
        cells.push(Cell::opt(row.accuracy.map(|a| a.mean)));
        cells.push(Cell::opt(row.accuracy.and_then(|a| a.std_err)));
        table.push(cells);
    }
    let payload = json!({
        "clusters": g.clusters,
        "mean_norm": g.mean_norm,
        "rows": rows,
        "empirical_peak": peak_value(experiments::detect_double_descent(&rows)),
    });
    Ok((payload, table))
}

fn augment(cfg: &RunConfig, inputs: &Inputs, plan: &empirics::TrialPlan, warnings: &mut Vec<String>) -> Result<(Value, Table), CliError> {
    let a = cfg.augment.clone().unwrap_or_default();
    let (base, l) = single_instance(cfg, inputs)?;
    if a.scaling == AugmentScaling::SqrtM {
        warnings.push("augmentation scales singular values by sqrt(m); a Monte-Carlo oracle selected it over m".into());
    }
    let mut header = vec!["m"];
    header.extend(SWEEP_HEADER);
    let mut table = Table::new(&header);
    let mut rows = Vec::new();
    for &m in &a.multipliers {
        let row = experiments::augment_fresh_noise(&base, m, &l, a.scaling, plan)?;
        variance_warning(row.c, base.eta_trn, warnings);
        let mut cells = vec![Cell::Int(m as u64)];
        cells.extend(row_cells(&row));
        table.push(cells);
        rows.push(json!({ "m": m, "row": row }));
    }
    Ok((json!({ "scaling": a.scaling, "rows": rows }), table))
}

fn ingest(cfg: &RunConfig, inputs: &Inputs) -> Result<(Value, Table), CliError> {
    let data = cfg.data.as_ref().ok_or_else(|| CliError::Config("the ingest command needs a [data] block".into()))?;
    let frag = datagen::ingest_and_pcr(&data.path, cfg.instance.r, data.normalize)?;
    let (d, n) = frag.data.shape();
    let sigma = frag.sigma.clone();
    let inst = frag.into_instance(inputs.beta.clone(), cfg.instance.eta_trn, cfg.instance.eta_tst, cfg.instance.n_tst)?;
    let regime = (inst.c() != 1.0).then(|| Regime::of(inst.c()));
    let mut table = Table::new(&["index", "sigma"]);
    for (k, s) in sigma.iter().enumerate() {
        table.push(vec![Cell::Int(k as u64 + 1), Cell::Float(*s)]);
    }
    let payload = json!({
        "d": d,
        "n": n,
        "r": inst.r,
        "c": inst.c(),
        "regime": regime,
        "sigma": sigma,
        "assumptions": validate_assumptions(&inst),
    });
    Ok((payload, table))
}
