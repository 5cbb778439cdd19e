//! Run configuration, k-sweeps with verdicts, self-test and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{EvoError, Result};
use crate::evo_solver::{with_nu_escalation, EvoProblem, NeumannSolver, SteppingSolver};
use crate::exec;
use crate::homogenizer::{
    time_periodic_limit, wot_limit_estimate, CellFunction, HomogenizedModel, MemoryKernel, Truncation, WotEstimate,
};
use crate::linalg::{Coef, C64};
use crate::operator_calculus::{operator_norm_estimate, EvolutionaryOp, Field};
use crate::scenario_suite::{
    build_scenario, default_grid, extrapolate_pairings, gap_criteria, max_gap, pairings, validate_schedule,
    ReferenceKind, Scenario, ScenarioConfig,
};
use crate::weighted_space::{SpaceModel, TimeGrid, WeightedSignal};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuPolicy {
    /// Starting `ν`; the scenario grid's `ν` when absent.
    pub initial: Option<f64>,
    pub factor: f64,
    pub max_retries: usize,
}

impl Default for NuPolicy {
    fn default() -> Self {
        Self { initial: None, factor: 2.0, max_retries: 3 }
    }
}

fn default_dict_size() -> usize {
    8
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub grid: Option<TimeGrid>,
    #[serde(default)]
    pub space: Option<SpaceModel>,
    #[serde(default)]
    pub schedule: Option<Vec<usize>>,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default = "default_dict_size")]
    pub dict_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub truncation: Option<Truncation>,
    #[serde(default)]
    pub nu_policy: NuPolicy,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn for_scenario(name: &str) -> Self {
        Self {
            scenario: ScenarioSpec { name: name.into(), params: Value::Null },
            grid: None,
            space: None,
            schedule: None,
            tolerance: None,
            dict_size: default_dict_size(),
            seed: default_seed(),
            truncation: None,
            nu_policy: NuPolicy::default(),
            output_dir: None,
        }
    }

    pub fn with_params(mut self, params: Value) -> Self {
        self.scenario.params = params;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| EvoError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| EvoError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.schedule {
            validate_schedule(s)?;
        }
        if let Some(nu) = self.nu_policy.initial {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(EvoError::ConfigInvalid(format!("nu_policy.initial must be positive, got {nu}")));
            }
        }
        if !(self.nu_policy.factor > 1.0) {
            return Err(EvoError::ConfigInvalid(format!("nu_policy.factor must exceed 1, got {}", self.nu_policy.factor)));
        }
        if self.dict_size == 0 {
            return Err(EvoError::ConfigInvalid("dict_size must be positive".into()));
        }
        if let Some(g) = self.grid {
            g.validate()?;
        }
        if let Some(s) = self.space {
            s.validate()?;
        }
        Ok(())
    }

    fn base_grid(&self) -> Result<TimeGrid> {
        match self.grid {
            Some(g) => Ok(g),
            None => default_grid(&self.scenario.name),
        }
    }

    /// Scenario at rate `nu`.
    pub fn build(&self, nu: Option<f64>) -> Result<Scenario> {
        let mut grid = self.grid;
        if let Some(nu) = nu {
            grid = Some(self.base_grid()?.with_nu(nu)?);
        }
        let cfg = ScenarioConfig {
            name: self.scenario.name.clone(),
            params: self.scenario.params.clone(),
            grid,
            space: self.space,
            schedule: self.schedule.clone(),
            tolerance: self.tolerance,
        };
        build_scenario(&cfg, self.truncation)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum Verdict {
    Converged,
    NotConverged,
    Aborted(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct PerK {
    pub k: usize,
    pub pairings: Vec<C64>,
    pub gap: f64,
    pub terms_used: usize,
    pub tail_bound: f64,
    pub contraction_q: f64,
    pub solution_norm: f64,
    pub runtime_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WotSummary {
    pub converged: bool,
    pub convergence_rate: f64,
    pub final_increment: f64,
    pub cauchy_pairs: usize,
    pub pairs: usize,
}

impl From<&WotEstimate> for WotSummary {
    fn from(w: &WotEstimate) -> Self {
        Self {
            converged: w.converged,
            convergence_rate: w.convergence_rate,
            final_increment: w.final_increment,
            cauchy_pairs: w.cauchy.iter().filter(|c| **c).count(),
            pairs: w.cauchy.len(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Runtime {
    pub total_ms: f64,
    pub build_ms: f64,
    pub sweep_ms: f64,
    pub parallel: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GConvReport {
    pub scenario: Value,
    pub nu: f64,
    pub nu_escalations: usize,
    pub tolerance: f64,
    pub reference: ReferenceKind,
    pub reference_pairings: Vec<C64>,
    pub per_k: Vec<PerK>,
    pub gap_curve: Vec<(usize, f64)>,
    /// Gaps at each k to the closed-form series limit, when the reference is an oracle.
    pub series_gap_curve: Option<Vec<(usize, f64)>>,
    /// Gaps at each k to the scenario's secondary comparison solution.
    pub surrogate_gap_curve: Option<Vec<(usize, f64)>>,
    pub surrogate_label: String,
    pub verdict: Verdict,
    pub homogenized: Value,
    pub wot: Option<WotSummary>,
    #[serde(skip)]
    pub wot_estimate: Option<WotEstimate>,
    #[serde(skip)]
    pub kernel: Option<MemoryKernel>,
    pub runtime: Runtime,
}

impl GConvReport {
    pub fn final_gap(&self) -> f64 {
        self.gap_curve.last().map_or(f64::NAN, |g| g.1)
    }

    pub fn converged(&self) -> bool {
        self.verdict == Verdict::Converged
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn is_contraction_failure(e: &EvoError) -> bool {
    matches!(e, EvoError::NotContractive { .. } | EvoError::NotContractiveAtFrequency { .. })
}

/// Solves along the schedule, compares against the limit and writes reports
/// to `output_dir` when set. Contraction failures raise `ν` per the policy.
pub fn run_gconv(config: &RunConfig) -> Result<GConvReport> {
    let t0 = Instant::now();
    config.validate()?;
    if let Some(s) = &config.schedule {
        if s.len() < 3 {
            return Err(EvoError::ScheduleTooShort(s.len()));
        }
    }
    let nu0 = match config.nu_policy.initial {
        Some(nu) => nu,
        None => config.base_grid()?.nu,
    };
    let mut attempts = 0usize;
    let policy = config.nu_policy;
    let ((scenario, sweep, build_ms, sweep_ms), nu) = with_nu_escalation(nu0, policy.factor, policy.max_retries, |nu| {
        attempts += 1;
        let tb = Instant::now();
        let sc = config.build(Some(nu))?;
        if sc.schedule.len() < 3 {
            return Err(EvoError::ScheduleTooShort(sc.schedule.len()));
        }
        let build_ms = ms(tb);
        let ts = Instant::now();
        let dicts = sc.dictionaries(config.dict_size, config.seed);
        let sweep = exec::try_map_indexed(sc.schedule.len(), |i| {
            let tk = Instant::now();
            let k = sc.schedule[i];
            let s = sc.solve(k)?;
            let p = pairings(&s.u, &dicts)?;
            let norm = s.u.iter().map(|u| u.norm_sq()).sum::<f64>().sqrt();
            Ok::<_, EvoError>(PerK {
                k,
                pairings: p,
                gap: f64::NAN,
                terms_used: s.terms_used,
                tail_bound: s.tail_bound,
                contraction_q: s.contraction_q,
                solution_norm: norm,
                runtime_ms: ms(tk),
            })
        })?;
        Ok((sc, sweep, build_ms, ms(ts)))
    })
    .map_err(|e| match e {
        EvoError::Aborted(m) => EvoError::Aborted(m),
        e if is_contraction_failure(&e) => EvoError::Aborted(e.to_string()),
        e => e,
    })?;
    let mut per_k = sweep;
    let dicts = scenario.dictionaries(config.dict_size, config.seed);
    let table: Vec<Vec<C64>> = per_k.iter().map(|p| p.pairings.clone()).collect();
    let limit_pairings = match scenario.reference_solution()? {
        Some(u) => Some(pairings(&u, &dicts)?),
        None => None,
    };
    let reference_pairings = match (scenario.reference, scenario.oscillating, &limit_pairings) {
        (ReferenceKind::ClosedForm, _, Some(p)) | (_, false, Some(p)) => p.clone(),
        _ => extrapolate_pairings(&table),
    };
    for p in per_k.iter_mut() {
        p.gap = max_gap(&p.pairings, &reference_pairings);
    }
    let gap_curve: Vec<(usize, f64)> = per_k.iter().map(|p| (p.k, p.gap)).collect();
    let curve_against = |target: &[C64]| -> Vec<(usize, f64)> {
        per_k.iter().map(|p| (p.k, max_gap(&p.pairings, target))).collect()
    };
    let series_gap_curve = match (scenario.reference, &limit_pairings) {
        (ReferenceKind::Oracle, Some(l)) if scenario.oscillating => Some(curve_against(l)),
        _ => None,
    };
    let surrogate_gap_curve = match scenario.surrogate_solution()? {
        Some(u) => Some(curve_against(&pairings(&u, &dicts)?)),
        None => None,
    };
    let wot_estimate = if scenario.wot_probe && scenario.oscillating {
        Some(wot_limit_estimate(&scenario.solution_sequence()?, &dicts[0])?)
    } else {
        None
    };
    let kernel = scenario.kernel().ok();
    let gaps: Vec<f64> = gap_curve.iter().map(|g| g.1).collect();
    let verdict = if gap_criteria(&gaps, scenario.tolerance) { Verdict::Converged } else { Verdict::NotConverged };
    let homogenized = match (&scenario.model, &scenario.block_model) {
        (Some(m), _) => serde_json::to_value(m)?,
        (None, Some(b)) => json!({ "kind": "block", "L": b.b11.len().saturating_sub(1), "J": b.j, "n11_inv_hom": crate::homogenizer::coef_json(&b.n11_inv_hom) }),
        _ => Value::Null,
    };
    let report = GConvReport {
        scenario: scenario.summary(),
        nu,
        nu_escalations: attempts - 1,
        tolerance: scenario.tolerance,
        reference: scenario.reference,
        reference_pairings,
        per_k,
        gap_curve,
        series_gap_curve,
        surrogate_gap_curve,
        surrogate_label: scenario.surrogate_label.clone(),
        verdict,
        homogenized,
        wot: wot_estimate.as_ref().map(WotSummary::from),
        wot_estimate,
        kernel,
        runtime: Runtime { total_ms: ms(t0), build_ms, sweep_ms, parallel: exec::is_parallel() },
    };
    if let Some(dir) = &config.output_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

/// `gap_curve.csv`, `pairings.csv`, `per_k.csv`, optional `wot_pairings.csv`
/// and `report.json`. Everything except the runtime block is deterministic.
pub fn write_report(report: &GConvReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("gap_curve.csv"))?;
    let mut header = vec!["k".to_string(), "gap".to_string()];
    if report.series_gap_curve.is_some() {
        header.push("series_gap".into());
    }
    if report.surrogate_gap_curve.is_some() {
        header.push(format!("{}_gap", if report.surrogate_label.is_empty() { "surrogate" } else { &report.surrogate_label }));
    }
    w.write_record(&header)?;
    for (i, (k, g)) in report.gap_curve.iter().enumerate() {
        let mut row = vec![k.to_string(), num(*g)];
        if let Some(c) = &report.series_gap_curve {
            row.push(num(c[i].1));
        }
        if let Some(c) = &report.surrogate_gap_curve {
            row.push(num(c[i].1));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("pairings.csv"))?;
    w.write_record(["k", "probe", "re", "im"])?;
    for p in &report.per_k {
        for (j, z) in p.pairings.iter().enumerate() {
            w.write_record([p.k.to_string(), j.to_string(), num(z.re), num(z.im)])?;
        }
    }
    for (j, z) in report.reference_pairings.iter().enumerate() {
        w.write_record(["ref".to_string(), j.to_string(), num(z.re), num(z.im)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("per_k.csv"))?;
    w.write_record(["k", "gap", "terms_used", "tail_bound", "contraction_q", "solution_norm"])?;
    for p in &report.per_k {
        w.write_record([
            p.k.to_string(),
            num(p.gap),
            p.terms_used.to_string(),
            num(p.tail_bound),
            num(p.contraction_q),
            num(p.solution_norm),
        ])?;
    }
    w.flush()?;

    if let Some(est) = &report.wot_estimate {
        est.write_csv(&dir.join("wot_pairings.csv"))?;
    }
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Writes the report's memory kernel as `t,K_re,K_im`.
pub fn export_kernel(report: &GConvReport, path: &Path) -> Result<()> {
    match &report.kernel {
        Some(k) => k.write_csv(path),
        None => Err(EvoError::NoKernelAvailable),
    }
}

/// Kernel of a scenario's limit without running the sweep.
pub fn scenario_kernel(config: &RunConfig) -> Result<MemoryKernel> {
    config.build(config.nu_policy.initial)?.kernel()
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured quantity next to its limit.
    pub measured: f64,
    pub limit: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SelftestSummary {
    pub checks: Vec<Check>,
}

impl SelftestSummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{tag} {:<28} measured {:.3e} limit {:.3e}  {}", c.name, c.measured, c.limit, c.detail);
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(out, "{passed}/{} checks passed", self.checks.len());
        out
    }

    fn push(&mut self, name: &str, outcome: Result<(f64, f64, bool, String)>) {
        let check = match outcome {
            Ok((measured, limit, passed, detail)) => Check { name: name.into(), passed, measured, limit, detail },
            Err(e) => Check { name: name.into(), passed: false, measured: f64::NAN, limit: f64::NAN, detail: e.to_string() },
        };
        self.checks.push(check);
    }
}

fn random_signal(grid: TimeGrid, space: SpaceModel, seed: u64) -> WeightedSignal {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let values = (0..grid.n_steps * space.ndof()).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    WeightedSignal { grid, space, values }
}

/// Runs the core invariant checks; failures are reported, not returned.
pub fn run_selftest() -> SelftestSummary {
    let mut s = SelftestSummary::default();
    let scalar = SpaceModel::finite_dim(1);

    s.push("inverse_pair", (|| {
        let g = TimeGrid::new(1.0 / 1024.0, 1024, 4.0)?;
        let space = SpaceModel::finite_dim(2);
        let di = EvolutionaryOp::compose(vec![EvolutionaryOp::derivative(g, space), EvolutionaryOp::integration(g, space)])?;
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            let f = random_signal(g, space, seed);
            worst = worst.max(di.apply(&f)?.sub(&f).max_abs());
        }
        Ok((worst, 0.0, worst == 0.0, "D(I f) = f on 10 random signals".into()))
    })());

    for nu in [1.0, 4.0, 16.0] {
        s.push(&format!("integration_norm_nu{nu}"), (|| {
            let g = TimeGrid::new(1e-3, ((16.0 / nu) / 1e-3) as usize, nu)?;
            let est = operator_norm_estimate(&EvolutionaryOp::integration(g, scalar), 2, 400, 1e-10, 3)?.value;
            let upper = g.integration_norm_bound();
            let lower = 0.9 / nu;
            Ok((est, upper, est <= upper * (1.0 + 1e-9) && est >= lower, format!("estimate in [{lower:.4}, bound]")))
        })());
    }

    s.push("neumann_vs_stepping", (|| {
        let g = TimeGrid::new(1e-3, 1000, 4.0)?;
        let space = SpaceModel::finite_dim(2);
        let m = EvolutionaryOp::multiplication(
            g,
            space,
            Field::from_fn(&g, |t| Coef::Dense(crate::linalg::Mat::from_diagonal_element(2, 2, C64::new(2.0 + (6.0 * t).sin(), 0.0)))),
        )?;
        let n = EvolutionaryOp::constant(g, space, Coef::real(0.5))?;
        let f = WeightedSignal::from_fn(g, space, |t, dof| C64::new((-(t - 0.3) * (t - 0.3) * 50.0).exp() * (1 + dof) as f64, 0.0));
        let p = EvoProblem::new(m.clone(), n.clone(), f.clone())?;
        let a = NeumannSolver::new(&p.m, &p.n)?.solve(&p.f, 400, 1e-12)?.u;
        let b = SteppingSolver::new(&m, &n)?.solve(&f)?;
        let gap = a.rel_dist(&b);
        Ok((gap, 1e-10, gap <= 1e-10, "same discrete problem, two solvers".into()))
    })());

    s.push("harmonic_mean_limit", (|| {
        let g = TimeGrid::new(1.0 / 256.0, 256, 4.0)?;
        let space = SpaceModel::torus_grid(1, 16, 1);
        let a = CellFunction::two_valued(1, 1.0, 3.0);
        let model = HomogenizedModel::from_cells(&a, None, g, space, Truncation::tol(1e-12))?;
        let c0 = model.m_hom[0].inverse().and_then(|c| c.as_scalar()).unwrap_or(C64::new(f64::NAN, 0.0));
        let err = (c0.re - 1.5).abs() + c0.im.abs();
        Ok((err, 1e-12, err <= 1e-12, "effective coefficient 3/2".into()))
    })());

    s.push("time_periodic_closed_form", (|| {
        let g = TimeGrid::new(1.0 / 256.0, 256, 4.0)?;
        let a = CellFunction::two_valued(1, 1.0, 3.0);
        let b = CellFunction::constant(1, 1.0);
        let model = time_periodic_limit(&a, Some(&b), g, scalar, Truncation::tol(1e-12))?;
        let (m, n) = model.closed_form.clone().ok_or(EvoError::NoKernelAvailable)?;
        let err = (m.as_scalar().unwrap_or_default() - 1.5).norm() + (n.as_scalar().unwrap_or_default() - 1.0).norm();
        Ok((err, 1e-12, err <= 1e-12, "limit (3/2) d0 + 1".into()))
    })());

    s.push("invalid_grid_rejected", (|| {
        let r = TimeGrid::new(0.5, 16, 2.0);
        let detail = match &r {
            Err(e) => format!("rejected: {e}"),
            Ok(_) => "accepted nu*dt >= 1".into(),
        };
        Ok((0.0, 0.0, r.is_err(), detail))
    })());

    s.push("kernel_csv_roundtrip", (|| {
        let dir = std::env::temp_dir().join(format!("evohom-selftest-{}", std::process::id()));
        fs::create_dir_all(&dir)?;
        let path = dir.join("kernel.csv");
        let k = MemoryKernel {
            dt: 0.125,
            samples: (0..16).map(|i| C64::new((-(i as f64) * 0.125).exp(), 0.1 * i as f64)).collect(),
            translation_mismatch: 0.0,
        };
        k.write_csv(&path)?;
        let back = MemoryKernel::read_csv(&path)?;
        let exact = back.samples == k.samples;
        let bad = dir.join("corrupt.csv");
        fs::write(&bad, "t,K_re,K_im\n0,1,zero\n")?;
        let corrupt = match MemoryKernel::read_csv(&bad) {
            Err(EvoError::Parse { path, .. }) => path == bad,
            _ => false,
        };
        let _ = fs::remove_dir_all(&dir);
        Ok((0.0, 0.0, exact && corrupt, format!("roundtrip exact: {exact}, corrupt file reported with path: {corrupt}")))
    })());

    for name in crate::scenario_suite::SCENARIO_NAMES {
        s.push(&format!("nu_escalation_{name}"), (|| {
            let cfg = RunConfig::for_scenario(name);
            let nu0 = cfg.base_grid()?.nu;
            let (_, nu) = with_nu_escalation(nu0, cfg.nu_policy.factor, cfg.nu_policy.max_retries, |nu| {
                let sc = cfg.build(Some(nu))?;
                sc.solve(sc.schedule[0])
            })?;
            Ok((nu, nu0 * cfg.nu_policy.factor.powi(cfg.nu_policy.max_retries as i32), true, "first schedule point solves".into()))
        })());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let cfg = RunConfig::from_json(r#"{"scenario": {"name": "periodic_ode"}}"#).unwrap();
        assert_eq!(cfg.dict_size, 8);
        assert_eq!(cfg.nu_policy.max_retries, 3);
        assert!(RunConfig::from_json(r#"{"scenario": {"name": "x"}, "schedule": [2, 1]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"scenario": {"name": "x"}, "nu_policy": {"initial": -1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"scenario": {"name": "x"}, "bogus": 1}"#).is_err());
    }

    #[test]
    fn short_schedule_is_rejected() {
        let mut cfg = RunConfig::for_scenario("periodic_ode");
        cfg.schedule = Some(vec![1]);
        assert!(matches!(run_gconv(&cfg), Err(EvoError::ScheduleTooShort(1))));
    }
}
