//! Built-in experiments. Each one bundles an oscillating coefficient family,
//! a right-hand side, the limit the solutions should approach and a tolerance.

use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{EvoError, Result};
use crate::evo_solver::{empty_space, solve_block, BlockEvoProblem, BlockSignal, NeumannSolver, SteppingSolver};
use crate::homogenizer::{
    assemble_symbol_valued, extract_memory_kernel, time_periodic_limit, BlockModel, CellFunction, HomogenizedModel,
    MemoryKernel, OperatorSequence, ProbeMap, SequenceMeta, SymbolLimits, Truncation,
};
use crate::linalg::{Coef, Mat, C64, ONE, ZERO};
use crate::operator_calculus::{
    convolution_op, fractional_power_op, shift_op, EvolutionaryOp, FreqPoint, InverseMethod, Kernel,
};
use crate::weighted_space::{
    inner_product, make_test_dictionary, periodic_bump, raised_cosine, SpaceModel, TestDictionary, TimeGrid,
    WeightedSignal,
};

pub const SCENARIO_NAMES: [&str; 9] = [
    "periodic_ode",
    "tartar_memory",
    "dbf_surrogate",
    "convolution",
    "delay",
    "fractional",
    "time_periodic",
    "higher_order",
    "dae_block",
];

/// Default tolerance for k-sweep pairing gaps.
pub const SWEEP_TOLERANCE: f64 = 5e-3;
/// Default tolerance for closed-form identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-6;
pub const MAX_TERMS: usize = 400;
pub const SOLVE_TOL: f64 = 1e-11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Limit from averaged cell data.
    ClosedForm,
    /// Limit estimated from the brute-force sweep itself.
    Oracle,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Neumann,
    Stepping,
    Block,
    Symbol,
}

/// A scalar cell profile: a constant, or `[lo, hi]` on the two halves `y₀ < ½`, `y₀ ≥ ½`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellSpec {
    Constant(f64),
    TwoValued([f64; 2]),
}

impl CellSpec {
    pub fn values(&self) -> [f64; 2] {
        match *self {
            CellSpec::Constant(v) => [v, v],
            CellSpec::TwoValued(p) => p,
        }
    }

    pub fn is_constant(&self) -> bool {
        let [a, b] = self.values();
        a == b
    }

    pub fn is_zero(&self) -> bool {
        self.values() == [0.0, 0.0]
    }

    pub fn mean(&self) -> f64 {
        let [a, b] = self.values();
        0.5 * (a + b)
    }

    pub fn harmonic_mean(&self) -> f64 {
        let [a, b] = self.values();
        2.0 / (1.0 / a + 1.0 / b)
    }

    pub fn min(&self) -> f64 {
        let [a, b] = self.values();
        a.min(b)
    }

    pub fn sup(&self) -> f64 {
        let [a, b] = self.values();
        a.abs().max(b.abs())
    }

    pub fn at(&self, y0: f64) -> f64 {
        let [lo, hi] = self.values();
        if y0.rem_euclid(1.0) < 0.5 {
            lo
        } else {
            hi
        }
    }

    /// `v·I_m`; two quadrature nodes per axis integrate it exactly.
    pub fn cell(&self, d: usize, m: usize) -> CellFunction {
        let s = *self;
        CellFunction::new(d, m, 2, move |y| Mat::identity(m, m) * C64::new(s.at(y[0]), 0.0))
    }

    fn check_positive(&self) -> Result<()> {
        let c = self.min();
        if !(c > 0.0) {
            return Err(EvoError::NotCoerciveOnCell { c });
        }
        Ok(())
    }
}

/// Length of `{y ∈ [a, b] : frac(y) < ½}`.
fn lower_half_measure(a: f64, b: f64) -> f64 {
    let f = |y: f64| 0.5 * y.floor() + (y - y.floor()).min(0.5);
    f(b) - f(a)
}

/// Exact harmonic mean of `v(k x₀)` over `x₀ ∈ [lo, hi]`.
fn laminate_harmonic(spec: &CellSpec, k: usize, lo: f64, hi: f64) -> f64 {
    let [a, b] = spec.values();
    if a == b {
        return a;
    }
    let (ya, yb) = (k as f64 * lo, k as f64 * hi);
    let theta = lower_half_measure(ya, yb) / (yb - ya);
    1.0 / (theta / a + (1.0 - theta) / b)
}

/// Scenario selection as read from JSON: `name`, `params`, `grid`, `space`,
/// `schedule`, `tolerance`. Missing entries take the scenario defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub grid: Option<TimeGrid>,
    #[serde(default)]
    pub space: Option<SpaceModel>,
    #[serde(default)]
    pub schedule: Option<Vec<usize>>,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

impl ScenarioConfig {
    pub fn named(name: &str) -> Self {
        Self { name: name.into(), ..Self::default() }
    }

    pub fn with_params(mut self, params: Value) -> Self {
        self.params = params;
        self
    }

    pub fn with_grid(mut self, grid: TimeGrid) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn with_schedule(mut self, schedule: Vec<usize>) -> Self {
        self.schedule = Some(schedule);
        self
    }

    fn setup(&self, truncation: Option<Truncation>) -> Setup {
        Setup {
            grid: self.grid,
            space: self.space,
            schedule: self.schedule.clone(),
            tolerance: self.tolerance,
            truncation,
        }
    }
}

/// Overrides shared by all builders.
#[derive(Clone, Debug, Default)]
pub struct Setup {
    pub grid: Option<TimeGrid>,
    pub space: Option<SpaceModel>,
    pub schedule: Option<Vec<usize>>,
    pub tolerance: Option<f64>,
    pub truncation: Option<Truncation>,
}

impl Setup {
    fn grid_or(&self, name: &str) -> Result<TimeGrid> {
        match self.grid {
            Some(g) => {
                g.validate()?;
                Ok(g)
            }
            None => default_grid(name),
        }
    }

    fn space_or(&self, default: SpaceModel, ok: impl Fn(&SpaceModel) -> bool, what: &str) -> Result<SpaceModel> {
        let s = self.space.unwrap_or(default);
        s.validate()?;
        if !ok(&s) {
            return Err(EvoError::ConfigInvalid(format!("space {s:?} does not suit this scenario: {what}")));
        }
        Ok(s)
    }

    fn schedule_or(&self, default: Vec<usize>) -> Result<Vec<usize>> {
        let s = self.schedule.clone().unwrap_or(default);
        validate_schedule(&s)?;
        Ok(s)
    }

    fn tolerance_or(&self, default: f64) -> Result<f64> {
        let t = self.tolerance.unwrap_or(default);
        if !(t > 0.0 && t.is_finite()) {
            return Err(EvoError::ConfigInvalid(format!("tolerance must be positive, got {t}")));
        }
        Ok(t)
    }

    fn truncation_or(&self, default: Truncation) -> Truncation {
        self.truncation.unwrap_or(default)
    }
}

const DEFAULT_GRID_NAME: &str = "periodic_ode";

/// Time grid a scenario uses when the configuration gives none.
pub fn default_grid(name: &str) -> Result<TimeGrid> {
    match name {
        "dbf_surrogate" => TimeGrid::new(1.0 / 128.0, 128, 4.0),
        "time_periodic" => TimeGrid::new(1.0 / 4096.0, 4096, 4.0),
        n if SCENARIO_NAMES.contains(&n) => TimeGrid::new(1.0 / 1024.0, 1024, 4.0),
        n => Err(EvoError::ScenarioUnknown(n.into())),
    }
}

/// Default parameter object of a scenario.
pub fn default_params(name: &str) -> Result<Value> {
    Ok(match name {
        "periodic_ode" => serde_json::to_value(PeriodicOdeParams::default())?,
        "tartar_memory" => serde_json::to_value(TartarParams::default())?,
        "dbf_surrogate" => serde_json::to_value(DbfParams::default())?,
        "convolution" => serde_json::to_value(ConvolutionParams::default())?,
        "delay" => serde_json::to_value(DelayParams::default())?,
        "fractional" => serde_json::to_value(FractionalParams::default())?,
        "time_periodic" => serde_json::to_value(TimePeriodicParams::default())?,
        "higher_order" => serde_json::to_value(HigherOrderParams::default())?,
        "dae_block" => serde_json::to_value(DaeParams::default())?,
        n => return Err(EvoError::ScenarioUnknown(n.into())),
    })
}

pub fn validate_schedule(s: &[usize]) -> Result<()> {
    if s.is_empty() {
        return Err(EvoError::ConfigInvalid("empty schedule".into()));
    }
    if s[0] == 0 {
        return Err(EvoError::ConfigInvalid("schedule entries must be >= 1".into()));
    }
    if !s.windows(2).all(|w| w[0] < w[1]) {
        return Err(EvoError::ConfigInvalid(format!("schedule must be strictly increasing: {s:?}")));
    }
    Ok(())
}

/// `1, 2, 4, …, max`.
pub fn dyadic(max: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |k| Some(k * 2)).take_while(|&k| k <= max).collect()
}

fn torus1() -> SpaceModel {
    SpaceModel::torus_grid(1, 128, 1)
}

fn is_scalar_torus(s: &SpaceModel) -> bool {
    matches!(s, SpaceModel::TorusGrid { m: 1, .. })
}

fn params<T: DeserializeOwned + Default>(name: &str, v: &Value) -> Result<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| EvoError::ConfigInvalid(format!("{name} params: {e}")))
}

/// Smooth bump supported in `[T/8, T/2]` times a smooth spatial profile,
/// scaled to `ν`-norm `1/(1 + variant)`.
pub fn default_rhs(grid: TimeGrid, space: SpaceModel, variant: usize) -> WeightedSignal {
    let horizon = grid.horizon();
    let (c, w) = (5.0 * horizon / 16.0, 3.0 * horizon / 16.0);
    let m = space.m().max(1);
    let profile: Vec<f64> = (0..space.cells())
        .map(|cell| match space {
            SpaceModel::FiniteDim { .. } => 1.0,
            SpaceModel::TorusGrid { .. } => {
                let x = space.cell_center(cell);
                1.0 + 0.5 * (2.0 * PI * (x[0] + 0.25 * variant as f64)).cos()
            }
        })
        .collect();
    let mut f = WeightedSignal::from_fn(grid, space, |t, dof| {
        C64::new(raised_cosine(t, c, w) * profile[dof / m] / (1 + dof % m) as f64, 0.0)
    });
    let n = f.norm();
    if n > 0.0 {
        f.scale(C64::new(1.0 / (n * (1 + variant) as f64), 0.0));
    }
    f
}

#[derive(Clone, Debug)]
pub enum ProblemOps {
    /// `∂₀M + N`.
    Single { m: EvolutionaryOp, n: EvolutionaryOp },
    /// `[[∂₀M + N00, N01], [N10, N11]]`.
    Block {
        m: EvolutionaryOp,
        n00: EvolutionaryOp,
        n01: EvolutionaryOp,
        n10: EvolutionaryOp,
        n11: EvolutionaryOp,
    },
}

#[derive(Clone, Debug)]
pub struct ScenarioSolve {
    pub u: Vec<WeightedSignal>,
    pub terms_used: usize,
    pub tail_bound: f64,
    pub contraction_q: f64,
}

impl ScenarioSolve {
    fn plain(u: Vec<WeightedSignal>) -> Self {
        Self { u, terms_used: 0, tail_bound: 0.0, contraction_q: 0.0 }
    }
}

pub type SolutionMap = Arc<dyn Fn(&[WeightedSignal]) -> Result<ScenarioSolve> + Send + Sync>;
pub type LimitMap = Arc<dyn Fn(&[WeightedSignal]) -> Result<Vec<WeightedSignal>> + Send + Sync>;
type Builder = Arc<dyn Fn(usize) -> Result<ProblemOps> + Send + Sync>;
type SolverFactory = Arc<dyn Fn(usize) -> Result<SolutionMap> + Send + Sync>;

fn one<'a>(f: &'a [WeightedSignal]) -> Result<&'a WeightedSignal> {
    f.first().ok_or_else(|| EvoError::ConfigInvalid("missing right-hand side".into()))
}

fn block_rhs(f: &[WeightedSignal]) -> Result<BlockSignal> {
    match f {
        [b0, b1] => Ok(BlockSignal { b0: b0.clone(), b1: b1.clone() }),
        _ => Err(EvoError::ConfigInvalid("block problems need two right-hand sides".into())),
    }
}

/// Solution map of one problem instance; factorizations are done once.
pub fn solution_map(ops: ProblemOps, method: SolveMethod) -> Result<SolutionMap> {
    Ok(match (ops, method) {
        (ProblemOps::Single { m, n }, SolveMethod::Neumann) => {
            let s = NeumannSolver::new(&m, &n)?;
            Arc::new(move |f| {
                let r = s.solve(one(f)?, MAX_TERMS, SOLVE_TOL)?;
                Ok(ScenarioSolve {
                    u: vec![r.u],
                    terms_used: r.terms_used,
                    tail_bound: r.tail_bound,
                    contraction_q: r.contraction_q,
                })
            })
        }
        (ProblemOps::Single { m, n }, SolveMethod::Stepping) => {
            let s = SteppingSolver::new(&m, &n)?;
            Arc::new(move |f| Ok(ScenarioSolve::plain(vec![s.solve(one(f)?)?])))
        }
        (ProblemOps::Single { m, n }, SolveMethod::Symbol) => {
            let d = EvolutionaryOp::derivative(m.grid, m.space_in);
            let full = EvolutionaryOp::compose(vec![d, m])?.plus(&n)?;
            let inv = EvolutionaryOp::inverse(&full, InverseMethod::Symbol)?;
            Arc::new(move |f| Ok(ScenarioSolve::plain(vec![inv.apply(one(f)?)?])))
        }
        (ProblemOps::Block { m, n00, n01, n10, n11 }, _) => Arc::new(move |f| {
            let p = BlockEvoProblem {
                m: m.clone(),
                n00: n00.clone(),
                n01: n01.clone(),
                n10: n10.clone(),
                n11: n11.clone(),
                f: block_rhs(f)?,
            };
            let r = solve_block(&p, MAX_TERMS, SOLVE_TOL)?;
            Ok(ScenarioSolve {
                u: vec![r.u.b0, r.u.b1],
                terms_used: r.terms_used,
                tail_bound: r.tail_bound,
                contraction_q: r.contraction_q,
            })
        }),
        (ProblemOps::Single { .. }, SolveMethod::Block) => {
            return Err(EvoError::ConfigInvalid("block method needs a block problem".into()))
        }
    })
}

fn generic_solver(build: Builder, method: SolveMethod) -> SolverFactory {
    Arc::new(move |k| solution_map(build(k)?, method))
}

/// A built experiment. Problem instances are generated on demand.
#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub params: Value,
    pub grid: TimeGrid,
    /// One space per unknown; a trivial block has `ndof = 0`.
    pub spaces: Vec<SpaceModel>,
    pub schedule: Vec<usize>,
    pub tolerance: f64,
    pub reference: ReferenceKind,
    pub method: SolveMethod,
    pub oscillating: bool,
    pub rhs: Vec<WeightedSignal>,
    pub truncation: Truncation,
    pub model: Option<HomogenizedModel>,
    pub block_model: Option<BlockModel>,
    pub extras: Value,
    /// Whether a run should also probe the solution operators in the weak operator topology.
    pub wot_probe: bool,
    /// What the secondary comparison solution is, when there is one.
    pub surrogate_label: String,
    build: Builder,
    solver: SolverFactory,
    limit: Option<LimitMap>,
    assembled: Option<LimitMap>,
    surrogate: Option<LimitMap>,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("grid", &self.grid)
            .field("spaces", &self.spaces)
            .field("schedule", &self.schedule)
            .field("reference", &self.reference)
            .finish_non_exhaustive()
    }
}

impl Scenario {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        params: Value,
        grid: TimeGrid,
        spaces: Vec<SpaceModel>,
        schedule: Vec<usize>,
        tolerance: f64,
        reference: ReferenceKind,
        method: SolveMethod,
        oscillating: bool,
        rhs: Vec<WeightedSignal>,
        truncation: Truncation,
        build: Builder,
    ) -> Self {
        let solver = generic_solver(build.clone(), method);
        Self {
            name: name.into(),
            params,
            grid,
            spaces,
            schedule,
            tolerance,
            reference,
            method,
            oscillating,
            rhs,
            truncation,
            model: None,
            block_model: None,
            extras: json!({}),
            wot_probe: false,
            surrogate_label: String::new(),
            build,
            solver,
            limit: None,
            assembled: None,
            surrogate: None,
        }
    }

    fn k_eff(&self, k: usize) -> usize {
        if self.oscillating {
            k
        } else {
            1
        }
    }

    /// Operators of the `k`-th problem.
    pub fn problem(&self, k: usize) -> Result<ProblemOps> {
        (self.build)(self.k_eff(k))
    }

    pub fn solution_map(&self, k: usize) -> Result<SolutionMap> {
        (self.solver)(self.k_eff(k))
    }

    pub fn solve(&self, k: usize) -> Result<ScenarioSolve> {
        self.solution_map(k)?(&self.rhs)
    }

    /// Limit solution map; with oscillation off the fixed problem is its own limit.
    pub fn reference_map(&self) -> Result<Option<LimitMap>> {
        if !self.oscillating {
            let map = self.solution_map(1)?;
            return Ok(Some(Arc::new(move |f: &[WeightedSignal]| Ok(map(f)?.u))));
        }
        Ok(self.limit.clone())
    }

    pub fn reference_solution(&self) -> Result<Option<Vec<WeightedSignal>>> {
        self.reference_map()?.map(|l| l(&self.rhs)).transpose()
    }

    pub fn surrogate_solution(&self) -> Result<Option<Vec<WeightedSignal>>> {
        self.surrogate.as_ref().map(|l| l(&self.rhs)).transpose()
    }

    pub fn has_assembled_limit(&self) -> bool {
        self.assembled.is_some() && self.limit.is_some()
    }

    /// Largest `‖A(S φ) − φ‖ / ‖φ‖` over the probes, with `A` the assembled
    /// limit operator and `S` the limit solution map.
    pub fn assembly_residual(&self, probes: &[Vec<WeightedSignal>]) -> Result<Option<f64>> {
        let (Some(a), Some(s)) = (&self.assembled, &self.limit) else {
            return Ok(None);
        };
        let mut worst: f64 = 0.0;
        for p in probes {
            let back = a(&s(p)?)?;
            let num: f64 = back.iter().zip(p).map(|(b, x)| b.sub(x).norm_sq()).sum();
            let den: f64 = p.iter().map(|x| x.norm_sq()).sum();
            if den > 0.0 {
                worst = worst.max((num / den).sqrt());
            }
        }
        Ok(Some(worst))
    }

    /// One dictionary per unknown.
    pub fn dictionaries(&self, size: usize, seed: u64) -> Vec<TestDictionary> {
        self.spaces
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if s.ndof() == 0 {
                    TestDictionary { members: Vec::new() }
                } else {
                    make_test_dictionary(self.grid, *s, size, seed.wrapping_add(1000 * c as u64))
                }
            })
            .collect()
    }

    /// Dictionary members placed in their own component, zero elsewhere.
    pub fn probes(&self, dicts: &[TestDictionary]) -> Vec<Vec<WeightedSignal>> {
        let zeros: Vec<WeightedSignal> = self.spaces.iter().map(|s| WeightedSignal::zeros(self.grid, *s)).collect();
        let mut out = Vec::new();
        for (c, d) in dicts.iter().enumerate() {
            for phi in &d.members {
                let mut p = zeros.clone();
                p[c] = phi.clone();
                out.push(p);
            }
        }
        out
    }

    /// Solution operators `f ↦ u_k` as a sequence, for single-unknown scenarios.
    pub fn solution_sequence(&self) -> Result<OperatorSequence> {
        if self.spaces.len() != 1 {
            return Err(EvoError::UnsupportedKind("operator probing needs a single unknown".into()));
        }
        let me = self.clone();
        let meta = SequenceMeta { periodic: true, time_independent: self.name != "time_periodic", symbol_valued: false };
        Ok(OperatorSequence::from_maps(self.schedule.clone(), meta, move |k| {
            let map = me.solution_map(k)?;
            Ok(Arc::new(move |f: &WeightedSignal| Ok(map(std::slice::from_ref(f))?.u.remove(0))) as ProbeMap)
        }))
    }

    /// Memory kernel of the limit, when the scenario has one.
    pub fn kernel(&self) -> Result<MemoryKernel> {
        match &self.model {
            Some(m) if m.has_memory_terms() => extract_memory_kernel(m),
            _ => Err(EvoError::NoKernelAvailable),
        }
    }

    pub fn summary(&self) -> Value {
        json!({
            "name": self.name,
            "params": self.params,
            "grid": self.grid,
            "spaces": self.spaces,
            "schedule": self.schedule,
            "tolerance": self.tolerance,
            "reference": self.reference,
            "method": self.method,
            "oscillating": self.oscillating,
            "truncation": self.truncation,
            "extras": self.extras,
        })
    }
}

/// `⟨φ, u_c⟩` for every member of every component dictionary.
pub fn pairings(u: &[WeightedSignal], dicts: &[TestDictionary]) -> Result<Vec<C64>> {
    let mut out = Vec::new();
    for (uc, d) in u.iter().zip(dicts) {
        for phi in &d.members {
            out.push(inner_product(phi, uc)?);
        }
    }
    Ok(out)
}

pub fn max_gap(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Gaps within this fraction of the tolerance count as ties.
pub const TIE_FLOOR: f64 = 1e-6;

/// Non-increasing over the last three entries, up to the tie floor.
pub fn non_increasing_tail(gaps: &[f64], tol: f64) -> bool {
    let floor = TIE_FLOOR * tol;
    let tail = &gaps[gaps.len().saturating_sub(3)..];
    tail.windows(2).all(|w| w[1] <= w[0] + floor)
}

pub fn gap_criteria(gaps: &[f64], tol: f64) -> bool {
    matches!(gaps.last(), Some(&g) if g <= tol) && non_increasing_tail(gaps, tol)
}

/// Aitken extrapolation of every pairing from its last three values.
pub fn extrapolate_pairings(table: &[Vec<C64>]) -> Vec<C64> {
    let n = table.len();
    if n < 3 {
        return table.last().cloned().unwrap_or_default();
    }
    let scale = table.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
    let floor = crate::homogenizer::CAUCHY_FLOOR * scale;
    (0..table[0].len())
        .map(|c| crate::homogenizer::extrapolate3(table[n - 3][c], table[n - 2][c], table[n - 1][c], floor))
        .collect()
}

/// Parses `cfg.params` and builds the named scenario.
pub fn build_scenario(cfg: &ScenarioConfig, truncation: Option<Truncation>) -> Result<Scenario> {
    let setup = cfg.setup(truncation);
    let n = cfg.name.as_str();
    match n {
        "periodic_ode" => scenario_periodic_ode(&params(n, &cfg.params)?, &setup),
        "tartar_memory" => scenario_tartar_memory(&params(n, &cfg.params)?, &setup),
        "dbf_surrogate" => scenario_dbf_surrogate(&params(n, &cfg.params)?, &setup),
        "convolution" => scenario_convolution(&params(n, &cfg.params)?, &setup),
        "delay" => scenario_delay(&params(n, &cfg.params)?, &setup),
        "fractional" => scenario_fractional(&params(n, &cfg.params)?, &setup),
        "time_periodic" => scenario_time_periodic(&params(n, &cfg.params)?, &setup),
        "higher_order" => scenario_higher_order(&params(n, &cfg.params)?, &setup),
        "dae_block" => scenario_dae_block(&params(n, &cfg.params)?, &setup),
        _ => Err(EvoError::ScenarioUnknown(cfg.name.clone())),
    }
}

fn const_op(grid: TimeGrid, space: SpaceModel, spec: &CellSpec, k: usize) -> Result<EvolutionaryOp> {
    let d = match space {
        SpaceModel::TorusGrid { d, .. } => d,
        SpaceModel::FiniteDim { .. } => 1,
    };
    EvolutionaryOp::constant(grid, space, spec.cell(d, space.m()).on_space(&space, k)?)
}

fn space_dim(s: &SpaceModel) -> usize {
    match *s {
        SpaceModel::TorusGrid { d, .. } => d,
        SpaceModel::FiniteDim { .. } => 1,
    }
}

fn model_limit(model: &HomogenizedModel) -> (LimitMap, LimitMap) {
    let m = model.clone();
    let solve: LimitMap = Arc::new(move |f| Ok(vec![m.solve(one(f)?)?]));
    let m = model.clone();
    let cache: Arc<OnceLock<EvolutionaryOp>> = Arc::new(OnceLock::new());
    let assembled: LimitMap = Arc::new(move |u| {
        let op = match cache.get() {
            Some(op) => op,
            None => {
                let op = m.assemble()?;
                cache.get_or_init(|| op)
            }
        };
        Ok(vec![op.apply(one(u)?)?])
    });
    (solve, assembled)
}

/// Each half of the cell as one atom `(values, weight ½)`.
fn atoms(specs: &[CellSpec]) -> Vec<(Vec<f64>, f64)> {
    if specs.iter().all(CellSpec::is_constant) {
        return vec![(specs.iter().map(|s| s.values()[0]).collect(), 1.0)];
    }
    (0..2).map(|h| (specs.iter().map(|s| s.values()[h]).collect(), 0.5)).collect()
}

/// Cell-averaged series `M_hom,ℓ(z) = Σ_w w·M⁻¹(−zNM⁻¹)^ℓ` for pointwise scalar
/// symbols `(M, N)` given per atom and frequency.
fn atom_symbol_limit(
    grid: TimeGrid,
    space: SpaceModel,
    trunc: Truncation,
    atoms: Vec<(Vec<f64>, f64)>,
    mn: impl Fn(&[f64], &FreqPoint) -> (C64, C64) + Sync,
) -> Result<(LimitMap, LimitMap, f64)> {
    let failure = std::sync::Mutex::new(None);
    let asm = assemble_symbol_valued(grid, space, trunc, |fp| {
        let per: Vec<(C64, C64, f64)> = atoms
            .iter()
            .map(|(v, w)| {
                let (m, n) = mn(v, fp);
                (ONE / m, -fp.z * n / m, *w)
            })
            .collect();
        let ratio = per.iter().map(|x| x.1.norm()).fold(0.0, f64::max);
        let scale = per.iter().map(|x| x.0.norm()).fold(0.0, f64::max);
        if ratio >= 1.0 {
            failure.lock().unwrap().get_or_insert(EvoError::NotContractiveAtFrequency { index: fp.index, q: ratio });
        }
        let l = if ratio > 0.0 && ratio < 1.0 {
            (0..400).find(|&l| scale * ratio.powi(l as i32 + 1) / (1.0 - ratio) <= trunc.tol).unwrap_or(400)
        } else {
            0
        };
        let m00 = (0..=l)
            .map(|ell| Coef::Scalar(per.iter().map(|(mi, r, w)| mi * r.powi(ell as i32) * *w).sum()))
            .collect();
        SymbolLimits { m00, ..SymbolLimits::default() }
    })?;
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let ratio = asm.max_ratio;
    let sol = asm.solution;
    let lim = asm.limit;
    let solve: LimitMap = Arc::new(move |f| Ok(vec![sol.apply(one(f)?)?]));
    let assembled: LimitMap = Arc::new(move |u| Ok(vec![lim.apply(one(u)?)?]));
    Ok((solve, assembled, ratio))
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeriodicOdeParams {
    pub a: CellSpec,
    pub b: CellSpec,
    pub d: usize,
    pub m: usize,
    #[serde(default = "default_true")]
    pub oscillate: bool,
}

impl Default for PeriodicOdeParams {
    fn default() -> Self {
        Self { a: CellSpec::TwoValued([1.0, 3.0]), b: CellSpec::Constant(0.0), d: 1, m: 1, oscillate: true }
    }
}

/// `∂₀ a(k·) + b(k·)` on a torus grid, limit from cell averages.
pub fn scenario_periodic_ode(p: &PeriodicOdeParams, setup: &Setup) -> Result<Scenario> {
    p.a.check_positive()?;
    if p.d == 0 || p.m == 0 {
        return Err(EvoError::ConfigInvalid("d and m must be positive".into()));
    }
    let grid = setup.grid_or(DEFAULT_GRID_NAME)?;
    let r_default = match p.d {
        1 => 128,
        2 => 16,
        _ => 8,
    };
    let (d, m) = (p.d, p.m);
    let space = setup.space_or(
        SpaceModel::torus_grid(d, r_default, m),
        |s| matches!(*s, SpaceModel::TorusGrid { d: sd, m: sm, .. } if sd == d && sm == m),
        "needs a torus grid with matching d and m",
    )?;
    let r = match space {
        SpaceModel::TorusGrid { r, .. } => r,
        SpaceModel::FiniteDim { .. } => 1,
    };
    let schedule = setup.schedule_or(dyadic((r / 2).max(4)))?;
    let trunc = setup.truncation_or(Truncation::tol(1e-10));
    let (a, b) = (p.a, p.b);
    let build: Builder = Arc::new(move |k| {
        Ok(ProblemOps::Single {
            m: EvolutionaryOp::constant(grid, space, a.cell(d, m).on_space(&space, k)?)?,
            n: EvolutionaryOp::constant(grid, space, b.cell(d, m).on_space(&space, k)?)?,
        })
    });
    let rhs = vec![default_rhs(grid, space, 0)];
    let mut sc = Scenario::new(
        "periodic_ode",
        serde_json::to_value(p)?,
        grid,
        vec![space],
        schedule,
        setup.tolerance_or(SWEEP_TOLERANCE)?,
        ReferenceKind::ClosedForm,
        SolveMethod::Neumann,
        p.oscillate,
        rhs,
        trunc,
        build,
    );
    let bcell = b.cell(d, m);
    let model = HomogenizedModel::from_cells(&a.cell(d, m), (!b.is_zero()).then_some(&bcell), grid, space, trunc)?;
    let (solve, assembled) = model_limit(&model);
    sc.limit = Some(solve);
    sc.assembled = Some(assembled);
    sc.extras = json!({ "harmonic_mean_a": a.harmonic_mean(), "mean_b": b.mean() });
    sc.model = Some(model);
    Ok(sc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TartarParams {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default = "default_true")]
    pub oscillate: bool,
}

impl Default for TartarParams {
    fn default() -> Self {
        Self { lambda1: 0.0, lambda2: 2.0, oscillate: true }
    }
}

/// `(∂₀ + b(k·))u = f` with `b ∈ {λ₁, λ₂}`; the limit carries a memory term.
pub fn scenario_tartar_memory(p: &TartarParams, setup: &Setup) -> Result<Scenario> {
    let inner = PeriodicOdeParams {
        a: CellSpec::Constant(1.0),
        b: CellSpec::TwoValued([p.lambda1, p.lambda2]),
        d: 1,
        m: 1,
        oscillate: p.oscillate,
    };
    let setup = Setup { truncation: Some(setup.truncation_or(Truncation::tol(1e-13))), ..setup.clone() };
    let mut sc = scenario_periodic_ode(&inner, &setup)?;
    sc.name = "tartar_memory".into();
    sc.params = serde_json::to_value(p)?;
    sc.reference = ReferenceKind::Oracle;
    let b0 = 0.5 * (p.lambda1 + p.lambda2);
    let (grid, space) = (sc.grid, sc.spaces[0]);
    let surrogate = NeumannSolver::new(
        &EvolutionaryOp::identity(grid, space),
        &EvolutionaryOp::constant(grid, space, Coef::real(b0))?,
    )?;
    sc.surrogate = Some(Arc::new(move |f| Ok(vec![surrogate.solve(one(f)?, MAX_TERMS, SOLVE_TOL)?.u])));
    sc.surrogate_label = "memoryless".into();
    let kernel = match sc.kernel() {
        Ok(k) => json!({ "max_abs": k.max_abs(), "l1_mass": k.l1_mass(grid.nu) }),
        Err(EvoError::NoKernelAvailable) => json!({ "max_abs": 0.0, "l1_mass": 0.0 }),
        Err(e) => return Err(e),
    };
    sc.extras = json!({ "b0": b0, "kernel": kernel });
    Ok(sc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbfParams {
    pub q: usize,
    pub eta: f64,
    pub eps: CellSpec,
    pub mu: CellSpec,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub oscillate: bool,
}

impl Default for DbfParams {
    fn default() -> Self {
        Self { q: 6, eta: 0.1, eps: CellSpec::TwoValued([1.0, 3.0]), mu: CellSpec::Constant(1.0), seed: 7, oscillate: true }
    }
}

/// Central-difference curl on the periodic lattice `q³` with unit spacing;
/// the field index is `cell·3 + component`, cells ordered like [`SpaceModel`].
pub fn lattice_curl(q: usize) -> DMatrix<f64> {
    let n = q * q * q;
    let idx = |i: [usize; 3]| (i[0] * q + i[1]) * q + i[2];
    let mut c = DMatrix::zeros(3 * n, 3 * n);
    for cell in 0..n {
        let i = [cell / (q * q), (cell / q) % q, cell % q];
        let nb = |a: usize, s: isize| {
            let mut j = i;
            j[a] = (i[a] as isize + s).rem_euclid(q as isize) as usize;
            idx(j)
        };
        for (row, axis, comp, sign) in
            [(0, 1, 2, 1.0), (0, 2, 1, -1.0), (1, 2, 0, 1.0), (1, 0, 2, -1.0), (2, 0, 1, 1.0), (2, 1, 0, -1.0)]
        {
            c[(cell * 3 + row, nb(axis, 1) * 3 + comp)] += 0.5 * sign;
            c[(cell * 3 + row, nb(axis, -1) * 3 + comp)] -= 0.5 * sign;
        }
    }
    c
}

/// `K = C(1+ηC)⁻¹` and `(1+ηC)⁻¹` from the eigendecomposition of `C`.
#[derive(Clone, Debug)]
pub struct CurlSurrogate {
    pub q: usize,
    pub eta: f64,
    pub k: DMatrix<f64>,
    pub resolvent: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// `min |1 + ηλ|` over the spectrum.
    pub spectral_gap: f64,
}

impl CurlSurrogate {
    pub fn new(q: usize, eta: f64) -> Result<Self> {
        if q < 2 {
            return Err(EvoError::ConfigInvalid(format!("lattice size must be >= 2, got {q}")));
        }
        let c = lattice_curl(q);
        let asym = (&c - c.transpose()).amax();
        if asym > 1e-14 {
            return Err(EvoError::ConfigInvalid(format!("curl surrogate is not symmetric ({asym:.3e})")));
        }
        let eig = SymmetricEigen::new(c);
        let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let gap = lam.iter().map(|l| (1.0 + eta * l).abs()).fold(f64::INFINITY, f64::min);
        if gap <= 1e-9 {
            return Err(EvoError::EtaOnSpectrum(if eta != 0.0 { -1.0 / eta } else { f64::INFINITY }));
        }
        let v = &eig.eigenvectors;
        let scaled = |f: &dyn Fn(f64) -> f64| {
            let mut w = v.clone();
            for (j, l) in lam.iter().enumerate() {
                w.column_mut(j).scale_mut(f(*l));
            }
            &w * v.transpose()
        };
        let k = scaled(&|l| l / (1.0 + eta * l));
        let resolvent = scaled(&|l| 1.0 / (1.0 + eta * l));
        Ok(Self { q, eta, k, resolvent, eigenvalues: lam, spectral_gap: gap })
    }

    pub fn k_norm(&self) -> f64 {
        self.eigenvalues.iter().map(|l| (l / (1.0 + self.eta * l)).abs()).fold(0.0, f64::max)
    }
}

/// Implicit Euler for `∂₀ diag(ε, μ)(E, H) + [[0, −K], [K, 0]](E, H) = f`,
/// with `H` eliminated so each step is one SPD solve of size `3q³`.
#[derive(Clone)]
pub struct DbfStepper {
    grid: TimeGrid,
    space: SpaceModel,
    eps: Vec<f64>,
    mu: Vec<f64>,
    k: Arc<DMatrix<f64>>,
    chol: Cholesky<f64, Dyn>,
}

impl DbfStepper {
    /// `eps`, `mu` are per-cell values.
    pub fn new(grid: TimeGrid, surrogate: &Arc<CurlSurrogate>, eps: &[f64], mu: &[f64]) -> Result<Self> {
        let q = surrogate.q;
        let space = SpaceModel::torus_grid(3, q, 6);
        let n = 3 * space.cells();
        let expand = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| v[i / 3]).collect() };
        let (eps, mu) = (expand(eps), expand(mu));
        let dt = grid.dt;
        let k = &surrogate.k;
        let mut kmu = k.clone();
        for (j, m) in mu.iter().enumerate() {
            kmu.column_mut(j).scale_mut(dt * dt / m);
        }
        let mut a = &kmu * k;
        for (i, e) in eps.iter().enumerate() {
            a[(i, i)] += e;
        }
        let chol = Cholesky::new(a).ok_or(EvoError::SingularStep { index: 0 })?;
        Ok(Self { grid, space, eps, mu, k: Arc::new(k.clone()), chol })
    }

    pub fn solve(&self, f: &WeightedSignal) -> Result<WeightedSignal> {
        if f.grid != self.grid || f.space != self.space {
            return Err(EvoError::GridMismatch("right-hand side does not match the surrogate".into()));
        }
        let n = self.eps.len();
        let dt = self.grid.dt;
        let mut u = WeightedSignal::zeros(self.grid, self.space);
        for part in 0..2 {
            let pick = |z: C64| if part == 0 { z.re } else { z.im };
            let mut ve = DVector::<f64>::zeros(n);
            let mut vh = DVector::<f64>::zeros(n);
            for i in 0..self.grid.n_steps {
                let row = f.row(i);
                let mut re = ve.clone();
                let mut rh = vh.clone();
                for j in 0..n {
                    let (cell, c) = (j / 3, j % 3);
                    re[j] += dt * pick(row[cell * 6 + c]);
                    rh[j] += dt * pick(row[cell * 6 + 3 + c]);
                }
                let rh_mu = DVector::from_iterator(n, rh.iter().zip(&self.mu).map(|(r, m)| r / m));
                let rhs = &re + &*self.k * rh_mu * dt;
                let e = self.chol.solve(&rhs);
                let ke = &*self.k * &e;
                let h = DVector::from_iterator(n, (0..n).map(|j| (rh[j] - dt * ke[j]) / self.mu[j]));
                let out = u.row_mut(i);
                for j in 0..n {
                    let (cell, c) = (j / 3, j % 3);
                    let (pe, ph) = (&mut out[cell * 6 + c], e[j]);
                    if part == 0 {
                        pe.re = ph;
                    } else {
                        pe.im = ph;
                    }
                    let slot = &mut out[cell * 6 + 3 + c];
                    if part == 0 {
                        slot.re = h[j];
                    } else {
                        slot.im = h[j];
                    }
                }
                ve = DVector::from_iterator(n, e.iter().zip(&self.eps).map(|(x, w)| x * w));
                vh = DVector::from_iterator(n, h.iter().zip(&self.mu).map(|(x, w)| x * w));
            }
        }
        Ok(u)
    }
}

/// Per-cell laminate averages of a profile oscillating along the first axis.
fn dbf_cells(spec: &CellSpec, q: usize, k: usize) -> Vec<f64> {
    let space = SpaceModel::torus_grid(3, q, 1);
    let h = 1.0 / q as f64;
    (0..space.cells())
        .map(|c| {
            let x0 = space.cell_center(c)[0];
            laminate_harmonic(spec, k, x0 - 0.5 * h, x0 + 0.5 * h)
        })
        .collect()
}

/// The `k`-th surrogate problem in operator form.
pub fn dbf_operators(grid: TimeGrid, s: &CurlSurrogate, eps: &[f64], mu: &[f64]) -> Result<ProblemOps> {
    let space = SpaceModel::torus_grid(3, s.q, 6);
    let blocks = eps
        .iter()
        .zip(mu)
        .map(|(e, m)| {
            Mat::from_diagonal(&DVector::from_iterator(
                6,
                (0..6).map(|c| C64::new(if c < 3 { *e } else { *m }, 0.0)),
            ))
        })
        .collect();
    let m = EvolutionaryOp::constant(grid, space, Coef::Cells { m: 6, cells: space.cells(), blocks })?;
    let nd = space.ndof();
    let mut big = Mat::zeros(nd, nd);
    let n = 3 * space.cells();
    for i in 0..n {
        for j in 0..n {
            let kv = C64::new(s.k[(i, j)], 0.0);
            let (ci, ai, cj, aj) = (i / 3, i % 3, j / 3, j % 3);
            big[(ci * 6 + ai, cj * 6 + 3 + aj)] = -kv;
            big[(ci * 6 + 3 + ai, cj * 6 + aj)] = kv;
        }
    }
    let n_op = EvolutionaryOp::constant(grid, space, Coef::Dense(big))?;
    Ok(ProblemOps::Single { m, n: n_op })
}

/// Chiral Maxwell surrogate `∂₀ diag(ε_k, μ_k) + K [[0,−1],[1,0]]` on a `q³` lattice.
pub fn scenario_dbf_surrogate(p: &DbfParams, setup: &Setup) -> Result<Scenario> {
    p.eps.check_positive()?;
    p.mu.check_positive()?;
    let grid = setup.grid_or("dbf_surrogate")?;
    let q = p.q;
    let space = SpaceModel::torus_grid(3, q, 6);
    if let Some(s) = setup.space {
        if s != space {
            return Err(EvoError::ConfigInvalid(format!("dbf_surrogate lives on {space:?}, got {s:?}")));
        }
    }
    let schedule = setup.schedule_or(dyadic(256))?;
    let surrogate = Arc::new(CurlSurrogate::new(q, p.eta)?);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let dir: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let centre: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let cells = space.cells();
    let jvec = DVector::from_iterator(
        3 * cells,
        (0..3 * cells).map(|i| dir[i % 3] * periodic_bump(&space.cell_center(i / 3), &centre, 2.0)),
    );
    let src = &surrogate.resolvent * jvec;
    let horizon = grid.horizon();
    let (c, w) = (5.0 * horizon / 16.0, 3.0 * horizon / 16.0);
    let mut rhs = WeightedSignal::from_fn(grid, space, |t, dof| {
        let (cell, comp) = (dof / 6, dof % 6);
        if comp < 3 {
            C64::new(raised_cosine(t, c, w) * src[cell * 3 + comp], 0.0)
        } else {
            ZERO
        }
    });
    let norm = rhs.norm();
    rhs.scale(C64::new(1.0 / norm, 0.0));
    let (eps, mu) = (p.eps, p.mu);
    let s2 = surrogate.clone();
    let build: Builder = Arc::new(move |k| dbf_operators(grid, &s2, &dbf_cells(&eps, q, k), &dbf_cells(&mu, q, k)));
    let mut sc = Scenario::new(
        "dbf_surrogate",
        serde_json::to_value(p)?,
        grid,
        vec![space],
        schedule,
        setup.tolerance_or(SWEEP_TOLERANCE)?,
        ReferenceKind::Oracle,
        SolveMethod::Stepping,
        p.oscillate,
        vec![rhs],
        setup.truncation_or(Truncation::default()),
        build,
    );
    let s3 = surrogate.clone();
    sc.solver = Arc::new(move |k| {
        let st = DbfStepper::new(grid, &s3, &dbf_cells(&eps, q, k), &dbf_cells(&mu, q, k))?;
        Ok(Arc::new(move |f: &[WeightedSignal]| Ok(ScenarioSolve::plain(vec![st.solve(one(f)?)?]))) as SolutionMap)
    });
    let n_cells = cells;
    let hom = DbfStepper::new(grid, &surrogate, &vec![eps.harmonic_mean(); n_cells], &vec![mu.harmonic_mean(); n_cells])?;
    sc.surrogate = Some(Arc::new(move |f| Ok(vec![hom.solve(one(f)?)?])));
    sc.surrogate_label = "harmonic_mean".into();
    sc.wot_probe = true;
    sc.extras = json!({
        "spectral_gap": surrogate.spectral_gap,
        "k_norm": surrogate.k_norm(),
        "eps_harmonic": eps.harmonic_mean(),
        "mu_harmonic": mu.harmonic_mean(),
    });
    Ok(sc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvolutionParams {
    pub gamma: CellSpec,
    #[serde(default = "default_true")]
    pub oscillate: bool,
}

impl Default for ConvolutionParams {
    fn default() -> Self {
        Self { gamma: CellSpec::TwoValued([0.5, 1.5]), oscillate: true }
    }
}

/// `u + γ(k·) (e^{-t} * u) = f`: a trivial differential block and a convolution
/// algebraic block.
pub fn scenario_convolution(p: &ConvolutionParams, setup: &Setup) -> Result<Scenario> {
    let grid = setup.grid_or(DEFAULT_GRID_NAME)?;
    let space = setup.space_or(torus1(), is_scalar_torus, "needs a scalar torus grid")?;
    let q = p.gamma.sup() / (1.0 + grid.nu);
    if q >= 1.0 {
        return Err(EvoError::NotContractive { q });
    }
    let schedule = setup.schedule_or(dyadic(64))?;
    let trunc = setup.truncation_or(Truncation::tol(1e-12));
    let s0 = empty_space();
    let kernel = Kernel::from_fn(&grid, |t| C64::new((-t).exp(), 0.0));
    let conv = convolution_op(kernel.clone(), grid, space)?;
    let gamma = p.gamma;
    let build: Builder = Arc::new(move |k| {
        let g = const_op(grid, space, &gamma, k)?;
        let n11 = EvolutionaryOp::identity(grid, space).plus(&EvolutionaryOp::compose(vec![g, conv.clone()])?)?;
        Ok(ProblemOps::Block {
            m: EvolutionaryOp::identity(grid, s0),
            n00: EvolutionaryOp::zero(grid, s0, s0),
            n01: EvolutionaryOp::zero(grid, space, s0),
            n10: EvolutionaryOp::zero(grid, s0, space),
            n11,
        })
    });
    let rhs = vec![WeightedSignal::zeros(grid, s0), default_rhs(grid, space, 0)];
    let mut sc = Scenario::new(
        "convolution",
        serde_json::to_value(p)?,
        grid,
        vec![s0, space],
        schedule,
        setup.tolerance_or(SWEEP_TOLERANCE)?,
        ReferenceKind::ClosedForm,
        SolveMethod::Block,
        p.oscillate,
        rhs,
        trunc,
        build,
    );
    let ghat = convolution_op(kernel, grid, SpaceModel::finite_dim(1))?.transfer_samples()?;
    let ats = atoms(&[gamma]);
    let asm = assemble_symbol_valued(grid, space, trunc, |fp| {
        let g = ghat[fp.index].as_scalar().unwrap_or(ZERO);
        let inv: C64 = ats.iter().map(|(v, w)| *w / (ONE + v[0] * g)).sum();
        SymbolLimits { n11_inv: Some(Coef::Scalar(inv)), ..SymbolLimits::default() }
    })?;
    let (sol, lim) = (asm.solution, asm.limit);
    let zero0 = WeightedSignal::zeros(grid, s0);
    let z2 = zero0.clone();
    sc.limit = Some(Arc::new(move |f| Ok(vec![zero0.clone(), sol.apply(&f[1])?])));
    sc.assembled = Some(Arc::new(move |u| Ok(vec![z2.clone(), lim.apply(&u[1])?])));
    sc.extras = json!({ "contraction": q });
    Ok(sc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayParams {
    pub h: f64,
    /// `h_k = h + h_decay / k`.
    pub h_decay: f64,
    pub a: CellSpec,
    pub b: CellSpec,
    #[serde(default = "default_true")]
    pub oscillate: bool,
}

impl Default for DelayParams {
    fn default() -> Self {
        Self { h: 0.1, h_decay: 0.0, a: CellSpec::Constant(1.0), b: CellSpec::TwoValued([0.0, 2.0]), oscillate: true }
    }
}

/// `∂₀ a(k·) + τ_{-h_k} b(k·)`.
pub fn scenario_delay(p: &DelayParams, setup: &Setup) -> Result<Scenario> {
    p.a.check_positive()?;
    if !(p.h >= 0.0) || !(p.h + p.h_decay >= 0.0) {
        return Err(EvoError::NegativeDelay(p.h.min(p.h + p.h_decay)));
    }
    let grid = setup.grid_or(DEFAULT_GRID_NAME)?;
    let space = setup.space_or(torus1(), is_scalar_torus, "needs a scalar torus grid")?;
    let schedule = setup.schedule_or(dyadic(64))?;
    let trunc = setup.truncation_or(Truncation::tol(1e-10));
    let (a, b, h, hd) = (p.a, p.b, p.h, p.h_decay);
    let build: Builder = Arc::new(move |k| {
        let hk = h + hd / k as f64;
        Ok(ProblemOps::Single {
            m: const_op(grid, space, &a, k)?,
            n: EvolutionaryOp::compose(vec![shift_op(hk, grid, space)?, const_op(grid, space, &b, k)?])?,
        })
    });
    let mut sc = Scenario::new(
        "delay",
        serde_json::to_value(p)?,
        grid,
        vec![space],
        schedule,
        setup.tolerance_or(SWEEP_TOLERANCE)?,
        ReferenceKind::ClosedForm,
        SolveMethod::Neumann,
        p.oscillate,
        vec![default_rhs(grid, space, 0)],
        trunc,
        build,
    );
    let d = space_dim(&space);
    let bcell = b.cell(d, 1);
    let model = HomogenizedModel::from_cells(&a.cell(d, 1), (!b.is_zero()).then_some(&bcell), grid, space, trunc)?
        .with_delay(h, trunc)?;
    let (solve, assembled) = model_limit(&model);
    sc.limit = Some(solve);
    sc.assembled = Some(assembled);
    sc.model = Some(model);
    Ok(sc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FractionalParams {
    pub alpha: f64,
    pub beta: f64,
    /// `α_k = α + alpha_decay / k`.
    pub alpha_decay: f64,
    pub beta_decay: f64,
    pub a: CellSpec,
    pub b: CellSpec,
    #[serde(default = "default_true")]
    pub oscillate: bool,
}

impl Default for FractionalParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.0,
            alpha_decay: 0.0,
            beta_decay: 0.0,
            a: CellSpec::TwoValued([1.0, 3.0]),
            b: CellSpec::Constant(0.0),
            oscillate: true,
        }
    }
}

/// `∂₀^α a(k·) + ∂₀^β b(k·)`, written as `∂₀(∂₀^{α−1} a) + ∂₀^β b`.
pub fn scenario_fractional(p: &FractionalParams, setup: &Setup) -> Result<Scenario> {
    p.a.check_positive()?;
    for (x, lo, hi) in [(p.alpha, 0.0, 1.0), (p.alpha + p.alpha_decay, 0.0, 1.0)] {
        if !(x > lo && x <= hi) {
            return Err(EvoError::AlphaOutOfRange(x));
        }
    }
    for x in [p.beta, p.beta + p.beta_decay] {
        if !(-1.0..=0.0).contains(&x) {
            return Err(EvoError::AlphaOutOfRange(x));
        }
    }
    let grid = setup.grid_or(DEFAULT_GRID_NAME)?;
    let space = setup.space_or(torus1(), is_scalar_torus, "needs a scalar torus grid")?;
    let schedule = setup.schedule_or(dyadic(64))?;
    let trunc = setup.truncation_or(Truncation::tol(1e-10));
    let (a, b) = (p.a, p.b);
    let (al, ad, be, bd) = (p.alpha, p.alpha_decay, p.beta, p.beta_decay);
    let build: Builder = Arc::new(move |k| {
        let (ak, bk) = (al + ad / k as f64, be + bd / k as f64);
        Ok(ProblemOps::Single {
            m: EvolutionaryOp::compose(vec![fractional_power_op(ak - 1.0, grid, space)?, const_op(grid, space, &a, k)?])?,
            n: EvolutionaryOp::compose(vec![fractional_power_op(bk, grid, space)?, const_op(grid, space, &b, k)?])?,
        })
    });
    let mut sc = Scenario::new(
        "fractional",
        serde_json::to_value(p)?,
        grid,
        vec![space],
        schedule,
        setup.tolerance_or(SWEEP_TOLERANCE)?,
        ReferenceKind::ClosedForm,
        SolveMethod::Neumann,
        p.oscillate,
        vec![default_rhs(grid, space, 0)],
        trunc,
        build,
    );
    let pw = |x: f64, fp: &FreqPoint| if x == 0.0 { ONE } else { (ONE / fp.z).powf(x) };
    let (solve, assembled, _) = atom_symbol_limit(grid, space, trunc, atoms(&[a, b]), move |v, fp| {
        (pw(al - 1.0, fp) * v[0], pw(be, fp) * v[1])
    })?;
    sc.limit = Some(solve);
    sc.assembled = Some(assembled);
    sc.extras = json!({ "harmonic_mean_a": a.harmonic_mean() });
    Ok(sc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimePeriodicParams {
    pub a: CellSpec,
    pub b: CellSpec,
    #[serde(default = "default_true")]
    pub oscillate: bool,
}

impl Default for TimePeriodicParams {
    fn default() -> Self {
        Self { a: CellSpec::TwoValued([1.0, 3.0]), b: CellSpec::Constant(1.0), oscillate: true }
    }
}

/// Limit of the implicit-Euler discretization of `∂₀ A(k·) + B(k·)` as `k → ∞`
/// at fixed `dt`: `M = (⟨A⁻¹⟩)⁻¹`, and the step factors `1 + dt B/A` average
/// geometrically. Agrees with `(⟨A⁻¹⟩⁻¹, ⟨BA⁻¹⟩⟨A⁻¹⟩⁻¹)` up to `O(dt)`.
pub fn discrete_time_periodic_limit(a: &CellSpec, b: &CellSpec, dt: f64) -> (f64, f64) {
    let (av, bv) = (a.values(), b.values());
    let m = 2.0 / (1.0 / av[0] + 1.0 / av[1]);
    let log_mean = 0.5 * ((dt * bv[0] / av[0]).ln_1p() + (dt * bv[1] / av[1]).ln_1p());
    (m, log_mean.exp_m1() / dt * m)
}

/// `∂₀ A(k t) + B(k t)` with coefficients periodic in time.
pub fn scenario_time_periodic(p: &TimePeriodicParams, setup: &Setup) -> Result<Scenario> {
    p.a.check_positive()?;
    let grid = setup.grid_or("time_periodic")?;
    let space = setup.space_or(SpaceModel::finite_dim(1), |s| *s == SpaceModel::finite_dim(1), "needs finite_dim(1)")?;
    let schedule = setup.schedule_or(dyadic(128))?;
    let trunc = setup.truncation_or(Truncation::tol(1e-12));
    let (a, b) = (p.a, p.b);
    let field = move |spec: CellSpec, k: usize| -> Result<EvolutionaryOp> {
        if spec.is_constant() {
            EvolutionaryOp::constant(grid, space, Coef::real(spec.values()[0]))
        } else {
            EvolutionaryOp::multiplication(grid, space, spec.cell(1, 1).in_time(&grid, k))
        }
    };
    let build: Builder = Arc::new(move |k| Ok(ProblemOps::Single { m: field(a, k)?, n: field(b, k)? }));
    let mut sc = Scenario::new(
        "time_periodic",
        serde_json::to_value(p)?,
        grid,
        vec![space],
        schedule,
        setup.tolerance_or(SWEEP_TOLERANCE)?,
        ReferenceKind::ClosedForm,
        SolveMethod::Neumann,
        p.oscillate,
        vec![default_rhs(grid, space, 0)],
        trunc,
        build,
    );
    let bcell = b.cell(1, 1);
    let model = time_periodic_limit(&a.cell(1, 1), (!b.is_zero()).then_some(&bcell), grid, space, trunc)?;
    let (m_eff, n_eff) = model.closed_form.clone().expect("closed form is set");
    let (m_d, n_d) = discrete_time_periodic_limit(&a, &b, grid.dt);
    let disc = NeumannSolver::new(
        &EvolutionaryOp::constant(grid, space, Coef::real(m_d))?,
        &EvolutionaryOp::constant(grid, space, Coef::real(n_d))?,
    )?;
    let lim = disc.clone();
    sc.limit = Some(Arc::new(move |f| Ok(vec![lim.solve(one(f)?, MAX_TERMS, SOLVE_TOL)?.u])));
    let op = EvolutionaryOp::compose(vec![
        EvolutionaryOp::derivative(grid, space),
        EvolutionaryOp::constant(grid, space, Coef::real(m_d))?,
    ])?
    .plus(&EvolutionaryOp::constant(grid, space, Coef::real(n_d))?)?;
    sc.assembled = Some(Arc::new(move |u| Ok(vec![op.apply(one(u)?)?])));
    let (continuum, _) = model_limit(&model);
    sc.surrogate = Some(continuum);
    sc.surrogate_label = "continuum_closed_form".into();
    sc.extras = json!({
        "m_eff": m_eff.as_scalar().map(|z| z.re),
        "n_eff": n_eff.as_scalar().map(|z| z.re),
        "m_eff_discrete": m_d,
        "n_eff_discrete": n_d,
    });
    sc.model = Some(model);
    Ok(sc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HigherOrderParams {
    /// `a_0, …, a_n` of `Σ ∂₀^j a_j u = f`.
    pub coeffs: Vec<CellSpec>,
    #[serde(default = "default_true")]
    pub oscillate: bool,
}

impl Default for HigherOrderParams {
    fn default() -> Self {
        Self {
            coeffs: vec![CellSpec::TwoValued([1.0, 3.0]), CellSpec::Constant(1.0), CellSpec::Constant(1.0)],
            oscillate: true,
        }
    }
}

/// `Σ_j ∂₀^j a_j(k·) u = f` integrated to `∂₀ a_n + Σ_{j<n} ∂₀^{1+j−n} a_j`
/// with right-hand side `∂₀^{1−n} f`, solved through its symbol.
pub fn scenario_higher_order(p: &HigherOrderParams, setup: &Setup) -> Result<Scenario> {
    let order = p.coeffs.len().checked_sub(1).filter(|&n| n >= 1).ok_or_else(|| {
        EvoError::ConfigInvalid("higher_order needs at least two coefficients".into())
    })?;
    let lead = p.coeffs[order];
    if !(lead.min() > 0.0) {
        return Err(EvoError::NotCoercive { c: lead.min() });
    }
    let grid = setup.grid_or(DEFAULT_GRID_NAME)?;
    let space = setup.space_or(torus1(), is_scalar_torus, "needs a scalar torus grid")?;
    let schedule = setup.schedule_or(dyadic(64))?;
    let trunc = setup.truncation_or(Truncation::tol(1e-10));
    let coeffs = p.coeffs.clone();
    let build: Builder = Arc::new(move |k| {
        let mut parts = Vec::new();
        for (j, c) in coeffs.iter().enumerate().take(order) {
            let mut chain = vec![EvolutionaryOp::identity(grid, space); 0];
            for _ in 0..order - 1 - j {
                chain.push(fractional_power_op(-1.0, grid, space)?);
            }
            chain.push(const_op(grid, space, c, k)?);
            parts.push(EvolutionaryOp::compose(chain)?);
        }
        Ok(ProblemOps::Single { m: const_op(grid, space, &coeffs[order], k)?, n: EvolutionaryOp::sum(parts)? })
    });
    let base = default_rhs(grid, space, 0);
    let integ = EvolutionaryOp::integration(grid, space);
    let mut rhs = base;
    for _ in 1..order {
        rhs = integ.apply(&rhs)?;
    }
    let mut sc = Scenario::new(
        "higher_order",
        serde_json::to_value(p)?,
        grid,
        vec![space],
        schedule,
        setup.tolerance_or(SWEEP_TOLERANCE)?,
        ReferenceKind::ClosedForm,
        SolveMethod::Symbol,
        p.oscillate,
        vec![rhs],
        trunc,
        build,
    );
    let (solve, assembled, _) = atom_symbol_limit(grid, space, trunc, atoms(&p.coeffs), move |v, fp| {
        let n: C64 = (0..order).map(|j| fp.z.powi((order - 1 - j) as i32) * v[j]).sum();
        (C64::new(v[order], 0.0), n)
    })?;
    sc.limit = Some(solve);
    sc.assembled = Some(assembled);
    sc.extras = json!({ "order": order, "rhs_integrations": order - 1 });
    Ok(sc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaeParams {
    pub m: CellSpec,
    pub n00: CellSpec,
    pub n01: CellSpec,
    pub n10: CellSpec,
    pub n11: CellSpec,
    #[serde(default = "default_true")]
    pub oscillate: bool,
}

impl Default for DaeParams {
    fn default() -> Self {
        Self {
            m: CellSpec::Constant(1.0),
            n00: CellSpec::TwoValued([0.5, 1.0]),
            n01: CellSpec::TwoValued([0.3, -0.2]),
            n10: CellSpec::TwoValued([0.2, 0.4]),
            n11: CellSpec::TwoValued([1.0, 3.0]),
            oscillate: true,
        }
    }
}

/// `[[∂₀M + N00, N01], [N10, N11]]` with all blocks oscillating.
pub fn scenario_dae_block(p: &DaeParams, setup: &Setup) -> Result<Scenario> {
    if !(p.m.min() > 0.0) {
        return Err(EvoError::NotCoercive { c: p.m.min() });
    }
    if !(p.n11.min() > 0.0) {
        return Err(EvoError::NotCoercive { c: p.n11.min() });
    }
    let grid = setup.grid_or(DEFAULT_GRID_NAME)?;
    let space = setup.space_or(torus1(), is_scalar_torus, "needs a scalar torus grid")?;
    let schedule = setup.schedule_or(dyadic(64))?;
    let trunc = setup.truncation_or(Truncation::tol(1e-10));
    let specs = [p.m, p.n00, p.n01, p.n10, p.n11];
    let build: Builder = Arc::new(move |k| {
        let op = |s: &CellSpec| const_op(grid, space, s, k);
        Ok(ProblemOps::Block {
            m: op(&specs[0])?,
            n00: op(&specs[1])?,
            n01: op(&specs[2])?,
            n10: op(&specs[3])?,
            n11: op(&specs[4])?,
        })
    });
    let rhs = vec![default_rhs(grid, space, 0), default_rhs(grid, space, 1)];
    let mut sc = Scenario::new(
        "dae_block",
        serde_json::to_value(p)?,
        grid,
        vec![space, space],
        schedule,
        setup.tolerance_or(SWEEP_TOLERANCE)?,
        ReferenceKind::ClosedForm,
        SolveMethod::Block,
        p.oscillate,
        rhs,
        trunc,
        build,
    );
    let d = space_dim(&space);
    let cells: Vec<CellFunction> = specs.iter().map(|s| s.cell(d, 1)).collect();
    let model = BlockModel::from_cells(grid, space, space, [&cells[0], &cells[1], &cells[2], &cells[3], &cells[4]], trunc)?;
    let m1 = model.clone();
    sc.limit = Some(Arc::new(move |f| {
        let u = m1.solve(&block_rhs(f)?)?;
        Ok(vec![u.b0, u.b1])
    }));
    let m2 = model.clone();
    sc.assembled = Some(Arc::new(move |u| {
        let r = m2.assemble()?.apply(&block_rhs(u)?)?;
        Ok(vec![r.b0, r.b1])
    }));
    let [lo, hi] = p.n11.values();
    sc.extras = json!({
        "n11_mean_of_inverses": 0.5 * (1.0 / lo + 1.0 / hi),
        "n11_inverse_of_mean": 1.0 / p.n11.mean(),
    });
    sc.block_model = Some(model);
    Ok(sc)
}
