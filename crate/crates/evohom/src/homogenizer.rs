//! Homogenized limits: weak-operator probing, cell averages and series assembly.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{json, Value};

use crate::error::{EvoError, Result};
use crate::evo_solver::BlockSignal;
use crate::exec;
use crate::linalg::{herm_min_eig, invert, spectral_norm, Coef, Mat, C64, ONE, ZERO};
use crate::operator_calculus::{
    freq_point, padded_len, shift_op, EvolutionaryOp, Field, FreqPoint, HInfSymbol,
};
use crate::weighted_space::{inner_product, SpaceModel, TestDictionary, TimeGrid, WeightedSignal};

pub type CellEval = dyn Fn(&[f64]) -> Mat + Send + Sync;

/// A `[0,1)^d`-periodic matrix field with a midpoint quadrature resolution.
#[derive(Clone)]
pub struct CellFunction {
    pub d: usize,
    pub m: usize,
    pub resolution: usize,
    eval: Arc<CellEval>,
}

impl fmt::Debug for CellFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CellFunction(d={}, m={}, R={})", self.d, self.m, self.resolution)
    }
}

pub fn default_resolution(d: usize) -> usize {
    if d <= 1 {
        1024
    } else {
        64
    }
}

fn scalar_mat(v: f64) -> Mat {
    Mat::from_element(1, 1, C64::new(v, 0.0))
}

impl CellFunction {
    pub fn new(d: usize, m: usize, resolution: usize, eval: impl Fn(&[f64]) -> Mat + Send + Sync + 'static) -> Self {
        Self { d, m, resolution, eval: Arc::new(eval) }
    }

    pub fn scalar(d: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(d, 1, default_resolution(d), move |y| scalar_mat(f(y)))
    }

    pub fn constant(d: usize, value: f64) -> Self {
        Self::scalar(d, move |_| value)
    }

    pub fn constant_matrix(d: usize, a: Mat) -> Self {
        let m = a.nrows();
        Self::new(d, m, default_resolution(d), move |_| a.clone())
    }

    /// `lo` on `y₀ < ½`, `hi` on `y₀ ≥ ½`.
    pub fn two_valued(d: usize, lo: f64, hi: f64) -> Self {
        Self::scalar(d, move |y| if y[0] < 0.5 { lo } else { hi })
    }

    pub fn with_resolution(mut self, r: usize) -> Self {
        self.resolution = r.max(1);
        self
    }

    pub fn at(&self, y: &[f64]) -> Mat {
        let w: Vec<f64> = y.iter().map(|v| v.rem_euclid(1.0)).collect();
        (self.eval)(&w)
    }

    /// Midpoint nodes of the tensor quadrature.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        let r = self.resolution;
        let total = r.pow(self.d as u32);
        (0..total)
            .map(|mut k| {
                let mut y = vec![0.0; self.d];
                for a in (0..self.d).rev() {
                    y[a] = ((k % r) as f64 + 0.5) / r as f64;
                    k /= r;
                }
                y
            })
            .collect()
    }

    pub fn mean(&self) -> Mat {
        let nodes = self.nodes();
        let w = 1.0 / nodes.len() as f64;
        nodes.iter().fold(Mat::zeros(self.m, self.m), |acc, y| acc + self.at(y)) * C64::new(w, 0.0)
    }

    pub fn sup_norm(&self) -> f64 {
        self.nodes().iter().map(|y| spectral_norm(&self.at(y))).fold(0.0, f64::max)
    }

    pub fn min_coercivity(&self) -> f64 {
        self.nodes().iter().map(|y| herm_min_eig(&self.at(y))).fold(f64::INFINITY, f64::min)
    }

    /// `a(k x)` sampled at the cell centres of a torus space.
    pub fn on_space(&self, space: &SpaceModel, k: usize) -> Result<Coef> {
        self.on_space_with(space, |x| self.at(&x.iter().map(|v| v * k as f64).collect::<Vec<_>>()))
    }

    /// Laminate along the first axis: each grid cell gets the harmonic mean of
    /// `a(k x)` over `sub` points across the cell.
    pub fn on_space_harmonic(&self, space: &SpaceModel, k: usize, sub: usize) -> Result<Coef> {
        let SpaceModel::TorusGrid { r, .. } = *space else {
            return self.on_space(space, k);
        };
        let h = 1.0 / r as f64;
        self.on_space_with(space, |x| {
            let mut acc = Mat::zeros(self.m, self.m);
            for s in 0..sub {
                let mut y: Vec<f64> = x.iter().map(|v| v * k as f64).collect();
                y[0] = (x[0] - 0.5 * h + (s as f64 + 0.5) * h / sub as f64) * k as f64;
                acc += invert(&self.at(&y)).unwrap_or_else(|| Mat::zeros(self.m, self.m));
            }
            invert(&(acc * C64::new(1.0 / sub as f64, 0.0))).unwrap_or_else(|| Mat::zeros(self.m, self.m))
        })
    }

    fn on_space_with(&self, space: &SpaceModel, f: impl Fn(&[f64]) -> Mat) -> Result<Coef> {
        match *space {
            SpaceModel::TorusGrid { d, m, .. } if d == self.d && m == self.m => {
                let blocks = (0..space.cells()).map(|c| f(&space.cell_center(c))).collect();
                Ok(Coef::Cells { m, cells: space.cells(), blocks })
            }
            SpaceModel::FiniteDim { m } if m == self.m => Ok(mat_coef(f(&vec![0.0; self.d]))),
            _ => Err(EvoError::GridMismatch(format!("{self:?} does not fit {space:?}"))),
        }
    }

    /// `a(k t)` as a time field on a one-dimensional cell.
    pub fn in_time(&self, grid: &TimeGrid, k: usize) -> Field {
        Field::from_fn(grid, |t| mat_coef(self.at(&[k as f64 * t])))
    }
}

pub fn mat_coef(a: Mat) -> Coef {
    if a.nrows() == 1 && a.ncols() == 1 {
        Coef::Scalar(a[(0, 0)])
    } else {
        Coef::Dense(a)
    }
}

/// A constant `m_out × m_in` matrix lifted to a map between two spaces.
pub fn lift(a: &Mat, space_out: &SpaceModel, space_in: &SpaceModel) -> Result<Coef> {
    match (*space_out, *space_in) {
        (SpaceModel::FiniteDim { .. }, SpaceModel::FiniteDim { .. }) => {
            if space_out.ndof() == a.nrows() && space_in.ndof() == a.ncols() {
                Ok(if space_out == space_in { mat_coef(a.clone()) } else { Coef::Dense(a.clone()) })
            } else {
                Err(EvoError::GridMismatch("matrix does not fit the spaces".into()))
            }
        }
        (SpaceModel::TorusGrid { m: mo, .. }, SpaceModel::TorusGrid { m: mi, .. })
            if space_out.cells() == space_in.cells() && mo == mi && a.nrows() == mo && a.ncols() == mi =>
        {
            if mo == 1 {
                Ok(Coef::Scalar(a[(0, 0)]))
            } else {
                Ok(Coef::Cells { m: mo, cells: space_out.cells(), blocks: vec![a.clone()] })
            }
        }
        _ => Err(EvoError::UnsupportedKind("cannot lift a rectangular cell matrix".into())),
    }
}

fn check_cell_coercive(a: &CellFunction) -> Result<()> {
    let c = a.min_coercivity();
    if !(c > 0.0) {
        return Err(EvoError::NotCoerciveOnCell { c });
    }
    Ok(())
}

/// `∫ a⁻¹ (b a⁻¹)^ℓ` for `ℓ = 0..=ell`.
pub fn cell_average_series(a: &CellFunction, b: Option<&CellFunction>, ell: usize) -> Result<Vec<Mat>> {
    check_cell_coercive(a)?;
    let mut grid = a.clone();
    if let Some(b) = b {
        if b.d != a.d || b.m != a.m {
            return Err(EvoError::GridMismatch("cell functions differ in shape".into()));
        }
        grid.resolution = a.resolution.max(b.resolution);
    }
    let nodes = grid.nodes();
    let m = a.m;
    let per_node = exec::map_indexed(nodes.len(), |k| {
        let y = &nodes[k];
        let ainv = invert(&a.at(y)).unwrap_or_else(|| Mat::zeros(m, m));
        let ba = b.map(|b| b.at(y) * &ainv);
        let mut out = Vec::with_capacity(ell + 1);
        let mut cur = ainv;
        out.push(cur.clone());
        for _ in 0..ell {
            cur = match &ba {
                Some(ba) => &cur * ba,
                None => Mat::zeros(m, m),
            };
            out.push(cur.clone());
        }
        out
    });
    let w = C64::new(1.0 / nodes.len() as f64, 0.0);
    let mut acc = vec![Mat::zeros(m, m); ell + 1];
    for terms in &per_node {
        for (a, t) in acc.iter_mut().zip(terms) {
            *a += t;
        }
    }
    Ok(acc.into_iter().map(|x| x * w).collect())
}

/// `∫ a⁻¹ (b a⁻¹)^ℓ`.
pub fn cell_average_product(a: &CellFunction, b: &CellFunction, ell: usize) -> Result<Mat> {
    Ok(cell_average_series(a, Some(b), ell)?.pop().unwrap())
}

pub type ProbeMap = Arc<dyn Fn(&WeightedSignal) -> Result<WeightedSignal> + Send + Sync>;
type Generator = dyn Fn(usize) -> Result<ProbeMap> + Send + Sync;

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct SequenceMeta {
    pub periodic: bool,
    pub time_independent: bool,
    pub symbol_valued: bool,
}

/// `n ↦ Op_n` evaluated along a schedule.
#[derive(Clone)]
pub struct OperatorSequence {
    generator: Arc<Generator>,
    pub schedule: Vec<usize>,
    pub meta: SequenceMeta,
}

impl OperatorSequence {
    pub fn new(
        schedule: Vec<usize>,
        meta: SequenceMeta,
        gen: impl Fn(usize) -> Result<EvolutionaryOp> + Send + Sync + 'static,
    ) -> Self {
        Self::from_maps(schedule, meta, move |n| {
            let op = gen(n)?;
            Ok(Arc::new(move |f: &WeightedSignal| op.apply(f)) as ProbeMap)
        })
    }

    /// Sequence of arbitrary linear maps, e.g. solution operators.
    pub fn from_maps(
        schedule: Vec<usize>,
        meta: SequenceMeta,
        gen: impl Fn(usize) -> Result<ProbeMap> + Send + Sync + 'static,
    ) -> Self {
        Self { generator: Arc::new(gen), schedule, meta }
    }

    pub fn generate(&self, n: usize) -> Result<ProbeMap> {
        (self.generator)(n)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WotEstimate {
    pub schedule: Vec<usize>,
    pub dict_size: usize,
    /// `pairing_table[step][a·D + b] = ⟨φ_a, Op_n φ_b⟩`.
    pub pairing_table: Vec<Vec<C64>>,
    /// Only Cauchy columns are extrapolated.
    pub extrapolated: Vec<Option<C64>>,
    pub cauchy: Vec<bool>,
    pub convergence_rate: f64,
    pub final_increment: f64,
    pub converged: bool,
}

impl WotEstimate {
    pub fn last(&self) -> Mat {
        let d = self.dict_size;
        Mat::from_row_slice(d, d, self.pairing_table.last().unwrap())
    }

    pub fn extrapolated_matrix(&self) -> Option<Mat> {
        let d = self.dict_size;
        let v: Option<Vec<C64>> = self.extrapolated.iter().copied().collect();
        v.map(|v| Mat::from_row_slice(d, d, &v))
    }

    /// Error out naming the columns that did not settle.
    pub fn require_converged(&self) -> Result<&Self> {
        if self.converged {
            return Ok(self);
        }
        let bad: Vec<usize> = self.cauchy.iter().enumerate().filter(|(_, c)| !**c).map(|(i, _)| i).collect();
        Err(EvoError::NonCauchy(format!(
            "pairs {bad:?} not Cauchy (rate {:.3e}, last increment {:.3e})",
            self.convergence_rate, self.final_increment
        )))
    }

    /// CSV with columns `n, pair_id, re, im`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "pair_id", "re", "im"])?;
        for (n, row) in self.schedule.iter().zip(&self.pairing_table) {
            for (k, v) in row.iter().enumerate() {
                w.write_record([n.to_string(), k.to_string(), format!("{}", v.re), format!("{}", v.im)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Aitken extrapolation of the last three values.
pub fn extrapolate3(p1: C64, p2: C64, p3: C64, floor: f64) -> C64 {
    let d1 = p2 - p1;
    let d2 = p3 - p2;
    if d2.norm() <= floor {
        return p3;
    }
    let denom = d2 - d1;
    if denom.norm() == 0.0 || d2.norm() >= d1.norm() {
        return p3;
    }
    p3 - d2 * d2 / denom
}

/// Pairings `⟨φ_a, Op_n φ_b⟩` along the schedule, extrapolated per column.
pub fn wot_limit_estimate(seq: &OperatorSequence, dict: &TestDictionary) -> Result<WotEstimate> {
    if seq.schedule.len() < 3 {
        return Err(EvoError::ScheduleTooShort(seq.schedule.len()));
    }
    let d = dict.size();
    let table = exec::try_map_indexed(seq.schedule.len(), |s| {
        let op = seq.generate(seq.schedule[s])?;
        let images = dict.members.iter().map(|phi| op(phi)).collect::<Result<Vec<_>>>()?;
        let mut row = vec![ZERO; d * d];
        for a in 0..d {
            for b in 0..d {
                row[a * d + b] = inner_product(&dict.members[a], &images[b])?;
            }
        }
        Ok::<_, EvoError>(row)
    })?;
    Ok(summarize(seq.schedule.clone(), d, table))
}

/// Increments below this fraction of the table scale count as settled.
pub const CAUCHY_FLOOR: f64 = 1e-12;

pub(crate) fn summarize(schedule: Vec<usize>, d: usize, table: Vec<Vec<C64>>) -> WotEstimate {
    let steps = table.len();
    let scale = table.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let floor = CAUCHY_FLOOR * scale;
    let cols = d * d;
    let mut cauchy = vec![true; cols];
    let mut extrapolated = vec![None; cols];
    let mut rate: f64 = 0.0;
    let mut final_increment: f64 = 0.0;
    for c in 0..cols {
        let col: Vec<C64> = table.iter().map(|r| r[c]).collect();
        let inc: Vec<f64> = col.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
        let last = *inc.last().unwrap();
        let prev = inc[inc.len() - 2];
        final_increment = final_increment.max(last);
        let settled = last <= floor;
        let tail = &inc[inc.len().saturating_sub(3)..];
        let monotone = tail.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + floor);
        cauchy[c] = settled || monotone;
        if prev > floor {
            rate = rate.max(last / prev);
        }
        if cauchy[c] {
            extrapolated[c] = Some(extrapolate3(col[steps - 3], col[steps - 2], col[steps - 1], floor));
        }
    }
    let converged = cauchy.iter().all(|c| *c) && rate < 1.0;
    WotEstimate {
        schedule,
        dict_size: d,
        pairing_table: table,
        extrapolated,
        cauchy,
        convergence_rate: rate,
        final_increment,
        converged,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TimeIndependent,
    GeneralEvolutionary,
    Block,
    SymbolValued,
    TimePeriodicClosedForm,
}

/// Truncation of the inner (`ℓ`) and outer (`j`) series; `None` picks the
/// first depth whose geometric tail bound is below `tol`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Truncation {
    #[serde(rename = "J")]
    pub j: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub tol: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Self { j: None, l: None, tol: 1e-8 }
    }
}

impl Truncation {
    pub fn tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

const MAX_DEPTH: usize = 400;

fn depth_for(ratio: f64, scale: f64, tol: f64) -> usize {
    if ratio <= 0.0 || scale == 0.0 {
        return 0;
    }
    (0..MAX_DEPTH)
        .find(|&k| scale * ratio.powi(k as i32 + 1) / (1.0 - ratio) <= tol)
        .unwrap_or(MAX_DEPTH)
}

/// Limit of `∂₀M_n + N_n` with time-independent averaged coefficients:
/// `M_hom,ℓ = C_ℓ (−∂₀⁻¹τ)^ℓ`, `τ` an optional delay.
#[derive(Clone, Debug)]
pub struct HomogenizedModel {
    pub kind: ModelKind,
    pub grid: TimeGrid,
    pub space: SpaceModel,
    pub m_hom: Vec<Coef>,
    pub delay: f64,
    pub j: usize,
    pub l: usize,
    pub inner_tail: f64,
    pub outer_tail: f64,
    /// `(M_eff, N_eff)` with limit `∂₀ M_eff + N_eff`.
    pub closed_form: Option<(Coef, Coef)>,
}

pub fn coef_json(c: &Coef) -> Value {
    let mat = |a: &Mat| -> Value {
        Value::Array(
            (0..a.nrows())
                .map(|r| Value::Array((0..a.ncols()).map(|k| json!([a[(r, k)].re, a[(r, k)].im])).collect()))
                .collect(),
        )
    };
    match c {
        Coef::Scalar(z) => json!({"scalar": [z.re, z.im]}),
        Coef::Dense(a) => json!({"dense": mat(a)}),
        Coef::Cells { m, cells, blocks } => {
            json!({"cells": {"m": m, "cells": cells, "blocks": blocks.iter().map(mat).collect::<Vec<_>>()}})
        }
    }
}

impl Serialize for HomogenizedModel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("HomogenizedModel", 9)?;
        st.serialize_field("kind", &self.kind)?;
        st.serialize_field("nu", &self.grid.nu)?;
        st.serialize_field("J", &self.j)?;
        st.serialize_field("L", &self.l)?;
        st.serialize_field("delay", &self.delay)?;
        st.serialize_field("inner_tail", &self.inner_tail)?;
        st.serialize_field("outer_tail", &self.outer_tail)?;
        st.serialize_field("m_hom", &self.m_hom.iter().map(coef_json).collect::<Vec<_>>())?;
        st.serialize_field(
            "closed_form",
            &self.closed_form.as_ref().map(|(m, n)| json!({"m_eff": coef_json(m), "n_eff": coef_json(n)})),
        )?;
        st.end()
    }
}

fn step_bound(grid: &TimeGrid) -> f64 {
    grid.integration_norm_bound()
}

impl HomogenizedModel {
    /// Averaged series from periodic cell functions `a(k·)`, `b(k·)`.
    pub fn from_cells(
        a: &CellFunction,
        b: Option<&CellFunction>,
        grid: TimeGrid,
        space: SpaceModel,
        trunc: Truncation,
    ) -> Result<Self> {
        check_cell_coercive(a)?;
        let nodes = a.nodes();
        let kappa = nodes.iter().map(|y| spectral_norm(&invert(&a.at(y)).unwrap())).fold(0.0, f64::max);
        let rho = match b {
            Some(b) => {
                let mut g = a.clone();
                g.resolution = a.resolution.max(b.resolution);
                g.nodes()
                    .iter()
                    .map(|y| spectral_norm(&(b.at(y) * invert(&a.at(y)).unwrap())))
                    .fold(0.0, f64::max)
            }
            None => 0.0,
        };
        let q = rho * step_bound(&grid);
        if q >= 1.0 {
            return Err(EvoError::NotContractive { q });
        }
        let l = trunc.l.unwrap_or_else(|| depth_for(q, kappa, trunc.tol));
        let series = cell_average_series(a, b, l)?;
        let m_hom = series.iter().map(|x| lift(x, &space, &space)).collect::<Result<Vec<_>>>()?;
        let inner_tail = if q > 0.0 { kappa * q.powi(l as i32 + 1) / (1.0 - q) } else { 0.0 };
        Self::from_series(ModelKind::TimeIndependent, m_hom, grid, space, 0.0, trunc, inner_tail)
    }

    /// Model from an explicit list `C_0, C_1, …`.
    pub fn from_series(
        kind: ModelKind,
        m_hom: Vec<Coef>,
        grid: TimeGrid,
        space: SpaceModel,
        delay: f64,
        trunc: Truncation,
        inner_tail: f64,
    ) -> Result<Self> {
        if m_hom.is_empty() {
            return Err(EvoError::ConfigInvalid("empty homogenized series".into()));
        }
        let c0 = m_hom[0].herm_min_eig();
        if !(c0 > 0.0) {
            return Err(EvoError::NotCoercive { c: c0 });
        }
        let l = trunc.l.map_or(m_hom.len() - 1, |l| l.min(m_hom.len() - 1));
        let m_hom: Vec<Coef> = m_hom.into_iter().take(l + 1).collect();
        let c0_inv = m_hom[0].inverse().ok_or(EvoError::NotCoercive { c: c0 })?;
        let r = step_bound(&grid) * (-grid.nu * (delay / grid.dt + 1e-9).floor() * grid.dt).exp();
        let sigma: f64 = c0_inv.norm2() * (1..=l).map(|k| m_hom[k].norm2() * r.powi(k as i32)).sum::<f64>();
        if sigma >= 1.0 {
            return Err(EvoError::NotContractive { q: sigma });
        }
        let j = trunc.j.unwrap_or_else(|| depth_for(sigma, 1.0, trunc.tol));
        let outer_tail = if sigma > 0.0 { sigma.powi(j as i32 + 1) / (1.0 - sigma) } else { 0.0 };
        Ok(Self { kind, grid, space, m_hom, delay, j, l, inner_tail, outer_tail, closed_form: None })
    }

    /// Same series with every `∂₀⁻¹` followed by a delay `h`.
    pub fn with_delay(&self, h: f64, trunc: Truncation) -> Result<Self> {
        if !(h >= 0.0) {
            return Err(EvoError::NegativeDelay(h));
        }
        let trunc = Truncation { l: Some(self.l), ..trunc };
        let mut m = Self::from_series(self.kind, self.m_hom.clone(), self.grid, self.space, h, trunc, self.inner_tail)?;
        m.closed_form = self.closed_form.clone();
        Ok(m)
    }

    fn coef_op(&self, c: &Coef) -> Result<EvolutionaryOp> {
        EvolutionaryOp::constant(self.grid, self.space, c.clone())
    }

    /// `−∂₀⁻¹ τ`.
    fn step(&self) -> Result<EvolutionaryOp> {
        let i = EvolutionaryOp::integration(self.grid, self.space);
        let s = if self.delay > 0.0 {
            EvolutionaryOp::compose(vec![i, shift_op(self.delay, self.grid, self.space)?])?
        } else {
            i
        };
        Ok(EvolutionaryOp::scale_re(-1.0, &s))
    }

    /// Limit solution `Σ_ℓ C_ℓ (−∂₀⁻¹τ)^ℓ ∂₀⁻¹ f`.
    pub fn solve(&self, f: &WeightedSignal) -> Result<WeightedSignal> {
        let step = self.step()?;
        let y = EvolutionaryOp::integration(self.grid, self.space).apply(f)?;
        let mut acc = self.coef_op(&self.m_hom[self.l])?.apply(&y)?;
        for k in (0..self.l).rev() {
            let mut next = self.coef_op(&self.m_hom[k])?.apply(&y)?;
            next.axpy(ONE, &step.apply(&acc)?);
            acc = next;
        }
        Ok(acc)
    }

    /// The homogenized operator as a truncated double series.
    pub fn assemble(&self) -> Result<EvolutionaryOp> {
        assemble_time_independent(self)
    }

    /// `C_0⁻¹ C_1 C_0⁻¹` (with the delay), the memoryless zeroth-order coefficient.
    pub fn zeroth_order(&self) -> Result<EvolutionaryOp> {
        let c0_inv = self.m_hom[0].inverse().ok_or(EvoError::NotCoercive { c: 0.0 })?;
        let c1 = self.m_hom.get(1).cloned().unwrap_or_else(Coef::zero);
        let z = self.coef_op(&c0_inv.mul(&c1).mul(&c0_inv))?;
        if self.delay > 0.0 {
            EvolutionaryOp::compose(vec![z, shift_op(self.delay, self.grid, self.space)?])
        } else {
            Ok(z)
        }
    }

    /// `∂₀ C_0⁻¹ + zeroth order`: the limit with the memory tail dropped.
    pub fn memoryless(&self) -> Result<EvolutionaryOp> {
        let c0_inv = self.m_hom[0].inverse().ok_or(EvoError::NotCoercive { c: 0.0 })?;
        let lead = EvolutionaryOp::compose(vec![
            EvolutionaryOp::derivative(self.grid, self.space),
            self.coef_op(&c0_inv)?,
        ])?;
        lead.plus(&self.zeroth_order()?)
    }

    pub fn has_memory_terms(&self) -> bool {
        self.m_hom.iter().skip(1).any(|c| c.max_abs() > 0.0)
    }
}

/// `∂₀ Σ_{j≤J} S^j C_0⁻¹` with `S = −C_0⁻¹ Σ_{1≤ℓ≤L} C_ℓ (−∂₀⁻¹τ)^ℓ`.
pub fn assemble_time_independent(model: &HomogenizedModel) -> Result<EvolutionaryOp> {
    let (g, s) = (model.grid, model.space);
    let c0_inv = model.m_hom[0].inverse().ok_or(EvoError::NotCoercive { c: 0.0 })?;
    let c0_inv_op = model.coef_op(&c0_inv)?;
    let body = series_body(model)?;
    EvolutionaryOp::compose(vec![EvolutionaryOp::derivative(g, s), body, c0_inv_op])
}

/// `Σ_{j≤J} S^j`, the limit with the leading `∂₀` and trailing `C_0⁻¹` removed.
fn series_body(model: &HomogenizedModel) -> Result<EvolutionaryOp> {
    let (g, s) = (model.grid, model.space);
    let id = EvolutionaryOp::identity(g, s);
    if model.l == 0 || model.j == 0 {
        return Ok(id);
    }
    let step = model.step()?;
    let c0_inv = model.m_hom[0].inverse().ok_or(EvoError::NotCoercive { c: 0.0 })?;
    let mut h = model.coef_op(&model.m_hom[model.l])?;
    for k in (1..model.l).rev() {
        h = model.coef_op(&model.m_hom[k])?.plus(&step.then_after(&h)?)?;
    }
    let t = step.then_after(&h)?;
    let s_op = EvolutionaryOp::scale_re(-1.0, &model.coef_op(&c0_inv)?.then_after(&t)?);
    let mut p = id.clone();
    for _ in 0..model.j {
        p = id.plus(&s_op.then_after(&p)?)?;
    }
    Ok(p)
}

/// Closed form of `∂₀A(n·) + B(n·)` with time-periodic coefficients, plus the
/// averaged series `C_ℓ = ∫A⁻¹ (∫B A⁻¹)^ℓ` that resums to it.
pub fn time_periodic_limit(
    a: &CellFunction,
    b: Option<&CellFunction>,
    grid: TimeGrid,
    space: SpaceModel,
    trunc: Truncation,
) -> Result<HomogenizedModel> {
    check_cell_coercive(a)?;
    let ia = cell_average_series(a, None, 0)?.remove(0);
    let iba = match b {
        Some(b) => {
            let mut cell = a.clone();
            cell.resolution = a.resolution.max(b.resolution);
            let nodes = cell.nodes();
            let w = C64::new(1.0 / nodes.len() as f64, 0.0);
            nodes.iter().fold(Mat::zeros(a.m, a.m), |acc, y| {
                acc + b.at(y) * invert(&a.at(y)).unwrap_or_else(|| Mat::zeros(a.m, a.m))
            }) * w
        }
        None => Mat::zeros(a.m, a.m),
    };
    let m_eff = invert(&ia).ok_or(EvoError::NotCoerciveOnCell { c: 0.0 })?;
    let n_eff = &iba * &m_eff;
    let r = step_bound(&grid);
    let q = spectral_norm(&iba) * r;
    if q >= 1.0 {
        return Err(EvoError::NotContractive { q });
    }
    let kappa = spectral_norm(&ia);
    let l = trunc.l.unwrap_or_else(|| depth_for(q, kappa, trunc.tol));
    let mut series = Vec::with_capacity(l + 1);
    let mut cur = ia.clone();
    for _ in 0..=l {
        series.push(lift(&cur, &space, &space)?);
        cur = &cur * &iba;
    }
    let inner_tail = if q > 0.0 { kappa * q.powi(l as i32 + 1) / (1.0 - q) } else { 0.0 };
    let mut model = HomogenizedModel::from_series(ModelKind::TimePeriodicClosedForm, series, grid, space, 0.0, trunc, inner_tail)?;
    model.closed_form = Some((lift(&m_eff, &space, &space)?, lift(&n_eff, &space, &space)?));
    Ok(model)
}

/// `Π_{j<k} ∫₀¹ A_j`.
pub fn time_product_limit(list: &[CellFunction], k: usize) -> Mat {
    let m = list.first().map_or(1, |a| a.m);
    list.iter().take(k).fold(Mat::identity(m, m), |acc, a| acc * a.mean())
}

#[derive(Clone, Debug, Serialize)]
pub struct MemoryKernel {
    pub dt: f64,
    pub samples: Vec<C64>,
    /// Relative disagreement between the impulse responses at two start times.
    pub translation_mismatch: f64,
}

impl MemoryKernel {
    /// `dt Σ |K_i| e^{-ν t_i}`.
    pub fn l1_mass(&self, nu: f64) -> f64 {
        self.samples.iter().enumerate().map(|(i, k)| k.norm() * (-nu * i as f64 * self.dt).exp()).sum::<f64>() * self.dt
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// CSV `t,K_re,K_im`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "K_re", "K_im"])?;
        for (i, k) in self.samples.iter().enumerate() {
            w.write_record([format!("{}", i as f64 * self.dt), format!("{}", k.re), format!("{}", k.im)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let perr = |m: String| EvoError::Parse { path: path.to_path_buf(), message: m };
        let mut r = csv::Reader::from_path(path)?;
        let mut ts = Vec::new();
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(perr(format!("expected 3 columns, found {}", rec.len())));
            }
            let num = |k: usize| rec[k].trim().parse::<f64>().map_err(|e| perr(format!("bad number {:?}: {e}", &rec[k])));
            ts.push(num(0)?);
            samples.push(C64::new(num(1)?, num(2)?));
        }
        let dt = if ts.len() > 1 { ts[1] - ts[0] } else { 0.0 };
        Ok(Self { dt, samples, translation_mismatch: 0.0 })
    }
}

/// Kernel `K` of the memory term in `limit = ∂₀C_0⁻¹ + Z + K*`, for scalar coefficients.
pub fn extract_memory_kernel(model: &HomogenizedModel) -> Result<MemoryKernel> {
    if !model.m_hom.iter().all(|c| c.as_scalar().is_some()) {
        return Err(EvoError::UnsupportedKind("kernel extraction needs scalar coefficients".into()));
    }
    let scalar = SpaceModel::finite_dim(1);
    let mut m = model.clone();
    m.space = scalar;
    let grid = m.grid;
    let body = series_body(&m)?;
    let c0_inv = m.m_hom[0].inverse().ok_or(EvoError::NotCoercive { c: 0.0 })?;
    let x = body.then_after(&m.coef_op(&c0_inv)?)?;
    let lead = m.coef_op(&c0_inv)?;
    let z = EvolutionaryOp::compose(vec![EvolutionaryOp::integration(grid, scalar), m.zeroth_order()?])?;
    let residual = x.minus(&lead)?.minus(&z)?;
    let d = EvolutionaryOp::derivative(grid, scalar);
    let response = |start: usize| -> Result<Vec<C64>> {
        let mut delta = WeightedSignal::zeros(grid, scalar);
        delta.values[start] = C64::new(1.0 / grid.dt, 0.0);
        Ok(d.apply(&residual.apply(&delta)?)?.values)
    };
    let k0 = response(0)?;
    let s = grid.n_steps / 4;
    let ks = response(s)?;
    let scale = k0.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut diff: f64 = ks[..s].iter().map(|z| z.norm()).fold(0.0, f64::max);
    for i in 0..grid.n_steps - s {
        diff = diff.max((ks[i + s] - k0[i]).norm());
    }
    let mismatch = if scale > 0.0 { diff / scale } else { diff };
    if mismatch > 1e-6 && diff > 1e-9 {
        return Err(EvoError::NotTranslationInvariant { mismatch });
    }
    Ok(MemoryKernel { dt: grid.dt, samples: k0, translation_mismatch: mismatch })
}

/// Limits for the two-block system, time-independent convention:
/// `M_hom,ℓ,00 = B00_ℓ ∂₀^{-ℓ}`, `M_hom,ℓ,01 = B01_ℓ ∂₀^{-ℓ-1}`,
/// `M_hom,ℓ,10 = B10_ℓ ∂₀^{-ℓ}`, `M_hom,ℓ,11 = B11_ℓ ∂₀^{-ℓ-1}`.
#[derive(Clone, Debug)]
pub struct BlockModel {
    pub grid: TimeGrid,
    pub s0: SpaceModel,
    pub s1: SpaceModel,
    pub b00: Vec<Coef>,
    pub b01: Vec<Coef>,
    pub b10: Vec<Coef>,
    pub b11: Vec<Coef>,
    /// `N_hom,-1,11`.
    pub n11_inv_hom: Coef,
    pub j: usize,
}

fn block_terms(
    minv: &Mat,
    schur: &Mat,
    n01: &Mat,
    n10: &Mat,
    n11inv: &Mat,
    l: usize,
) -> [Vec<Mat>; 4] {
    let mut b00 = Vec::with_capacity(l + 1);
    let step = -(schur * minv);
    let mut cur = minv.clone();
    for _ in 0..=l {
        b00.push(cur.clone());
        cur = &cur * &step;
    }
    let right = n01 * n11inv;
    let left = n11inv * n10;
    let b01 = b00.iter().map(|b| -(b * &right)).collect();
    let b10 = b00.iter().map(|b| -(&left * b)).collect();
    let b11 = b00.iter().map(|b| &left * b * &right).collect();
    [b00, b01, b10, b11]
}

impl BlockModel {
    /// Limits of norm-convergent (here: constant) coefficient matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn from_constant(
        grid: TimeGrid,
        s0: SpaceModel,
        s1: SpaceModel,
        m: &Mat,
        n00: &Mat,
        n01: &Mat,
        n10: &Mat,
        n11: &Mat,
        trunc: Truncation,
    ) -> Result<Self> {
        let mats = [m.clone(), n00.clone(), n01.clone(), n10.clone(), n11.clone()];
        let cells: Vec<CellFunction> = mats.into_iter().map(|a| CellFunction::constant_matrix(1, a).with_resolution(1)).collect();
        Self::from_cells(grid, s0, s1, [&cells[0], &cells[1], &cells[2], &cells[3], &cells[4]], trunc)
    }

    /// Averages of the pointwise Schur-complement products over the cell.
    pub fn from_cells(
        grid: TimeGrid,
        s0: SpaceModel,
        s1: SpaceModel,
        cells: [&CellFunction; 5],
        trunc: Truncation,
    ) -> Result<Self> {
        let [m, n00, n01, n10, n11] = cells;
        check_cell_coercive(m)?;
        let c11 = n11.min_coercivity();
        if !(c11 > 0.0) {
            return Err(EvoError::SingularAlgebraicBlock { c: c11 });
        }
        let mut host = m.clone();
        host.resolution = cells.iter().map(|c| c.resolution).max().unwrap();
        let nodes = host.nodes();
        let r = step_bound(&grid);
        let pieces = exec::map_indexed(nodes.len(), |k| {
            let y = &nodes[k];
            let n11inv = invert(&n11.at(y)).unwrap();
            let minv = invert(&m.at(y)).unwrap();
            let schur = n00.at(y) - n01.at(y) * &n11inv * n10.at(y);
            (minv, schur, n01.at(y), n10.at(y), n11inv)
        });
        let q = pieces.iter().map(|(minv, schur, ..)| spectral_norm(&(schur * minv))).fold(0.0, f64::max) * r;
        if q >= 1.0 {
            return Err(EvoError::NotContractive { q });
        }
        let kappa = pieces
            .iter()
            .map(|(minv, _, n01, n10, n11inv)| {
                spectral_norm(minv) * (1.0 + spectral_norm(&(n11inv * n10))) * (1.0 + spectral_norm(&(n01 * n11inv)))
            })
            .fold(0.0, f64::max);
        let l = trunc.l.unwrap_or_else(|| depth_for(q, kappa, trunc.tol));
        let w = C64::new(1.0 / nodes.len() as f64, 0.0);
        let mut sums: Option<[Vec<Mat>; 4]> = None;
        let mut n11_mean = Mat::zeros(n11.m, n11.m);
        for (minv, schur, a01, a10, n11inv) in &pieces {
            let t = block_terms(minv, schur, a01, a10, n11inv, l);
            n11_mean += n11inv;
            sums = Some(match sums {
                None => t,
                Some(mut acc) => {
                    for (av, tv) in acc.iter_mut().zip(t) {
                        for (a, b) in av.iter_mut().zip(tv) {
                            *a += b;
                        }
                    }
                    acc
                }
            });
        }
        let [b00, b01, b10, b11] = sums.unwrap();
        let lift_all = |v: Vec<Mat>, so: &SpaceModel, si: &SpaceModel| -> Result<Vec<Coef>> {
            v.into_iter().map(|x| lift(&(x * w), so, si)).collect()
        };
        let mut model = Self {
            grid,
            s0,
            s1,
            b00: lift_all(b00, &s0, &s0)?,
            b01: lift_all(b01, &s0, &s1)?,
            b10: lift_all(b10, &s1, &s0)?,
            b11: lift_all(b11, &s1, &s1)?,
            n11_inv_hom: lift(&(n11_mean * w), &s1, &s1)?,
            j: 0,
        };
        model.j = match trunc.j {
            Some(j) => j,
            None => {
                let sigma = model.outer_ratio()?;
                if sigma >= 1.0 {
                    return Err(EvoError::NotContractive { q: sigma });
                }
                depth_for(sigma, 1.0, trunc.tol)
            }
        };
        Ok(model)
    }

    fn diag_inv(&self) -> Result<(Coef, Coef)> {
        let e0 = self.b00[0].inverse().ok_or(EvoError::NotCoercive { c: self.b00[0].herm_min_eig() })?;
        let e1 = self.n11_inv_hom.inverse().ok_or(EvoError::NotCoercive { c: self.n11_inv_hom.herm_min_eig() })?;
        Ok((e0, e1))
    }

    /// Bound on `‖diag(B00_0, N_hom,-1,11)⁻¹ M⁽¹⁾‖`.
    fn outer_ratio(&self) -> Result<f64> {
        let (e0, e1) = self.diag_inv()?;
        let r = step_bound(&self.grid);
        let series = |v: &[Coef], from: usize, shift: i32| -> f64 {
            v.iter().enumerate().skip(from).map(|(k, c)| c.norm2() * r.powi(k as i32 + shift)).sum()
        };
        let m00 = series(&self.b00, 1, 0);
        let m01 = series(&self.b01, 0, 1);
        let m10 = series(&self.b10, 0, 0);
        let m11 = series(&self.b11, 0, 1);
        let frob = (m00 * m00 + m01 * m01 + m10 * m10 + m11 * m11).sqrt();
        Ok(e0.norm2().max(e1.norm2()) * frob)
    }

    fn horner(&self, v: &[Coef], from: usize, x: &WeightedSignal, so: SpaceModel) -> Result<WeightedSignal> {
        let i = EvolutionaryOp::integration(self.grid, so);
        let si = x.space;
        let apply = |c: &Coef, x: &WeightedSignal| EvolutionaryOp::constant_between(self.grid, si, so, c.clone())?.apply(x);
        let last = v.len() - 1;
        if from > last {
            return Ok(WeightedSignal::zeros(self.grid, so));
        }
        let mut acc = apply(&v[last], x)?;
        for k in (from..last).rev() {
            let mut next = apply(&v[k], x)?;
            next.axpy(ONE, &i.apply(&acc)?);
            acc = next;
        }
        for _ in 0..from {
            acc = i.apply(&acc)?;
        }
        Ok(acc)
    }

    /// Limit solution `(E + M⁽¹⁾)·diag(∂₀⁻¹, 1) f`.
    pub fn solve(&self, f: &BlockSignal) -> Result<BlockSignal> {
        let i0 = EvolutionaryOp::integration(self.grid, self.s0);
        let i1 = EvolutionaryOp::integration(self.grid, self.s1);
        let f0 = i0.apply(&f.b0)?;
        let f1i = i1.apply(&f.b1)?;
        let mut u0 = self.horner(&self.b00, 0, &f0, self.s0)?;
        u0.axpy(ONE, &self.horner(&self.b01, 0, &f1i, self.s0)?);
        let mut u1 = EvolutionaryOp::constant(self.grid, self.s1, self.n11_inv_hom.clone())?.apply(&f.b1)?;
        u1.axpy(ONE, &self.horner(&self.b10, 0, &f0, self.s1)?);
        u1.axpy(ONE, &self.horner(&self.b11, 0, &f1i, self.s1)?);
        Ok(BlockSignal { b0: u0, b1: u1 })
    }

    /// The block limit operator `diag(∂₀,1) Σ_{j≤J} (−E⁻¹M⁽¹⁾)^j E⁻¹`.
    pub fn assemble(&self) -> Result<BlockLimitOp> {
        let (e0, e1) = self.diag_inv()?;
        let tree = |v: &[Coef], from: usize, extra: usize, so: SpaceModel, si: SpaceModel| -> Result<EvolutionaryOp> {
            let io = EvolutionaryOp::integration(self.grid, so);
            let c = |k: usize| EvolutionaryOp::constant_between(self.grid, si, so, v[k].clone());
            if from >= v.len() {
                return Ok(EvolutionaryOp::zero(self.grid, si, so));
            }
            let last = v.len() - 1;
            let mut h = c(last)?;
            for k in (from..last).rev() {
                h = c(k)?.plus(&io.then_after(&h)?)?;
            }
            for _ in 0..from + extra {
                h = io.then_after(&h)?;
            }
            Ok(h)
        };
        Ok(BlockLimitOp {
            e0: EvolutionaryOp::constant(self.grid, self.s0, e0)?,
            e1: EvolutionaryOp::constant(self.grid, self.s1, e1)?,
            m1: [
                [tree(&self.b00, 1, 0, self.s0, self.s0)?, tree(&self.b01, 0, 1, self.s0, self.s1)?],
                [tree(&self.b10, 0, 0, self.s1, self.s0)?, tree(&self.b11, 0, 1, self.s1, self.s1)?],
            ],
            j: self.j,
        })
    }
}

/// Block operator applied column-wise so shared subtrees are evaluated once.
#[derive(Clone, Debug)]
pub struct BlockLimitOp {
    e0: EvolutionaryOp,
    e1: EvolutionaryOp,
    m1: [[EvolutionaryOp; 2]; 2],
    pub j: usize,
}

impl BlockLimitOp {
    pub fn apply(&self, x: &BlockSignal) -> Result<BlockSignal> {
        let mut y = BlockSignal { b0: self.e0.apply(&x.b0)?, b1: self.e1.apply(&x.b1)? };
        let mut acc = y.clone();
        for _ in 0..self.j {
            let mut t0 = self.m1[0][0].apply(&y.b0)?;
            t0.axpy(ONE, &self.m1[0][1].apply(&y.b1)?);
            let mut t1 = self.m1[1][0].apply(&y.b0)?;
            t1.axpy(ONE, &self.m1[1][1].apply(&y.b1)?);
            y = BlockSignal { b0: self.e0.apply(&t0)?.scaled(-ONE), b1: self.e1.apply(&t1)?.scaled(-ONE) };
            acc.b0.axpy(ONE, &y.b0);
            acc.b1.axpy(ONE, &y.b1);
        }
        let d = EvolutionaryOp::derivative(self.e0.grid, self.e0.space_in);
        Ok(BlockSignal { b0: d.apply(&acc.b0)?, b1: acc.b1 })
    }
}

/// Per-frequency values of the full limit symbols `M_hom,ℓ,ij(z)` (powers of
/// `z` included) and `N_hom,-1,11(z)`. Empty lists stand for a trivial block.
#[derive(Clone, Debug, Default)]
pub struct SymbolLimits {
    pub m00: Vec<Coef>,
    pub m01: Vec<Coef>,
    pub m10: Vec<Coef>,
    pub m11: Vec<Coef>,
    pub n11_inv: Option<Coef>,
}

pub struct SymbolAssembly {
    /// The homogenized operator.
    pub limit: EvolutionaryOp,
    /// Its inverse, the limit solution operator.
    pub solution: EvolutionaryOp,
    pub max_ratio: f64,
}

fn sum_coefs(v: &[Coef], from: usize) -> Coef {
    v.iter().skip(from).fold(Coef::zero(), |a, c| a.add(c))
}

/// The block-limit series evaluated frequency by frequency. One of the two
/// blocks must be trivial, so the result acts on a single space.
pub fn assemble_symbol_valued(
    grid: TimeGrid,
    space: SpaceModel,
    trunc: Truncation,
    limits: impl Fn(&FreqPoint) -> SymbolLimits + Sync,
) -> Result<SymbolAssembly> {
    let p = padded_len(&grid);
    let per = exec::try_map_indexed(p, |k| {
        let fp = freq_point(&grid, p, k);
        let lim = limits(&fp);
        let (e, m1, lead) = if !lim.m00.is_empty() {
            (lim.m00[0].clone(), sum_coefs(&lim.m00, 1), ONE / fp.z)
        } else {
            let n = lim
                .n11_inv
                .clone()
                .ok_or_else(|| EvoError::ConfigInvalid("symbol limits need M_hom,0,00 or N_hom,-1,11".into()))?;
            (n, sum_coefs(&lim.m11, 0), ONE)
        };
        let e_inv = e.inverse().ok_or(EvoError::NotContractiveAtFrequency { index: k, q: f64::INFINITY })?;
        let t = e_inv.mul(&m1).scale(-ONE);
        let ratio = t.norm2();
        if ratio >= 1.0 {
            return Err(EvoError::NotContractiveAtFrequency { index: k, q: ratio });
        }
        let j = trunc.j.unwrap_or_else(|| depth_for(ratio, 1.0, trunc.tol));
        let mut term = e_inv.clone();
        let mut x = e_inv.clone();
        for _ in 0..j {
            term = t.mul(&term);
            x = x.add(&term);
        }
        let sol = e.add(&m1).scale(ONE / lead);
        Ok::<_, EvoError>((x.scale(lead), sol, ratio))
    })?;
    let max_ratio = per.iter().map(|x| x.2).fold(0.0, f64::max);
    let limit = per.iter().map(|x| x.0.clone()).collect();
    let solution = per.into_iter().map(|x| x.1).collect();
    Ok(SymbolAssembly {
        limit: EvolutionaryOp::hinf(grid, space, space, HInfSymbol::from_samples("hom-limit", p, limit)),
        solution: EvolutionaryOp::hinf(grid, space, space, HInfSymbol::from_samples("hom-solution", p, solution)),
        max_ratio,
    })
}
