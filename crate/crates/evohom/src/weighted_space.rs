//! Discrete exponentially weighted signal space.
//!
//! A [`WeightedSignal`] lives on a uniform causal grid `t_i = i·dt`,
//! `i < n_steps`, and is taken to vanish for `t < 0`. Its inner product is the
//! rectangle rule for `∫ ⟨f(t), g(t)⟩ e^{-2νt} dt`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvoError, Result};
use crate::exec;
use crate::linalg::{Mat, C64, ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
    pub nu: f64,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize, nu: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(EvoError::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if n_steps < 2 {
            return Err(EvoError::InvalidGrid(format!("n_steps must be >= 2, got {n_steps}")));
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(EvoError::InvalidGrid(format!("nu must be positive, got {nu}")));
        }
        if nu * dt >= 1.0 {
            return Err(EvoError::InvalidGrid(format!(
                "resolution guard violated: nu*dt = {} >= 1",
                nu * dt
            )));
        }
        Ok(Self { dt, n_steps, nu })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.dt, self.n_steps, self.nu).map(|_| ())
    }

    pub fn with_nu(&self, nu: f64) -> Result<Self> {
        Self::new(self.dt, self.n_steps, nu)
    }

    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Window length `T = n_steps·dt`.
    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    /// `e^{-2ν t_i}`.
    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        (-2.0 * self.nu * self.t(i)).exp()
    }

    /// Schur-test bound `dt / (1 - e^{-ν dt})` for the discrete integration.
    pub fn integration_norm_bound(&self) -> f64 {
        self.dt / -(-self.nu * self.dt).exp_m1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpaceModel {
    FiniteDim { m: usize },
    TorusGrid { d: usize, r: usize, m: usize },
}

impl SpaceModel {
    pub fn finite_dim(m: usize) -> Self {
        SpaceModel::FiniteDim { m }
    }

    pub fn torus_grid(d: usize, r: usize, m: usize) -> Self {
        SpaceModel::TorusGrid { d, r, m }
    }

    pub fn m(&self) -> usize {
        match *self {
            SpaceModel::FiniteDim { m } | SpaceModel::TorusGrid { m, .. } => m,
        }
    }

    pub fn cells(&self) -> usize {
        match *self {
            SpaceModel::FiniteDim { .. } => 1,
            SpaceModel::TorusGrid { d, r, .. } => r.pow(d as u32),
        }
    }

    pub fn ndof(&self) -> usize {
        self.cells() * self.m()
    }

    /// Quadrature weight of one degree of freedom.
    pub fn quad_weight(&self) -> f64 {
        match self {
            SpaceModel::FiniteDim { .. } => 1.0,
            SpaceModel::TorusGrid { .. } => 1.0 / self.cells() as f64,
        }
    }

    /// Midpoint of a torus cell; the first coordinate varies slowest.
    pub fn cell_center(&self, cell: usize) -> Vec<f64> {
        match *self {
            SpaceModel::FiniteDim { .. } => Vec::new(),
            SpaceModel::TorusGrid { d, r, .. } => {
                let mut x = vec![0.0; d];
                let mut rem = cell;
                for k in (0..d).rev() {
                    x[k] = ((rem % r) as f64 + 0.5) / r as f64;
                    rem /= r;
                }
                x
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SpaceModel::FiniteDim { m } => m >= 1,
            SpaceModel::TorusGrid { d, r, m } => d >= 1 && r >= 1 && m >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(EvoError::ConfigInvalid(format!("degenerate space model {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSignal {
    pub grid: TimeGrid,
    pub space: SpaceModel,
    /// Row-major `(time, dof)`.
    pub values: Vec<C64>,
}

impl WeightedSignal {
    pub fn zeros(grid: TimeGrid, space: SpaceModel) -> Self {
        Self { grid, space, values: vec![ZERO; grid.n_steps * space.ndof()] }
    }

    pub fn from_values(grid: TimeGrid, space: SpaceModel, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.n_steps * space.ndof() {
            return Err(EvoError::GridMismatch(format!(
                "expected {} values, got {}",
                grid.n_steps * space.ndof(),
                values.len()
            )));
        }
        Ok(Self { grid, space, values })
    }

    /// Samples `f(t_i, dof)`.
    pub fn from_fn(grid: TimeGrid, space: SpaceModel, f: impl Fn(f64, usize) -> C64) -> Self {
        let nd = space.ndof();
        let mut values = Vec::with_capacity(grid.n_steps * nd);
        for i in 0..grid.n_steps {
            let t = grid.t(i);
            for k in 0..nd {
                values.push(f(t, k));
            }
        }
        Self { grid, space, values }
    }

    /// Like [`from_fn`](Self::from_fn) for data claimed to vanish outside `support`;
    /// claims reaching outside `[0, T]` are rejected.
    pub fn from_fn_supported(
        grid: TimeGrid,
        space: SpaceModel,
        support: (f64, f64),
        f: impl Fn(f64, usize) -> C64,
    ) -> Result<Self> {
        let (a, b) = support;
        if a < 0.0 || b > grid.horizon() || a > b {
            return Err(EvoError::SupportOutsideWindow(format!(
                "[{a}, {b}] not inside [0, {}]",
                grid.horizon()
            )));
        }
        Ok(Self::from_fn(grid, space, |t, k| if t < a || t > b { ZERO } else { f(t, k) }))
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn ndof(&self) -> usize {
        self.space.ndof()
    }

    pub fn row(&self, i: usize) -> &[C64] {
        let nd = self.ndof();
        &self.values[i * nd..(i + 1) * nd]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [C64] {
        let nd = self.ndof();
        &mut self.values[i * nd..(i + 1) * nd]
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid || self.space != other.space {
            return Err(EvoError::GridMismatch(format!(
                "{:?}/{:?} vs {:?}/{:?}",
                self.grid, self.space, other.grid, other.space
            )));
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        let nd = self.ndof();
        let q = self.space.quad_weight();
        let mut s = 0.0;
        for i in 0..self.n_steps() {
            let r: f64 = self.values[i * nd..(i + 1) * nd].iter().map(|z| z.norm_sqr()).sum();
            s += self.grid.weight(i) * r;
        }
        s * self.grid.dt * q
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, c: C64) {
        self.values.iter_mut().for_each(|z| *z *= c);
    }

    pub fn scaled(&self, c: C64) -> Self {
        let mut s = self.clone();
        s.scale(c);
        s
    }

    /// `self += a·x`.
    pub fn axpy(&mut self, a: C64, x: &Self) {
        for (y, xv) in self.values.iter_mut().zip(&x.values) {
            *y += a * xv;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut d = self.clone();
        d.axpy(C64::new(-1.0, 0.0), other);
        d
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut d = self.clone();
        d.axpy(C64::new(1.0, 0.0), other);
        d
    }

    /// Relative ν-norm distance `‖self − other‖ / ‖other‖`.
    pub fn rel_dist(&self, other: &Self) -> f64 {
        let d = self.sub(other).norm();
        let n = other.norm();
        if n == 0.0 {
            d
        } else {
            d / n
        }
    }

    /// Values of one degree of freedom over time.
    pub fn column(&self, dof: usize) -> Vec<C64> {
        (0..self.n_steps()).map(|i| self.values[i * self.ndof() + dof]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Write CSV `t,dof_0_re,dof_0_im,…` plus a sidecar `.json` with the grid.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let nd = self.ndof();
        let mut header = vec!["t".to_string()];
        for k in 0..nd {
            header.push(format!("dof_{k}_re"));
            header.push(format!("dof_{k}_im"));
        }
        w.write_record(&header)?;
        for i in 0..self.n_steps() {
            let mut rec = Vec::with_capacity(1 + 2 * nd);
            rec.push(format!("{}", self.grid.t(i)));
            for z in self.row(i) {
                rec.push(format!("{}", z.re));
                rec.push(format!("{}", z.im));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        let meta = SignalMeta {
            dt: self.grid.dt,
            n_steps: self.grid.n_steps,
            nu: self.grid.nu,
            space: self.space,
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let meta: SignalMeta = serde_json::from_str(&fs::read_to_string(&side)?)
            .map_err(|e| parse_err(&side, e.to_string()))?;
        let grid = TimeGrid::new(meta.dt, meta.n_steps, meta.nu)?;
        meta.space.validate()?;
        let nd = meta.space.ndof();
        let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
        let mut values = Vec::with_capacity(grid.n_steps * nd);
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
            if rec.len() != 1 + 2 * nd {
                return Err(parse_err(path, format!("row {rows}: expected {} fields", 1 + 2 * nd)));
            }
            for k in 0..nd {
                let re = parse_f64(path, &rec[1 + 2 * k])?;
                let im = parse_f64(path, &rec[2 + 2 * k])?;
                values.push(C64::new(re, im));
            }
            rows += 1;
        }
        if rows != grid.n_steps {
            return Err(parse_err(path, format!("expected {} rows, found {rows}", grid.n_steps)));
        }
        Self::from_values(grid, meta.space, values)
    }
}

#[derive(Serialize, Deserialize)]
struct SignalMeta {
    dt: f64,
    n_steps: usize,
    nu: f64,
    space: SpaceModel,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub(crate) fn parse_err(path: &Path, message: String) -> EvoError {
    EvoError::Parse { path: path.to_path_buf(), message }
}

pub(crate) fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| parse_err(path, format!("bad number {s:?}: {e}")))
}

/// `⟨f, g⟩_ν`, conjugate-linear in `f`.
pub fn inner_product(f: &WeightedSignal, g: &WeightedSignal) -> Result<C64> {
    f.check_compatible(g)?;
    let nd = f.ndof();
    let mut s = ZERO;
    for i in 0..f.n_steps() {
        let mut r = ZERO;
        for k in i * nd..(i + 1) * nd {
            r += f.values[k].conj() * g.values[k];
        }
        s += r * f.grid.weight(i);
    }
    Ok(s * (f.grid.dt * f.space.quad_weight()))
}

#[derive(Clone, Debug)]
pub struct TestDictionary {
    pub members: Vec<WeightedSignal>,
}

impl TestDictionary {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn gram(&self) -> Result<Mat> {
        let n = self.size();
        let entries = exec::try_map_indexed(n * n, |k| {
            inner_product(&self.members[k / n], &self.members[k % n])
        })?;
        Ok(Mat::from_row_slice(n, n, &entries))
    }

    /// Ratio of extreme Gram eigenvalues.
    pub fn gram_condition(&self) -> Result<f64> {
        let ev = self.gram()?.symmetric_eigenvalues();
        let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(if min <= 0.0 { f64::INFINITY } else { max / min })
    }

    /// Modified Gram–Schmidt in the ν-inner product; dependent members are dropped.
    pub fn orthonormalized(&self) -> Result<Self> {
        let mut out: Vec<WeightedSignal> = Vec::new();
        for m in &self.members {
            let mut v = m.clone();
            for q in &out {
                let c = inner_product(q, &v)?;
                v.axpy(-c, q);
            }
            let n = v.norm();
            if n > 1e-10 {
                v.scale(C64::new(1.0 / n, 0.0));
                out.push(v);
            }
        }
        Ok(Self { members: out })
    }
}

/// Component `j` is `⟨dict[j], u⟩_ν`.
pub fn weak_pairings(u: &WeightedSignal, dict: &TestDictionary) -> Result<Vec<C64>> {
    exec::try_map_indexed(dict.size(), |j| inner_product(&dict.members[j], u))
}

/// Raised-cosine bump of half-width `w` centred at `c`.
pub fn raised_cosine(t: f64, c: f64, w: f64) -> f64 {
    let x = (t - c) / w;
    if x.abs() >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * x).cos())
    }
}

/// Smooth periodic profile on the unit torus concentrated near `c`.
pub fn periodic_bump(x: &[f64], c: &[f64], kappa: f64) -> f64 {
    x.iter()
        .zip(c)
        .map(|(xi, ci)| (kappa * ((2.0 * PI * (xi - ci)).cos() - 1.0)).exp())
        .product()
}

/// Deterministic dictionary of unit-norm bumps times space directions.
pub fn make_test_dictionary(
    grid: TimeGrid,
    space: SpaceModel,
    size: usize,
    seed: u64,
) -> TestDictionary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = grid.horizon();
    let size = size.max(1);
    let spacing = 0.75 * horizon / size as f64;
    let w = (horizon / 8.0).max(2.0 * grid.dt);
    let golden = 0.5 * (5f64.sqrt() - 1.0);
    let members = (0..size)
        .map(|j| {
            let jitter: f64 = rng.gen_range(-0.25..0.25);
            let c = horizon / 8.0 + (j as f64 + 0.5 + jitter) * spacing;
            let theta: f64 = rng.gen_range(0.0..2.0 * PI);
            let phase = C64::from_polar(1.0, theta);
            let comp = j % space.m();
            let profile: Vec<f64> = match space {
                SpaceModel::FiniteDim { .. } => vec![1.0],
                SpaceModel::TorusGrid { d, .. } => {
                    let centre: Vec<f64> = (0..d)
                        .map(|k| {
                            let shift: f64 = rng.gen_range(0.0..0.1);
                            ((j + 1) as f64 * golden * (k + 1) as f64 + shift).fract()
                        })
                        .collect();
                    (0..space.cells())
                        .map(|cell| periodic_bump(&space.cell_center(cell), &centre, 2.0))
                        .collect()
                }
            };
            let m = space.m();
            let mut s = WeightedSignal::from_fn(grid, space, |t, dof| {
                if dof % m != comp {
                    return ZERO;
                }
                phase * raised_cosine(t, c, w) * profile[dof / m]
            });
            let n = s.norm();
            if n > 0.0 {
                s.scale(C64::new(1.0 / n, 0.0));
            }
            s
        })
        .collect();
    TestDictionary { members }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_guard() {
        assert!(TimeGrid::new(0.1, 10, 10.0).is_err());
        assert!(TimeGrid::new(0.1, 1, 1.0).is_err());
        assert!(TimeGrid::new(0.1, 10, 9.99).is_ok());
    }

    #[test]
    fn single_node_quadrature() {
        let g = TimeGrid::new(0.01, 4, 1.0).unwrap();
        let s = SpaceModel::finite_dim(1);
        let f = WeightedSignal::from_fn(g, s, |t, _| if t == 0.0 { C64::new(1.0, 0.0) } else { ZERO });
        assert_eq!(inner_product(&f, &f).unwrap(), C64::new(0.01, 0.0));
    }

    #[test]
    fn cell_centres() {
        let s = SpaceModel::torus_grid(2, 4, 1);
        assert_eq!(s.cell_center(0), vec![0.125, 0.125]);
        assert_eq!(s.cell_center(5), vec![0.375, 0.375]);
        assert_eq!(s.cell_center(1), vec![0.125, 0.375]);
    }
}
