//! Causal operators on weighted signals and their algebra.

mod estimates;
pub mod symbol;

use std::sync::{Arc, OnceLock};

pub use estimates::{
    causality_violation, coercivity_estimate, coercivity_probe, is_translation_invariant, norm_bound, norm_or_estimate,
    operator_norm_estimate, pointwise_coefs, rayleigh_quotient, to_dense, NormEstimate,
};
pub use symbol::{freq_point, freq_points, padded_len, FreqPoint, HInfSymbol, SymbolFn};

use crate::error::{EvoError, Result};
use crate::exec;
use crate::linalg::{invert, Coef, Mat, C64, ONE, ZERO};
use crate::weighted_space::{SpaceModel, TimeGrid, WeightedSignal};

/// Time-indexed coefficient: one entry (constant) or one per grid node.
#[derive(Clone, Debug)]
pub struct Field {
    pub coefs: Vec<Coef>,
}

impl Field {
    pub fn constant(c: Coef) -> Self {
        Self { coefs: vec![c] }
    }

    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> Coef) -> Self {
        Self { coefs: (0..grid.n_steps).map(|i| f(grid.t(i))).collect() }
    }

    #[inline]
    pub fn at(&self, i: usize) -> &Coef {
        if self.coefs.len() == 1 {
            &self.coefs[0]
        } else {
            &self.coefs[i]
        }
    }

    pub fn is_constant(&self) -> bool {
        self.coefs.len() == 1
    }

    pub fn map(&self, f: impl Fn(&Coef) -> Coef) -> Self {
        Self { coefs: self.coefs.iter().map(f).collect() }
    }
}

/// Causal kernel samples `g_0, g_1, …`.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub samples: Vec<Coef>,
}

impl Kernel {
    pub fn scalar(values: &[C64]) -> Self {
        Self { samples: values.iter().map(|&v| Coef::Scalar(v)).collect() }
    }

    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> C64) -> Self {
        Self::scalar(&(0..grid.n_steps).map(|i| f(grid.t(i))).collect::<Vec<_>>())
    }

    pub fn scalar_values(&self) -> Option<Vec<C64>> {
        self.samples.iter().map(|c| c.as_scalar()).collect()
    }

    /// Weighted Young bound `dt Σ ‖g_i‖ e^{-ν t_i}`.
    pub fn young_bound(&self, grid: &TimeGrid) -> f64 {
        self.samples
            .iter()
            .enumerate()
            .take(grid.n_steps)
            .map(|(i, g)| g.norm2() * (-grid.nu * grid.t(i)).exp())
            .sum::<f64>()
            * grid.dt
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InverseMethod {
    /// Forward substitution with the impulse response; needs translation invariance.
    Toeplitz,
    /// Per-frequency inversion of the transfer function.
    Symbol,
}

pub enum OpKind {
    Derivative,
    Integration,
    Multiplication(Field),
    ConstantMatrix(Coef),
    Convolution(Kernel),
    HInfSymbol(HInfSymbol),
    Sum(Vec<EvolutionaryOp>),
    /// `ops[0] ∘ ops[1] ∘ …`, rightmost applied first.
    Compose(Vec<EvolutionaryOp>),
    Scale(C64, EvolutionaryOp),
    Inverse(EvolutionaryOp, InverseMethod, OnceLock<Vec<Mat>>),
}

impl std::fmt::Debug for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.tag())
    }
}

impl OpKind {
    pub fn tag(&self) -> &'static str {
        match self {
            OpKind::Derivative => "derivative",
            OpKind::Integration => "integration",
            OpKind::Multiplication(_) => "multiplication",
            OpKind::ConstantMatrix(_) => "constant_matrix",
            OpKind::Convolution(_) => "convolution",
            OpKind::HInfSymbol(_) => "hinf_symbol",
            OpKind::Sum(_) => "sum",
            OpKind::Compose(_) => "compose",
            OpKind::Scale(..) => "scale",
            OpKind::Inverse(..) => "inverse",
        }
    }
}

/// A causal operator bound to a time grid and a pair of spaces.
#[derive(Clone, Debug)]
pub struct EvolutionaryOp {
    kind: Arc<OpKind>,
    pub grid: TimeGrid,
    pub space_in: SpaceModel,
    pub space_out: SpaceModel,
}

fn mismatch(what: &str) -> EvoError {
    EvoError::GridMismatch(what.to_string())
}

impl EvolutionaryOp {
    fn new(kind: OpKind, grid: TimeGrid, space_in: SpaceModel, space_out: SpaceModel) -> Self {
        Self { kind: Arc::new(kind), grid, space_in, space_out }
    }

    pub fn kind(&self) -> &OpKind {
        &self.kind
    }

    pub fn is_square(&self) -> bool {
        self.space_in == self.space_out
    }

    pub fn derivative(grid: TimeGrid, space: SpaceModel) -> Self {
        Self::new(OpKind::Derivative, grid, space, space)
    }

    pub fn integration(grid: TimeGrid, space: SpaceModel) -> Self {
        Self::new(OpKind::Integration, grid, space, space)
    }

    pub fn identity(grid: TimeGrid, space: SpaceModel) -> Self {
        Self::new(OpKind::ConstantMatrix(Coef::identity()), grid, space, space)
    }

    pub fn zero(grid: TimeGrid, space_in: SpaceModel, space_out: SpaceModel) -> Self {
        let c = if space_in == space_out {
            Coef::zero()
        } else {
            Coef::Dense(Mat::zeros(space_out.ndof(), space_in.ndof()))
        };
        Self::new(OpKind::ConstantMatrix(c), grid, space_in, space_out)
    }

    pub fn constant(grid: TimeGrid, space: SpaceModel, c: Coef) -> Result<Self> {
        Self::constant_between(grid, space, space, c)
    }

    pub fn constant_between(
        grid: TimeGrid,
        space_in: SpaceModel,
        space_out: SpaceModel,
        c: Coef,
    ) -> Result<Self> {
        if !c.fits(space_out.ndof(), space_in.ndof()) {
            return Err(mismatch("constant matrix does not fit the spaces"));
        }
        Ok(Self::new(OpKind::ConstantMatrix(c), grid, space_in, space_out))
    }

    pub fn multiplication(grid: TimeGrid, space: SpaceModel, field: Field) -> Result<Self> {
        if field.coefs.len() != 1 && field.coefs.len() != grid.n_steps {
            return Err(mismatch("field length must be 1 or n_steps"));
        }
        let nd = space.ndof();
        if !field.coefs.iter().all(|c| c.fits(nd, nd)) {
            return Err(mismatch("field coefficient does not fit the space"));
        }
        Ok(Self::new(OpKind::Multiplication(field), grid, space, space))
    }

    pub fn hinf(
        grid: TimeGrid,
        space_in: SpaceModel,
        space_out: SpaceModel,
        symbol: HInfSymbol,
    ) -> Self {
        Self::new(OpKind::HInfSymbol(symbol), grid, space_in, space_out)
    }

    /// Symbol given as a closure of the frequency point.
    pub fn symbol(
        grid: TimeGrid,
        space: SpaceModel,
        label: &str,
        f: impl Fn(&FreqPoint) -> Coef + Send + Sync + 'static,
    ) -> Self {
        Self::hinf(grid, space, space, HInfSymbol::new(label, Arc::new(f)))
    }

    pub fn inverse(op: &EvolutionaryOp, method: InverseMethod) -> Result<Self> {
        if !op.is_square() {
            return Err(mismatch("inverse needs a square operator"));
        }
        Ok(Self::new(
            OpKind::Inverse(op.clone(), method, OnceLock::new()),
            op.grid,
            op.space_in,
            op.space_out,
        ))
    }

    pub fn scale(alpha: C64, op: &EvolutionaryOp) -> Self {
        Self::new(OpKind::Scale(alpha, op.clone()), op.grid, op.space_in, op.space_out)
    }

    pub fn scale_re(alpha: f64, op: &EvolutionaryOp) -> Self {
        Self::scale(C64::new(alpha, 0.0), op)
    }

    pub fn sum(ops: Vec<EvolutionaryOp>) -> Result<Self> {
        let first = ops.first().ok_or_else(|| mismatch("empty sum"))?;
        let (g, si, so) = (first.grid, first.space_in, first.space_out);
        if ops.iter().any(|o| o.grid != g || o.space_in != si || o.space_out != so) {
            return Err(mismatch("sum terms differ in grid or spaces"));
        }
        if ops.len() == 1 {
            return Ok(ops.into_iter().next().unwrap());
        }
        Ok(Self::new(OpKind::Sum(ops), g, si, so))
    }

    /// `ops[0] ∘ ops[1] ∘ …`. Adjacent derivative/integration pairs cancel.
    pub fn compose(ops: Vec<EvolutionaryOp>) -> Result<Self> {
        let first = ops.first().ok_or_else(|| mismatch("empty composition"))?;
        let grid = first.grid;
        if ops.iter().any(|o| o.grid != grid) {
            return Err(mismatch("composition factors differ in grid"));
        }
        for w in ops.windows(2) {
            if w[0].space_in != w[1].space_out {
                return Err(mismatch("composition factors do not chain"));
            }
        }
        let space_out = first.space_out;
        let space_in = ops.last().unwrap().space_in;
        let mut factor = ONE;
        let mut flat: Vec<EvolutionaryOp> = Vec::new();
        for mut o in ops {
            while let OpKind::Scale(a, inner) = o.kind() {
                factor *= a;
                o = inner.clone();
            }
            match o.kind() {
                OpKind::Compose(inner) => flat.extend(inner.iter().cloned()),
                OpKind::ConstantMatrix(Coef::Scalar(c)) if o.is_square() => factor *= c,
                _ => flat.push(o),
            }
        }
        let mut out: Vec<EvolutionaryOp> = Vec::new();
        for o in flat {
            let cancels = matches!(
                (out.last().map(|l| l.kind()), o.kind()),
                (Some(OpKind::Derivative), OpKind::Integration)
                    | (Some(OpKind::Integration), OpKind::Derivative)
            );
            if cancels {
                out.pop();
            } else {
                out.push(o);
            }
        }
        let body = match out.len() {
            0 if space_in == space_out => {
                return Ok(Self::new(OpKind::ConstantMatrix(Coef::Scalar(factor)), grid, space_in, space_out))
            }
            0 => unreachable!("non-square factors are never dropped"),
            1 => out.pop().unwrap(),
            _ => Self::new(OpKind::Compose(out), grid, space_in, space_out),
        };
        Ok(if factor == ONE { body } else { Self::scale(factor, &body) })
    }

    /// `self ∘ other`.
    pub fn then_after(&self, other: &EvolutionaryOp) -> Result<Self> {
        Self::compose(vec![self.clone(), other.clone()])
    }

    pub fn plus(&self, other: &EvolutionaryOp) -> Result<Self> {
        Self::sum(vec![self.clone(), other.clone()])
    }

    pub fn minus(&self, other: &EvolutionaryOp) -> Result<Self> {
        Self::sum(vec![self.clone(), Self::scale_re(-1.0, other)])
    }

    /// `self^k` by repeated composition; `k = 0` gives the identity.
    pub fn power(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Ok(Self::identity(self.grid, self.space_in));
        }
        Self::compose(vec![self.clone(); k])
    }

    /// Same operator tree rebound to another weight `ν` (dt and length unchanged).
    pub fn regrid(&self, grid: TimeGrid) -> Result<Self> {
        if grid.dt != self.grid.dt || grid.n_steps != self.grid.n_steps {
            return Err(mismatch("regrid may only change nu"));
        }
        let kind = match self.kind() {
            OpKind::Derivative => OpKind::Derivative,
            OpKind::Integration => OpKind::Integration,
            OpKind::Multiplication(f) => OpKind::Multiplication(f.clone()),
            OpKind::ConstantMatrix(c) => OpKind::ConstantMatrix(c.clone()),
            OpKind::Convolution(k) => OpKind::Convolution(k.clone()),
            OpKind::HInfSymbol(s) => OpKind::HInfSymbol(HInfSymbol::new(s.label.clone(), s.eval_fn())),
            OpKind::Sum(v) => OpKind::Sum(v.iter().map(|o| o.regrid(grid)).collect::<Result<_>>()?),
            OpKind::Compose(v) => {
                OpKind::Compose(v.iter().map(|o| o.regrid(grid)).collect::<Result<_>>()?)
            }
            OpKind::Scale(a, o) => OpKind::Scale(*a, o.regrid(grid)?),
            OpKind::Inverse(o, m, _) => OpKind::Inverse(o.regrid(grid)?, *m, OnceLock::new()),
        };
        Ok(Self::new(kind, grid, self.space_in, self.space_out))
    }

    fn check_input(&self, f: &WeightedSignal) -> Result<()> {
        if f.grid != self.grid || f.space != self.space_in {
            return Err(mismatch(&format!(
                "operator on {:?}/{:?} applied to signal on {:?}/{:?}",
                self.grid, self.space_in, f.grid, f.space
            )));
        }
        Ok(())
    }

    pub fn apply(&self, f: &WeightedSignal) -> Result<WeightedSignal> {
        self.check_input(f)?;
        self.apply_unchecked(f, false)
    }

    /// Adjoint with respect to the weighted inner products.
    pub fn apply_adjoint(&self, g: &WeightedSignal) -> Result<WeightedSignal> {
        if g.grid != self.grid || g.space != self.space_out {
            return Err(mismatch("adjoint applied to a signal on the wrong space"));
        }
        self.apply_unchecked(g, true)
    }

    /// Apply to many signals; results keep input order.
    pub fn apply_batch(&self, fs: &[WeightedSignal]) -> Result<Vec<WeightedSignal>> {
        exec::try_map_indexed(fs.len(), |i| self.apply(&fs[i]))
    }

    fn apply_unchecked(&self, f: &WeightedSignal, adj: bool) -> Result<WeightedSignal> {
        let grid = self.grid;
        let out_space = if adj { self.space_in } else { self.space_out };
        match self.kind() {
            OpKind::Derivative => Ok(if adj { derivative_adjoint(f) } else { derivative(f) }),
            OpKind::Integration => Ok(if adj { integration_adjoint(f) } else { integration(f) }),
            OpKind::ConstantMatrix(c) => Ok(pointwise(f, out_space, |_| c, adj, self.quad_ratio())),
            OpKind::Multiplication(field) => {
                Ok(pointwise(f, out_space, |i| field.at(i), adj, self.quad_ratio()))
            }
            OpKind::Convolution(k) => Ok(convolution(k, f, adj)),
            OpKind::HInfSymbol(s) => Ok(symbol::apply_symbol(s, f, out_space, adj)),
            OpKind::Sum(ops) => {
                let parts = exec::try_map_indexed(ops.len(), |j| ops[j].apply_unchecked(f, adj))?;
                let mut acc = parts[0].clone();
                for p in &parts[1..] {
                    acc.axpy(ONE, p);
                }
                Ok(acc)
            }
            OpKind::Compose(ops) => {
                let mut cur = f.clone();
                if adj {
                    for o in ops.iter() {
                        cur = o.apply_unchecked(&cur, true)?;
                    }
                } else {
                    for o in ops.iter().rev() {
                        cur = o.apply_unchecked(&cur, false)?;
                    }
                }
                Ok(cur)
            }
            OpKind::Scale(a, o) => {
                let mut r = o.apply_unchecked(f, adj)?;
                r.scale(if adj { a.conj() } else { *a });
                Ok(r)
            }
            OpKind::Inverse(o, method, cache) => match method {
                InverseMethod::Toeplitz => {
                    let h = match cache.get() {
                        Some(h) => h,
                        None => {
                            let fresh = impulse_response(o)?;
                            let _ = cache.set(fresh);
                            cache.get().unwrap()
                        }
                    };
                    toeplitz_solve(h, f, adj)
                }
                InverseMethod::Symbol => {
                    let samples = symbol_inverse_samples(o)?;
                    Ok(symbol::apply_samples(&samples, f, out_space, adj).0)
                }
            },
        }
        .map(|mut s: WeightedSignal| {
            s.grid = grid;
            s
        })
    }

    fn quad_ratio(&self) -> f64 {
        self.space_out.quad_weight() / self.space_in.quad_weight()
    }

    /// Transfer value at one frequency, for translation-invariant trees.
    pub fn transfer(&self, fp: &FreqPoint) -> Result<Coef> {
        Ok(match self.kind() {
            OpKind::Derivative => Coef::Scalar(ONE / fp.z),
            OpKind::Integration => Coef::Scalar(fp.z),
            OpKind::ConstantMatrix(c) => c.clone(),
            OpKind::Multiplication(f) if f.is_constant() => f.coefs[0].clone(),
            OpKind::Multiplication(_) => {
                return Err(EvoError::UnsupportedKind("time-dependent multiplication has no symbol".into()))
            }
            OpKind::Convolution(k) => {
                let mut acc: Option<Coef> = None;
                let q = (-fp.s * self.grid.dt).exp();
                let mut w = C64::new(self.grid.dt, 0.0);
                for g in k.samples.iter().take(self.grid.n_steps) {
                    let term = g.scale(w);
                    acc = Some(match acc {
                        None => term,
                        Some(a) => a.add(&term),
                    });
                    w *= q;
                }
                acc.unwrap_or_else(Coef::zero)
            }
            OpKind::HInfSymbol(s) => s.eval(fp),
            OpKind::Sum(ops) => {
                let mut acc = ops[0].transfer(fp)?;
                for o in &ops[1..] {
                    acc = acc.add(&o.transfer(fp)?);
                }
                acc
            }
            OpKind::Compose(ops) => {
                let mut acc = ops[0].transfer(fp)?;
                for o in &ops[1..] {
                    acc = acc.mul(&o.transfer(fp)?);
                }
                acc
            }
            OpKind::Scale(a, o) => o.transfer(fp)?.scale(*a),
            OpKind::Inverse(o, ..) => o
                .transfer(fp)?
                .inverse()
                .ok_or(EvoError::NotCoercive { c: 0.0 })?,
        })
    }

    /// Transfer values on the whole transform grid.
    pub fn transfer_samples(&self) -> Result<Vec<Coef>> {
        let p = padded_len(&self.grid);
        Ok(match self.kind() {
            OpKind::HInfSymbol(s) => s.samples(&self.grid).as_ref().clone(),
            OpKind::Convolution(k) => match k.scalar_values() {
                Some(g) => symbol::scalar_kernel_transfer(&self.grid, &g, p)
                    .into_iter()
                    .map(Coef::Scalar)
                    .collect(),
                None => self.pointwise_transfer(p)?,
            },
            OpKind::Sum(ops) => {
                let parts = ops.iter().map(|o| o.transfer_samples()).collect::<Result<Vec<_>>>()?;
                (0..p)
                    .map(|j| parts[1..].iter().fold(parts[0][j].clone(), |a, s| a.add(&s[j])))
                    .collect()
            }
            OpKind::Compose(ops) => {
                let parts = ops.iter().map(|o| o.transfer_samples()).collect::<Result<Vec<_>>>()?;
                (0..p)
                    .map(|j| parts[1..].iter().fold(parts[0][j].clone(), |a, s| a.mul(&s[j])))
                    .collect()
            }
            OpKind::Scale(a, o) => o.transfer_samples()?.iter().map(|c| c.scale(*a)).collect(),
            OpKind::Inverse(o, ..) => o
                .transfer_samples()?
                .iter()
                .map(|c| c.inverse().ok_or(EvoError::NotCoercive { c: 0.0 }))
                .collect::<Result<_>>()?,
            _ => self.pointwise_transfer(p)?,
        })
    }

    fn pointwise_transfer(&self, p: usize) -> Result<Vec<Coef>> {
        exec::try_map_indexed(p, |j| self.transfer(&freq_point(&self.grid, p, j)))
    }
}

fn derivative(f: &WeightedSignal) -> WeightedSignal {
    let nd = f.ndof();
    let inv_dt = 1.0 / f.grid.dt;
    let mut out = f.clone();
    for i in (1..f.n_steps()).rev() {
        for k in 0..nd {
            out.values[i * nd + k] = (f.values[i * nd + k] - f.values[(i - 1) * nd + k]) * inv_dt;
        }
    }
    for k in 0..nd {
        out.values[k] = f.values[k] * inv_dt;
    }
    out
}

fn integration(f: &WeightedSignal) -> WeightedSignal {
    let nd = f.ndof();
    let dt = f.grid.dt;
    let mut out = f.clone();
    let mut acc = vec![ZERO; nd];
    for i in 0..f.n_steps() {
        for k in 0..nd {
            acc[k] += f.values[i * nd + k];
            out.values[i * nd + k] = acc[k] * dt;
        }
    }
    out
}

fn integration_adjoint(g: &WeightedSignal) -> WeightedSignal {
    let nd = g.ndof();
    let dt = g.grid.dt;
    let r = (-2.0 * g.grid.nu * dt).exp();
    let mut out = g.clone();
    let n = g.n_steps();
    let mut acc = vec![ZERO; nd];
    for i in (0..n).rev() {
        for k in 0..nd {
            acc[k] = g.values[i * nd + k] * dt + acc[k] * r;
            out.values[i * nd + k] = acc[k];
        }
    }
    out
}

fn derivative_adjoint(g: &WeightedSignal) -> WeightedSignal {
    let nd = g.ndof();
    let inv_dt = 1.0 / g.grid.dt;
    let r = (-2.0 * g.grid.nu * g.grid.dt).exp();
    let n = g.n_steps();
    let mut out = g.clone();
    for i in 0..n {
        for k in 0..nd {
            let next = if i + 1 < n { g.values[(i + 1) * nd + k] } else { ZERO };
            out.values[i * nd + k] = (g.values[i * nd + k] - next * r) * inv_dt;
        }
    }
    out
}

fn pointwise<'a>(
    f: &WeightedSignal,
    out_space: SpaceModel,
    coef: impl Fn(usize) -> &'a Coef + Sync + Send,
    adj: bool,
    quad_ratio: f64,
) -> WeightedSignal {
    let nd_in = f.ndof();
    let nd_out = out_space.ndof();
    let mut out = WeightedSignal::zeros(f.grid, out_space);
    exec::for_each_chunk_mut(&mut out.values, nd_out, |i, row| {
        let x = &f.values[i * nd_in..(i + 1) * nd_in];
        if adj {
            let c = coef(i).adjoint();
            c.apply(x, row);
            if quad_ratio != 1.0 {
                row.iter_mut().for_each(|v| *v *= 1.0 / quad_ratio);
            }
        } else {
            coef(i).apply(x, row);
        }
    });
    out
}

fn convolution(k: &Kernel, f: &WeightedSignal, adj: bool) -> WeightedSignal {
    let grid = f.grid;
    let n = grid.n_steps;
    let nd = f.ndof();
    let dt = grid.dt;
    let r = (-2.0 * grid.nu * dt).exp();
    if let Some(g) = k.scalar_values() {
        let mut g: Vec<C64> = g.into_iter().take(n).collect();
        if adj {
            let mut w = 1.0;
            for v in g.iter_mut() {
                *v = v.conj() * w;
                w *= r;
            }
        }
        let cols = exec::map_indexed(nd, |d| {
            let mut col = f.column(d);
            if adj {
                col.reverse();
            }
            let mut c = if n <= 256 {
                let mut c = vec![ZERO; n];
                for i in 0..n {
                    let mut s = ZERO;
                    for j in 0..=i.min(g.len().saturating_sub(1)) {
                        s += g[j] * col[i - j];
                    }
                    c[i] = s;
                }
                c
            } else {
                symbol::linear_convolution(&g, &col, n)
            };
            if adj {
                c.reverse();
            }
            c
        });
        let mut out = WeightedSignal::zeros(grid, f.space);
        for (d, c) in cols.iter().enumerate() {
            for i in 0..n {
                out.values[i * nd + d] = c[i] * dt;
            }
        }
        return out;
    }
    let mut out = WeightedSignal::zeros(grid, f.space);
    let mut tmp = vec![ZERO; nd];
    for i in 0..n {
        let mut acc = vec![ZERO; nd];
        if adj {
            let mut w = 1.0;
            for m in 0..(n - i).min(k.samples.len()) {
                k.samples[m].adjoint().apply(f.row(i + m), &mut tmp);
                for (a, t) in acc.iter_mut().zip(&tmp) {
                    *a += t * w;
                }
                w *= r;
            }
        } else {
            for m in 0..=i.min(k.samples.len().saturating_sub(1)) {
                k.samples[m].apply(f.row(i - m), &mut tmp);
                for (a, t) in acc.iter_mut().zip(&tmp) {
                    *a += t;
                }
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = a * dt;
        }
    }
    out
}

/// Matrices `h_m` with `(A f)_i = Σ_m h_m f_{i-m}`, assuming translation invariance.
fn impulse_response(op: &EvolutionaryOp) -> Result<Vec<Mat>> {
    let nd = op.space_in.ndof();
    let n = op.grid.n_steps;
    let cols = exec::try_map_indexed(nd, |k| {
        let mut e = WeightedSignal::zeros(op.grid, op.space_in);
        e.values[k] = ONE;
        op.apply(&e)
    })?;
    Ok((0..n)
        .map(|m| Mat::from_fn(nd, nd, |r, c| cols[c].values[m * nd + r]))
        .collect())
}

fn toeplitz_solve(h: &[Mat], f: &WeightedSignal, adj: bool) -> Result<WeightedSignal> {
    let grid = f.grid;
    let n = grid.n_steps;
    let nd = f.ndof();
    let decay = (-grid.nu * grid.dt).exp();
    let h0 = if adj { h[0].adjoint() } else { h[0].clone() };
    let h0_inv = invert(&h0).ok_or(EvoError::SingularStep { index: 0 })?;
    let mut out = WeightedSignal::zeros(grid, f.space);
    if !adj {
        for i in 0..n {
            let mut rhs = nalgebra::DVector::from_column_slice(f.row(i));
            for m in 1..=i {
                let prev = nalgebra::DVector::from_column_slice(out.row(i - m));
                rhs -= &h[m] * prev;
            }
            let u = &h0_inv * rhs;
            out.row_mut(i).copy_from_slice(u.as_slice());
        }
        return Ok(out);
    }
    let wt: Vec<f64> = (0..n).map(|i| (-grid.nu * grid.t(i)).exp()).collect();
    let mut y: Vec<nalgebra::DVector<C64>> = vec![nalgebra::DVector::zeros(nd); n];
    for j in (0..n).rev() {
        let mut rhs = nalgebra::DVector::from_column_slice(f.row(j)) * C64::new(wt[j], 0.0);
        let mut w = decay;
        for m in 1..n - j {
            rhs -= h[m].adjoint() * &y[j + m] * C64::new(w, 0.0);
            w *= decay;
        }
        y[j] = &h0_inv * rhs;
    }
    for j in 0..n {
        let v = &y[j] / C64::new(wt[j], 0.0);
        out.row_mut(j).copy_from_slice(v.as_slice());
    }
    Ok(out)
}

fn symbol_inverse_samples(op: &EvolutionaryOp) -> Result<Vec<Coef>> {
    op.transfer_samples()?
        .iter()
        .enumerate()
        .map(|(k, c)| c.inverse().ok_or(EvoError::NotContractiveAtFrequency { index: k, q: f64::INFINITY }))
        .collect()
}

/// Causal convolution operator `(g * f)_i = dt Σ_{j≤i} g_{i-j} f_j`.
pub fn convolution_op(g: Kernel, grid: TimeGrid, space: SpaceModel) -> Result<EvolutionaryOp> {
    let nd = space.ndof();
    if !g.samples.iter().all(|c| c.fits(nd, nd)) {
        return Err(mismatch("kernel sample does not fit the space"));
    }
    Ok(EvolutionaryOp::new(OpKind::Convolution(g), grid, space, space))
}

/// Delay by `h ≥ 0`: an exact index shift when `h/dt` is an integer, otherwise
/// linear interpolation between the two neighbouring shifts, which keeps it causal.
pub fn shift_op(h: f64, grid: TimeGrid, space: SpaceModel) -> Result<EvolutionaryOp> {
    if !(h >= 0.0) {
        return Err(EvoError::NegativeDelay(h));
    }
    let steps = h / grid.dt;
    let mut k = steps.floor();
    let mut theta = steps - k;
    if theta > 1.0 - 1e-9 {
        k += 1.0;
        theta = 0.0;
    } else if theta < 1e-9 {
        theta = 0.0;
    }
    let k = k as i32;
    Ok(EvolutionaryOp::symbol(grid, space, &format!("shift({h})"), move |fp| {
        let w = (-fp.s * grid.dt).exp();
        let base = w.powi(k);
        Coef::Scalar(if theta == 0.0 { base } else { base * (C64::new(1.0 - theta, 0.0) + w * theta) })
    }))
}

/// `∂₀^α` for `α ∈ [-1, 1]`, principal branch of `(1/z)^α`.
pub fn fractional_power_op(alpha: f64, grid: TimeGrid, space: SpaceModel) -> Result<EvolutionaryOp> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(EvoError::AlphaOutOfRange(alpha));
    }
    if alpha == 0.0 {
        return Ok(EvolutionaryOp::identity(grid, space));
    }
    Ok(EvolutionaryOp::symbol(grid, space, &format!("d0^{alpha}"), move |fp| {
        Coef::Scalar((ONE / fp.z).powf(alpha))
    }))
}
