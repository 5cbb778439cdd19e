//! Frequency-domain realization of time-translation-invariant operators.
//!
//! A signal is weighted by `e^{-νt}`, zero padded to `P` samples, transformed,
//! multiplied by symbol samples, transformed back and unweighted. The symbol
//! is evaluated at `z_k = dt / (1 - e^{-s_k dt})` with `s_k = iξ_k + ν`, which
//! is the exact transfer value of the rectangle-rule integration, so symbols
//! that are rational in `z` reproduce the grid operators up to the aliasing
//! floor `e^{-ν dt (P - N)}`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::{Fft, FftPlanner};

use crate::exec;
use crate::linalg::{Coef, C64, ZERO};
use crate::weighted_space::{SpaceModel, TimeGrid, WeightedSignal};

/// Exponent of the aliasing floor `e^{-ALIAS_EXPONENT}` used to size the padding.
pub const ALIAS_EXPONENT: f64 = 36.0;

#[derive(Clone, Copy, Debug)]
pub struct FreqPoint {
    pub index: usize,
    /// `iξ + ν`.
    pub s: C64,
    /// Transfer value of the grid integration at this frequency.
    pub z: C64,
}

/// Padded transform length: a power of two, at least `2N`, with enough room
/// for causal tails to decay below the aliasing floor.
pub fn padded_len(grid: &TimeGrid) -> usize {
    let n = grid.n_steps;
    let tail = (ALIAS_EXPONENT / (grid.nu * grid.dt)).ceil() as usize;
    (2 * n).max(n + tail).next_power_of_two()
}

/// `e^w − 1` without cancellation.
fn cexp_m1(w: C64) -> C64 {
    let (re, im) = (w.re, w.im);
    let half = (0.5 * im).sin();
    let cos_m1 = -2.0 * half * half;
    C64::new(re.exp_m1() * im.cos() + cos_m1, re.exp() * im.sin())
}

pub fn freq_point(grid: &TimeGrid, p: usize, index: usize) -> FreqPoint {
    let signed = if index <= p / 2 { index as f64 } else { index as f64 - p as f64 };
    let xi = 2.0 * PI * signed / (p as f64 * grid.dt);
    let s = C64::new(grid.nu, xi);
    let z = C64::new(grid.dt, 0.0) / -cexp_m1(-s * grid.dt);
    FreqPoint { index, s, z }
}

pub fn freq_points(grid: &TimeGrid, p: usize) -> Vec<FreqPoint> {
    (0..p).map(|k| freq_point(grid, p, k)).collect()
}

pub type SymbolFn = dyn Fn(&FreqPoint) -> Coef + Send + Sync;

/// Bounded analytic function of `∂₀⁻¹`, sampled lazily on the transform grid.
pub struct HInfSymbol {
    pub label: String,
    eval: Arc<SymbolFn>,
    cache: OnceLock<(usize, Arc<Vec<Coef>>)>,
    leak_bits: AtomicU64,
}

impl fmt::Debug for HInfSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HInfSymbol").field("label", &self.label).finish()
    }
}

impl HInfSymbol {
    pub fn new(label: impl Into<String>, eval: Arc<SymbolFn>) -> Self {
        Self {
            label: label.into(),
            eval,
            cache: OnceLock::new(),
            leak_bits: AtomicU64::new(0f64.to_bits()),
        }
    }

    /// Symbol with precomputed samples for transform length `p`.
    pub fn from_samples(label: impl Into<String>, p: usize, samples: Vec<Coef>) -> Self {
        let samples = Arc::new(samples);
        let lookup = samples.clone();
        let s = Self::new(label, Arc::new(move |fp: &FreqPoint| lookup[fp.index % lookup.len()].clone()));
        let _ = s.cache.set((p, samples));
        s
    }

    pub fn eval(&self, fp: &FreqPoint) -> Coef {
        (self.eval)(fp)
    }

    pub fn eval_fn(&self) -> Arc<SymbolFn> {
        self.eval.clone()
    }

    pub fn samples(&self, grid: &TimeGrid) -> Arc<Vec<Coef>> {
        let p = padded_len(grid);
        if let Some((cp, s)) = self.cache.get() {
            if *cp == p {
                return s.clone();
            }
        }
        let fresh = Arc::new(exec::map_indexed(p, |k| self.eval(&freq_point(grid, p, k))));
        let _ = self.cache.set((p, fresh.clone()));
        fresh
    }

    /// Sup of the sampled spectral norms.
    pub fn sup_norm(&self, grid: &TimeGrid) -> f64 {
        self.samples(grid).iter().map(|c| c.norm2()).fold(0.0, f64::max)
    }

    /// Largest pre-window energy fraction seen by any application so far.
    pub fn max_observed_leak(&self) -> f64 {
        f64::from_bits(self.leak_bits.load(Ordering::Relaxed))
    }

    fn record_leak(&self, leak: f64) {
        let mut cur = self.leak_bits.load(Ordering::Relaxed);
        while leak > f64::from_bits(cur) {
            match self.leak_bits.compare_exchange_weak(
                cur,
                leak.to_bits(),
                Ordering::Relaxed,
                Ordering::Relaxed,
            ) {
                Ok(_) => break,
                Err(c) => cur = c,
            }
        }
    }

    /// Disc `B(r, r)` containing every sampled `z`.
    pub fn radius(grid: &TimeGrid) -> f64 {
        grid.integration_norm_bound()
    }
}

type Plans = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

pub(crate) fn plans(p: usize) -> Plans {
    static CACHE: OnceLock<Mutex<HashMap<usize, Plans>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(p)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            (planner.plan_fft_forward(p), planner.plan_fft_inverse(p))
        })
        .clone()
}

/// How symbol samples couple degrees of freedom.
enum Grouping {
    /// Every dof on its own.
    PerDof,
    /// Components of one cell together.
    PerCell(usize),
    /// All dofs together.
    Full,
}

fn grouping(samples: &[Coef], same_space: bool) -> Grouping {
    if !same_space {
        return Grouping::Full;
    }
    let mut cell_m = None;
    for c in samples {
        match c {
            Coef::Scalar(_) => {}
            Coef::Cells { m, .. } => match cell_m {
                None => cell_m = Some(*m),
                Some(prev) if prev == *m => {}
                Some(_) => return Grouping::Full,
            },
            Coef::Dense(_) => return Grouping::Full,
        }
    }
    match cell_m {
        None => Grouping::PerDof,
        Some(m) => Grouping::PerCell(m),
    }
}

fn apply_group(c: &Coef, group: usize, adjoint: bool, x: &[C64], y: &mut [C64]) {
    match c {
        Coef::Scalar(s) => {
            let s = if adjoint { s.conj() } else { *s };
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = s * xi;
            }
        }
        Coef::Cells { m, blocks, .. } => {
            let b = if blocks.len() == 1 { &blocks[0] } else { &blocks[group] };
            for i in 0..*m {
                let mut acc = ZERO;
                for j in 0..*m {
                    let a = if adjoint { b[(j, i)].conj() } else { b[(i, j)] };
                    acc += a * x[j];
                }
                y[i] = acc;
            }
        }
        Coef::Dense(a) => {
            let (r, k) = if adjoint { (a.ncols(), a.nrows()) } else { (a.nrows(), a.ncols()) };
            for i in 0..r {
                let mut acc = ZERO;
                for j in 0..k {
                    let v = if adjoint { a[(j, i)].conj() } else { a[(i, j)] };
                    acc += v * x[j];
                }
                y[i] = acc;
            }
        }
    }
}

/// Weighted-transform pipeline. Returns the output and the pre-window energy
/// fraction (energy in the last `N` padded slots relative to the total).
pub(crate) fn apply_samples(
    samples: &[Coef],
    f: &WeightedSignal,
    space_out: SpaceModel,
    adjoint: bool,
) -> (WeightedSignal, f64) {
    let grid = f.grid;
    let n = grid.n_steps;
    let p = samples.len();
    let nd_in = f.ndof();
    let nd_out = space_out.ndof();
    let (fwd, inv) = plans(p);
    let groups = match grouping(samples, f.space == space_out) {
        Grouping::PerDof => (0..nd_in).map(|k| (vec![k], vec![k], k)).collect::<Vec<_>>(),
        Grouping::PerCell(m) => (0..nd_in / m)
            .map(|c| ((c * m..(c + 1) * m).collect(), (c * m..(c + 1) * m).collect(), c))
            .collect(),
        Grouping::Full => vec![((0..nd_in).collect(), (0..nd_out).collect(), 0)],
    };
    let decay: Vec<f64> = (0..n).map(|i| (-grid.nu * grid.t(i)).exp()).collect();
    let results = exec::map_indexed(groups.len(), |g| {
        let (ins, outs, gid) = &groups[g];
        let mut buf_in: Vec<Vec<C64>> = ins
            .iter()
            .map(|&k| {
                let mut b = vec![ZERO; p];
                for i in 0..n {
                    b[i] = f.values[i * nd_in + k] * decay[i];
                }
                fwd.process(&mut b);
                b
            })
            .collect();
        let mut buf_out: Vec<Vec<C64>> = vec![vec![ZERO; p]; outs.len()];
        let mut x = vec![ZERO; ins.len()];
        let mut y = vec![ZERO; outs.len()];
        for j in 0..p {
            for (a, b) in x.iter_mut().zip(&buf_in) {
                *a = b[j];
            }
            apply_group(&samples[j], *gid, adjoint, &x, &mut y);
            for (b, v) in buf_out.iter_mut().zip(&y) {
                b[j] = *v;
            }
        }
        buf_in.clear();
        let mut total = 0.0;
        let mut pre = 0.0;
        for b in buf_out.iter_mut() {
            inv.process(b);
            for (i, v) in b.iter().enumerate() {
                let e = v.norm_sqr();
                total += e;
                if i >= p - n {
                    pre += e;
                }
            }
        }
        (buf_out, pre, total)
    });
    let scale = 1.0 / p as f64;
    let mut out = WeightedSignal::zeros(grid, space_out);
    let (mut pre, mut total) = (0.0, 0.0);
    for (g, (bufs, pr, tot)) in results.into_iter().enumerate() {
        pre += pr;
        total += tot;
        for (b, &k) in bufs.iter().zip(&groups[g].1) {
            for i in 0..n {
                out.values[i * nd_out + k] = b[i] * (scale / decay[i]);
            }
        }
    }
    let leak = if total > 0.0 { pre / total } else { 0.0 };
    (out, leak)
}

pub(crate) fn apply_symbol(
    sym: &HInfSymbol,
    f: &WeightedSignal,
    space_out: SpaceModel,
    adjoint: bool,
) -> WeightedSignal {
    let samples = sym.samples(&f.grid);
    let (out, leak) = apply_samples(&samples, f, space_out, adjoint);
    if !adjoint {
        sym.record_leak(leak);
    }
    out
}

/// `dt Σ_i g_i e^{-s_k t_i}` on the transform grid, for a scalar kernel.
pub(crate) fn scalar_kernel_transfer(grid: &TimeGrid, g: &[C64], p: usize) -> Vec<C64> {
    let (fwd, _) = plans(p);
    let mut b = vec![ZERO; p];
    for (i, gi) in g.iter().enumerate().take(grid.n_steps) {
        b[i] = gi * (-grid.nu * grid.t(i)).exp() * grid.dt;
    }
    fwd.process(&mut b);
    b
}

/// Linear (non-circular) convolution of two sequences, truncated to `n`.
pub(crate) fn linear_convolution(a: &[C64], b: &[C64], n: usize) -> Vec<C64> {
    let p = (2 * n).next_power_of_two();
    let (fwd, inv) = plans(p);
    let mut fa = vec![ZERO; p];
    let mut fb = vec![ZERO; p];
    fa[..a.len().min(n)].copy_from_slice(&a[..a.len().min(n)]);
    fb[..b.len().min(n)].copy_from_slice(&b[..b.len().min(n)]);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let s = 1.0 / p as f64;
    fa.truncate(n);
    fa.iter_mut().for_each(|v| *v *= s);
    fa
}
