use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EvolutionaryOp, OpKind};
use crate::error::{EvoError, Result};
use crate::exec;
use crate::linalg::{Coef, Mat, C64, ONE, ZERO};
use crate::weighted_space::{inner_product, SpaceModel, TimeGrid, WeightedSignal};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormEstimate {
    pub value: f64,
    /// `‖A*A v − λ² v‖ / λ²` at the last iterate of the winning trial.
    pub residual: f64,
    pub iterations: usize,
}

pub(crate) fn random_signal(grid: TimeGrid, space: SpaceModel, rng: &mut ChaCha8Rng) -> WeightedSignal {
    let n = grid.n_steps * space.ndof();
    let values = (0..n)
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    WeightedSignal { grid, space, values }
}

/// Steps past which `e^{-2νt}` is too small to carry information; entries
/// there would otherwise grow without bound under power iteration.
const WEIGHT_EXPONENT_CAP: f64 = 230.0;

fn live_len(v: &WeightedSignal) -> usize {
    let g = v.grid;
    let steps = ((WEIGHT_EXPONENT_CAP / (g.nu * g.dt)).floor() as usize).saturating_add(1);
    steps.min(g.n_steps) * v.space.ndof()
}

fn normalize(v: &mut WeightedSignal) -> f64 {
    let live = live_len(v);
    v.values[live..].iter_mut().for_each(|z| *z = ZERO);
    let n = v.norm();
    if n > 0.0 {
        v.scale(C64::new(1.0 / n, 0.0));
    }
    n
}

/// Power iteration on `A*A`; the largest value over `trials` seeded starts.
pub fn operator_norm_estimate(
    op: &EvolutionaryOp,
    trials: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<NormEstimate> {
    if matches!(norm_bound(op), Some(b) if b.is_infinite()) {
        return Err(EvoError::UnboundedKind(op.kind().tag().into()));
    }
    let runs = exec::try_map_indexed(trials.max(1), |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let mut v = random_signal(op.grid, op.space_in, &mut rng);
        normalize(&mut v);
        let mut lam = 0.0;
        let mut residual = f64::INFINITY;
        let mut it = 0;
        while it < max_iter {
            it += 1;
            let w = op.apply_adjoint(&op.apply(&v)?)?;
            let new_lam = inner_product(&v, &w)?.re.max(0.0);
            residual = if new_lam > 0.0 { w.sub(&v.scaled(C64::new(new_lam, 0.0))).norm() / new_lam } else { 0.0 };
            let done = (new_lam - lam).abs() <= tol * new_lam.max(f64::MIN_POSITIVE);
            lam = new_lam;
            v = w;
            if normalize(&mut v) == 0.0 || done {
                break;
            }
        }
        Ok::<_, EvoError>(NormEstimate { value: lam.sqrt(), residual, iterations: it })
    })?;
    Ok(runs
        .into_iter()
        .fold(None::<NormEstimate>, |best, r| match best {
            Some(b) if b.value >= r.value => Some(b),
            _ => Some(r),
        })
        .unwrap())
}

/// Rigorous upper bound on the operator norm, when one is available cheaply.
/// `Some(∞)` marks an unbounded operator; `None` means no bound is known.
pub fn norm_bound(op: &EvolutionaryOp) -> Option<f64> {
    let ratio = (op.space_out.quad_weight() / op.space_in.quad_weight()).sqrt();
    match op.kind() {
        OpKind::Derivative => Some(f64::INFINITY),
        OpKind::Integration => Some(op.grid.integration_norm_bound()),
        OpKind::ConstantMatrix(c) => Some(c.norm2() * ratio),
        OpKind::Multiplication(f) => Some(f.coefs.iter().map(Coef::norm2).fold(0.0, f64::max)),
        OpKind::Convolution(k) => Some(k.young_bound(&op.grid)),
        OpKind::HInfSymbol(s) => Some(s.sup_norm(&op.grid) * ratio),
        OpKind::Sum(ops) => {
            let crude: Option<f64> = ops.iter().map(norm_bound).sum();
            tighten(op, crude)
        }
        OpKind::Compose(ops) => {
            let parts: Option<Vec<f64>> = ops.iter().map(norm_bound).collect();
            let crude = parts.map(|p| if p.iter().any(|b| *b == 0.0) { 0.0 } else { p.iter().product() });
            tighten(op, crude)
        }
        OpKind::Scale(a, o) => norm_bound(o).map(|b| if *a == ZERO { 0.0 } else { a.norm() * b }),
        OpKind::Inverse(o, ..) => match o.kind() {
            OpKind::Integration => Some(f64::INFINITY),
            OpKind::Derivative => Some(op.grid.integration_norm_bound()),
            OpKind::ConstantMatrix(c) => c.inverse().map(|i| i.norm2()),
            OpKind::Multiplication(f) => f
                .coefs
                .iter()
                .map(|c| c.inverse().map(|i| i.norm2()))
                .collect::<Option<Vec<_>>>()
                .map(|v| v.into_iter().fold(0.0, f64::max)),
            _ => None,
        },
    }
}

/// Time-invariant composites: the sup of the sampled transfer function is the
/// norm, and it is usually far below the product of factor norms.
fn tighten(op: &EvolutionaryOp, crude: Option<f64>) -> Option<f64> {
    if crude.is_some_and(|b| b == 0.0) || !is_translation_invariant(op) || !cheap_transfer(op) {
        return crude;
    }
    let ratio = (op.space_out.quad_weight() / op.space_in.quad_weight()).sqrt();
    let sup = op
        .transfer_samples()
        .ok()?
        .iter()
        .map(Coef::norm2)
        .fold(0.0, f64::max)
        * ratio;
    Some(match crude {
        Some(c) => c.min(sup),
        None => sup,
    })
}

fn cheap_transfer(op: &EvolutionaryOp) -> bool {
    let small = |c: &Coef| !matches!(c, Coef::Dense(a) if a.nrows() > 8 || a.ncols() > 8);
    match op.kind() {
        OpKind::ConstantMatrix(c) => small(c),
        OpKind::Multiplication(f) => f.coefs.iter().all(small),
        OpKind::Convolution(k) => k.samples.iter().all(small),
        OpKind::Sum(v) | OpKind::Compose(v) => v.iter().all(cheap_transfer),
        OpKind::Scale(_, o) => cheap_transfer(o),
        OpKind::Inverse(o, ..) => cheap_transfer(o),
        _ => true,
    }
}

/// True when no factor depends on absolute time.
pub fn is_translation_invariant(op: &EvolutionaryOp) -> bool {
    match op.kind() {
        OpKind::Multiplication(f) => f.is_constant(),
        OpKind::Sum(v) | OpKind::Compose(v) => v.iter().all(is_translation_invariant),
        OpKind::Scale(_, o) | OpKind::Inverse(o, ..) => is_translation_invariant(o),
        _ => true,
    }
}

/// Rigorous bound if known, otherwise a power-iteration estimate.
pub fn norm_or_estimate(op: &EvolutionaryOp, seed: u64) -> Result<f64> {
    match norm_bound(op) {
        Some(b) if b.is_infinite() => Err(EvoError::UnboundedKind(op.kind().tag().into())),
        Some(b) => Ok(b),
        None => Ok(operator_norm_estimate(op, 3, 200, 1e-8, seed)?.value),
    }
}

/// Per-time coefficients when `op` acts pointwise in time.
pub fn pointwise_coefs(op: &EvolutionaryOp) -> Option<Vec<Coef>> {
    match op.kind() {
        OpKind::ConstantMatrix(c) => Some(vec![c.clone()]),
        OpKind::Multiplication(f) => Some(f.coefs.clone()),
        OpKind::Scale(a, o) => pointwise_coefs(o).map(|v| v.iter().map(|c| c.scale(*a)).collect()),
        OpKind::Sum(ops) => combine(ops, |a, b| a.add(b)),
        OpKind::Compose(ops) => combine(ops, |a, b| a.mul(b)),
        OpKind::Inverse(o, ..) => pointwise_coefs(o)?.iter().map(Coef::inverse).collect(),
        _ => None,
    }
}

fn combine(ops: &[EvolutionaryOp], f: impl Fn(&Coef, &Coef) -> Coef) -> Option<Vec<Coef>> {
    let parts: Vec<Vec<Coef>> = ops.iter().map(pointwise_coefs).collect::<Option<_>>()?;
    let len = parts.iter().map(Vec::len).max().unwrap_or(1);
    let at = |v: &Vec<Coef>, i: usize| if v.len() == 1 { v[0].clone() } else { v[i].clone() };
    Some(
        (0..len)
            .map(|i| parts[1..].iter().fold(at(&parts[0], i), |acc, p| f(&acc, &at(p, i))))
            .collect(),
    )
}

/// Certified `inf Re⟨u, A u⟩ / ‖u‖²` for operators acting pointwise in time.
pub fn coercivity_estimate(op: &EvolutionaryOp) -> Result<f64> {
    if !op.is_square() {
        return Err(EvoError::GridMismatch("coercivity needs a square operator".into()));
    }
    let cs = pointwise_coefs(op).ok_or_else(|| EvoError::UnsupportedKind(op.kind().tag().into()))?;
    Ok(cs.iter().map(Coef::herm_min_eig).fold(f64::INFINITY, f64::min))
}

/// Randomized estimate of the bottom of the Hermitian part's spectrum for any
/// bounded square operator. Not a certified bound.
pub fn coercivity_probe(op: &EvolutionaryOp, seed: u64) -> Result<f64> {
    if !op.is_square() {
        return Err(EvoError::GridMismatch("coercivity needs a square operator".into()));
    }
    if pointwise_coefs(op).is_some() {
        return coercivity_estimate(op);
    }
    let herm = |v: &WeightedSignal| -> Result<WeightedSignal> {
        let mut a = op.apply(v)?;
        a.axpy(ONE, &op.apply_adjoint(v)?);
        a.scale(C64::new(0.5, 0.0));
        Ok(a)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let power = |shift: f64, rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut v = random_signal(op.grid, op.space_in, rng);
        normalize(&mut v);
        let mut lam = 0.0;
        for _ in 0..300 {
            let mut w = herm(&v)?;
            w.scale(C64::new(-1.0, 0.0));
            w.axpy(C64::new(shift, 0.0), &v);
            let new_lam = inner_product(&v, &w)?.re;
            let done = (new_lam - lam).abs() <= 1e-9 * new_lam.abs().max(1e-300);
            lam = new_lam;
            v = w;
            if normalize(&mut v) == 0.0 || done {
                break;
            }
        }
        Ok(lam)
    };
    let bound = norm_or_estimate(op, seed)?;
    let shift = bound * 1.01 + 1e-12;
    let top = power(shift, &mut rng)?;
    Ok(shift - top)
}

/// `Re⟨u, A u⟩ / ‖u‖²` for one probe.
pub fn rayleigh_quotient(op: &EvolutionaryOp, u: &WeightedSignal) -> Result<f64> {
    let n = u.norm_sq();
    if n == 0.0 {
        return Ok(0.0);
    }
    Ok(inner_product(u, &op.apply(u)?)?.re / n)
}

/// Dense matrix of `op` in nodal coordinates, column by column.
pub fn to_dense(op: &EvolutionaryOp) -> Result<Mat> {
    let nin = op.grid.n_steps * op.space_in.ndof();
    let nout = op.grid.n_steps * op.space_out.ndof();
    let cols = exec::try_map_indexed(nin, |k| {
        let mut e = WeightedSignal::zeros(op.grid, op.space_in);
        e.values[k] = ONE;
        op.apply(&e)
    })?;
    Ok(Mat::from_fn(nout, nin, |r, c| cols[c].values[r]))
}

/// Largest relative change on `[0, τ)` when the input is cut at `τ`, over random probes.
pub fn causality_violation(op: &EvolutionaryOp, trials: usize, seed: u64) -> Result<f64> {
    let n = op.grid.n_steps;
    let nd_in = op.space_in.ndof();
    let nd_out = op.space_out.ndof();
    let worst = exec::try_map_indexed(trials.max(1), |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + t as u64));
        let f = random_signal(op.grid, op.space_in, &mut rng);
        let cut = rng.gen_range(1..n);
        let mut g = f.clone();
        g.values[cut * nd_in..].iter_mut().for_each(|v| *v = ZERO);
        let af = op.apply(&f)?;
        let ag = op.apply(&g)?;
        let head = cut * nd_out;
        let diff: f64 = af.values[..head]
            .iter()
            .zip(&ag.values[..head])
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let scale: f64 = af.values[..head].iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        Ok::<_, EvoError>(if scale > 0.0 { diff / scale } else { diff })
    })?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}
