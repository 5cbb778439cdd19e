//! Solvers for `∂₀(M u) + N u = f` and its two-block algebraic variant.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{EvoError, Result};
use crate::linalg::{invert, Coef, Mat, C64, ONE, ZERO};
use crate::operator_calculus::{
    coercivity_estimate, coercivity_probe, is_translation_invariant, norm_bound, norm_or_estimate, pointwise_coefs,
    EvolutionaryOp, Field, InverseMethod, OpKind,
};
use crate::weighted_space::{SpaceModel, TimeGrid, WeightedSignal};

#[derive(Clone, Debug)]
pub struct EvoProblem {
    pub m: EvolutionaryOp,
    pub n: EvolutionaryOp,
    pub f: WeightedSignal,
}

impl EvoProblem {
    pub fn new(m: EvolutionaryOp, n: EvolutionaryOp, f: WeightedSignal) -> Result<Self> {
        let (g, s) = (f.grid, f.space);
        for op in [&m, &n] {
            if op.grid != g || op.space_in != s || op.space_out != s {
                return Err(EvoError::GridMismatch("problem operators must act on the signal space".into()));
            }
        }
        Ok(Self { m, n, f })
    }

    pub fn nu(&self) -> f64 {
        self.f.grid.nu
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub u: WeightedSignal,
    pub terms_used: usize,
    pub tail_bound: f64,
    pub contraction_q: f64,
}

/// Two unknowns `(u₀, u₁)` on spaces `H₀, H₁`.
#[derive(Clone, Debug)]
pub struct BlockSignal {
    pub b0: WeightedSignal,
    pub b1: WeightedSignal,
}

/// `[[∂₀M + N00, N01], [N10, N11]] (u₀, u₁) = (f₀, f₁)`.
#[derive(Clone, Debug)]
pub struct BlockEvoProblem {
    pub m: EvolutionaryOp,
    pub n00: EvolutionaryOp,
    pub n01: EvolutionaryOp,
    pub n10: EvolutionaryOp,
    pub n11: EvolutionaryOp,
    pub f: BlockSignal,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockSolveReport {
    #[serde(skip)]
    pub u: BlockSignal,
    pub terms_used: usize,
    pub tail_bound: f64,
    pub contraction_q: f64,
}

/// Pointwise inverse of a coercive multiplication-type operator.
pub fn invert_pointwise(op: &EvolutionaryOp) -> Result<EvolutionaryOp> {
    let c = coercivity_estimate(op)?;
    if !(c > 0.0) {
        return Err(EvoError::NotCoercive { c });
    }
    let coefs = pointwise_coefs(op).expect("coercivity_estimate accepted the kind");
    let inv = coefs
        .iter()
        .map(|k| k.inverse().ok_or(EvoError::NotCoercive { c }))
        .collect::<Result<Vec<_>>>()?;
    if inv.len() == 1 {
        EvolutionaryOp::constant(op.grid, op.space_in, inv.into_iter().next().unwrap())
    } else {
        EvolutionaryOp::multiplication(op.grid, op.space_in, Field { coefs: inv })
    }
}

/// Causal inverse, structural where possible.
pub fn invert_op(op: &EvolutionaryOp) -> Result<EvolutionaryOp> {
    if pointwise_coefs(op).is_some() {
        return invert_pointwise(op);
    }
    let (g, s) = (op.grid, op.space_in);
    match op.kind() {
        OpKind::Derivative => return Ok(EvolutionaryOp::integration(g, s)),
        OpKind::Integration => return Ok(EvolutionaryOp::derivative(g, s)),
        OpKind::Scale(a, o) => {
            if *a == ZERO {
                return Err(EvoError::NotCoercive { c: 0.0 });
            }
            return Ok(EvolutionaryOp::scale(ONE / a, &invert_op(o)?));
        }
        OpKind::Compose(v) if v.iter().all(EvolutionaryOp::is_square) => {
            let inv = v.iter().rev().map(invert_op).collect::<Result<Vec<_>>>()?;
            return EvolutionaryOp::compose(inv);
        }
        _ => {}
    }
    if !is_translation_invariant(op) {
        return Err(EvoError::UnsupportedKind(format!("no causal inverse for time-dependent {}", op.kind().tag())));
    }
    let method = if s.ndof() <= 8 { InverseMethod::Toeplitz } else { InverseMethod::Symbol };
    EvolutionaryOp::inverse(op, method)
}

fn check_material(m: &EvolutionaryOp) -> Result<()> {
    if pointwise_coefs(m).is_some() {
        let c = coercivity_estimate(m)?;
        if !(c > 0.0) {
            return Err(EvoError::NotCoercive { c });
        }
    }
    Ok(())
}

/// Bound on `‖∂₀⁻¹ N M⁻¹‖`.
fn contraction(n: &EvolutionaryOp, minv: &EvolutionaryOp) -> Result<f64> {
    let (g, s) = (n.grid, n.space_in);
    let chain = EvolutionaryOp::compose(vec![EvolutionaryOp::integration(g, s), n.clone(), minv.clone()])?;
    if let Some(b) = norm_bound(&chain) {
        return Ok(b);
    }
    let parts = [norm_or_estimate(n, 7), norm_or_estimate(minv, 11)];
    let mut q = g.integration_norm_bound();
    for part in parts {
        match part {
            Ok(b) => q *= b,
            Err(EvoError::UnboundedKind(_)) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(q)
}

/// `M⁻¹` and the contraction bound, reusable across right-hand sides.
#[derive(Clone, Debug)]
pub struct NeumannSolver {
    pub minv: EvolutionaryOp,
    pub n: EvolutionaryOp,
    pub q: f64,
}

impl NeumannSolver {
    pub fn new(m: &EvolutionaryOp, n: &EvolutionaryOp) -> Result<Self> {
        if m.grid != n.grid || m.space_in != n.space_in || !m.is_square() || !n.is_square() {
            return Err(EvoError::GridMismatch("M and N must act on one space".into()));
        }
        check_material(m)?;
        let minv = invert_op(m)?;
        let q = contraction(n, &minv)?;
        if !(q < 1.0) {
            return Err(EvoError::NotContractive { q });
        }
        Ok(Self { minv, n: n.clone(), q })
    }

    /// `u = Σ_{ℓ≤L} M⁻¹(−∂₀⁻¹ N M⁻¹)^ℓ ∂₀⁻¹ f`, stopping once `q^{L+1}/(1−q) ≤ tol`.
    pub fn solve(&self, f: &WeightedSignal, max_terms: usize, tol: f64) -> Result<SolveReport> {
        if f.grid != self.n.grid || f.space != self.n.space_in {
            return Err(EvoError::GridMismatch("right-hand side does not match the operators".into()));
        }
        let q = self.q;
        let integ = EvolutionaryOp::integration(f.grid, f.space);
        let mut u = self.minv.apply(&integ.apply(f)?)?;
        let first = u.norm();
        let mut term = u.clone();
        let mut terms = 1;
        let ratio = |l: usize| q.powi(l as i32 + 1) / (1.0 - q);
        while terms < max_terms.max(1) && ratio(terms - 1) > tol && q > 0.0 {
            let mut y = integ.apply(&self.n.apply(&term)?)?;
            y.scale(C64::new(-1.0, 0.0));
            term = self.minv.apply(&y)?;
            u.axpy(ONE, &term);
            terms += 1;
        }
        Ok(SolveReport { u, terms_used: terms, tail_bound: ratio(terms - 1) * first, contraction_q: q })
    }
}

pub fn solve_neumann(p: &EvoProblem, max_terms: usize, tol: f64) -> Result<SolveReport> {
    NeumannSolver::new(&p.m, &p.n)?.solve(&p.f, max_terms, tol)
}

/// Pointwise part plus causal convolution kernels of `N`.
#[derive(Clone, Debug)]
struct Split {
    diag: Vec<Coef>,
    kernels: Vec<(C64, Vec<Coef>)>,
}

fn split_n(op: &EvolutionaryOp, scale: C64, acc: &mut Split) -> Result<()> {
    if let Some(cs) = pointwise_coefs(op) {
        let cs: Vec<Coef> = cs.iter().map(|c| c.scale(scale)).collect();
        acc.diag = merge(&acc.diag, &cs);
        return Ok(());
    }
    match op.kind() {
        OpKind::Convolution(k) => acc.kernels.push((scale, k.samples.clone())),
        OpKind::Sum(v) => {
            for o in v {
                split_n(o, scale, acc)?;
            }
        }
        OpKind::Scale(a, o) => split_n(o, scale * a, acc)?,
        _ => {
            return Err(EvoError::UnsupportedKind(format!(
                "stepping cannot split {} into pointwise and lag parts",
                op.kind().tag()
            )))
        }
    }
    Ok(())
}

fn merge(a: &[Coef], b: &[Coef]) -> Vec<Coef> {
    let len = a.len().max(b.len());
    let at = |v: &[Coef], i: usize| if v.len() == 1 { v[0].clone() } else { v[i].clone() };
    (0..len).map(|i| at(a, i).add(&at(b, i))).collect()
}

/// Implicit Euler on `v = M u` with the step matrix factored once when the
/// coefficients do not depend on time.
#[derive(Clone, Debug)]
pub struct SteppingSolver {
    mcoefs: Vec<Coef>,
    split: Split,
    g0: Coef,
    fixed_inv: Option<Mat>,
    grid: TimeGrid,
    space: SpaceModel,
}

impl SteppingSolver {
    pub fn new(m: &EvolutionaryOp, n: &EvolutionaryOp) -> Result<Self> {
        if m.grid != n.grid || m.space_in != n.space_in || !m.is_square() || !n.is_square() {
            return Err(EvoError::GridMismatch("M and N must act on one space".into()));
        }
        let mcoefs = pointwise_coefs(m)
            .ok_or_else(|| EvoError::UnsupportedKind(format!("stepping needs a pointwise M, got {}", m.kind().tag())))?;
        let mut split = Split { diag: vec![Coef::zero()], kernels: Vec::new() };
        split_n(n, ONE, &mut split)?;
        let dt = m.grid.dt;
        let mut g0 = Coef::zero();
        for (a, k) in &split.kernels {
            if let Some(k0) = k.first() {
                g0 = g0.add(&k0.scale(a * dt));
            }
        }
        let mut s = Self { mcoefs, split, g0, fixed_inv: None, grid: m.grid, space: m.space_in };
        if s.mcoefs.len() == 1 && s.split.diag.len() == 1 {
            s.fixed_inv = Some(invert(&s.step_matrix(0)).ok_or(EvoError::SingularStep { index: 0 })?);
        }
        Ok(s)
    }

    fn step_matrix(&self, i: usize) -> Mat {
        let at = |v: &[Coef], i: usize| if v.len() == 1 { v[0].clone() } else { v[i].clone() };
        let dt = C64::new(self.grid.dt, 0.0);
        at(&self.mcoefs, i).add(&at(&self.split.diag, i).add(&self.g0).scale(dt)).to_dense(self.space.ndof())
    }

    pub fn solve(&self, f: &WeightedSignal) -> Result<WeightedSignal> {
        if f.grid != self.grid || f.space != self.space {
            return Err(EvoError::GridMismatch("right-hand side does not match the operators".into()));
        }
        let nd = f.ndof();
        let dt = self.grid.dt;
        let mut u = WeightedSignal::zeros(self.grid, self.space);
        let mut prev = DVector::<C64>::zeros(nd);
        let mut tmp = vec![ZERO; nd];
        for i in 0..self.grid.n_steps {
            let mut rhs = DVector::from_column_slice(f.row(i));
            for (a, k) in &self.split.kernels {
                for m in 1..=i.min(k.len().saturating_sub(1)) {
                    k[m].apply(u.row(i - m), &mut tmp);
                    for (r, t) in rhs.iter_mut().zip(&tmp) {
                        *r -= a * t * dt;
                    }
                }
            }
            rhs *= C64::new(dt, 0.0);
            rhs += &prev;
            let ui = match &self.fixed_inv {
                Some(inv) => inv * rhs,
                None => invert(&self.step_matrix(i)).ok_or(EvoError::SingularStep { index: i })? * rhs,
            };
            let mi = if self.mcoefs.len() == 1 { &self.mcoefs[0] } else { &self.mcoefs[i] };
            mi.apply(ui.as_slice(), &mut tmp);
            prev = DVector::from_column_slice(&tmp);
            u.row_mut(i).copy_from_slice(ui.as_slice());
        }
        Ok(u)
    }
}

/// The independent reference for `solve_neumann`.
pub fn solve_stepping(p: &EvoProblem) -> Result<WeightedSignal> {
    SteppingSolver::new(&p.m, &p.n)?.solve(&p.f)
}

/// Schur-complement reduction, Neumann solve on `H₀`, then back substitution.
pub fn solve_block(p: &BlockEvoProblem, max_terms: usize, tol: f64) -> Result<BlockSolveReport> {
    let c11 = if pointwise_coefs(&p.n11).is_some() {
        coercivity_estimate(&p.n11)?
    } else if is_translation_invariant(&p.n11) {
        symbol_coercivity(&p.n11)?
    } else {
        coercivity_probe(&p.n11, 5)?
    };
    if !(c11 > 0.0) {
        return Err(EvoError::SingularAlgebraicBlock { c: c11 });
    }
    let n11_inv = invert_op(&p.n11)?;
    if p.f.b0.ndof() == 0 {
        let u1 = n11_inv.apply(&p.f.b1)?;
        let u0 = p.f.b0.clone();
        return Ok(BlockSolveReport { u: BlockSignal { b0: u0, b1: u1 }, terms_used: 0, tail_bound: 0.0, contraction_q: 0.0 });
    }
    let schur = EvolutionaryOp::compose(vec![p.n01.clone(), n11_inv.clone(), p.n10.clone()])?;
    let reduced_n = p.n00.minus(&schur)?;
    let mut f0 = p.f.b0.clone();
    f0.axpy(C64::new(-1.0, 0.0), &p.n01.apply(&n11_inv.apply(&p.f.b1)?)?);
    let reduced = EvoProblem::new(p.m.clone(), reduced_n, f0)?;
    let rep = solve_neumann(&reduced, max_terms, tol)?;
    let mut r1 = p.f.b1.clone();
    r1.axpy(C64::new(-1.0, 0.0), &p.n10.apply(&rep.u)?);
    let u1 = n11_inv.apply(&r1)?;
    Ok(BlockSolveReport {
        u: BlockSignal { b0: rep.u, b1: u1 },
        terms_used: rep.terms_used,
        tail_bound: rep.tail_bound,
        contraction_q: rep.contraction_q,
    })
}

/// `min_s λ_min(Re T̂(s))` over the sampled frequencies.
pub fn symbol_coercivity(op: &EvolutionaryOp) -> Result<f64> {
    Ok(op.transfer_samples()?.iter().map(Coef::herm_min_eig).fold(f64::INFINITY, f64::min))
}

/// Retry `attempt` with `ν` multiplied by `factor` while it reports a contraction failure.
pub fn with_nu_escalation<T>(
    nu0: f64,
    factor: f64,
    max_retries: usize,
    mut attempt: impl FnMut(f64) -> Result<T>,
) -> Result<(T, f64)> {
    let mut nu = nu0;
    let mut last = None;
    for _ in 0..=max_retries {
        match attempt(nu) {
            Ok(v) => return Ok((v, nu)),
            Err(e @ (EvoError::NotContractive { .. } | EvoError::NotContractiveAtFrequency { .. })) => {
                last = Some(e);
                nu *= factor;
            }
            Err(e) => return Err(e),
        }
    }
    Err(EvoError::Aborted(format!(
        "still not contractive after {max_retries} nu escalations: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Space of the trivial block, for problems with no differential part.
pub fn empty_space() -> SpaceModel {
    SpaceModel::finite_dim(0)
}
