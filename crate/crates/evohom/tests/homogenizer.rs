use std::f64::consts::PI;

use evohom::evo_solver::{solve_block, BlockEvoProblem, BlockSignal, SteppingSolver};
use evohom::homogenizer::{
    assemble_symbol_valued, cell_average_product, cell_average_series, extract_memory_kernel, time_periodic_limit,
    time_product_limit, wot_limit_estimate, BlockModel, CellFunction, HomogenizedModel, MemoryKernel,
    OperatorSequence, SequenceMeta, SymbolLimits, Truncation,
};
use evohom::linalg::{Coef, Mat, C64, ONE};
use evohom::operator_calculus::{coercivity_estimate, EvolutionaryOp, Field};
use evohom::scenario_suite::dyadic;
use evohom::weighted_space::{inner_product, make_test_dictionary, SpaceModel, TimeGrid, WeightedSignal};
use evohom::EvoError;
use proptest::prelude::*;

fn scalar() -> SpaceModel {
    SpaceModel::finite_dim(1)
}

fn c(x: f64) -> C64 {
    C64::new(x, 0.0)
}

fn max_rel(a: &EvolutionaryOp, b: &EvolutionaryOp, probes: &[WeightedSignal]) -> f64 {
    probes.iter().map(|p| a.apply(p).unwrap().rel_dist(&b.apply(p).unwrap())).fold(0.0, f64::max)
}

#[test]
fn cell_average_examples() {
    let (al, be) = (2.0, 5.0);
    let a = CellFunction::two_valued(1, al, be);
    let s0 = cell_average_series(&a, None, 0).unwrap();
    assert!((s0[0][(0, 0)] - c((1.0 / al + 1.0 / be) / 2.0)).norm() < 1e-14);
    assert!((1.0 / s0[0][(0, 0)].re - 2.0 * al * be / (al + be)).abs() < 1e-12);

    let one = CellFunction::constant(1, 1.0);
    let (l1, l2) = (0.5, 2.5);
    let b = CellFunction::two_valued(1, l1, l2);
    let first = cell_average_product(&one, &b, 1).unwrap()[(0, 0)].re;
    assert!((first - (l1 + l2) / 2.0).abs() < 1e-14);
    let second = cell_average_product(&one, &b, 2).unwrap()[(0, 0)].re;
    assert!((second - (l1 * l1 + l2 * l2) / 2.0).abs() < 1e-14);
    let jensen = second - first * first;
    assert!((jensen - (l1 - l2).powi(2) / 4.0).abs() < 1e-14);
}

#[test]
fn non_coercive_cell_rejected() {
    let a = CellFunction::two_valued(1, -1.0, 2.0);
    assert!(matches!(cell_average_series(&a, None, 0), Err(EvoError::NotCoerciveOnCell { .. })));
}

fn periodic_sequence(a: CellFunction, grid: TimeGrid, schedule: Vec<usize>) -> OperatorSequence {
    let meta = SequenceMeta { periodic: true, time_independent: false, symbol_valued: false };
    OperatorSequence::new(schedule, meta, move |n| EvolutionaryOp::multiplication(grid, scalar(), a.in_time(&grid, n)))
}

#[test]
fn wot_constant_sequence() {
    let g = TimeGrid::new(1.0 / 256.0, 256, 1.0).unwrap();
    let dict = make_test_dictionary(g, scalar(), 4, 2);
    let seq = periodic_sequence(CellFunction::constant(1, 2.5), g, vec![1, 2, 4, 8]);
    let w = wot_limit_estimate(&seq, &dict).unwrap();
    let ext = w.extrapolated_matrix().unwrap();
    for a in 0..4 {
        for b in 0..4 {
            let direct = inner_product(&dict.members[a], &dict.members[b].scaled(c(2.5))).unwrap();
            assert!((ext[(a, b)] - direct).norm() <= 1e-14);
        }
    }
    assert!(w.converged);
}

#[test]
fn wot_sine_decays() {
    let g = TimeGrid::new(1.0 / 2048.0, 2048, 1.0).unwrap();
    let dict = make_test_dictionary(g, scalar(), 4, 5);
    let sine = CellFunction::scalar(1, |y| (2.0 * PI * y[0]).sin()).with_resolution(256);
    let w = wot_limit_estimate(&periodic_sequence(sine, g, dyadic(64)[2..].to_vec()), &dict).unwrap();
    let per_step: Vec<f64> = w.pairing_table.iter().map(|r| r.iter().map(|z| z.norm()).fold(0.0, f64::max)).collect();
    assert!(per_step.windows(2).all(|p| p[1] <= p[0]), "{per_step:?}");
    assert!(*per_step.last().unwrap() < 1e-3);
    assert!(w.last().iter().all(|z| z.norm() < 1e-3));
}

#[test]
fn wot_sign_wave_matches_cell_mean() {
    let g = TimeGrid::new(1.0 / 2048.0, 2048, 1.0).unwrap();
    let dict = make_test_dictionary(g, scalar(), 4, 6);
    let sign = CellFunction::scalar(1, |y| if y[0].rem_euclid(1.0) < 0.5 { 3.0 } else { 1.0 }).with_resolution(2);
    let mean = sign.mean()[(0, 0)];
    let w = wot_limit_estimate(&periodic_sequence(sign, g, vec![16, 32, 64, 128]), &dict).unwrap();
    let ext = w.last();
    let mut worst: f64 = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            let want = inner_product(&dict.members[a], &dict.members[b].scaled(mean)).unwrap();
            worst = worst.max((ext[(a, b)] - want).norm());
        }
    }
    assert!(worst < 1e-3, "{worst} {:?}", w.cauchy);
}

#[test]
fn wot_table_csv_layout() {
    let g = TimeGrid::new(1.0 / 64.0, 64, 1.0).unwrap();
    let dict = make_test_dictionary(g, scalar(), 2, 1);
    let w = wot_limit_estimate(&periodic_sequence(CellFunction::constant(1, 1.0), g, vec![1, 2, 4]), &dict).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wot.csv");
    w.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n,pair_id,re,im"));
    assert_eq!(lines.count(), 3 * 4);
    let short = OperatorSequence::new(vec![1, 2], SequenceMeta::default(), move |_| Ok(EvolutionaryOp::identity(g, scalar())));
    assert!(matches!(wot_limit_estimate(&short, &dict), Err(EvoError::ScheduleTooShort(2))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constant_coefficients_assemble_to_naive_limit(a in 0.5f64..4.0, b in -1.0f64..1.0) {
        let g = TimeGrid::new(1.0 / 256.0, 256, 4.0).unwrap();
        let s = scalar();
        let model = HomogenizedModel::from_cells(
            &CellFunction::constant(1, a), Some(&CellFunction::constant(1, b)), g, s, Truncation::tol(1e-13),
        ).unwrap();
        let naive = EvolutionaryOp::scale_re(a, &EvolutionaryOp::derivative(g, s))
            .plus(&EvolutionaryOp::constant(g, s, Coef::real(b)).unwrap()).unwrap();
        let probes = make_test_dictionary(g, s, 4, 3).members;
        prop_assert!(max_rel(&model.assemble().unwrap(), &naive, &probes) <= 1e-6);
        let k = extract_memory_kernel(&model).unwrap();
        prop_assert!(k.max_abs() <= 1e-9);
    }

    #[test]
    fn limit_coefficient_stays_coercive(lo in 0.2f64..2.0, hi in 2.0f64..10.0) {
        let g = TimeGrid::new(1.0 / 64.0, 64, 2.0).unwrap();
        let cell = CellFunction::two_valued(1, lo, hi);
        let model = HomogenizedModel::from_cells(&cell, None, g, scalar(), Truncation::default()).unwrap();
        let lead = model.m_hom[0].inverse().unwrap();
        let coercive = lead.herm_min_eig();
        let (cmin, sup) = (cell.min_coercivity(), cell.sup_norm());
        prop_assert!(coercive >= cmin.powi(3) / (sup * sup) - 1e-12);
    }
}

#[test]
fn harmonic_mean_limit() {
    let g = TimeGrid::new(1.0 / 128.0, 128, 2.0).unwrap();
    let s = SpaceModel::torus_grid(1, 8, 1);
    let model = HomogenizedModel::from_cells(&CellFunction::two_valued(1, 1.0, 3.0), None, g, s, Truncation::default()).unwrap();
    assert!(!model.has_memory_terms());
    let lead = EvolutionaryOp::scale_re(1.5, &EvolutionaryOp::derivative(g, s));
    let probes = make_test_dictionary(g, s, 4, 1).members;
    assert!(max_rel(&model.assemble().unwrap(), &lead, &probes) <= 1e-12);
}

#[test]
fn symbol_and_time_independent_paths_agree() {
    let g = TimeGrid::new(1.0 / 256.0, 256, 4.0).unwrap();
    let s = scalar();
    let trunc = Truncation::tol(1e-14);
    let model = HomogenizedModel::from_cells(
        &CellFunction::two_valued(1, 1.0, 2.0),
        Some(&CellFunction::two_valued(1, -1.0, 1.5)),
        g,
        s,
        trunc,
    )
    .unwrap();
    let coefs = model.m_hom.clone();
    let sym = assemble_symbol_valued(g, s, trunc, |fp| SymbolLimits {
        m00: coefs.iter().enumerate().map(|(l, c)| c.scale((-fp.z).powi(l as i32))).collect(),
        ..SymbolLimits::default()
    })
    .unwrap();
    let probes = make_test_dictionary(g, s, 6, 8).members;
    assert!(max_rel(&sym.limit, &model.assemble().unwrap(), &probes) <= 1e-8);
    for p in &probes {
        let u = model.solve(p).unwrap();
        assert!(sym.solution.apply(p).unwrap().rel_dist(&u) <= 1e-8);
    }
}

#[test]
fn convolution_limit_symbol() {
    let g = TimeGrid::new(1.0 / 512.0, 512, 2.0).unwrap();
    let s = scalar();
    let gamma = 0.4;
    // 1 + M_g with g = γe^{-t}: on the grid M_g(s) = γ dt / (1 − e^{-(s+1)dt}).
    let asm = assemble_symbol_valued(g, s, Truncation::tol(1e-14), |fp| {
        let mg = c(gamma * g.dt) / (ONE - (-(fp.s + ONE) * g.dt).exp());
        SymbolLimits { n11_inv: Some(Coef::Scalar(ONE / (ONE + mg))), ..SymbolLimits::default() }
    })
    .unwrap();
    let want = EvolutionaryOp::symbol(g, s, "1+g", move |fp| {
        Coef::Scalar(ONE + c(gamma * g.dt) / (ONE - (-(fp.s + ONE) * g.dt).exp()))
    });
    let probes = make_test_dictionary(g, s, 4, 2).members;
    assert!(max_rel(&asm.limit, &want, &probes) <= 1e-10);
    let zero = assemble_symbol_valued(g, s, Truncation::default(), |_| SymbolLimits {
        n11_inv: Some(Coef::Scalar(ONE)),
        ..SymbolLimits::default()
    })
    .unwrap();
    assert!(max_rel(&zero.limit, &EvolutionaryOp::identity(g, s), &probes) <= 1e-12);
}

#[test]
fn memory_kernel_zero_iff_no_jensen_gap() {
    let g = TimeGrid::new(1.0 / 256.0, 512, 4.0).unwrap();
    let s = scalar();
    let one = CellFunction::constant(1, 1.0);
    let same = HomogenizedModel::from_cells(&one, Some(&CellFunction::two_valued(1, 1.0, 1.0)), g, s, Truncation::tol(1e-13)).unwrap();
    assert!(extract_memory_kernel(&same).unwrap().max_abs() <= 1e-9);
    let none = HomogenizedModel::from_cells(&one, None, g, s, Truncation::tol(1e-13)).unwrap();
    assert!(!none.has_memory_terms());
    let split = HomogenizedModel::from_cells(&one, Some(&CellFunction::two_valued(1, 0.0, 2.0)), g, s, Truncation::tol(1e-13)).unwrap();
    assert!(extract_memory_kernel(&split).unwrap().max_abs() > 0.5);
}

/// Brute force: average the two pointwise ODE responses to an impulse, then
/// read the kernel off `K * ū = f − ∂₀ū − b⁰ū` by forward substitution.
#[test]
fn memory_kernel_mass_matches_brute_force() {
    let g = TimeGrid::new(1.0 / 256.0, 1024, 4.0).unwrap();
    let s = scalar();
    let (l1, l2) = (0.0, 2.0);
    let model = HomogenizedModel::from_cells(
        &CellFunction::constant(1, 1.0),
        Some(&CellFunction::two_valued(1, l1, l2)),
        g,
        s,
        Truncation::tol(1e-13),
    )
    .unwrap();
    let kernel = extract_memory_kernel(&model).unwrap();

    let mut f = WeightedSignal::zeros(g, s);
    f.values[0] = c(1.0 / g.dt);
    let id = EvolutionaryOp::identity(g, s);
    let response = |lam: f64| SteppingSolver::new(&id, &EvolutionaryOp::constant(g, s, Coef::real(lam)).unwrap()).unwrap().solve(&f).unwrap();
    let ubar = response(l1).add(&response(l2)).scaled(c(0.5));
    let b0 = (l1 + l2) / 2.0;
    let mut r = f.sub(&EvolutionaryOp::derivative(g, s).apply(&ubar).unwrap());
    r.axpy(c(-b0), &ubar);
    let n = g.n_steps;
    let mut k = vec![C64::new(0.0, 0.0); n];
    for i in 0..n {
        let mut acc = r.values[i] / g.dt;
        for j in 0..i {
            acc -= k[j] * ubar.values[i - j];
        }
        k[i] = acc / ubar.values[0];
    }
    let brute = MemoryKernel { dt: g.dt, samples: k, translation_mismatch: 0.0 };
    let (m1, m2) = (kernel.l1_mass(g.nu), brute.l1_mass(g.nu));
    assert!((m1 - m2).abs() <= 0.05 * m2, "{m1} vs {m2}");
    assert!((m1 - 1.0 / (1.0 + g.nu)).abs() <= 0.05 / (1.0 + g.nu));
}

#[test]
fn kernel_csv_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.csv");
    let k = MemoryKernel { dt: 0.01, samples: (0..50).map(|i| C64::new((-0.01 * i as f64).exp() / 3.0, 1e-17 * i as f64)).collect(), translation_mismatch: 0.0 };
    k.write_csv(&path).unwrap();
    assert_eq!(MemoryKernel::read_csv(&path).unwrap().samples, k.samples);
    std::fs::write(&path, "t,K_re,K_im\n0,1\n").unwrap();
    assert!(matches!(MemoryKernel::read_csv(&path), Err(EvoError::Parse { .. }) | Err(EvoError::Csv(_))));
}

#[test]
fn time_periodic_closed_forms() {
    let g = TimeGrid::new(1.0 / 512.0, 512, 4.0).unwrap();
    let s = scalar();
    let trunc = Truncation::tol(1e-13);
    let scal = |c: &Coef| c.as_scalar().unwrap().re;

    let m = time_periodic_limit(&CellFunction::two_valued(1, 1.0, 3.0), Some(&CellFunction::constant(1, 1.0)), g, s, trunc).unwrap();
    let (me, ne) = m.closed_form.clone().unwrap();
    assert!((scal(&me) - 1.5).abs() < 1e-12 && (scal(&ne) - 1.0).abs() < 1e-12);
    let closed = EvolutionaryOp::scale_re(1.5, &EvolutionaryOp::derivative(g, s)).plus(&EvolutionaryOp::identity(g, s)).unwrap();
    let probes = make_test_dictionary(g, s, 6, 4).members;
    assert!(max_rel(&m.assemble().unwrap(), &closed, &probes) <= 1e-7);

    let m = time_periodic_limit(&CellFunction::constant(1, 2.0), Some(&CellFunction::constant(1, 0.7)), g, s, trunc).unwrap();
    let (me, ne) = m.closed_form.unwrap();
    assert!((scal(&me) - 2.0).abs() < 1e-12 && (scal(&ne) - 0.7).abs() < 1e-12);

    let m = time_periodic_limit(&CellFunction::two_valued(1, 1.0, 3.0), None, g, s, trunc).unwrap();
    let (me, ne) = m.closed_form.unwrap();
    assert!((scal(&me) - 1.5).abs() < 1e-12 && scal(&ne).abs() < 1e-15);
}

#[test]
fn time_periodic_sweep_approaches_closed_form() {
    let g = TimeGrid::new(1.0 / 2048.0, 2048, 4.0).unwrap();
    let s = scalar();
    let a = CellFunction::two_valued(1, 1.0, 3.0);
    let limit = time_periodic_limit(&a, Some(&CellFunction::constant(1, 1.0)), g, s, Truncation::tol(1e-13)).unwrap();
    let dict = make_test_dictionary(g, s, 4, 7);
    let f = &dict.members[0];
    let u_lim = limit.solve(f).unwrap();
    let mut gaps = Vec::new();
    for n in [8, 32, 128] {
        let m = EvolutionaryOp::multiplication(g, s, a.in_time(&g, n)).unwrap();
        let u = SteppingSolver::new(&m, &EvolutionaryOp::identity(g, s)).unwrap().solve(f).unwrap();
        let gap = dict.members.iter().map(|phi| (inner_product(phi, &u).unwrap() - inner_product(phi, &u_lim).unwrap()).norm()).fold(0.0, f64::max);
        gaps.push(gap);
    }
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gaps[2] <= 5e-3);
}

#[test]
fn time_product_examples() {
    assert!((time_product_limit(&[CellFunction::constant(1, 3.0)], 1)[(0, 0)] - c(3.0)).norm() < 1e-15);
    let a = CellFunction::scalar(1, |y| 2.0 + (2.0 * PI * y[0]).sin()).with_resolution(64);
    assert!((time_product_limit(&[a.clone(), a], 2)[(0, 0)] - c(4.0)).norm() < 1e-12);
}

#[test]
fn block_limit_of_constant_sequence() {
    let g = TimeGrid::new(1.0 / 64.0, 64, 3.0).unwrap();
    let (s0, s1) = (SpaceModel::finite_dim(2), SpaceModel::finite_dim(1));
    let m = Mat::from_row_slice(2, 2, &[c(2.0), c(0.3), c(0.3), c(1.5)]);
    let n00 = Mat::from_row_slice(2, 2, &[c(0.2), c(-0.1), c(0.4), c(0.1)]);
    let n01 = Mat::from_row_slice(2, 1, &[c(0.3), c(-0.2)]);
    let n10 = Mat::from_row_slice(1, 2, &[c(0.1), c(0.25)]);
    let n11 = Mat::from_element(1, 1, c(2.0));
    let model = BlockModel::from_constant(g, s0, s1, &m, &n00, &n01, &n10, &n11, Truncation::tol(1e-14)).unwrap();
    let f = BlockSignal {
        b0: WeightedSignal::from_fn(g, s0, |t, k| c((3.0 * t).sin() + k as f64)),
        b1: WeightedSignal::from_fn(g, s1, |t, _| c(t * t)),
    };
    let got = model.solve(&f).unwrap();
    let op = |a: &Mat, si: SpaceModel, so: SpaceModel| EvolutionaryOp::constant_between(g, si, so, Coef::Dense(a.clone())).unwrap();
    let p = BlockEvoProblem {
        m: op(&m, s0, s0),
        n00: op(&n00, s0, s0),
        n01: op(&n01, s1, s0),
        n10: op(&n10, s0, s1),
        n11: op(&n11, s1, s1),
        f: f.clone(),
    };
    let direct = solve_block(&p, 400, 1e-15).unwrap().u;
    assert!(got.b0.rel_dist(&direct.b0) <= 1e-8 && got.b1.rel_dist(&direct.b1) <= 1e-8);
    let back = model.assemble().unwrap().apply(&got).unwrap();
    assert!(back.b0.rel_dist(&f.b0) <= 1e-8 && back.b1.rel_dist(&f.b1) <= 1e-8);
}

#[test]
fn block_limit_uses_mean_of_inverses() {
    let g = TimeGrid::new(1.0 / 64.0, 64, 3.0).unwrap();
    let s = scalar();
    let zero = CellFunction::constant(1, 0.0);
    let model = BlockModel::from_cells(
        g,
        s,
        s,
        [&CellFunction::constant(1, 1.0), &CellFunction::constant(1, 0.5), &zero, &zero, &CellFunction::two_valued(1, 1.0, 4.0)],
        Truncation::default(),
    )
    .unwrap();
    let hom = model.n11_inv_hom.as_scalar().unwrap().re;
    assert!((hom - 0.625).abs() < 1e-12);
    assert!(hom - 1.0 / 2.5 > 0.2);
}

#[test]
fn multiplication_field_coercivity_example() {
    let g = TimeGrid::new(1.0 / 100.0, 100, 1.0).unwrap();
    let op = EvolutionaryOp::multiplication(g, scalar(), Field::from_fn(&g, |t| Coef::real(2.0 + (2.0 * PI * t).sin()))).unwrap();
    assert!((coercivity_estimate(&op).unwrap() - 1.0).abs() < 1e-9);
}
