use num_complex::Complex64;
use proptest::prelude::*;

use effham::dynamics::{evolve, linspace};
use effham::hilbert::{enumerate_basis, EnsembleSpec, FockTruncation};
use effham::linalg::expm;
use effham::models::*;
use effham::operator::OperatorMatrix;
use effham::rotations::{coupling_table, elimination_generator, truncated_conjugation, Rotation};

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn nonzero(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    (lo..hi, any::<bool>()).prop_map(|(x, s)| if s { x } else { -x })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn basis_dimension(levels in 2usize..5, atoms in 1usize..4, n_max in 0usize..5) {
        let s = enumerate_basis(&[FockTruncation::new(n_max)], EnsembleSpec::new(levels, atoms).unwrap()).unwrap();
        prop_assert_eq!(s.dimension(), binomial(atoms + levels - 1, levels - 1) * (n_max + 1));
        for (i, l) in s.basis().iter().enumerate() {
            prop_assert_eq!(s.index_of(l), Some(i));
            prop_assert_eq!(l.occupations.iter().sum::<usize>(), atoms);
        }
    }

    #[test]
    fn xi_integrals_commute(d12 in nonzero(0.2, 3.0), d23 in -3.0f64..3.0, g12 in 0.0f64..0.5, g23 in 0.0f64..0.5, atoms in 1usize..3) {
        let m = build_xi3(&Xi3Spec::from_detunings(d12, d23, g12, g23, atoms, 4)).unwrap();
        prop_assert!(m.conservation_residual() < 1e-10);
        prop_assert!(m.h0.commutator(&m.hint).unwrap().max_abs() < 1e-10);
        prop_assert!(m.hint.hermiticity_residual() < 1e-14);
    }

    #[test]
    fn cascade_integrals_commute(d in prop::collection::vec(0.3f64..3.0, 3), g in prop::collection::vec(0.0f64..0.3, 3), atoms in 1usize..3) {
        let m = build_cascade_n(&CascadeSpec::from_detunings(&d, &g, atoms, 4)).unwrap();
        prop_assert!(m.conservation_residual() < 1e-10);
        prop_assert!(m.h0.commutator(&m.hint).unwrap().max_abs() < 1e-9);
    }

    // The generator removes the eliminated couplings at first order.
    #[test]
    fn generator_cancels_coupling(delta in nonzero(0.5, 2.0), g in 0.001f64..0.1, atoms in 1usize..3) {
        let m = build_dicke(&DickeSpec::from_detuning(delta, g, atoms, 5)).unwrap();
        let (s, _) = elimination_generator(&m, &["12"]).unwrap();
        prop_assert!(s.add(&s.adjoint()).unwrap().max_abs() < 1e-15);
        let h_d = m.hint.diagonal_part();
        let v = m.hint.offdiagonal_part();
        let lhs = s.commutator(&h_d).unwrap();
        prop_assert!(lhs.add(&v).unwrap().max_abs() < 1e-12);
        let rot = Rotation::from_generator(s).unwrap();
        prop_assert!(rot.unitary.unitarity_residual() < 1e-12);
        let back = rot.unapply(&rot.apply(&m.hint).unwrap()).unwrap();
        prop_assert!(back.sub(&m.hint).unwrap().max_abs() < 1e-12);
    }

    // First order of the truncated series: H_d + ([S,H_d] + V) = H_d.
    #[test]
    fn first_order_conjugation_is_diagonal(delta in nonzero(0.5, 2.0), g in 0.001f64..0.1) {
        let m = build_dicke(&DickeSpec::from_detuning(delta, g, 1, 5)).unwrap();
        let (s, _) = elimination_generator(&m, &["12"]).unwrap();
        let h1 = truncated_conjugation(&s, &m.hint.diagonal_part(), &m.hint.offdiagonal_part(), 1).unwrap();
        prop_assert!(h1.sub(&m.hint.diagonal_part()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn recurrence_second_order(g in prop::collection::vec(nonzero(0.05, 1.0), 3), d2 in 0.2f64..4.0, d3 in -4.0f64..-0.2, d4 in 4.5f64..8.0) {
        let d = [0.0, d2, d3, d4];
        let t = coupling_table(&g, &d, 3).unwrap();
        for i in 1..=2usize {
            let want = g[i - 1] * g[i] * (1.0 / (d[i + 1] - d[i]) - 1.0 / (d[i] - d[i - 1]));
            let got = t.lambda(i, 2).unwrap();
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300));
        }
    }

    #[test]
    fn evolution_preserves_norm_and_matches_expm(delta in -2.0f64..2.0, g in 0.0f64..0.5, t in 0.0f64..20.0) {
        let m = build_dicke(&DickeSpec::from_detuning(delta, g, 1, 4)).unwrap();
        let psi0 = OperatorMatrix::basis_state(&m.space, 3).unwrap();
        let traj = evolve(&m.hint, &psi0, &linspace(0.0, t, 3)).unwrap();
        prop_assert!(traj.norm_drift() < 1e-12);
        let u = expm(&(m.hint.matrix() * Complex64::new(0.0, -t))).unwrap();
        let direct = u * &psi0;
        prop_assert!((&traj.states[2] - direct).norm() < 1e-9);
    }
}

#[test]
fn sequential_and_parallel_sweeps_agree() {
    let grid: Vec<f64> = (1..20).map(|k| 0.005 * k as f64).collect();
    let point = |g: &f64| {
        let m = build_dicke(&DickeSpec::from_detuning(1.0, *g, 2, 6)).unwrap();
        m.blocks().unwrap().iter().map(|b| effham::linalg::eigvalsh(&m.hint.restrict(&b.indices))).collect::<Vec<_>>()
    };
    assert_eq!(effham::sweep::map(&grid, point), effham::sweep::map_sequential(&grid, point));
}
