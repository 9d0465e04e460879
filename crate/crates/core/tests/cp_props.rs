use cpdpm::cp::{cp_als, cp_als_traced, select_rank, AlsOptions, CPModel};
use cpdpm::io::{decode_cpf, encode_cpf};
use cpdpm::tensor::{Matrix, Tensor3};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = Tensor3> {
    (1usize..=5, 1usize..=5, 1usize..=5).prop_flat_map(|dims| {
        prop::collection::vec(-1.0f64..1.0, dims.0 * dims.1 * dims.2).prop_map(move |d| Tensor3::new(dims, d).unwrap())
    })
}

fn quick() -> AlsOptions {
    AlsOptions {
        max_iterations: 60,
        restarts: 1,
        ..AlsOptions::default()
    }
}

fn max_rank(t: &Tensor3) -> usize {
    let (n, m, l) = t.dims();
    (m * l).min(n * l).min(n * m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_never_exceeds_the_tensor_norm(t in tensor(), r in 1usize..4) {
        let r = r.min(max_rank(&t));
        let (cp, res) = cp_als(&t, r, &quick()).unwrap();
        prop_assert!(res <= t.frobenius_norm() * (1.0 + 1e-12) + 1e-12);
        prop_assert!((cp.residual(&t).unwrap() - res).abs() <= 1e-9 * (1.0 + t.frobenius_norm()));
    }

    #[test]
    fn factor_columns_are_unit_norm(t in tensor(), r in 1usize..4) {
        let r = r.min(max_rank(&t));
        let (cp, _) = cp_als(&t, r, &quick()).unwrap();
        prop_assert!(cp.max_norm_deviation() <= 1e-9);
        prop_assert_eq!(cp.rank(), r);
        prop_assert_eq!(cp.dims(), t.dims());
    }

    #[test]
    fn micro_steps_do_not_increase_the_residual(t in tensor(), r in 1usize..4, seed in 0u64..1000) {
        let r = r.min(max_rank(&t));
        let opts = AlsOptions { seed, ..quick() };
        let (_, _, trace) = cp_als_traced(&t, r, &opts).unwrap();
        for w in trace.micro_objectives.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * t.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn same_seed_same_result(t in tensor(), seed in 0u64..1000) {
        let opts = AlsOptions { seed, ..quick() };
        let r = 2.min(max_rank(&t));
        prop_assert_eq!(cp_als(&t, r, &opts).unwrap(), cp_als(&t, r, &opts).unwrap());
    }

    #[test]
    fn rank_selection_meets_its_tolerance(t in tensor(), e in 0.05f64..0.9) {
        let sel = select_rank(&t, e, &quick()).unwrap();
        if sel.criterion_met {
            prop_assert!(sel.residuals[sel.rank - 1] <= e * t.frobenius_norm() + 1e-12);
        }
        prop_assert!(sel.rank >= 1);
    }

    #[test]
    fn cpf_round_trip_preserves_scores(t in tensor(), r in 1usize..4) {
        let r = r.min(max_rank(&t));
        let (cp, _) = cp_als(&t, r, &quick()).unwrap();
        let back = decode_cpf(&encode_cpf(&cp).unwrap()).unwrap();
        let diff = back.reconstruct().data().iter().zip(cp.reconstruct().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-6 * cp.weights().iter().map(|w| w.abs()).sum::<f64>().max(1.0));
    }
}

#[test]
fn exact_rank_two_tensor_is_recovered() {
    let a = Matrix::from_columns(&[vec![1.0, 0.5, -0.25], vec![0.0, 1.0, 1.0]]).unwrap();
    let b = Matrix::from_columns(&[vec![1.0, -1.0], vec![0.5, 1.0]]).unwrap();
    let c = Matrix::from_columns(&[vec![0.5, 0.5, 1.0, -1.0], vec![1.0, 0.0, 0.25, 0.5]]).unwrap();
    let truth = CPModel::from_factors(&[2.0, 1.0], &a, &b, &c).unwrap().reconstruct();
    let (_, res) = cp_als(&truth, 2, &AlsOptions::default()).unwrap();
    assert!(res <= 1e-8 * truth.frobenius_norm(), "residual {res}");
}

#[test]
fn rank_above_the_bound_is_rejected() {
    let t = Tensor3::zeros((2, 2, 2));
    assert!(cp_als(&t, 5, &AlsOptions::default()).is_err());
    assert!(cp_als(&t, 0, &AlsOptions::default()).is_err());
}
