//! Property tests of the invariants the rest of the crate relies on.

use isrflow::benchmarks::{self, KinematicsSpec};
use isrflow::coupling::PermutationLayer;
use isrflow::io::{column_names, read_matrix_csv, write_matrix_csv};
use isrflow::selftest::{random_stack, randomize_stack};
use isrflow::symbolic::{format_sig, simplify, Expr};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stacks_invert_their_forward_map(seed in any::<u64>(), width in 2usize..7, blocks in 1usize..5, x in prop::collection::vec(-2.0f64..2.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = random_stack(width, 0, blocks, &mut rng);
        let x = &x[..width];
        let (o, _) = stack.forward(x).unwrap();
        let back = stack.inverse(&o).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9, "{x:?} vs {back:?}");
        }
    }

    #[test]
    fn logdet_is_additive_under_batching(seed in any::<u64>(), x in matrix(5, 3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = random_stack(3, 0, 2, &mut rng);
        let (o, ld) = stack.forward_batch(&x, None).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let (oi, li) = stack.forward(&row.to_vec()).unwrap();
            prop_assert_eq!(oi, o.row(i).to_vec());
            prop_assert!((li - ld[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_the_identity(seed in any::<u64>(), x in prop::collection::vec(-5.0f64..5.0, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stack = random_stack(4, 0, 3, &mut rng);
        randomize_stack(&mut stack, 0.0, &mut rng);
        let (o, ld) = stack.forward(&x).unwrap();
        prop_assert_eq!(ld, 0.0);
        let mut sorted_o = o.clone();
        let mut sorted_x = x.clone();
        sorted_o.sort_by(f64::total_cmp);
        sorted_x.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_o, sorted_x);
    }

    #[test]
    fn permutations_invert(seed in any::<u64>(), width in 1usize..9, x in matrix(3, 8)) {
        let p = PermutationLayer::seeded(width, seed, 0);
        let x = x.slice(ndarray::s![.., ..width]).to_owned();
        prop_assert_eq!(p.apply_inverse(&p.apply(&x)), x);
    }

    #[test]
    fn mmd_is_symmetric_and_zero_on_itself(a in matrix(12, 2), b in matrix(9, 2)) {
        let ab = benchmarks::mmd(&a, &b).unwrap();
        let ba = benchmarks::mmd(&b, &a).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!(benchmarks::mmd(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kinematics_reach_is_bounded(x in prop::collection::vec(-10.0f64..10.0, 4)) {
        let y = KinematicsSpec::default().forward(&x);
        prop_assert!(y[1].abs() <= 2.0 + 1e-12);
        prop_assert!((y[0] - x[0]).abs() <= 2.0 + 1e-12);
    }

    #[test]
    fn csv_round_trips_bit_for_bit(m in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 12)) {
        let m = Array2::from_shape_vec((4, 3), m).unwrap();
        let mut bytes = Vec::new();
        write_matrix_csv(&mut bytes, &column_names("x", 3), &m).unwrap();
        let (header, back) = read_matrix_csv(bytes.as_slice()).unwrap();
        prop_assert_eq!(header, column_names("x", 3));
        prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn simplification_preserves_values(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -2.0f64..2.0) {
        let (x, y) = (Expr::var("x"), Expr::var("y"));
        let e = Expr::Add(vec![
            Expr::Mul(vec![Expr::Const(c), x.clone(), Expr::Add(vec![y.clone(), Expr::Const(1.0)])]),
            Expr::sub(x.clone(), Expr::Mul(vec![Expr::Const(0.0), y.clone()])),
            Expr::soft_clamp(Expr::Mul(vec![x, y]), 2.0),
        ]);
        let env = [("x".to_owned(), a), ("y".to_owned(), b)].into_iter().collect();
        let before = e.eval(&env).unwrap();
        let after = simplify(&e).eval(&env).unwrap();
        prop_assert!((before - after).abs() <= 1e-12 * (1.0 + before.abs()));
    }

    #[test]
    fn significant_digit_formatting_parses_back_close(v in -1e6f64..1e6) {
        let s = format_sig(v, 6);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 1e-5 * v.abs());
    }
}
