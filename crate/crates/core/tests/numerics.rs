use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tara_core::numerics::{fd_check, Fault, ParamBlock, Tape};
use tara_core::Matrix;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::gaussian(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(r in 1usize..8, k in 1usize..8, c in 1usize..8, seed in any::<u64>()) {
        let a = gaussian(r, k, seed);
        let b = gaussian(k, c, seed ^ 1);
        let diff = a.matmul(&b).unwrap().sub(&naive_matmul(&a, &b)).unwrap().max_abs();
        prop_assert!(diff < 1e-12);
    }

    #[test]
    fn matmul_is_associative(r in 1usize..6, k in 1usize..6, l in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let a = gaussian(r, k, seed);
        let b = gaussian(k, l, seed ^ 1);
        let d = gaussian(l, c, seed ^ 2);
        let left = a.matmul(&b).unwrap().matmul(&d).unwrap();
        let right = a.matmul(&b.matmul(&d).unwrap()).unwrap();
        prop_assert!(left.sub(&right).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn transpose_reverses_products(r in 1usize..6, k in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let a = gaussian(r, k, seed);
        let b = gaussian(k, c, seed ^ 3);
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..10, scale in 0.1f64..200.0, seed in any::<u64>()) {
        let s = gaussian(r, c, seed).scale(scale).softmax_rows();
        for i in 0..r {
            let row = s.row(i);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(c in 1usize..10, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let a = gaussian(1, c, seed);
        let b = a.map(|v| v + shift);
        prop_assert!(a.softmax_rows().sub(&b.softmax_rows()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn primitive_adjoints_agree_with_differences(seed in any::<u64>()) {
        let a = ParamBlock::new("a", gaussian(3, 4, seed));
        let b = ParamBlock::new("b", gaussian(4, 5, seed ^ 9));
        let c = ParamBlock::new("c", gaussian(3, 5, seed ^ 11));
        let report = fd_check(
            |tape, v| {
                let ab = tape.matmul(v[0], v[1])?;
                let s = tape.softmax_rows(ab);
                let h = tape.hadamard(s, v[2])?;
                let t = tape.tanh(h);
                let g = tape.gather_cols(t, &[0, 3])?;
                let sc = tape.scatter_cols(g, &[1, 4], 5)?;
                let added = tape.add_cols(v[2], g, &[2, 0])?;
                let tr = tape.transpose(added);
                let sl = tape.slice_cols(tr, 1, 2)?;
                let cat = tape.concat_cols(&[sl, tr])?;
                let l1 = tape.abs_sum(cat);
                let l2 = tape.mean_square(sc);
                let diff = tape.sub(l1, l2)?;
                let sum = tape.add(diff, l2)?;
                let scaled = tape.scale(sum, 0.5);
                Ok(tape.sum(scaled))
            },
            &[a, b, c],
            1e-6,
        )
        .unwrap();
        prop_assert!(report.passes(1e-5), "max rel error {}", report.max_rel_error());
    }
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.leaf(gaussian(4, 3, 5));
        let b = tape.leaf(gaussian(3, 6, 6));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.softmax_rows(p);
        let l = tape.mean_square(s);
        let g = tape.grad(l).unwrap();
        (tape.value(l).clone(), g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
    };
    let (l1, a1, b1) = run();
    let (l2, a2, b2) = run();
    assert!(l1.bitwise_eq(&l2) && a1.bitwise_eq(&a2) && b1.bitwise_eq(&b2));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(gaussian(2, 2, 1));
    let c = tape.constant(gaussian(2, 2, 2));
    let p = tape.matmul(a, c).unwrap();
    let l = tape.sum(p);
    let g = tape.grad(l).unwrap();
    assert!(g.get(a).is_some());
    assert!(g.get(c).is_none());
}

#[test]
fn corrupted_adjoint_is_detected() {
    let a = ParamBlock::new("a", gaussian(3, 3, 1));
    let b = ParamBlock::new("b", gaussian(3, 2, 2));
    let build = |fault: Option<Fault>| {
        move |tape: &mut Tape, v: &[tara_core::numerics::Var]| {
            if let Some(f) = fault {
                tape.inject_fault(f);
            }
            let p = tape.matmul(v[0], v[1])?;
            Ok(tape.mean_square(p))
        }
    };
    let good = fd_check(build(None), &[a.clone(), b.clone()], 1e-5).unwrap();
    let bad = fd_check(build(Some(Fault::MatMulLeftAdjoint(1.5))), &[a, b], 1e-5).unwrap();
    assert!(good.passes(1e-6));
    assert!(!bad.passes(1e-2));
    assert_eq!(bad.worst().unwrap().name, "a");
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(gaussian(2, 2, 1));
    assert!(matches!(tape.grad(a), Err(tara_core::Error::NotScalar { rows: 2, cols: 2 })));
}

#[test]
fn gradients_below_rounding_noise_are_not_failures() {
    let w = ParamBlock::new("w", gaussian(2, 2, 3));
    let report = fd_check(
        |tape, v| {
            let s = tape.sum(v[0]);
            let tiny = tape.scale(s, 1e-12);
            let big = tape.constant(Matrix::scalar(1e6));
            tape.add(tiny, big)
        },
        &[w],
        1e-5,
    )
    .unwrap();
    let b = &report.blocks[0];
    assert!(b.rel_error > 1e-4);
    assert!(b.abs_error <= b.roundoff);
    assert!(report.passes(1e-4));
}
