//! Minimal tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A forward pass records every operation on a [`Tape`]; values are addressed
//! through [`Var`] handles. [`Tape::backward`] walks the record in reverse and
//! accumulates gradients into the leaves. Broadcasting is limited to
//! scalar-with-tensor and row-with-matrix.
//!
//! ```
//! use milgrain::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[2.0, -4.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{softmax_in_place, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar triple loop, independent of the kernels.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    fn forward_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, Error> {
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb)?;
        Ok(tape.value(c).clone())
    }

    #[test]
    fn matmul_identity() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(forward_matmul(&Tensor::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn matmul_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = forward_matmul(&a, &b).unwrap();
        assert_eq!(c, naive_matmul(&a, &b));
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = forward_matmul(&Tensor::zeros(&[2, 3]), &random(&mut rng, &[3, 4])).unwrap();
        assert_eq!(c, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let err = forward_matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn matmul_matches_triple_loop_on_random_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (a, b) = (random(&mut rng, &[5, 5]), random(&mut rng, &[5, 5]));
            let fast = forward_matmul(&a, &b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    fn unary(f: impl Fn(&mut Tape, Var) -> Result<Var, Error>, x: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = f(&mut tape, v).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn tanh_cases() {
        assert_eq!(unary(Tape::tanh, Tensor::scalar(0.0)).item().unwrap(), 0.0);
        let sat = unary(Tape::tanh, Tensor::scalar(50.0)).item().unwrap();
        assert!((sat - 1.0).abs() < 1e-12 && sat.is_finite());
        let x = Tensor::vector(vec![0.3, -1.7, 2.2]);
        let neg = Tensor::vector(x.data().iter().map(|v| -v).collect());
        let (p, n) = (unary(Tape::tanh, x), unary(Tape::tanh, neg));
        for (a, b) in p.data().iter().zip(n.data()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn softmax_cases() {
        let s = unary(Tape::softmax_rows, Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = unary(Tape::softmax_rows, Tensor::vector(vec![2f64.ln(), 0.0]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let s = unary(Tape::softmax_rows, Tensor::vector(vec![1000.0; 3]));
        for v in s.data() {
            assert!(v.is_finite() && (v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reductions_and_transpose() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(v).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 6.0);

        let c = tape.constant(Tensor::full(&[3, 4], 2.5));
        let m = tape.mean(c).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 2.5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[3, 5]);
        let va = tape.constant(a.clone());
        let t1 = tape.transpose(va).unwrap();
        assert_eq!(tape.shape(t1), &[5, 3]);
        let t2 = tape.transpose(t1).unwrap();
        assert_eq!(tape.value(t2), &a);
    }

    #[test]
    fn broadcasting_is_restricted() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::zeros(&[3, 2]));
        let row = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let s = tape.constant(Tensor::scalar(4.0));
        let col = tape.constant(Tensor::zeros(&[3, 1]));
        let out = tape.add(m, row).unwrap();
        assert_eq!(tape.value(out).row(2), &[1.0, 2.0]);
        let out = tape.mul(s, row).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 8.0]);
        assert!(matches!(tape.add(m, col), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = tape.slice_rows(c, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0]);
        assert!(tape.slice_rows(c, 2, 5).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.3, -4.0, 9.0]));
        let v = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.grad_or_zeros(v), Tensor::zeros(&[2]));

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, -4.0]);
        // a second call accumulates
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[4.0, -8.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_usage_errors() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));

        let mut other = Tape::new();
        let x = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn grad_check_linear_and_quadratic() {
        let a = Tensor::vector(vec![0.5, -1.5, 2.0, 3.0]);
        let theta = Tensor::vector(vec![0.1, 0.2, -0.3, 0.7]);
        let err = grad_check(
            |tape, th| {
                let av = tape.constant(a.clone());
                let p = tape.mul(av, th)?;
                tape.sum(p)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");

        let err = grad_check(
            |tape, th| {
                let p = tape.mul(th, th)?;
                tape.sum(p)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_two_layer_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[6, 4]);
        let params = vec![
            random(&mut rng, &[4, 5]),
            random(&mut rng, &[1, 5]),
            random(&mut rng, &[5, 1]),
            random(&mut rng, &[1, 1]),
        ];
        let err = grad_check_many(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let h = tape.matmul(xv, p[0])?;
                let h = tape.add(h, p[1])?;
                let h = tape.tanh(h)?;
                let o = tape.matmul(h, p[2])?;
                let o = tape.add(o, p[3])?;
                let o = tape.tanh(o)?;
                let sq = tape.mul(o, o)?;
                tape.mean(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_step_and_non_finite() {
        let theta = Tensor::vector(vec![1.0]);
        let f = |tape: &mut Tape, th: Var| tape.sum(th);
        assert!(matches!(grad_check(f, &theta, 1e-2), Err(Error::Usage(_))));
        let nan = Tensor::vector(vec![f64::NAN]);
        assert!(matches!(grad_check(f, &nan, 1e-5), Err(Error::Evaluation(_))));
    }

    /// Every op in one composed graph, including both broadcast directions,
    /// slicing, concatenation and transposition.
    #[test]
    fn grad_check_random_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            random(&mut rng, &[4, 3]),
            random(&mut rng, &[1, 3]),
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[]),
        ];
        let err = grad_check_many(
            |tape, p| {
                let a = tape.matmul(p[0], p[2])?; // 4x4
                let a = tape.softmax_rows(a)?;
                let b = tape.sub(p[0], p[1])?; // row broadcast
                let b = tape.mul(b, p[1])?;
                let bt = tape.transpose(b)?; // 3x4
                let c = tape.matmul(bt, a)?; // 3x4
                let c = tape.scale(c, 0.7)?;
                let c = tape.mul(p[3], c)?; // scalar broadcast
                let top = tape.slice_rows(c, 0, 2)?;
                let bottom = tape.slice_rows(c, 1, 3)?;
                let d = tape.concat(&[top, bottom])?;
                let d = tape.tanh(d)?;
                let s = tape.sub(p[3], d)?;
                let sq = tape.mul(s, s)?;
                tape.sum(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn independent_branches_accumulate_in_any_order() {
        let w = Tensor::vector(vec![0.4, -1.1, 0.9]);
        let build = |swap: bool| {
            let mut tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let t = tape.tanh(wv).unwrap();
            let sq = tape.mul(wv, wv).unwrap();
            let (first, second) = if swap { (sq, t) } else { (t, sq) };
            let s1 = tape.sum(first).unwrap();
            let s2 = tape.sum(second).unwrap();
            let loss = tape.add(s1, s2).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(wv).unwrap().clone()
        };
        assert!(build(false).max_abs_diff(&build(true)) < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -500.0f64..500.0,
        ) {
            let s = unary(Tape::softmax_rows, Tensor::vector(row.clone()));
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let shifted = unary(
                Tape::softmax_rows,
                Tensor::vector(row.iter().map(|v| v + shift).collect()),
            );
            prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
        }
    }
}
