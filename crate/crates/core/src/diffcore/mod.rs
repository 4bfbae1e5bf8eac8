//! Dense `f64` matrices with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] outside the tape; [`Tape::backward`] accumulates their
//! gradients so several forward passes can contribute to one optimizer step.

mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamId, ParamStore};
pub use tape::{sigmoid, Axis, Gradients, Tape, Var, MASK_NEG};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` with respect to each input tensor.
    fn fd_check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.gradients(loss).unwrap();
        let eval = |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            for idx in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    /// Random fixed weights turn any tensor output into a generic scalar.
    fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let [r, c] = tape.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(rand_tensor(&mut rng, r, c));
        let p = tape.mul(x, w).unwrap();
        tape.sum(p).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::row(&[1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new(2, 1, vec![2.0, 3.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let err = fd_check(vec![a, b], |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.sum(p).unwrap()
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.0, 0.0]).unwrap());
        let s = tape.softmax(x, Axis::Cols, None).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::row(&[1000.0, 1000.0, 1000.0]).unwrap());
        let s = tape.softmax(x, Axis::Cols, None).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]).unwrap());
        let s = tape.softmax(x, Axis::Cols, Some(&[true, true, false])).unwrap();
        let e = std::f64::consts::E;
        let got = tape.value(s).data();
        assert!((got[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((got[1] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn softmax_fully_masked_slice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.softmax(x, Axis::Cols, Some(&[false, false])),
            Err(crate::Error::DegenerateSlice(_))
        ));
    }

    #[test]
    fn softmax_along_rows_normalizes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, 4, 3));
        let s = tape.softmax(x, Axis::Rows, None).unwrap();
        let t = tape.value(s);
        for j in 0..3 {
            let col: f64 = (0..4).map(|i| t.get(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_and_concat() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(&[2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::row(&[4.0, 5.0]).unwrap());
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[8.0, 15.0]);

        let one = tape.constant(Tensor::row(&[1.0]).unwrap());
        let two = tape.constant(Tensor::row(&[2.0, 3.0]).unwrap());
        let c = tape.concat(&[one, two], Axis::Cols).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(1, 4, 3.5));
        let g = tape.constant(Tensor::filled(1, 4, 1.0));
        let b = tape.constant(Tensor::zeros(1, 4));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[vec![0.0, 50.0], vec![50.0, 0.0]]).unwrap());
        let l = tape.cross_entropy(logits, &[1, 0], &[true, true]).unwrap();
        assert!(tape.value(l).item() < 1e-6);

        let logits = tape.constant(Tensor::zeros(3, 2));
        let l = tape.cross_entropy(logits, &[0, 1, 1], &[true, true, true]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        assert!(matches!(
            tape.cross_entropy(logits, &[0, 1, 1], &[false; 3]),
            Err(crate::Error::DegenerateSlice(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 9;
        let logits = Tensor::new(n, 2, (0..2 * n).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let mut oracle = 0.0;
        let mut count = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let (a, b) = (logits.get(i, 0), logits.get(i, 1));
            let p = [a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp())];
            oracle += -p[targets[i]].ln();
            count += 1.0;
        }
        oracle /= count;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let loss = tape.cross_entropy(l, &targets, &mask).unwrap();
        assert!((tape.value(loss).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn backward_simple_cases() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let sq = tape.mul(xv, xv).unwrap();
        tape.backward(sq, &mut store).unwrap();
        assert_eq!(store.grad(x).item(), 6.0);

        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(&[0.3, -1.2, 2.0]).unwrap());
        let s = tape.softmax(v, Axis::Cols, None).unwrap();
        let total = tape.sum(s).unwrap();
        let grads = tape.gradients(total).unwrap();
        assert!(grads.get(v).unwrap().data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(&[1.0, 2.0]).unwrap());
        assert!(matches!(tape.gradients(v), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 4);
        let row = rand_tensor(&mut rng, 1, 4);
        let mask: Vec<bool> = (0..12).map(|i| i % 5 != 2).collect();

        type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
        let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
            ("matmul_nt", vec![a.clone(), b.clone()], Box::new(|t, v| {
                let y = t.matmul_nt(v[0], v[1]).unwrap();
                weighted_sum(t, y, 1)
            })),
            ("transpose", vec![a.clone()], Box::new(|t, v| {
                let y = t.transpose(v[0]).unwrap();
                weighted_sum(t, y, 2)
            })),
            ("add_mul", vec![a.clone(), b.clone()], Box::new(|t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let y = t.mul(s, v[0]).unwrap();
                weighted_sum(t, y, 3)
            })),
            ("affine", vec![a.clone(), rand_tensor(&mut rng, 4, 2), rand_tensor(&mut rng, 1, 2)], Box::new(|t, v| {
                let y = t.affine(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y, 4)
            })),
            ("scale_by", vec![a.clone(), Tensor::scalar(0.7)], Box::new(|t, v| {
                let y = t.scale_by(v[0], v[1]).unwrap();
                let y = t.scale(y, -1.5).unwrap();
                weighted_sum(t, y, 5)
            })),
            ("softmax_masked", vec![a.clone()], Box::new(move |t, v| {
                let y = t.softmax(v[0], Axis::Cols, Some(&mask)).unwrap();
                weighted_sum(t, y, 6)
            })),
            ("softmax_rows", vec![a.clone()], Box::new(|t, v| {
                let y = t.softmax(v[0], Axis::Rows, None).unwrap();
                weighted_sum(t, y, 7)
            })),
            ("layer_norm", vec![a.clone(), row.clone(), rand_tensor(&mut rng, 1, 4)], Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                weighted_sum(t, y, 8)
            })),
            ("gelu_sigmoid", vec![a.clone()], Box::new(|t, v| {
                let g = t.gelu(v[0]).unwrap();
                let y = t.sigmoid(g).unwrap();
                weighted_sum(t, y, 9)
            })),
            ("gather", vec![a.clone()], Box::new(|t, v| {
                let y = t.gather(v[0], &[2, 0, 2, 1]).unwrap();
                weighted_sum(t, y, 10)
            })),
            ("slices_concat", vec![a.clone(), b.clone()], Box::new(|t, v| {
                let r = t.slice_rows(v[0], 1, 3).unwrap();
                let c = t.slice_cols(v[1], 1, 3).unwrap();
                let y = t.concat(&[r, r], Axis::Rows).unwrap();
                let z = t.concat(&[c, c], Axis::Cols).unwrap();
                let y = t.transpose(y).unwrap();
                let s1 = weighted_sum(t, y, 11);
                let s2 = weighted_sum(t, z, 12);
                t.add(s1, s2).unwrap()
            })),
            ("mean", vec![a.clone()], Box::new(|t, v| {
                let mask: Vec<bool> = (0..12).map(|i| i % 5 != 1).collect();
                let r = t.mean(v[0], Axis::Rows, Some(&mask)).unwrap();
                let c = t.mean(v[0], Axis::Cols, None).unwrap();
                let s1 = weighted_sum(t, r, 13);
                let s2 = weighted_sum(t, c, 14);
                t.add(s1, s2).unwrap()
            })),
            ("cross_entropy", vec![rand_tensor(&mut rng, 5, 2)], Box::new(|t, v| {
                t.cross_entropy(v[0], &[0, 1, 1, 0, 1], &[true, true, false, true, true]).unwrap()
            })),
        ];
        for (name, inputs, build) in cases {
            let err = fd_check(inputs, build);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn masked_positions_receive_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.2, 1.4, -0.3, 0.8]).unwrap());
        let s = tape.softmax(x, Axis::Cols, Some(&[true, false, true, true])).unwrap();
        let y = weighted_sum(&mut tape, s, 99);
        let g = tape.gradients(y).unwrap();
        assert_eq!(g.get(x).unwrap().data()[1], 0.0);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let a = tape.constant(rand_tensor(&mut rng, 4, 4));
            let b = tape.constant(rand_tensor(&mut rng, 4, 4));
            let m = tape.matmul(a, b).unwrap();
            let s = tape.softmax(m, Axis::Cols, None).unwrap();
            tape.value(s).clone()
        };
        assert_eq!(run(), run());
    }
}
