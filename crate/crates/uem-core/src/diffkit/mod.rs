//! Minimal reverse-mode differentiation engine over dense real tensors.
//!
//! Provides exactly the primitives the training losses need: matrix product,
//! addition, scalar scale, rectified-linear, exponential, natural log,
//! summation, inner product, L2 norm, row-wise softmax and log-sum-exp,
//! pairwise Euclidean distance, and sigmoid, plus the structural ops
//! (transpose, tiling, concatenation) that glue them together. No GPU, no
//! sparse tensors, no higher-order derivatives.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, DEFAULT_FD_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, euclidean, Tensor, LN_FLOOR};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn backward_of_bilinear_form() {
        // root = x . y with x=[1,2], y=[3,4] gives d/dx = [3,4]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let root = tape.dot(x, y).unwrap();
        assert_eq!(tape.value(root).item(), 11.0);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0]));
        let root = tape.dot(x, x).unwrap();
        let grads = tape.backward(root).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.take(unused, &[1]).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn softmax_log_composite_matches_finite_differences() {
        let mut rng = crate::rng::stream(11, "fd-composite");
        let x = Tensor::matrix(1, 4, rand_vec(4, &mut rng)).unwrap();
        let err = grad_check(
            |tape, leaves| {
                let s = tape.softmax_rows(leaves[0])?;
                let l = tape.ln(s)?;
                Ok(tape.sum(l))
            },
            &[x],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn grad_check_exact_for_linear_and_constant() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let w = Tensor::vector(vec![1.5, 0.5, -0.25]);
        let err = grad_check(
            |tape, leaves| tape.dot(leaves[0], leaves[1]),
            &[x.clone(), w],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-10, "rel err {err}");

        // Constant expression: gradient zero, error exactly zero.
        let err = grad_check(
            |tape, leaves| {
                let c = tape.leaf(Tensor::scalar(3.0));
                let _ = leaves[0];
                Ok(tape.scale(c, 2.0))
            },
            &[x],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    /// Every primitive against central differences on random fixtures.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut worst: f64 = 0.0;
        for fixture in 0..100 {
            let mut rng = crate::rng::substream(99, "fd-primitives", &[fixture]);
            let a = Tensor::matrix(3, 4, rand_vec(12, &mut rng)).unwrap();
            let b = Tensor::matrix(4, 2, rand_vec(8, &mut rng)).unwrap();
            let c = Tensor::matrix(3, 4, rand_vec(12, &mut rng)).unwrap();
            let v = Tensor::vector(rand_vec(4, &mut rng));
            let m2 = Tensor::matrix(2, 4, rand_vec(8, &mut rng)).unwrap();

            let cases: Vec<Box<dyn Fn(&mut Tape, &[Var]) -> crate::error::Result<Var>>> = vec![
                // matmul + transpose + sum
                Box::new(|t, l| {
                    let p = t.matmul(l[0], l[1])?;
                    let tr = t.transpose(p)?;
                    Ok(t.sum(tr))
                }),
                // add, sub, mul, scale chained
                Box::new(|t, l| {
                    let s = t.add(l[0], l[2])?;
                    let d = t.sub(s, l[2])?;
                    let m = t.mul(d, l[0])?;
                    let sc = t.scale(m, 0.75);
                    Ok(t.sum(sc))
                }),
                // relu
                Box::new(|t, l| {
                    let r = t.relu(l[0]);
                    Ok(t.sum(r))
                }),
                // exp then ln (well inside the domain)
                Box::new(|t, l| {
                    let e = t.exp(l[0]);
                    let ln = t.ln(e)?;
                    Ok(t.sum(ln))
                }),
                // sigmoid
                Box::new(|t, l| {
                    let s = t.sigmoid(l[0]);
                    Ok(t.sum(s))
                }),
                // norm
                Box::new(|t, l| Ok(t.norm(l[0]))),
                // normalize_rows then dot with itself
                Box::new(|t, l| {
                    let n = t.normalize_rows(l[0])?;
                    t.dot(n, n)
                }),
                // softmax rows weighted sum
                Box::new(|t, l| {
                    let s = t.softmax_rows(l[0])?;
                    let w = t.mul(s, l[2])?;
                    Ok(t.sum(w))
                }),
                // logsumexp rows
                Box::new(|t, l| {
                    let lse = t.logsumexp_rows(l[0], None)?;
                    Ok(t.sum(lse))
                }),
                // masked logsumexp
                Box::new(|t, l| {
                    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
                    let lse = t.logsumexp_rows(l[0], Some(mask))?;
                    Ok(t.sum(lse))
                }),
                // pairwise distances between distinct row sets
                Box::new(|t, l| {
                    let d = t.pairwise_dist(l[0], l[4])?;
                    Ok(t.sum(d))
                }),
                // tile_rows and row_sum
                Box::new(|t, l| {
                    let tl = t.tile_rows(l[3], 3)?;
                    let w = t.mul(tl, l[0])?;
                    let rs = t.row_sum(w)?;
                    Ok(t.sum(rs))
                }),
                // concat cols and rows
                Box::new(|t, l| {
                    let cc = t.concat_cols(l[0], l[2])?;
                    let rr = t.concat_rows(l[0], l[4])?;
                    let s1 = t.logsumexp_rows(cc, None)?;
                    let s2 = t.sum(rr);
                    let s1s = t.sum(s1);
                    t.add(s1s, s2)
                }),
            ];
            let leaves = vec![a, b, c, v, m2];
            for case in &cases {
                let err = grad_check(case.as_ref(), &leaves, DEFAULT_FD_STEP).unwrap();
                assert!(err <= 1e-4, "fixture {fixture}: rel err {err}");
                if err > worst {
                    worst = err;
                }
            }
        }
        assert!(worst <= 1e-4);
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        let mut rng = crate::rng::stream(5, "linearity");
        let x = Tensor::matrix(2, 3, rand_vec(6, &mut rng)).unwrap();
        let (a, b) = (1.7, -0.6);

        let grad_of = |scale_f: f64, scale_g: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let xl = tape.leaf(x.clone());
            let f = {
                let e = tape.exp(xl);
                tape.sum(e)
            };
            let g = {
                let n = tape.normalize_rows(xl).unwrap();
                let d = tape.pairwise_dist(n, xl).unwrap();
                tape.sum(d)
            };
            let fa = tape.scale(f, scale_f);
            let gb = tape.scale(g, scale_g);
            let root = tape.add(fa, gb).unwrap();
            let grads = tape.backward(root).unwrap();
            grads.get(xl).unwrap().data().to_vec()
        };

        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combined = grad_of(a, b);
        for i in 0..gf.len() {
            let expect = a * gf[i] + b * gg[i];
            assert!((combined[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_eval_is_bit_identical_across_runs() {
        let mut rng = crate::rng::stream(8, "determinism");
        let x = Tensor::matrix(4, 5, rand_vec(20, &mut rng)).unwrap();
        let y = Tensor::matrix(5, 3, rand_vec(15, &mut rng)).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let xl = tape.leaf(x.clone());
            let yl = tape.leaf(y.clone());
            let p = tape.matmul(xl, yl).unwrap();
            let s = tape.softmax_rows(p).unwrap();
            let l = tape.logsumexp_rows(s, None).unwrap();
            let root = tape.sum(l);
            tape.value(root).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_positive() {
        for fixture in 0..50 {
            let mut rng = crate::rng::substream(21, "softmax-prop", &[fixture]);
            let x = Tensor::matrix(3, 6, rand_vec(18, &mut rng)).unwrap();
            let s = x.softmax_rows().unwrap();
            for i in 0..3 {
                let row_sum: f64 = s.row(i).iter().sum();
                assert!((row_sum - 1.0).abs() <= 1e-12);
                assert!(s.row(i).iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message was: {msg}");
    }

    #[test]
    fn ln_clamp_increments_tape_counter() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 0.0, 1e-13]));
        let _ = tape.ln(x).unwrap();
        assert_eq!(tape.ln_clamp_hits(), 2);
    }
}
