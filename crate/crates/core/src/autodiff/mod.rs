//! Reverse-mode automatic differentiation over rank-2 tensors, plus the
//! AdamW optimizer used for every training loop.

pub mod gradcheck;
mod optim;
mod tape;

pub use optim::{AdamW, AdamWConfig};
pub use tape::{backward, zero_grads, Gradients, Tape, Tensor, Var, MASK_VALUE};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn grad_error(build: &Build, inputs: &[Matrix]) -> f64 {
        gradcheck::grad_error(build, inputs, gradcheck::FD_STEP).unwrap()
    }

    fn check(build: &Build, shapes: &[(usize, usize)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let inputs: Vec<Matrix> = shapes.iter().map(|&(r, c)| random(r, c, &mut rng)).collect();
            let err = grad_error(build, &inputs);
            assert!(err <= 1e-5, "gradient error {err:.3e}");
        }
    }

    /// Contracts a tensor to a scalar with fixed non-uniform weights so that
    /// every output entry influences the loss differently.
    fn weighted_sum(t: &mut Tape, v: Var) -> Result<Var> {
        let (r, c) = t.value(v).shape();
        let w = t.constant(Matrix::from_fn(r, c, |i, j| 0.3 + 0.1 * i as f64 - 0.07 * j as f64));
        let p = t.mul(v, w)?;
        t.sum(p)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let m = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        let i = t.constant(Matrix::identity(3));
        let mv = t.constant(m.clone());
        let out = t.matmul(i, mv).unwrap();
        assert_eq!(t.value(out), &m);
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t.constant(random(4, 7, &mut rng).scale(10.0));
        let s = t.softmax(x).unwrap();
        for i in 0..4 {
            let sum: f64 = t.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(crate::Error::InvalidShape(_))));
        let c = t.constant(Matrix::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(crate::Error::InvalidShape(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::scalar(1e300));
        let err = t.mul(a, a).unwrap_err();
        match err {
            crate::Error::Numeric { op, .. } => assert_eq!(op, "multiply"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quadratic_and_disconnected_grads() {
        let mut t = Tape::new();
        let xv = Matrix::row_vector(&[1.0, -2.0, 0.5]);
        let x = t.leaf(xv.clone(), true);
        let y = t.leaf(Matrix::row_vector(&[4.0]), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &xv.scale(2.0));
        assert!(g.wrt(y).is_none());

        let mut tx = Tensor::trainable(xv.clone());
        let mut ty = Tensor::trainable(Matrix::row_vector(&[4.0]));
        backward(&t, loss, &mut [(x, &mut tx), (y, &mut ty)]).unwrap();
        assert_eq!(ty.grad.unwrap(), Matrix::row_vector(&[0.0]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2), true);
        assert!(matches!(t.backward(x), Err(crate::Error::InvalidInput(_))));
        let mut other = Tape::new();
        let v = other.leaf(Matrix::scalar(1.0), true);
        assert!(Tape::new().backward(v).is_err());
    }

    #[test]
    fn grads_accumulate_and_zero() {
        let xv = Matrix::row_vector(&[0.3, -0.7]);
        let mut p = Tensor::trainable(xv.clone());
        let run = |p: &mut Tensor| {
            let mut t = Tape::new();
            let x = t.param(p);
            let s = t.silu(x).unwrap();
            let l = t.frobenius_sq(s).unwrap();
            backward(&t, l, &mut [(x, p)]).unwrap();
        };
        run(&mut p);
        let single = p.grad.clone().unwrap();
        run(&mut p);
        assert!(p.grad.as_ref().unwrap().max_abs_diff(&single.scale(2.0)) < 1e-15);
        zero_grads([&mut p]);
        zero_grads([&mut p]);
        assert!(p.grad.is_none());
        assert_eq!(p.grad_or_zeros(), Matrix::zeros(1, 2));
        run(&mut p);
        assert!(p.grad.as_ref().unwrap().max_abs_diff(&single) <= 1e-12);
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut frozen = Tensor::frozen(Matrix::row_vector(&[1.0, 2.0]));
        let mut t = Tape::new();
        let x = t.param(&frozen);
        let w = t.leaf(Matrix::row_vector(&[3.0, 4.0]), true);
        let p = t.mul(x, w).unwrap();
        let l = t.sum(p).unwrap();
        backward(&t, l, &mut [(x, &mut frozen)]).unwrap();
        assert!(frozen.grad.is_none());
    }

    #[test]
    fn gradcheck_matmul() {
        check(
            &|t, v| {
                let p = t.matmul(v[0], v[1])?;
                weighted_sum(t, p)
            },
            &[(2, 3), (3, 2)],
        );
    }

    #[test]
    fn gradcheck_add_mul_broadcast() {
        check(
            &|t, v| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(a, v[2])?;
                let m = t.mul(m, v[0])?;
                weighted_sum(t, m)
            },
            &[(3, 4), (1, 4), (1, 4)],
        );
    }

    #[test]
    fn gradcheck_scale_transpose_frob() {
        check(
            &|t, v| {
                let s = t.scale(v[0], -1.7)?;
                let tr = t.transpose(s)?;
                let p = t.matmul(tr, v[1])?;
                t.frobenius_sq(p)
            },
            &[(3, 2), (3, 4)],
        );
    }

    #[test]
    fn gradcheck_softmax_and_log_softmax() {
        check(
            &|t, v| {
                let s = t.softmax(v[0])?;
                weighted_sum(t, s)
            },
            &[(3, 5)],
        );
        check(
            &|t, v| {
                let s = t.log_softmax(v[0])?;
                weighted_sum(t, s)
            },
            &[(3, 5)],
        );
    }

    #[test]
    fn gradcheck_gather_rms_silu() {
        check(
            &|t, v| {
                let g = t.gather(v[0], &[2, 0, 2, 1])?;
                let n = t.rms_norm(g)?;
                let s = t.silu(n)?;
                weighted_sum(t, s)
            },
            &[(3, 4)],
        );
    }

    #[test]
    fn gradcheck_max_excluding() {
        check(
            &|t, v| {
                let m = t.max_excluding(v[0], &[0, 3, 1])?;
                weighted_sum(t, m)
            },
            &[(3, 5)],
        );
    }

    #[test]
    fn max_excluding_breaks_ties_low() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[5.0, 1.0, 1.0, 0.0]]), true);
        let m = t.max_excluding(x, &[0]).unwrap();
        assert_eq!(t.value(m).item(), 1.0);
        let l = t.sum(m).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().row(0), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gradcheck_mask_concat_slice_mean() {
        check(
            &|t, v| {
                let sc = t.matmul_nt_helper(v[0], v[1])?;
                let m = t.causal_mask(sc)?;
                let p = t.softmax(m)?;
                let left = t.slice(p, 0, 2)?;
                let right = t.slice(p, 2, 4)?;
                let c = t.concat(&[right, left, v[2]])?;
                let w = weighted_sum(t, c)?;
                let mean = t.mean(v[2])?;
                t.add(w, mean)
            },
            &[(4, 3), (4, 3), (4, 2)],
        );
    }

    #[test]
    fn causal_mask_zeroes_future_attention() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_fn(3, 3, |i, j| (i + j) as f64));
        let m = t.causal_mask(x).unwrap();
        let p = t.softmax(m).unwrap();
        assert_eq!(t.value(p)[(0, 1)], 0.0);
        assert_eq!(t.value(p)[(0, 0)], 1.0);
    }

    impl Tape {
        fn matmul_nt_helper(&mut self, a: Var, b: Var) -> Result<Var> {
            let bt = self.transpose(b)?;
            self.matmul(a, bt)
        }
    }
}
