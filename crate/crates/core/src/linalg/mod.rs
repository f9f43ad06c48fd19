//! Dense real linear algebra: symmetric eigensolvers (exact and randomized),
//! orthonormalization, principal angles and norms.

mod eig;
mod matrix;
mod ortho;

pub use eig::{
    fix_signs, randomized_eig_topk, sym_eig_full, sym_eig_topk, EigPair, DEFAULT_OVERSAMPLE,
    DEFAULT_POWER_ITERS, SYMMETRY_TOL,
};
pub use eig::gaussian;
pub use matrix::{dot, norm2, Matrix};
pub use ortho::{orthonormalize, principal_angles, singular_values};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() || m.max_abs() == 0.0 {
        return 0.0;
    }
    let n = m.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut sigma_sq = 0.0;
    for _ in 0..20_000 {
        let nv = norm2(&v);
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let mv = m.mat_vec(&v);
        let next = dot(&mv, &mv);
        // Mᵀ(Mv)
        let mut w = vec![0.0; n];
        for (i, &s) in mv.iter().enumerate() {
            for (wj, &a) in w.iter_mut().zip(m.row(i)) {
                *wj += a * s;
            }
        }
        let converged = (next - sigma_sq).abs() <= 1e-15 * next;
        sigma_sq = next;
        v = w;
        if converged {
            break;
        }
    }
    sigma_sq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_examples() {
        assert_eq!(spectral_norm(&Matrix::zeros(3, 3)), 0.0);
        let d = Matrix::from_diag(&[3.0, -5.0]);
        assert!((spectral_norm(&d) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_matches_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let m = gaussian(10, 10, &mut rng);
            let ata = m.matmul_tn(&m).symmetrize();
            let top = sym_eig_topk(&ata, 1).unwrap().values[0].sqrt();
            let est = spectral_norm(&m);
            assert!((est - top).abs() <= 1e-6 * top, "{est} vs {top}");
        }
    }
}
