use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::ortho::orthonormalize;
use super::spectral_norm;
use crate::error::{invalid_input, Error, Result};

/// Relative asymmetry tolerated before an input is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub const DEFAULT_OVERSAMPLE: usize = 8;
pub const DEFAULT_POWER_ITERS: usize = 2;

/// Eigenvalues in non-increasing order with matching orthonormal eigenvectors
/// stored as columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigPair {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigPair {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Keeps the leading `r` pairs.
    pub fn truncate(self, r: usize) -> EigPair {
        let r = r.min(self.values.len());
        EigPair {
            values: self.values[..r].to_vec(),
            vectors: self.vectors.columns(0, r),
        }
    }

    /// `max_i ‖M q_i − λ_i q_i‖₂`.
    pub fn max_residual(&self, m: &Matrix) -> f64 {
        let mq = m.matmul(&self.vectors);
        let mut worst: f64 = 0.0;
        for (j, &lam) in self.values.iter().enumerate() {
            let mut s = 0.0;
            for i in 0..m.rows() {
                let d = mq[(i, j)] - lam * self.vectors[(i, j)];
                s += d * d;
            }
            worst = worst.max(s.sqrt());
        }
        worst
    }
}

pub(crate) fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(invalid_input(format!(
            "expected a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(invalid_input("matrix has non-finite entries"));
    }
    let scale = m.max_abs().max(1.0);
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(invalid_input(format!(
            "matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

/// Full eigendecomposition of a symmetric matrix (Householder
/// tridiagonalization followed by implicit QL), sorted descending.
pub fn sym_eig_full(m: &Matrix) -> Result<EigPair> {
    check_symmetric(m)?;
    let n = m.rows();
    if n == 0 {
        return Ok(EigPair {
            values: vec![],
            vectors: Matrix::zeros(0, 0),
        });
    }
    let mut v = m.symmetrize();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    tridiagonal_ql(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, dst)] = v[(i, src)];
        }
    }
    fix_signs(&mut vectors);
    Ok(EigPair { values, vectors })
}

/// The `r` algebraically largest eigenpairs of the symmetrized input.
pub fn sym_eig_topk(m: &Matrix, r: usize) -> Result<EigPair> {
    if r == 0 {
        return Err(invalid_input("r must be at least 1"));
    }
    if r > m.rows() {
        return Err(invalid_input(format!(
            "r = {r} exceeds dimension {}",
            m.rows()
        )));
    }
    Ok(sym_eig_full(m)?.truncate(r))
}

/// Approximate top-`r` eigenpairs through a Gaussian range finder with
/// power iterations and a Rayleigh–Ritz projection.
///
/// Only matrix–block products with `M` are used. When `M` has negative
/// eigenvalues the range finder runs on `M + cI` with `c` an estimate of
/// `−λ_min`, so that algebraic order matches magnitude order.
pub fn randomized_eig_topk(
    m: &Matrix,
    r: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<EigPair> {
    check_symmetric(m)?;
    let d = m.rows();
    if r == 0 {
        return Err(invalid_input("r must be at least 1"));
    }
    let l = r + oversample;
    if l > d {
        return Err(invalid_input(format!(
            "r + oversample = {l} exceeds dimension {d}"
        )));
    }
    let m = m.symmetrize();
    let shift = negative_shift(&m);
    let apply = |x: &Matrix| -> Matrix {
        let mut y = m.matmul(x);
        if shift > 0.0 {
            y.axpy(shift, x);
        }
        y
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = gaussian(d, l, &mut rng);
    let mut q = complete_basis(orthonormalize(&apply(&omega)), l, &mut rng);
    for _ in 0..power_iters {
        q = complete_basis(orthonormalize(&apply(&q)), l, &mut rng);
    }

    let projected = q.matmul_tn(&m.matmul(&q)).symmetrize();
    let small = sym_eig_full(&projected)?;
    let mut vectors = q.matmul(&small.vectors.columns(0, r));
    fix_signs(&mut vectors);
    Ok(EigPair {
        values: small.values[..r].to_vec(),
        vectors,
    })
}

/// Sign convention: the largest-magnitude component of each column is made
/// non-negative (first index wins ties).
pub fn fix_signs(vectors: &mut Matrix) {
    for j in 0..vectors.cols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..vectors.rows() {
            let a = vectors[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if vectors.rows() > 0 && vectors[(best, j)] < 0.0 {
            for i in 0..vectors.rows() {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
}

/// `rows × cols` matrix of i.i.d. standard normal entries.
pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Pads an orthonormal basis with random orthonormal directions until it has
/// `want` columns.
fn complete_basis(q: Matrix, want: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut q = q;
    while q.cols() < want {
        let extra = gaussian(q.rows(), want - q.cols(), rng);
        q = orthonormalize(&Matrix::hstack(&[&q, &extra]));
    }
    q.columns(0, want)
}

/// Amount by which the spectrum must be lifted to become non-negative,
/// estimated with power iterations (zero for PSD inputs).
fn negative_shift(m: &Matrix) -> f64 {
    let norm = spectral_norm(m);
    if norm == 0.0 {
        return 0.0;
    }
    let d = m.rows();
    // Power iteration on normI − M, whose top eigenvalue is norm − λ_min.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let mut rq = 0.0;
    for _ in 0..200 {
        let nv = super::matrix::norm2(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mv = m.mat_vec(&v);
        let w: Vec<f64> = v.iter().zip(&mv).map(|(a, b)| norm * a - b).collect();
        let next = super::matrix::dot(&v, &w);
        let done = (next - rq).abs() <= 1e-10 * norm;
        rq = next;
        v = w;
        if done {
            break;
        }
    }
    let lambda_min = norm - rq;
    if lambda_min < -1e-12 * norm {
        -lambda_min
    } else {
        0.0
    }
}

/// Householder reduction of the symmetric matrix held in `v` to tridiagonal
/// form. On exit `d` holds the diagonal, `e` the sub-diagonal (in `e[1..]`)
/// and `v` the accumulated orthogonal transformation.
fn tridiagonalize(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL iterations on the tridiagonal matrix `(d, e)`, accumulating
/// rotations into `v`.
fn tridiagonal_ql(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 60 {
                    return Err(Error::Numeric {
                        op: "sym_eig".into(),
                        detail: format!("QL iteration did not converge at index {l}"),
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[(k, i + 1)];
                        v[(k, i + 1)] = s * v[(k, i)] + c * h;
                        v[(k, i)] = c * v[(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::principal_angles;

    fn random_symmetric(d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian(d, d, &mut rng).symmetrize()
    }

    /// Symmetric matrix with a prescribed spectrum in a random basis.
    fn with_spectrum(values: &[f64], seed: u64) -> Matrix {
        let d = values.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = orthonormalize(&gaussian(d, d, &mut rng));
        let scaled = Matrix::from_fn(d, d, |i, j| q[(i, j)] * values[j]);
        scaled.matmul_nt(&q).symmetrize()
    }

    #[test]
    fn identity_eigs() {
        let e = sym_eig_topk(&Matrix::identity(3), 3).unwrap();
        for v in &e.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
        assert!(e.vectors.orthonormality_error() < 1e-12);
    }

    #[test]
    fn diagonal_eigs() {
        let e = sym_eig_topk(&Matrix::from_diag(&[3.0, 2.0, 1.0]), 2).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 2.0).abs() < 1e-14);
        assert!((e.vectors[(0, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((e.vectors[(1, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn two_by_two_closed_form() {
        // [[2,1],[1,2]] has eigenvalues 2 ± 1 with eigenvectors (1, ±1)/√2.
        let m = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        let e = sym_eig_topk(&m, 2).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[(0, 0)].abs() - h).abs() < 1e-14);
        assert!((e.vectors[(0, 0)] - e.vectors[(1, 0)]).abs() < 1e-14);
        assert!((e.vectors[(0, 1)] + e.vectors[(1, 1)]).abs() < 1e-14);
    }

    #[test]
    fn residuals_and_orthonormality_on_random_inputs() {
        for seed in 0..10 {
            let m = random_symmetric(17, seed);
            let e = sym_eig_full(&m).unwrap();
            let norm = spectral_norm(&m);
            assert!(e.max_residual(&m) <= 1e-8 * (1.0 + norm));
            assert!(e.vectors.orthonormality_error() < 1e-10);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention_is_applied() {
        let e = sym_eig_full(&random_symmetric(9, 3)).unwrap();
        for j in 0..9 {
            let col = e.vectors.col(j);
            let (imax, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b });
            assert!(col[imax] >= 0.0);
        }
    }

    #[test]
    fn rejects_asymmetric_and_nonfinite() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(matches!(sym_eig_topk(&m, 1), Err(Error::InvalidInput(_))));
        let m = Matrix::from_rows(&[[f64::NAN, 0.0], [0.0, 1.0]]);
        assert!(matches!(sym_eig_topk(&m, 1), Err(Error::InvalidInput(_))));
        assert!(sym_eig_topk(&Matrix::identity(2), 0).is_err());
    }

    #[test]
    fn randomized_zero_matrix() {
        let e = randomized_eig_topk(&Matrix::zeros(6, 6), 2, 2, 2, 1).unwrap();
        assert_eq!(e.values.len(), 2);
        assert!(e.values.iter().all(|v| v.abs() < 1e-15));
        assert!(e.vectors.orthonormality_error() < 1e-12);
    }

    #[test]
    fn randomized_exact_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = gaussian(8, 2, &mut rng);
        let m = u.matmul_nt(&u);
        let e = randomized_eig_topk(&m, 2, 2, 2, 5).unwrap();
        assert!(e.max_residual(&m) <= 1e-8);
        let exact = sym_eig_topk(&m, 2).unwrap();
        for (a, b) in e.values.iter().zip(&exact.values) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn randomized_matches_exact_subspace_with_gap() {
        let values: Vec<f64> = (0..64).map(|i| 0.5f64.powi(i)).collect();
        let m = with_spectrum(&values, 21);
        let approx = randomized_eig_topk(&m, 4, DEFAULT_OVERSAMPLE, 2, 3).unwrap();
        let exact = sym_eig_topk(&m, 4).unwrap();
        let angles = principal_angles(&approx.vectors, &exact.vectors).unwrap();
        assert!(angles.iter().cloned().fold(0.0, f64::max) <= 1e-6);
    }

    #[test]
    fn randomized_handles_indefinite_spectrum() {
        // Large negative eigenvalues must not crowd out the algebraic top.
        let mut values: Vec<f64> = vec![4.0, 3.0, 0.1, 0.05];
        values.extend([-50.0, -40.0, -30.0, -20.0, -10.0, -5.0, -1.0, -0.5]);
        let m = with_spectrum(&values, 8);
        let approx = randomized_eig_topk(&m, 2, 8, 4, 9).unwrap();
        assert!((approx.values[0] - 4.0).abs() < 1e-4, "{:?}", approx.values);
        assert!((approx.values[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn randomized_is_deterministic_per_seed() {
        let m = random_symmetric(20, 4);
        let a = randomized_eig_topk(&m, 3, 4, 2, 77).unwrap();
        let b = randomized_eig_topk(&m, 3, 4, 2, 77).unwrap();
        assert_eq!(a, b);
    }
}
