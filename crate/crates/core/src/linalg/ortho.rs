use super::matrix::{dot, Matrix};
use crate::error::{invalid_input, Result};

/// Relative column norm below which a column is treated as linearly dependent.
const RANK_TOL: f64 = 1e-10;

/// Orthonormal basis of the column space of `v` by modified Gram–Schmidt with
/// one reorthogonalization pass. Dependent (or zero) columns are dropped.
pub fn orthonormalize(v: &Matrix) -> Matrix {
    let d = v.rows();
    let scale = (0..v.cols())
        .map(|j| super::matrix::norm2(&v.col(j)))
        .fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if scale == 0.0 {
        return Matrix::zeros(d, 0);
    }
    for j in 0..v.cols() {
        let mut c = v.col(j);
        for _ in 0..2 {
            for q in &basis {
                let p = dot(q, &c);
                for (ci, qi) in c.iter_mut().zip(q) {
                    *ci -= p * qi;
                }
            }
        }
        let n = super::matrix::norm2(&c);
        if n > RANK_TOL * scale {
            c.iter_mut().for_each(|x| *x /= n);
            basis.push(c);
        }
    }
    Matrix::from_columns(d, &basis)
}

/// Singular values of `x` in descending order, by one-sided Jacobi rotations.
/// Small singular values keep high absolute accuracy.
pub fn singular_values(x: &Matrix) -> Vec<f64> {
    let a = if x.rows() >= x.cols() {
        x.clone()
    } else {
        x.transpose()
    };
    let n = a.cols();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let cp = &mut left[p];
                let cq = &mut right[0];
                for (u, w) in cp.iter_mut().zip(cq.iter_mut()) {
                    let a0 = *u;
                    let b0 = *w;
                    *u = c * a0 - s * b0;
                    *w = s * a0 + c * b0;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| super::matrix::norm2(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Principal angles (radians, ascending) between the column spans of two
/// orthonormal matrices. Cosines and sines are both computed so that small
/// and near-right angles keep full precision.
pub fn principal_angles(q1: &Matrix, q2: &Matrix) -> Result<Vec<f64>> {
    if q1.rows() != q2.rows() {
        return Err(invalid_input(format!(
            "ambient dimensions differ: {} vs {}",
            q1.rows(),
            q2.rows()
        )));
    }
    for q in [q1, q2] {
        let err = q.orthonormality_error();
        if err > 1e-8 {
            return Err(invalid_input(format!(
                "input is not orthonormal (Gram error {err:.3e})"
            )));
        }
    }
    // Put the wider basis first; the angles are those of the narrower one.
    let (wide, narrow) = if q1.cols() >= q2.cols() {
        (q1, q2)
    } else {
        (q2, q1)
    };
    let k = narrow.cols();
    if k == 0 {
        return Ok(vec![]);
    }
    let cross = wide.matmul_tn(narrow);
    let cosines = singular_values(&cross);
    let residual = narrow.sub(&wide.matmul(&cross));
    let mut sines = singular_values(&residual);
    sines.reverse();
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut angles: Vec<f64> = (0..k)
        .map(|i| {
            let c = cosines.get(i).copied().unwrap_or(0.0);
            let s = sines.get(i).copied().unwrap_or(0.0);
            s.atan2(c).clamp(0.0, half_pi)
        })
        .collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    Ok(angles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_input_is_fixed_up_to_sign() {
        let q = Matrix::from_rows(&[[0.6, 0.0], [0.8, 0.0], [0.0, 1.0]]);
        let out = orthonormalize(&q);
        assert_eq!(out.cols(), 2);
        for j in 0..2 {
            let a = q.col(j);
            let b = out.col(j);
            assert!((dot(&a, &b).abs() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_columns_collapse() {
        let v = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        let out = orthonormalize(&v);
        assert_eq!(out.shape(), (2, 1));
        assert_eq!(out.col(0), vec![1.0, 0.0]);
    }

    #[test]
    fn random_full_rank_gram_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = crate::linalg::eig::gaussian(8, 3, &mut rng);
        let q = orthonormalize(&v);
        assert_eq!(q.cols(), 3);
        assert!(q.orthonormality_error() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_empty_basis() {
        assert_eq!(orthonormalize(&Matrix::zeros(4, 3)).cols(), 0);
    }

    #[test]
    fn angle_examples() {
        let e1 = Matrix::column_vector(&[1.0, 0.0]);
        let e2 = Matrix::column_vector(&[0.0, 1.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let diag = Matrix::column_vector(&[h, h]);
        assert_eq!(principal_angles(&e1, &e1).unwrap(), vec![0.0]);
        let a = principal_angles(&e1, &e2).unwrap();
        assert!((a[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let a = principal_angles(&e1, &diag).unwrap();
        assert!((a[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn angles_reject_non_orthonormal() {
        let v = Matrix::column_vector(&[2.0, 0.0]);
        assert!(principal_angles(&v, &v).is_err());
    }

    #[test]
    fn singular_values_of_diagonal() {
        let m = Matrix::from_rows(&[[0.0, -5.0], [3.0, 0.0], [0.0, 0.0]]);
        let sv = singular_values(&m);
        assert!((sv[0] - 5.0).abs() < 1e-14 && (sv[1] - 3.0).abs() < 1e-14);
    }
}
