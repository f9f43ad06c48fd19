//! Uncentered second-moment accumulation, balanced covariance, and the
//! matrix-Bernstein concentration radii.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_shape, Error, Result};
use crate::linalg::{fix_signs, orthonormalize, sym_eig_full, EigPair, Matrix};

/// Default number of token rows per set and layer used to build covariances.
pub const DEFAULT_SAMPLE_BUDGET: usize = 512;

/// Streaming `Σ hᵢhᵢᵀ` together with the number of rows ingested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceAccumulator {
    dim: usize,
    sum_outer: Matrix,
    count: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        CovarianceAccumulator {
            dim,
            sum_outer: Matrix::zeros(dim, dim),
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sum_outer(&self) -> &Matrix {
        &self.sum_outer
    }

    /// Adds `HᵀH` for the rows of `h` (`N × d`).
    pub fn accumulate(&mut self, h: &Matrix) -> Result<()> {
        if h.cols() != self.dim {
            return Err(invalid_shape(format!(
                "rows have {} features, accumulator expects {}",
                h.cols(),
                self.dim
            )));
        }
        if h.rows() == 0 {
            return Ok(());
        }
        let d = self.dim;
        let s = self.sum_outer.data_mut();
        // Upper triangle only, mirrored afterwards, so the sum stays exactly
        // symmetric.
        for row in 0..h.rows() {
            let x = h.row(row);
            for i in 0..d {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                let out = &mut s[i * d..(i + 1) * d];
                for j in i..d {
                    out[j] += xi * x[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                s[i * d + j] = s[j * d + i];
            }
        }
        self.count += h.rows();
        Ok(())
    }

    pub fn merge(&self, other: &CovarianceAccumulator) -> Result<CovarianceAccumulator> {
        if self.dim != other.dim {
            return Err(invalid_shape(format!(
                "cannot merge accumulators of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        Ok(CovarianceAccumulator {
            dim: self.dim,
            sum_outer: self.sum_outer.add(&other.sum_outer),
            count: self.count + other.count,
        })
    }

    /// `Σ hᵢhᵢᵀ / N`.
    pub fn finalize(&self) -> Result<Matrix> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        Ok(self.sum_outer.scale(1.0 / self.count as f64).symmetrize())
    }
}

/// `(1/N) HᵀH` in one call.
pub fn second_moment(h: &Matrix) -> Result<Matrix> {
    let mut acc = CovarianceAccumulator::new(h.cols());
    acc.accumulate(h)?;
    acc.finalize()
}

/// `Cov_Δ = (1−β)·Cov_F − β·Cov_R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedCovariance {
    pub matrix: Matrix,
    pub beta: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid_input(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

pub fn balanced_cov(cov_f: &Matrix, cov_r: &Matrix, beta: f64) -> Result<BalancedCovariance> {
    check_beta(beta)?;
    if cov_f.shape() != cov_r.shape() || !cov_f.is_square() {
        return Err(invalid_shape(format!(
            "covariances must be square and equal-sized, got {:?} and {:?}",
            cov_f.shape(),
            cov_r.shape()
        )));
    }
    let matrix = cov_f.zip_map(cov_r, |f, r| (1.0 - beta) * f - beta * r);
    Ok(BalancedCovariance { matrix, beta })
}

fn check_bound_args(m: f64, d: usize, n: usize, delta: f64) -> Result<()> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(invalid_input(format!("M must be positive, got {m}")));
    }
    if d == 0 {
        return Err(invalid_input("d must be at least 1"));
    }
    if n == 0 {
        return Err(invalid_input("N must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid_input(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

fn bernstein_radius(m: f64, n: usize, log_term: f64) -> f64 {
    let n = n as f64;
    4.0 * m * m * log_term / (3.0 * n) + m * m * (2.0 * log_term / n).sqrt()
}

/// Radius `4M²L/(3N) + M²√(2L/N)` with `L = ln(2d/δ)` that bounds
/// `‖Σ̂ − Σ‖₂` with probability at least `1 − δ` for `‖h‖₂ ≤ M`.
pub fn concentration_bound(m: f64, d: usize, n: usize, delta: f64) -> Result<f64> {
    check_bound_args(m, d, n, delta)?;
    Ok(bernstein_radius(m, n, (2.0 * d as f64 / delta).ln()))
}

/// Per-set radius with the union-bound split, `L = ln(4d/δ)`.
pub fn split_radius(m: f64, d: usize, n: usize, delta: f64) -> Result<f64> {
    check_bound_args(m, d, n, delta)?;
    Ok(bernstein_radius(m, n, (4.0 * d as f64 / delta).ln()))
}

/// `(1−β)ε_f + β·ε_r`, bounding `‖Ĉov_Δ − Cov_Δ‖₂` with probability `1 − δ`.
pub fn balanced_bound(m: f64, d: usize, n_f: usize, n_r: usize, delta: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let ef = split_radius(m, d, n_f, delta)?;
    let er = split_radius(m, d, n_r, delta)?;
    Ok((1.0 - beta) * ef + beta * er)
}

/// Top-`r` eigenpairs of `(1−β)·H_fᵀH_f/N_f − β·H_rᵀH_r/N_r` without forming
/// the `d × d` matrix. The balanced covariance lives in the row space of the
/// stacked samples, so it is compressed onto an orthonormal basis `Q` of that
/// space (`m ≤ N_f + N_r` columns), diagonalized there, and mapped back.
/// Directions outside the row space carry eigenvalue zero and are filled in
/// from the orthogonal complement when the requested pairs reach them.
pub fn balanced_top_eigs_gram(h_f: &Matrix, h_r: &Matrix, beta: f64, r: usize) -> Result<EigPair> {
    check_beta(beta)?;
    let d = h_f.cols();
    if h_r.cols() != d {
        return Err(invalid_shape(format!(
            "forget rows have {d} features, retain rows have {}",
            h_r.cols()
        )));
    }
    if h_f.rows() == 0 || h_r.rows() == 0 {
        return Err(Error::EmptyAccumulator);
    }
    if r == 0 || r > d {
        return Err(invalid_input(format!("r = {r} must lie in 1..={d}")));
    }
    let stacked = Matrix::vstack(&[h_f, h_r]);
    let q = orthonormalize(&stacked.transpose());
    let m = q.cols();
    let cf = (1.0 - beta) / h_f.rows() as f64;
    let cr = -beta / h_r.rows() as f64;
    let hq = stacked.matmul(&q);
    let mut weighted = hq.clone();
    for i in 0..weighted.rows() {
        let c = if i < h_f.rows() { cf } else { cr };
        weighted.row_mut(i).iter_mut().for_each(|v| *v *= c);
    }
    let small = sym_eig_full(&hq.matmul_tn(&weighted).symmetrize())?;
    let lifted = q.matmul(&small.vectors);

    // Merge the compressed spectrum with the zero eigenvalues of the
    // complement, keeping algebraic order.
    let n_pos = small.values.iter().take_while(|&&v| v >= 0.0).count();
    let mut values = Vec::with_capacity(r);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut take = 0;
    while values.len() < r && take < n_pos {
        values.push(small.values[take]);
        cols.push(lifted.col(take));
        take += 1;
    }
    if values.len() < r && m < d {
        let complement = orthogonal_complement(&q);
        let mut c = 0;
        while values.len() < r && c < complement.cols() {
            values.push(0.0);
            cols.push(complement.col(c));
            c += 1;
        }
    }
    while values.len() < r {
        values.push(small.values[take]);
        cols.push(lifted.col(take));
        take += 1;
    }
    let mut vectors = Matrix::from_columns(d, &cols);
    fix_signs(&mut vectors);
    Ok(EigPair { values, vectors })
}

/// Orthonormal basis of the complement of `span(q)`.
fn orthogonal_complement(q: &Matrix) -> Matrix {
    let d = q.rows();
    let full = orthonormalize(&Matrix::hstack(&[q, &Matrix::identity(d)]));
    full.columns(q.cols(), full.cols())
}
