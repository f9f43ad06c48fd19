//! Balanced-covariance adapter initialization, retain subspaces and
//! eigengap reporting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::BalancedCovariance;
use crate::error::{invalid_input, invalid_shape, Result};
use crate::linalg::{
    gaussian, orthonormalize, randomized_eig_topk, sym_eig_full, sym_eig_topk, EigPair, Matrix,
    DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS,
};
use crate::lora::LoraLinear;
use crate::model::LayerId;

/// Default retain-subspace dimension at `d_out ∈ {64, 128}`.
pub const DEFAULT_K: usize = 16;

/// Layers up to this output dimension use the exact eigensolver under
/// [`EigSolver::Auto`].
pub const EXACT_SOLVER_MAX_DIM: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigSolver {
    #[default]
    Auto,
    Exact,
    Randomized,
}

impl EigSolver {
    /// Top `n` eigenpairs of `m` with the chosen method.
    pub fn top(self, m: &Matrix, n: usize, seed: u64) -> Result<EigPair> {
        let d = m.rows();
        let randomized = match self {
            EigSolver::Exact => false,
            EigSolver::Randomized => true,
            EigSolver::Auto => d > EXACT_SOLVER_MAX_DIM,
        };
        if randomized && n + DEFAULT_OVERSAMPLE <= d {
            randomized_eig_topk(m, n, DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS, seed)
        } else {
            sym_eig_topk(m, n)
        }
    }
}

/// Fixed orthonormal basis `P_B` (`d_out × k`) of the leading retain
/// representation directions of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainSubspace {
    pub basis: Matrix,
    pub k: usize,
    pub layer: Option<LayerId>,
}

impl RetainSubspace {
    /// `I − P_B P_Bᵀ` applied to `v`.
    pub fn residual(&self, v: &[f64]) -> Vec<f64> {
        let coeffs = self.basis.transpose().mat_vec(v);
        let proj = self.basis.mat_vec(&coeffs);
        v.iter().zip(&proj).map(|(a, b)| a - b).collect()
    }
}

/// `P_B` = top-`k` eigenvectors of `cov_r`.
pub fn retain_subspace(cov_r: &Matrix, k: usize) -> Result<RetainSubspace> {
    retain_subspace_with(cov_r, k, EigSolver::Exact, 0)
}

pub fn retain_subspace_with(cov_r: &Matrix, k: usize, solver: EigSolver, seed: u64) -> Result<RetainSubspace> {
    if k == 0 || k > cov_r.rows() {
        return Err(invalid_input(format!(
            "k = {k} must lie in 1..={}",
            cov_r.rows()
        )));
    }
    let eig = solver.top(cov_r, k, seed)?;
    Ok(RetainSubspace {
        basis: eig.vectors,
        k,
        layer: None,
    })
}

/// `λ_r − λ_{r+1}` of `cov_delta`.
pub fn eigengap(cov_delta: &Matrix, r: usize) -> Result<f64> {
    if r == 0 || r + 1 > cov_delta.rows() {
        return Err(invalid_input(format!(
            "eigengap needs 1 ≤ r < d, got r = {r}, d = {}",
            cov_delta.rows()
        )));
    }
    let eig = sym_eig_full(cov_delta)?;
    Ok((eig.values[r - 1] - eig.values[r]).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInit {
    pub layer: Option<LayerId>,
    /// Top-`r` eigenvalues of `Cov_Δ`.
    pub eigenvalues: Vec<f64>,
    /// `λ_r − λ_{r+1}`, absent when `r = d_out`.
    pub eigengap: Option<f64>,
    /// `max |W₀ − (W_res + s·B·A)|`.
    pub residual: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub layers: Vec<LayerInit>,
}

impl InitReport {
    pub fn max_residual(&self) -> f64 {
        self.layers.iter().map(|l| l.residual).fold(0.0, f64::max)
    }
}

/// Sets `B = Q_r`, `A = Q_rᵀW₀` and `W_res = W₀ − s·B·A`, where `Q_r` holds
/// the top-`r` eigenvectors of `Cov_Δ` and `W₀` is the layer's current
/// effective weight. The layer's function is unchanged.
pub fn rila_init(
    layer: &mut LoraLinear,
    cov_delta: &BalancedCovariance,
    solver: EigSolver,
    seed: u64,
) -> Result<LayerInit> {
    let d_out = layer.d_out();
    if cov_delta.matrix.rows() != d_out {
        return Err(invalid_shape(format!(
            "balanced covariance has dimension {}, layer output is {d_out}",
            cov_delta.matrix.rows()
        )));
    }
    let r = layer.rank;
    let want = (r + 1).min(d_out);
    let eig = solver.top(&cov_delta.matrix, want, seed)?;
    let eigengap = (want > r).then(|| (eig.values[r - 1] - eig.values[r]).max(0.0));
    let q = eig.vectors.columns(0, r);
    let w0 = original_weight(layer);
    set_subspace(layer, &q);
    Ok(LayerInit {
        layer: None,
        eigenvalues: eig.values[..r].to_vec(),
        eigengap,
        residual: w0.max_abs_diff(&original_weight(layer)),
    })
}

/// The layer's effective weight `W_res + s·B·A`.
fn original_weight(layer: &LoraLinear) -> Matrix {
    layer.w_res.value.add(&layer.effective_delta())
}

/// Re-parameterizes `layer` around the orthonormal basis `q` (`d_out × r`):
/// `B = q`, `A = qᵀW₀`, `W_res = W₀ − s·B·A`.
pub fn set_subspace(layer: &mut LoraLinear, q: &Matrix) {
    let w0 = original_weight(layer);
    let a = q.matmul_tn(&w0);
    let delta = q.matmul(&a).scale(layer.scale());
    layer.b.value = q.clone();
    layer.a.value = a;
    layer.w_res.value = w0.sub(&delta);
}

/// Random orthonormal `d × r` basis.
pub fn random_orthonormal(d: usize, r: usize, rng: &mut ChaCha8Rng) -> Matrix {
    loop {
        let q = orthonormalize(&gaussian(d, r, rng));
        if q.cols() == r {
            return q;
        }
    }
}

/// `(1−β)·mean_f ‖ΔW x‖² − β·mean_r ‖ΔW x‖²` over the rows of `x_f`, `x_r`.
pub fn differential_energy(delta: &Matrix, x_f: &Matrix, x_r: &Matrix, beta: f64) -> Result<f64> {
    let ef = mean_sq_norm(delta, x_f)?;
    let er = mean_sq_norm(delta, x_r)?;
    Ok((1.0 - beta) * ef - beta * er)
}

/// `mean_i ‖ΔW xᵢ‖²` over the rows of `x`.
pub fn mean_sq_norm(delta: &Matrix, x: &Matrix) -> Result<f64> {
    if x.rows() == 0 {
        return Err(invalid_input("no input rows"));
    }
    if x.cols() != delta.cols() {
        return Err(invalid_shape(format!(
            "inputs have {} features, delta expects {}",
            x.cols(),
            delta.cols()
        )));
    }
    Ok(x.matmul_nt(delta).frobenius_sq() / x.rows() as f64)
}

/// `ΔW = Q Qᵀ W₀` — the unscaled delta of an initialization spanned by `q`.
pub fn subspace_delta(q: &Matrix, w0: &Matrix) -> Matrix {
    q.matmul(&q.matmul_tn(w0))
}

/// Seeded RNG for random-subspace baselines.
pub fn baseline_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::covariance::{balanced_cov, second_moment};
    use rand::Rng;

    fn layer(w0: Matrix, rank: usize, alpha: f64) -> LoraLinear {
        let (o, i) = w0.shape();
        LoraLinear {
            w_res: Tensor::frozen(w0),
            a: Tensor::trainable(Matrix::zeros(rank, i)),
            b: Tensor::trainable(Matrix::zeros(o, rank)),
            rank,
            alpha,
        }
    }

    fn cov(diag: &[f64]) -> BalancedCovariance {
        BalancedCovariance {
            matrix: Matrix::from_diag(diag),
            beta: 0.0,
        }
    }

    #[test]
    fn axis_aligned_unit_scale() {
        let mut l = layer(Matrix::identity(2), 1, 1.0);
        let rep = rila_init(&mut l, &cov(&[3.0, 1.0]), EigSolver::Exact, 0).unwrap();
        assert_eq!(l.b.value, Matrix::column_vector(&[1.0, 0.0]));
        assert_eq!(l.a.value, Matrix::row_vector(&[1.0, 0.0]));
        assert_eq!(l.w_res.value, Matrix::from_diag(&[0.0, 1.0]));
        assert_eq!(rep.eigengap, Some(2.0));
        assert_eq!(rep.residual, 0.0);
    }

    #[test]
    fn axis_aligned_scale_two() {
        let mut l = layer(Matrix::identity(2), 1, 2.0);
        rila_init(&mut l, &cov(&[3.0, 1.0]), EigSolver::Exact, 0).unwrap();
        assert_eq!(l.w_res.value, Matrix::from_diag(&[-1.0, 1.0]));
        let x = Matrix::from_rows(&[[0.3, -2.0], [1.0, 1.0]]);
        assert_eq!(l.forward(&x).unwrap(), x);
    }

    #[test]
    fn init_preserves_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0 = gaussian(6, 5, &mut rng);
        let mut l = layer(w0.clone(), 3, 6.0);
        let h = gaussian(20, 6, &mut rng);
        let c = balanced_cov(&second_moment(&h).unwrap(), &Matrix::identity(6), 0.4).unwrap();
        let rep = rila_init(&mut l, &c, EigSolver::Exact, 0).unwrap();
        assert!(rep.residual <= 1e-10);
        assert!(l.b.value.orthonormality_error() <= 1e-10);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = l.forward_vec(&x).unwrap();
            let direct = w0.mat_vec(&x);
            for (a, b) in y.iter().zip(&direct) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
        let mut wrong = layer(gaussian(4, 5, &mut rng), 2, 4.0);
        assert!(rila_init(&mut wrong, &c, EigSolver::Exact, 0).is_err());
    }

    #[test]
    fn retain_subspace_examples() {
        let s = retain_subspace(&Matrix::from_diag(&[5.0, 3.0, 1.0]), 2).unwrap();
        assert_eq!(s.basis, Matrix::from_columns(3, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]));
        assert!(retain_subspace(&Matrix::identity(3), 4).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = second_moment(&gaussian(30, 8, &mut rng)).unwrap();
        let s = retain_subspace(&c, 3).unwrap();
        assert!(s.basis.orthonormality_error() <= 1e-10);
        let energy = s.basis.matmul_nt(&s.basis).matmul(&c).trace();
        let top: f64 = sym_eig_full(&c).unwrap().values[..3].iter().sum();
        assert!((energy - top).abs() <= 1e-9);

        let full = retain_subspace(&c, 8).unwrap();
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(full.residual(&v).iter().all(|x| x.abs() <= 1e-10));
    }

    #[test]
    fn eigengap_examples() {
        assert!((eigengap(&Matrix::from_diag(&[3.0, 2.0, 1.0]), 2).unwrap() - 1.0).abs() < 1e-12);
        assert!(eigengap(&Matrix::from_diag(&[3.0, 2.0, 2.0]), 2).unwrap().abs() <= 1e-12);
        assert!(eigengap(&Matrix::identity(2), 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = gaussian(8, 8, &mut rng).symmetrize();
        let vals = sym_eig_full(&m).unwrap().values;
        for r in 1..8 {
            assert!((eigengap(&m, r).unwrap() - (vals[r - 1] - vals[r])).abs() <= 1e-10);
        }
    }

    #[test]
    fn randomized_solver_choice_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_orthonormal(24, 24, &mut rng);
        let spectrum: Vec<f64> = (0..24).map(|i| 0.5f64.powi(i)).collect();
        let c = q.matmul(&Matrix::from_diag(&spectrum)).matmul_nt(&q).symmetrize();
        let exact = EigSolver::Exact.top(&c, 4, 0).unwrap();
        let rand = EigSolver::Randomized.top(&c, 4, 0).unwrap();
        for i in 0..4 {
            assert!((exact.values[i] - rand.values[i]).abs() <= 1e-8);
        }
    }
}
