//! Low-rank adapters `W_res + s·B·A` for the target projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{invalid_input, invalid_shape, Result};
use crate::linalg::Matrix;
use crate::model::{Linear, TinyLm};

/// Adapted projection. `W_res` is frozen; `A` (`r × d_in`) and `B`
/// (`d_out × r`) are trainable; the delta is scaled by `alpha / rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    pub w_res: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraLinear {
    /// Adapter with `B = 0` and `A` drawn uniformly from `±1/√d_in`, so the
    /// layer initially computes exactly `w0·x`.
    pub fn standard(w0: &Matrix, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(invalid_input(format!(
                "rank {rank} must lie in 1..={} for a {d_out}x{d_in} layer",
                d_out.min(d_in)
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = Matrix::from_fn(rank, d_in, |_, _| rng.gen_range(-bound..bound));
        Ok(LoraLinear {
            w_res: Tensor::frozen(w0.clone()),
            a: Tensor::trainable(a),
            b: Tensor::trainable(Matrix::zeros(d_out, rank)),
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.w_res.value.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_res.value.rows()
    }

    /// `s·B·A`.
    pub fn effective_delta(&self) -> Matrix {
        self.b.value.matmul(&self.a.value).scale(self.scale())
    }

    /// `y = W_res·x + s·B·(A·x)` for every row `x` of `x` (`n × d_in`).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(invalid_shape(format!(
                "input has {} features, layer expects {}",
                x.cols(),
                self.d_in()
            )));
        }
        let base = x.matmul_nt(&self.w_res.value);
        let ax = x.matmul_nt(&self.a.value);
        let delta = ax.matmul_nt(&self.b.value).scale(self.scale());
        Ok(base.add(&delta))
    }

    /// Single-vector form of [`LoraLinear::forward`].
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(x))?.into_data())
    }

    pub fn n_trainable(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }
}

/// Replaces every dense target projection by a standard-initialized adapter
/// of rank `r` and freezes all other tensors, leaving only `A` and `B`
/// trainable.
pub fn wrap_model(model: &TinyLm, r: usize, alpha: f64, seed: u64) -> Result<TinyLm> {
    let mut out = model.clone();
    out.set_requires_grad(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in out.layer_ids() {
        let lin = out.linear_mut(id);
        if let Linear::Dense(w) = lin {
            *lin = Linear::Lora(LoraLinear::standard(&w.value, r, alpha, &mut rng)?);
        }
    }
    Ok(out)
}

/// The default scale convention `alpha = 2r`.
pub fn default_alpha(r: usize) -> f64 {
    2.0 * r as f64
}
