//! Geometric diagnostics, the KS forget-quality analog, and Monte-Carlo /
//! exhaustive checks of the optimality and concentration results.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{balanced_bound, balanced_cov, concentration_bound, second_moment};
use crate::data::{batchify, Record, PAD_ID};
use crate::error::{invalid_input, invalid_shape, Result};
use crate::linalg::{dot, norm2, spectral_norm, sym_eig_full, Matrix};
use crate::losses::sequence_nlls;
use crate::model::{LayerId, TinyLm};
use crate::subspace::{mean_sq_norm, random_orthonormal, InitReport, RetainSubspace};

/// Below this retain energy the ratio is left undefined.
pub const ENERGY_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub forget_energy: f64,
    pub retain_energy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

/// `mean‖ΔW x‖²` over forget and retain inputs, and their ratio.
pub fn layer_energy(delta: &Matrix, x_f: &Matrix, x_r: &Matrix) -> Result<LayerEnergy> {
    let forget_energy = mean_sq_norm(delta, x_f)?;
    let retain_energy = mean_sq_norm(delta, x_r)?;
    Ok(LayerEnergy {
        forget_energy,
        retain_energy,
        ratio: (retain_energy >= ENERGY_EPS).then(|| forget_energy / retain_energy),
    })
}

pub fn energy_ratio(
    deltas: &BTreeMap<LayerId, Matrix>,
    forget_inputs: &BTreeMap<LayerId, Matrix>,
    retain_inputs: &BTreeMap<LayerId, Matrix>,
) -> Result<BTreeMap<LayerId, LayerEnergy>> {
    deltas
        .iter()
        .map(|(id, d)| {
            let xf = forget_inputs
                .get(id)
                .ok_or_else(|| invalid_input(format!("no forget inputs for {id}")))?;
            let xr = retain_inputs
                .get(id)
                .ok_or_else(|| invalid_input(format!("no retain inputs for {id}")))?;
            Ok((*id, layer_energy(d, xf, xr)?))
        })
        .collect()
}

/// `1 − mean_{i,j} cos²(B[:,i], P[:,j])`.
pub fn orthogonality_score(b: &Matrix, p: &Matrix) -> Result<f64> {
    if b.rows() != p.rows() {
        return Err(invalid_shape(format!(
            "B has {} rows, P_B has {}",
            b.rows(),
            p.rows()
        )));
    }
    if b.cols() == 0 || p.cols() == 0 {
        return Err(invalid_input("empty basis"));
    }
    let unit = |m: &Matrix, name: &str| -> Result<Vec<Vec<f64>>> {
        (0..m.cols())
            .map(|j| {
                let c = m.col(j);
                let n = norm2(&c);
                if n == 0.0 {
                    return Err(invalid_input(format!("{name} column {j} is zero")));
                }
                Ok(c.into_iter().map(|v| v / n).collect())
            })
            .collect()
    };
    let bu = unit(b, "B")?;
    let pu = unit(p, "P_B")?;
    let mut s = 0.0;
    for x in &bu {
        for y in &pu {
            s += dot(x, y).powi(2);
        }
    }
    Ok(1.0 - s / (bu.len() * pu.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: String,
    pub forget_energy: f64,
    pub retain_energy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orthogonality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigengap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub layers: Vec<LayerDiagnostics>,
}

impl DiagnosticsReport {
    pub fn mean_orthogonality(&self) -> Option<f64> {
        let v: Vec<f64> = self.layers.iter().filter_map(|l| l.orthogonality).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per adapted layer: energies of the current delta `s·B·A` on the captured
/// inputs, orthogonality of `B` against the retain subspace (when present),
/// and the eigengap recorded at initialization (when present).
pub fn diagnostics(
    model: &TinyLm,
    forget_inputs: &BTreeMap<LayerId, Matrix>,
    retain_inputs: &BTreeMap<LayerId, Matrix>,
    subspaces: &BTreeMap<LayerId, RetainSubspace>,
    init: Option<&InitReport>,
) -> Result<DiagnosticsReport> {
    let gaps: BTreeMap<LayerId, Option<f64>> = init
        .map(|r| r.layers.iter().filter_map(|l| l.layer.map(|id| (id, l.eigengap))).collect())
        .unwrap_or_default();
    let mut report = DiagnosticsReport::default();
    for (id, lora) in model.lora_layers() {
        let xf = forget_inputs
            .get(&id)
            .ok_or_else(|| invalid_input(format!("no forget inputs for {id}")))?;
        let xr = retain_inputs
            .get(&id)
            .ok_or_else(|| invalid_input(format!("no retain inputs for {id}")))?;
        let e = layer_energy(&lora.effective_delta(), xf, xr)?;
        let orthogonality = match subspaces.get(&id) {
            Some(s) if lora.b.value.max_abs() > 0.0 => Some(orthogonality_score(&lora.b.value, &s.basis)?),
            _ => None,
        };
        report.layers.push(LayerDiagnostics {
            layer: id.to_string(),
            forget_energy: e.forget_energy,
            retain_energy: e.retain_energy,
            energy_ratio: e.ratio,
            orthogonality,
            eigengap: gaps.get(&id).copied().flatten(),
        });
    }
    Ok(report)
}

/// Two-sample Kolmogorov–Smirnov statistic `sup_x |F_a(x) − F_b(x)|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid_input("KS needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(invalid_input("KS samples contain NaN"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FqReport {
    /// KS distance between per-record forget-set mean answer NLLs.
    pub ks_distance: f64,
    pub n_unlearned: usize,
    pub n_retrained: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retain_utility: Option<f64>,
    pub statistic: String,
}

pub fn record_nlls(model: &TinyLm, records: &[Record]) -> Result<Vec<f64>> {
    let batches = batchify(records, model.config.context_len, 32, PAD_ID);
    Ok(sequence_nlls(model, &batches)?.into_iter().map(|(_, v)| v).collect())
}

/// KS distance between the forget-set NLL samples of an unlearned model and
/// a retrain-from-scratch oracle.
pub fn forget_quality(
    unlearned: &TinyLm,
    retrained: &TinyLm,
    forget: &[Record],
    retain_utility: Option<f64>,
) -> Result<FqReport> {
    let u = record_nlls(unlearned, forget)?;
    let r = record_nlls(retrained, forget)?;
    fq_from_samples(&u, &r, retain_utility)
}

pub fn fq_from_samples(unlearned: &[f64], retrained: &[f64], retain_utility: Option<f64>) -> Result<FqReport> {
    Ok(FqReport {
        ks_distance: ks_two_sample(unlearned, retrained)?,
        n_unlearned: unlearned.len(),
        n_retrained: retrained.len(),
        retain_utility,
        statistic: "two-sample KS on per-record mean answer NLL over the forget set".into(),
    })
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// `R(S) = tr(QᵀCQ)` for an orthonormal basis `Q` of `S`.
pub fn subspace_objective(cov: &Matrix, q: &Matrix) -> f64 {
    q.matmul_tn(&cov.matmul(q)).trace()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KyFanReport {
    pub d: usize,
    pub r: usize,
    pub optimum: f64,
    pub eigen_sum: f64,
    /// `|R(Q_r) − Σ top-r λ|`.
    pub optimum_error: f64,
    pub best_random: f64,
    pub n_random: usize,
    /// Random subspaces with `R(S) > R(Q_r) + tol`.
    pub violations: usize,
}

impl KyFanReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.optimum_error <= tol && self.violations == 0
    }
}

/// Compares the top-`r` eigenspace against `n_random` random subspaces.
pub fn verify_kyfan(cov: &Matrix, r: usize, n_random: usize, seed: u64, tol: f64) -> Result<KyFanReport> {
    let d = cov.rows();
    if r == 0 || r >= d {
        return Err(invalid_input(format!("need 1 <= r < d, got r = {r}, d = {d}")));
    }
    let eig = sym_eig_full(cov)?;
    let q = eig.vectors.columns(0, r);
    let optimum = subspace_objective(cov, &q);
    let eigen_sum: f64 = eig.values[..r].iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_random = f64::NEG_INFINITY;
    let mut violations = 0;
    for _ in 0..n_random {
        let s = subspace_objective(cov, &random_orthonormal(d, r, &mut rng));
        best_random = best_random.max(s);
        if s > optimum + tol {
            violations += 1;
        }
    }
    Ok(KyFanReport {
        d,
        r,
        optimum,
        eigen_sum,
        optimum_error: (optimum - eigen_sum).abs(),
        best_random,
        n_random,
        violations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationCheck {
    pub theta: f64,
    pub observed: f64,
    pub predicted: f64,
}

impl RotationCheck {
    pub fn error(&self) -> f64 {
        (self.observed - self.predicted).abs()
    }
}

/// Rotates `q_r` toward `q_{r+1}` by each `θ` and compares the drop in
/// `R` with `(λ_r − λ_{r+1})·sin²θ`.
pub fn verify_rotation(cov: &Matrix, r: usize, thetas: &[f64]) -> Result<Vec<RotationCheck>> {
    let d = cov.rows();
    if r == 0 || r >= d {
        return Err(invalid_input(format!("need 1 <= r < d, got r = {r}, d = {d}")));
    }
    let eig = sym_eig_full(cov)?;
    let q = eig.vectors.columns(0, r);
    let base = subspace_objective(cov, &q);
    let (qr, qn) = (eig.vectors.col(r - 1), eig.vectors.col(r));
    let gap = eig.values[r - 1] - eig.values[r];
    Ok(thetas
        .iter()
        .map(|&theta| {
            let mut rotated = q.clone();
            let v: Vec<f64> = qr
                .iter()
                .zip(&qn)
                .map(|(a, b)| theta.cos() * a + theta.sin() * b)
                .collect();
            rotated.set_col(r - 1, &v);
            RotationCheck {
                theta,
                observed: base - subspace_objective(cov, &rotated),
                predicted: gap * theta.sin().powi(2),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEnergyReport {
    /// `mean‖QQᵀh‖²` over the samples.
    pub mean_projected_energy: f64,
    /// `tr(QQᵀ·Ĉov)` with `Ĉov` the samples' second moment.
    pub trace_form: f64,
}

impl ProjectionEnergyReport {
    pub fn error(&self) -> f64 {
        (self.mean_projected_energy - self.trace_form).abs()
    }
}

pub fn verify_projection_energy(q: &Matrix, samples: &Matrix) -> Result<ProjectionEnergyReport> {
    if q.rows() != samples.cols() {
        return Err(invalid_shape(format!(
            "basis dimension {} vs sample dimension {}",
            q.rows(),
            samples.cols()
        )));
    }
    let cov = second_moment(samples)?;
    let proj = samples.matmul(q).matmul_nt(q);
    Ok(ProjectionEnergyReport {
        mean_projected_energy: proj.frobenius_sq() / samples.rows() as f64,
        trace_form: q.matmul_nt(q).matmul(&cov).trace(),
    })
}

/// Distribution of `h = ±M·u_j` with `j` drawn from `weights` over the
/// columns of an orthonormal `dirs`; `‖h‖ = M` and `E[hhᵀ] = M²·Σ w_j u_j u_jᵀ`.
#[derive(Clone, Debug)]
pub struct DirectionMixture {
    pub dirs: Matrix,
    pub weights: Vec<f64>,
    pub m: f64,
    index: WeightedIndex<f64>,
}

impl DirectionMixture {
    pub fn new(dirs: Matrix, weights: Vec<f64>, m: f64) -> Result<Self> {
        if weights.len() != dirs.cols() {
            return Err(invalid_shape("one weight per direction required"));
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let index = WeightedIndex::new(&weights).map_err(|e| invalid_input(e.to_string()))?;
        Ok(DirectionMixture { dirs, weights, m, index })
    }

    /// Random orthonormal directions in `R^d` with weights `∝ 1, 2, …, d`.
    pub fn random(d: usize, m: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dirs = random_orthonormal(d, d, rng);
        DirectionMixture::new(dirs, (1..=d).map(|i| i as f64).collect(), m)
    }

    pub fn second_moment(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.dirs.rows(), self.dirs.cols(), |i, j| {
            self.dirs[(i, j)] * self.weights[j]
        });
        scaled.matmul_nt(&self.dirs).scale(self.m * self.m)
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let d = self.dirs.rows();
        let mut h = Matrix::zeros(n, d);
        for i in 0..n {
            let j = self.index.sample(rng);
            let s = if rng.gen::<bool>() { self.m } else { -self.m };
            for k in 0..d {
                h[(i, k)] = s * self.dirs[(k, j)];
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub d: usize,
    pub n: usize,
    pub delta: f64,
    pub trials: usize,
    pub bound: f64,
    pub failures: usize,
    pub failure_rate: f64,
    pub max_error: f64,
}

impl ConcentrationReport {
    pub fn passed(&self) -> bool {
        self.failure_rate <= self.delta
    }
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < 50 {
        return Err(invalid_input(format!("at least 50 trials required, got {trials}")));
    }
    Ok(())
}

fn report(d: usize, n: usize, delta: f64, bound: f64, errors: &[f64]) -> ConcentrationReport {
    let failures = errors.iter().filter(|&&e| e > bound).count();
    ConcentrationReport {
        d,
        n,
        delta,
        trials: errors.len(),
        bound,
        failures,
        failure_rate: failures as f64 / errors.len() as f64,
        max_error: errors.iter().copied().fold(0.0, f64::max),
    }
}

/// Empirical rate at which `‖Σ̂ − Σ‖₂` exceeds the Bernstein radius over
/// `trials` independent datasets of `n` samples with `‖h‖ ≤ M`.
pub fn verify_concentration(m: f64, d: usize, n: usize, delta: f64, trials: usize, seed: u64) -> Result<ConcentrationReport> {
    check_trials(trials)?;
    let bound = concentration_bound(m, d, n, delta)?;
    let dist = DirectionMixture::random(d, m, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let sigma = dist.second_moment();
    let errors = (0..trials)
        .map(|t| {
            let h = dist.sample(n, &mut trial_rng(seed, 1 + t as u64));
            Ok(spectral_norm(&second_moment(&h)?.sub(&sigma)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(report(d, n, delta, bound, &errors))
}

/// Balanced variant: forget and retain draws from two different mixtures,
/// compared against `(1−β)ε_f + βε_r`.
pub fn verify_balanced_concentration(
    m: f64,
    d: usize,
    n: usize,
    delta: f64,
    beta: f64,
    trials: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    check_trials(trials)?;
    let bound = balanced_bound(m, d, n, n, delta, beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = DirectionMixture::random(d, m, &mut rng)?;
    let r = DirectionMixture::random(d, m, &mut rng)?;
    let truth = balanced_cov(&f.second_moment(), &r.second_moment(), beta)?.matrix;
    let errors = (0..trials)
        .map(|t| {
            let mut rng = trial_rng(seed, 1 + t as u64);
            let hf = f.sample(n, &mut rng);
            let hr = r.sample(n, &mut rng);
            let est = balanced_cov(&second_moment(&hf)?, &second_moment(&hr)?, beta)?.matrix;
            Ok(spectral_norm(&est.sub(&truth)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(report(d, n, delta, bound, &errors))
}
