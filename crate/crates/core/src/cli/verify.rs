//! Seeded verification suites behind `reglu verify <suite>`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    verify_balanced_concentration, verify_concentration, verify_kyfan, verify_projection_energy, verify_rotation,
};
use crate::data::{gen_corpus, split_forget};
use crate::error::{Error, Result};
use crate::linalg::{gaussian, Matrix};
use crate::model::{ModelConfig, TinyLm};
use crate::subspace::random_orthonormal;
use crate::trainer::{phase_one, PhaseOneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Suite {
    KyFan,
    ProjectionEnergy,
    Concentration,
    InitIdentity,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::KyFan, Suite::ProjectionEnergy, Suite::Concentration, Suite::InitIdentity];

    pub fn name(self) -> &'static str {
        match self {
            Suite::KyFan => "kyfan",
            Suite::ProjectionEnergy => "projection-energy",
            Suite::Concentration => "concentration",
            Suite::InitIdentity => "init-identity",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Check {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {}: {} = {:.3e} (limit {:.3e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    self.suite,
                    c.name,
                    c.value,
                    c.threshold
                )
            })
            .collect()
    }
}

pub const KYFAN_TOL: f64 = 1e-9;
pub const ROTATION_TOL: f64 = 1e-8;
pub const ROTATION_THETAS: [f64; 3] = [0.01, 0.1, 0.5];

fn random_symmetric(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = gaussian(d, d, rng);
    g.add(&g.transpose()).scale(0.5)
}

/// Ky Fan optimality over `n_matrices` random symmetric matrices
/// (`d ≤ 16`, `r ≤ 4`) against `n_random` subspaces each, plus the
/// rotation-decrement law on the same matrices.
pub fn kyfan_suite(seed: u64, n_matrices: usize, n_random: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_opt: f64 = 0.0;
    let mut violations = 0usize;
    let mut worst_rot: f64 = 0.0;
    for i in 0..n_matrices {
        let d = rng.gen_range(2..=16);
        let r = rng.gen_range(1..=4usize.min(d - 1));
        let cov = random_symmetric(d, &mut rng);
        let rep = verify_kyfan(&cov, r, n_random, seed.wrapping_add(1 + i as u64), KYFAN_TOL)?;
        worst_opt = worst_opt.max(rep.optimum_error);
        violations += rep.violations;
        for c in verify_rotation(&cov, r, &ROTATION_THETAS)? {
            worst_rot = worst_rot.max(c.error());
        }
    }
    Ok(SuiteReport {
        suite: Suite::KyFan.to_string(),
        seed,
        checks: vec![
            Check::at_most("max |R(Q_r) - sum of top-r eigenvalues|", worst_opt, KYFAN_TOL),
            Check::at_most("random subspaces exceeding R(Q_r)", violations as f64, 0.0),
            Check::at_most("max rotation-decrement error", worst_rot, ROTATION_TOL),
        ],
    })
}

pub fn projection_energy_suite(seed: u64, trials: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = rng.gen_range(2..=16);
        let r = rng.gen_range(1..=d);
        let n = rng.gen_range(1..=64);
        let q = random_orthonormal(d, r, &mut rng);
        let h = gaussian(n, d, &mut rng);
        worst = worst.max(verify_projection_energy(&q, &h)?.error());
    }
    Ok(SuiteReport {
        suite: Suite::ProjectionEnergy.to_string(),
        seed,
        checks: vec![Check::at_most("max |mean projected energy - trace form|", worst, 1e-10)],
    })
}

pub struct ConcentrationSpec {
    pub m: f64,
    pub d: usize,
    pub ns: Vec<usize>,
    pub delta: f64,
    pub beta: f64,
    pub trials: usize,
}

impl Default for ConcentrationSpec {
    fn default() -> Self {
        ConcentrationSpec {
            m: 1.0,
            d: 16,
            ns: vec![100, 1000],
            delta: 0.1,
            beta: 0.3,
            trials: 500,
        }
    }
}

pub fn concentration_suite(seed: u64, spec: &ConcentrationSpec) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for (i, &n) in spec.ns.iter().enumerate() {
        let s = seed.wrapping_add(2 * i as u64);
        let plain = verify_concentration(spec.m, spec.d, n, spec.delta, spec.trials, s)?;
        checks.push(Check::at_most(
            format!("failure rate, second moment, N = {n} (max error {:.4}, bound {:.4})", plain.max_error, plain.bound),
            plain.failure_rate,
            spec.delta,
        ));
        let bal = verify_balanced_concentration(spec.m, spec.d, n, spec.delta, spec.beta, spec.trials, s + 1)?;
        checks.push(Check::at_most(
            format!(
                "failure rate, balanced beta = {}, N = {n} (max error {:.4}, bound {:.4})",
                spec.beta, bal.max_error, bal.bound
            ),
            bal.failure_rate,
            spec.delta,
        ));
    }
    Ok(SuiteReport {
        suite: Suite::Concentration.to_string(),
        seed,
        checks,
    })
}

/// Max elementwise logit difference between the dense model and its
/// adapted copy right after phase one, over `n_sequences` random token
/// sequences.
pub fn init_identity_suite(seed: u64, n_sequences: usize) -> Result<SuiteReport> {
    let corpus = gen_corpus(50, 8, seed)?;
    let split = split_forget(&corpus, 0.1, seed)?;
    let model = TinyLm::new(ModelConfig::with_vocab(corpus.vocab.len()), seed)?;
    let p1 = phase_one(&model, &split.forget, &split.retain, &PhaseOneConfig { seed, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = model.config.vocab_size as u32;
    let mut worst: f64 = 0.0;
    for _ in 0..n_sequences {
        let len = rng.gen_range(1..=model.config.context_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v)).collect();
        let a = model.forward(&tokens)?;
        let b = p1.model.forward(&tokens)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(SuiteReport {
        suite: Suite::InitIdentity.to_string(),
        seed,
        checks: vec![
            Check::at_most("max weight residual |W0 - W_eff|", p1.report.max_residual(), 1e-9),
            Check::at_most(format!("max logit difference over {n_sequences} sequences"), worst, 1e-9),
        ],
    })
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::KyFan => kyfan_suite(seed, 100, 1000),
        Suite::ProjectionEnergy => projection_energy_suite(seed, 200),
        Suite::Concentration => concentration_suite(seed, &ConcentrationSpec::default()),
        Suite::InitIdentity => init_identity_suite(seed, 100),
    }
}
