//! Experiment configuration: one TOML file with sections, dotted-path
//! overrides, and validation that names the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::model::ModelConfig;
use crate::subspace::{EigSolver, DEFAULT_K};
use crate::trainer::{PhaseOneConfig, PretrainConfig, UnlearnConfig};

/// Every source of randomness in a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Corpus generation, forget split and held-out authors.
    pub data_seed: u64,
    /// Model weights, adapter init and eigensolver sketches.
    pub init_seed: u64,
    /// Mini-batch order during pretraining and unlearning.
    pub train_seed: u64,
    /// Verification suites.
    pub verify_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_authors: usize,
    pub qa_per_author: usize,
    pub forget_fraction: f64,
    /// Fraction of retain authors held out of the retain loss and used only
    /// to measure utility.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_authors: 50,
            qa_per_author: 8,
            forget_fraction: 0.1,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub target_nll: f64,
    pub min_lr_frac: f64,
    /// Load this checkpoint instead of training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            weight_decay: p.weight_decay,
            target_nll: p.target_nll,
            min_lr_frac: p.min_lr_frac,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSection {
    pub loss_kind: LossKind,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub rank: usize,
    pub k: usize,
    /// Defaults to `2·rank`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub utility_floor: f64,
    pub early_stop: bool,
    pub sample_budget: usize,
    pub solver: EigSolver,
    pub rila_on: bool,
    pub rol_on: bool,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        let u = UnlearnConfig::default();
        let p = PhaseOneConfig::default();
        UnlearnSection {
            loss_kind: u.loss.kind,
            beta: p.beta,
            gamma: u.loss.gamma,
            lambda: u.loss.lambda,
            rank: p.rank,
            k: DEFAULT_K,
            alpha: None,
            lr: u.lr,
            weight_decay: u.weight_decay,
            steps: u.steps,
            batch_size: u.batch_size,
            eval_interval: u.eval_interval,
            utility_floor: u.utility_floor,
            early_stop: u.early_stop,
            sample_budget: p.sample_budget,
            solver: p.solver,
            rila_on: p.rila_on,
            rol_on: p.rol_on,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Lowest KS distance to the retrain oracle (needs the oracle).
    #[default]
    Ks,
    /// Highest forget-set NLL.
    ForgetNll,
    /// The last checkpoint above the floor.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Train the retrain-from-scratch oracle and report forget quality.
    pub oracle: bool,
    pub selection: Selection,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            oracle: true,
            selection: Selection::Ks,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// One run per value; empty means a single run.
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    /// `vocab_size = 0` takes the size from the generated corpus.
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainSection,
    pub unlearn: UnlearnSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            seeds: Seeds::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainSection::default(),
            unlearn: UnlearnSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(field_err(field, "must be positive"));
    }
    Ok(())
}

fn unit_closed(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(field_err(field, format!("must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn unit_open(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(field_err(field, format!("must lie in (0, 1), got {v}")));
    }
    Ok(())
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(field_err(field, format!("must be a finite non-negative number, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        positive("model.d_model", m.d_model)?;
        positive("model.n_layers", m.n_layers)?;
        positive("model.n_heads", m.n_heads)?;
        positive("model.d_ff", m.d_ff)?;
        positive("model.context_len", m.context_len)?;
        if m.d_model % m.n_heads != 0 {
            return Err(field_err("model.n_heads", "must divide model.d_model"));
        }
        let d = &self.data;
        if d.n_authors < 2 {
            return Err(field_err("data.n_authors", "must be at least 2"));
        }
        positive("data.qa_per_author", d.qa_per_author)?;
        unit_open("data.forget_fraction", d.forget_fraction)?;
        unit_open("data.holdout_fraction", d.holdout_fraction)?;
        let p = &self.pretrain;
        positive("pretrain.epochs", p.epochs)?;
        positive("pretrain.batch_size", p.batch_size)?;
        non_negative("pretrain.lr", p.lr)?;
        non_negative("pretrain.weight_decay", p.weight_decay)?;
        non_negative("pretrain.target_nll", p.target_nll)?;
        unit_closed("pretrain.min_lr_frac", p.min_lr_frac)?;
        let u = &self.unlearn;
        unit_closed("unlearn.beta", u.beta)?;
        non_negative("unlearn.gamma", u.gamma)?;
        non_negative("unlearn.lambda", u.lambda)?;
        positive("unlearn.rank", u.rank)?;
        positive("unlearn.k", u.k)?;
        if let Some(a) = u.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(field_err("unlearn.alpha", format!("must be positive, got {a}")));
            }
        }
        non_negative("unlearn.lr", u.lr)?;
        non_negative("unlearn.weight_decay", u.weight_decay)?;
        positive("unlearn.steps", u.steps)?;
        positive("unlearn.batch_size", u.batch_size)?;
        positive("unlearn.eval_interval", u.eval_interval)?;
        positive("unlearn.sample_budget", u.sample_budget)?;
        if !(u.utility_floor > 0.0 && u.utility_floor <= 1.0) {
            return Err(field_err("unlearn.utility_floor", format!("must lie in (0, 1], got {}", u.utility_floor)));
        }
        let min_dim = m.d_model.min(m.d_ff);
        if u.rank > min_dim {
            return Err(field_err("unlearn.rank", format!("exceeds the smallest layer dimension {min_dim}")));
        }
        if u.k > m.d_model {
            return Err(field_err("unlearn.k", format!("exceeds model.d_model = {}", m.d_model)));
        }
        if self.eval.selection == Selection::Ks && !self.eval.oracle {
            return Err(field_err("eval.selection", "\"ks\" requires eval.oracle = true"));
        }
        for (i, b) in self.sweep.beta.iter().enumerate() {
            unit_closed(&format!("sweep.beta[{i}]"), *b)?;
        }
        Ok(())
    }

    /// Applies `section.field=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for set in sets {
            let set = set.as_ref();
            let (path, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not of the form key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let keys: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = keys.split_last().expect("split yields at least one key");
            let mut node = &mut root;
            for k in parents {
                node = node
                    .get_mut(*k)
                    .filter(|v| v.is_table())
                    .ok_or_else(|| Error::Config(format!("unknown config section {path:?}")))?;
            }
            node.as_table_mut()
                .expect("checked table")
                .insert((*last).to_string(), value);
        }
        let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            weight_decay: p.weight_decay,
            seed: self.seeds.train_seed,
            target_nll: p.target_nll,
            min_lr_frac: p.min_lr_frac,
        }
    }

    pub fn phase_one_config(&self) -> PhaseOneConfig {
        let u = &self.unlearn;
        PhaseOneConfig {
            rank: u.rank,
            alpha: u.alpha,
            k: u.k,
            beta: u.beta,
            sample_budget: u.sample_budget,
            solver: u.solver,
            rila_on: u.rila_on,
            rol_on: u.rol_on,
            seed: self.seeds.init_seed,
        }
    }

    /// Unlearning settings; the ROL weight is zeroed when `rol_on` is off.
    pub fn unlearn_config(&self) -> UnlearnConfig {
        let u = &self.unlearn;
        UnlearnConfig {
            steps: u.steps,
            batch_size: u.batch_size,
            lr: u.lr,
            weight_decay: u.weight_decay,
            seed: self.seeds.train_seed,
            eval_interval: u.eval_interval,
            utility_floor: u.utility_floor,
            early_stop: u.early_stop,
            loss: LossConfig {
                kind: u.loss_kind,
                gamma: u.gamma,
                lambda: if u.rol_on { u.lambda } else { 0.0 },
            },
        }
    }

    pub fn model_config(&self, corpus_vocab: usize) -> Result<ModelConfig> {
        let mut m = self.model;
        if m.vocab_size == 0 {
            m.vocab_size = corpus_vocab;
        } else if m.vocab_size != corpus_vocab {
            return Err(field_err(
                "model.vocab_size",
                format!("{} does not match the corpus vocabulary ({corpus_vocab})", m.vocab_size),
            ));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips_and_is_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = ExperimentConfig::default()
            .with_overrides(&["unlearn.beta=0.3", "unlearn.loss_kind=GA", "output_dir=out/x", "unlearn.alpha=4.0"])
            .unwrap();
        assert_eq!(c.unlearn.beta, 0.3);
        assert_eq!(c.unlearn.loss_kind, LossKind::Ga);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert_eq!(c.unlearn.alpha, Some(4.0));
        let err = ExperimentConfig::default().with_overrides(&["unlearn.beta=1.5"]).unwrap_err();
        assert!(err.to_string().contains("unlearn.beta"), "{err}");
        assert!(ExperimentConfig::default().with_overrides(&["unlearn.betta=0.1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["nope.x=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["unlearn.beta"]).is_err());
    }

    #[test]
    fn invalid_fields_are_named() {
        for (set, field) in [
            ("unlearn.lambda=-1.0", "unlearn.lambda"),
            ("unlearn.gamma=-0.5", "unlearn.gamma"),
            ("unlearn.rank=0", "unlearn.rank"),
            ("unlearn.k=0", "unlearn.k"),
            ("unlearn.utility_floor=0.0", "unlearn.utility_floor"),
            ("data.forget_fraction=1.0", "data.forget_fraction"),
            ("sweep.beta=[0.1, 2.0]", "sweep.beta[1]"),
        ] {
            let err = ExperimentConfig::default().with_overrides(&[set]).unwrap_err();
            assert!(matches!(&err, Error::Config(m) if m.contains(field)), "{set}: {err}");
        }
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = ExperimentConfig::from_toml("[seeds]\ntrain_seed = 3\n[unlearn]\nbeta = 0.7\n").unwrap();
        assert_eq!(c.seeds, Seeds { train_seed: 3, ..Seeds::default() });
        assert_eq!(c.unlearn.beta, 0.7);
        assert_eq!(c.unlearn.rank, UnlearnSection::default().rank);
        assert!(ExperimentConfig::from_toml("[seeds]\ntrain = 3\n").is_err());
    }

    #[test]
    fn rol_off_zeroes_lambda() {
        let c = ExperimentConfig::default().with_overrides(&["unlearn.rol_on=false"]).unwrap();
        assert_eq!(c.unlearn_config().loss.lambda, 0.0);
        assert!(!c.phase_one_config().rol_on);
    }

    proptest! {
        #[test]
        fn config_round_trip(beta in 0.0f64..=1.0, lambda in 0.0f64..5.0, gamma in 0.0f64..5.0,
                             rank in 1usize..16, k in 1usize..64, seed in any::<u32>(), kind in 0usize..3) {
            let mut c = ExperimentConfig::default();
            c.unlearn.beta = beta;
            c.unlearn.lambda = lambda;
            c.unlearn.gamma = gamma;
            c.unlearn.rank = rank;
            c.unlearn.k = k;
            c.unlearn.loss_kind = [LossKind::Ga, LossKind::Gd, LossKind::Ihl][kind];
            c.seeds.init_seed = seed as u64;
            c.sweep.beta = vec![beta, 1.0 - beta];
            let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
