//! Pretraining, adapter initialization (phase one), the unlearning loop
//! (phase two) and the retrain-from-scratch oracle.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Tape};
use crate::covariance::{balanced_cov, second_moment, DEFAULT_SAMPLE_BUDGET};
use crate::data::{batchify, Batch, Record, PAD_ID};
use crate::error::{invalid_input, Error, Result};
use crate::linalg::Matrix;
use crate::lora::{default_alpha, wrap_model};
use crate::losses::{batch_loss, mean_sequence_nll, total_loss, LossBreakdown, LossConfig, TokenLoss};
use crate::model::{collect_representations, LayerId, ModelConfig, RepCapture, TinyLm};
use crate::subspace::{rila_init, retain_subspace_with, EigSolver, InitReport, RetainSubspace, DEFAULT_K};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop once the epoch-mean answer NLL falls to this value.
    pub target_nll: f64,
    /// Cosine decay floor as a fraction of `lr`; 1.0 keeps the rate constant.
    pub min_lr_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 80,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.01,
            seed: 0,
            target_nll: 0.05,
            min_lr_frac: 0.05,
        }
    }
}

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss_kind: String,
    pub forget_term: f64,
    pub retain_term: f64,
    pub rol_term: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forget_nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retain_ppl: Option<f64>,
}

impl MetricRow {
    fn from_breakdown(step: usize, b: &LossBreakdown) -> Self {
        MetricRow {
            step,
            loss_kind: b.loss_kind.to_string(),
            forget_term: b.forget_term,
            retain_term: b.retain_term,
            rol_term: b.rol_term,
            total: b.total,
            forget_nll: None,
            retain_ppl: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub forget_nll: f64,
    pub retain_nll: f64,
    pub retain_ppl: f64,
    /// `exp(baseline retain NLL − retain NLL)`.
    pub utility: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub metrics: Vec<MetricRow>,
    pub evals: Vec<EvalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_checkpoint: Option<String>,
}

impl RunRecord {
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for row in &self.metrics {
            s.push_str(&serde_json::to_string(row)?);
            s.push('\n');
        }
        Ok(s)
    }
}

fn numeric_at(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("{detail} (step {step})"),
        },
        other => other,
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            op: what.to_string(),
            detail: format!("non-finite loss {v} at step {step}"),
        })
    }
}

/// One optimizer step of answer-token cross-entropy on `batch`.
fn ce_step(model: &mut TinyLm, opt: &mut AdamW, batch: &Batch, step: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let loss = batch_loss(&mut tape, model, &vars, batch, TokenLoss::Ce).map_err(|e| numeric_at(step, e))?;
    let value = tape.scalar(loss);
    check_finite(step, "cross_entropy", value)?;
    model.accumulate_grads(&tape, &vars, loss)?;
    drop(tape);
    opt.step(model.named_tensors_mut().into_iter());
    model.zero_grads();
    Ok(value)
}

/// Cross-entropy training on answer tokens of `records` until the epoch-mean
/// NLL reaches `cfg.target_nll` or the epoch budget runs out.
pub fn pretrain(model: &mut TinyLm, records: &[Record], cfg: &PretrainConfig) -> Result<RunRecord> {
    if records.is_empty() {
        return Err(invalid_input("no training records"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("pretrain.epochs and batch_size must be positive".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<Record> = records.to_vec();
    let mut record = RunRecord::default();
    let mut step = 0;
    let total = (cfg.epochs * records.len().div_ceil(cfg.batch_size.max(1))).max(1);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches = batchify(&order, model.config.context_len, cfg.batch_size, PAD_ID);
        let mut sum = 0.0;
        for b in &batches {
            let t = step as f64 / total as f64;
            let floor = cfg.lr * cfg.min_lr_frac;
            opt.config.lr = floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            let l = ce_step(model, &mut opt, b, step)?;
            sum += l;
            step += 1;
            record.metrics.push(MetricRow {
                step,
                loss_kind: "CE".into(),
                forget_term: 0.0,
                retain_term: l,
                rol_term: 0.0,
                total: l,
                forget_nll: None,
                retain_ppl: None,
            });
        }
        if sum / batches.len() as f64 <= cfg.target_nll {
            break;
        }
    }
    Ok(record)
}

/// Cross-entropy training of `fresh` on the retain records only.
pub fn retrain_oracle(fresh: &mut TinyLm, retain: &[Record], cfg: &PretrainConfig) -> Result<RunRecord> {
    pretrain(fresh, retain, cfg)
}

/// Mean answer NLL of `model` over `records`.
pub fn answer_nll(model: &TinyLm, records: &[Record]) -> Result<f64> {
    let batches = batchify(records, model.config.context_len, 32, PAD_ID);
    mean_sequence_nll(model, &batches)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseOneConfig {
    pub rank: usize,
    /// Defaults to `2·rank` when absent.
    pub alpha: Option<f64>,
    pub k: usize,
    pub beta: f64,
    pub sample_budget: usize,
    pub solver: EigSolver,
    pub rila_on: bool,
    /// Whether the ROL penalty enters the loss. Retain subspaces are built
    /// either way so orthogonality can be reported.
    pub rol_on: bool,
    pub seed: u64,
}

impl Default for PhaseOneConfig {
    fn default() -> Self {
        PhaseOneConfig {
            rank: 8,
            alpha: None,
            k: DEFAULT_K,
            beta: 0.5,
            sample_budget: DEFAULT_SAMPLE_BUDGET,
            solver: EigSolver::Auto,
            rila_on: true,
            rol_on: true,
            seed: 0,
        }
    }
}

impl PhaseOneConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| default_alpha(self.rank))
    }
}

pub struct PhaseOne {
    pub model: TinyLm,
    pub subspaces: BTreeMap<LayerId, RetainSubspace>,
    pub report: InitReport,
    pub forget_capture: RepCapture,
    pub retain_capture: RepCapture,
}

/// Wraps every target projection with an adapter, captures forget/retain
/// representations on the pretrained weights, applies the balanced-covariance
/// initialization when `rila_on`, and builds the per-layer retain subspaces.
pub fn phase_one(pretrained: &TinyLm, forget: &[Record], retain: &[Record], cfg: &PhaseOneConfig) -> Result<PhaseOne> {
    if forget.is_empty() || retain.is_empty() {
        return Err(invalid_input("phase one needs forget and retain records"));
    }
    let mut model = wrap_model(pretrained, cfg.rank, cfg.alpha(), cfg.seed)?;
    let layers = model.layer_ids();
    let ctx = model.config.context_len;
    let budget = Some(cfg.sample_budget);
    let fb = batchify(forget, ctx, 32, PAD_ID);
    let rb = batchify(retain, ctx, 32, PAD_ID);
    let forget_capture = collect_representations(pretrained, &fb, &layers, budget)?;
    let retain_capture = collect_representations(pretrained, &rb, &layers, budget)?;
    let mut report = InitReport::default();
    let mut subspaces = BTreeMap::new();
    for (i, id) in layers.iter().enumerate() {
        let cov_r = second_moment(&retain_capture.outputs[id])?;
        let seed = cfg.seed.wrapping_add(1 + i as u64);
        if cfg.rila_on {
            let cov_f = second_moment(&forget_capture.outputs[id])?;
            let cov_delta = balanced_cov(&cov_f, &cov_r, cfg.beta)?;
            let layer = model
                .linear_mut(*id)
                .as_lora_mut()
                .expect("every target is adapted");
            let mut entry = rila_init(layer, &cov_delta, cfg.solver, seed)?;
            entry.layer = Some(*id);
            report.layers.push(entry);
        }
        let mut s = retain_subspace_with(&cov_r, cfg.k.min(cov_r.rows()), cfg.solver, seed)?;
        s.layer = Some(*id);
        subspaces.insert(*id, s);
    }
    Ok(PhaseOne {
        model,
        subspaces,
        report,
        forget_capture,
        retain_capture,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Minimum retain utility as a fraction of the pretrained baseline.
    pub utility_floor: f64,
    pub early_stop: bool,
    pub loss: LossConfig,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            steps: 100,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            eval_interval: 5,
            utility_floor: 0.95,
            early_stop: true,
            loss: LossConfig::default(),
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("unlearn.steps, batch_size and eval_interval must be positive".into()));
        }
        if !(self.utility_floor > 0.0 && self.utility_floor <= 1.0) {
            return Err(Error::Config(format!(
                "unlearn.utility_floor must lie in (0, 1], got {}",
                self.utility_floor
            )));
        }
        if self.loss.gamma < 0.0 || self.loss.lambda < 0.0 {
            return Err(Error::Config("unlearn.gamma and unlearn.lambda must be non-negative".into()));
        }
        Ok(())
    }
}

pub struct UnlearnData<'a> {
    pub forget: &'a [Record],
    /// Retain records sampled for the retain loss.
    pub retain: &'a [Record],
    /// Retain records used only to measure utility.
    pub retain_eval: &'a [Record],
}

/// Trainable tensors at one evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub tensors: Vec<(String, Matrix)>,
}

fn snapshot(model: &TinyLm, step: usize) -> Snapshot {
    Snapshot {
        step,
        tensors: model
            .named_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| (n, t.value.clone()))
            .collect(),
    }
}

pub fn restore(model: &mut TinyLm, snap: &Snapshot) {
    let values: BTreeMap<&str, &Matrix> = snap.tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
    for (name, t) in model.named_tensors_mut() {
        if let Some(v) = values.get(name.as_str()) {
            t.value = (*v).clone();
        }
    }
}

pub struct UnlearnOutcome {
    pub record: RunRecord,
    pub baseline_retain_nll: f64,
    pub baseline_forget_nll: f64,
    /// Evaluation snapshots at or above the utility floor.
    pub checkpoints: Vec<(EvalRecord, Snapshot)>,
}

impl UnlearnOutcome {
    /// Checkpoint with the largest forget NLL among those honoring the floor.
    pub fn best_by_forget_nll(&self) -> Option<&(EvalRecord, Snapshot)> {
        self.checkpoints
            .iter()
            .max_by(|a, b| a.0.forget_nll.total_cmp(&b.0.forget_nll))
    }

    /// Checkpoint minimizing `score` among those honoring the floor.
    pub fn best_by<F: Fn(&Snapshot) -> Result<f64>>(&self, score: F) -> Result<Option<(&EvalRecord, &Snapshot, f64)>> {
        let mut best: Option<(&EvalRecord, &Snapshot, f64)> = None;
        for (e, s) in &self.checkpoints {
            let v = score(s)?;
            if best.as_ref().map_or(true, |b| v < b.2) {
                best = Some((e, s, v));
            }
        }
        Ok(best)
    }
}

fn evaluate(model: &TinyLm, data: &UnlearnData<'_>, step: usize, base_retain: f64) -> Result<EvalRecord> {
    let forget_nll = answer_nll(model, data.forget)?;
    let retain_nll = answer_nll(model, data.retain_eval)?;
    Ok(EvalRecord {
        step,
        forget_nll,
        retain_nll,
        retain_ppl: retain_nll.exp(),
        utility: (base_retain - retain_nll).exp(),
    })
}

/// Runs the unlearning loop on an adapted model: each step pairs one forget
/// and one retain mini-batch of equal size, evaluates the total loss, and
/// updates only the trainable tensors (the adapter factors). Every
/// `eval_interval` steps the forget NLL and retain utility are measured;
/// snapshots honoring the utility floor are kept, and with `early_stop` the
/// loop ends at the first evaluation below the floor. Metric rows are also
/// written to `sink` as JSON lines when one is given.
pub fn unlearn(
    model: &mut TinyLm,
    data: &UnlearnData<'_>,
    subspaces: &BTreeMap<LayerId, RetainSubspace>,
    cfg: &UnlearnConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    if data.forget.is_empty() || data.retain.is_empty() || data.retain_eval.is_empty() {
        return Err(invalid_input("unlearning needs forget, retain and retain-eval records"));
    }
    if cfg.loss.lambda > 0.0 && subspaces.is_empty() && !model.lora_layers().is_empty() {
        return Err(Error::Config(
            "unlearn.lambda > 0 requires retain subspaces from phase one".into(),
        ));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ctx = model.config.context_len;
    let baseline_retain_nll = answer_nll(model, data.retain_eval)?;
    let baseline_forget_nll = answer_nll(model, data.forget)?;
    let mut outcome = UnlearnOutcome {
        record: RunRecord::default(),
        baseline_retain_nll,
        baseline_forget_nll,
        checkpoints: Vec::new(),
    };
    let first = EvalRecord {
        step: 0,
        forget_nll: baseline_forget_nll,
        retain_nll: baseline_retain_nll,
        retain_ppl: baseline_retain_nll.exp(),
        utility: 1.0,
    };
    outcome.checkpoints.push((first.clone(), snapshot(model, 0)));
    outcome.record.evals.push(first);

    let mut forget_pool: Vec<Record> = Vec::new();
    let mut retain_pool: Vec<Record> = Vec::new();
    let draw = |pool: &mut Vec<Record>, src: &[Record], n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if pool.is_empty() {
                *pool = src.to_vec();
                pool.shuffle(rng);
            }
            out.push(pool.pop().expect("refilled"));
        }
        out
    };

    for step in 1..=cfg.steps {
        let fr = draw(&mut forget_pool, data.forget, cfg.batch_size, &mut rng);
        let rr = draw(&mut retain_pool, data.retain, cfg.batch_size, &mut rng);
        let fb = batchify(&fr, ctx, cfg.batch_size, PAD_ID).remove(0);
        let rb = batchify(&rr, ctx, cfg.batch_size, PAD_ID).remove(0);

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape)?;
        let (loss, breakdown) = total_loss(&mut tape, model, &vars, &fb, &rb, &cfg.loss, subspaces)
            .map_err(|e| numeric_at(step, e))?;
        check_finite(step, "total_loss", breakdown.total)?;
        model.accumulate_grads(&tape, &vars, loss)?;
        drop(tape);
        opt.step(model.named_tensors_mut().into_iter());
        model.zero_grads();

        let mut row = MetricRow::from_breakdown(step, &breakdown);
        let mut stop = false;
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let ev = evaluate(model, data, step, baseline_retain_nll)?;
            row.forget_nll = Some(ev.forget_nll);
            row.retain_ppl = Some(ev.retain_ppl);
            if ev.utility >= cfg.utility_floor {
                outcome.checkpoints.push((ev.clone(), snapshot(model, step)));
            } else if cfg.early_stop {
                stop = true;
            }
            outcome.record.evals.push(ev);
        }
        if let Some(w) = sink.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&row)?)?;
        }
        outcome.record.metrics.push(row);
        if stop {
            break;
        }
    }
    Ok(outcome)
}

/// Default desk-scale model for a vocabulary.
pub fn desk_model(vocab_size: usize, seed: u64) -> Result<TinyLm> {
    TinyLm::new(ModelConfig::with_vocab(vocab_size), seed)
}
