//! Forget/retain objectives, the retain-subspace orthogonality penalty and
//! their weighted combination.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::relative_error;
use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{invalid_input, Error, Result};
use crate::linalg::Matrix;
use crate::model::{LayerId, ModelVars, TinyLm};
use crate::subspace::RetainSubspace;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "GA")]
    Ga,
    #[serde(rename = "GD")]
    Gd,
    #[default]
    #[serde(rename = "IHL")]
    Ihl,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ga => "GA",
            LossKind::Gd => "GD",
            LossKind::Ihl => "IHL",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GA" => Ok(LossKind::Ga),
            "GD" => Ok(LossKind::Gd),
            "IHL" => Ok(LossKind::Ihl),
            _ => Err(Error::Config(format!("unknown loss kind {s:?}"))),
        }
    }
}

/// Per-token objective used inside a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenLoss {
    /// Mean log-likelihood (to be minimized, so likelihood falls).
    Ga,
    /// Mean negative log-likelihood.
    Ce,
    /// Mean `1 + p_true − max_{v≠true} p_v`.
    Ihl,
}

fn check_targets(logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<usize> {
    let (t, v) = logits.shape();
    if targets.len() != t || mask.len() != t {
        return Err(invalid_input(format!(
            "{t} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&x| x >= v) {
        return Err(invalid_input(format!("target {bad} outside vocabulary of {v}")));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(invalid_input("every target position is masked"));
    }
    Ok(n)
}

/// `T × V` matrix with `1/n` at `(p, target_p)` for unmasked `p`.
fn target_weights(t: usize, v: usize, targets: &[usize], mask: &[bool], n: usize) -> Matrix {
    let mut w = Matrix::zeros(t, v);
    for p in 0..t {
        if mask[p] {
            w[(p, targets[p])] = 1.0 / n as f64;
        }
    }
    w
}

/// Mean over unmasked positions of `log p(target)`.
pub fn ga_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let n = check_targets(tape.value(logits), targets, mask)?;
    let (t, v) = tape.value(logits).shape();
    let w = tape.constant(target_weights(t, v, targets, mask, n));
    let lp = tape.log_softmax(logits)?;
    let picked = tape.mul(lp, w)?;
    tape.sum(picked)
}

/// Mean over unmasked positions of `−log p(target)`.
pub fn ce_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let ga = ga_loss(tape, logits, targets, mask)?;
    tape.scale(ga, -1.0)
}

/// Mean over unmasked positions of `1 + p(target) − max_{v≠target} p(v)`.
pub fn ihl_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let n = check_targets(tape.value(logits), targets, mask)?;
    let (t, v) = tape.value(logits).shape();
    if v < 2 {
        return Err(invalid_input("inverted hinge loss needs at least two classes"));
    }
    let w = tape.constant(target_weights(t, v, targets, mask, n));
    let col = tape.constant(Matrix::from_fn(t, 1, |p, _| {
        if mask[p] {
            1.0 / n as f64
        } else {
            0.0
        }
    }));
    let probs = tape.softmax(logits)?;
    let p_true = tape.mul(probs, w)?;
    let p_true = tape.sum(p_true)?;
    let other = tape.max_excluding(probs, targets)?;
    let other = tape.mul(other, col)?;
    let other = tape.sum(other)?;
    let neg = tape.scale(other, -1.0)?;
    let diff = tape.add(p_true, neg)?;
    let one = tape.constant(Matrix::scalar(1.0));
    tape.add(one, diff)
}

pub fn token_loss(tape: &mut Tape, kind: TokenLoss, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    match kind {
        TokenLoss::Ga => ga_loss(tape, logits, targets, mask),
        TokenLoss::Ce => ce_loss(tape, logits, targets, mask),
        TokenLoss::Ihl => ihl_loss(tape, logits, targets, mask),
    }
}

/// Token-mean per sequence, then mean over the sequences of `batch` that have
/// at least one answer target.
pub fn batch_loss(
    tape: &mut Tape,
    model: &TinyLm,
    vars: &ModelVars,
    batch: &Batch,
    kind: TokenLoss,
) -> Result<Var> {
    let mut per_seq = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let st = batch.targets(i);
        if st.n_targets() == 0 {
            continue;
        }
        let logits = model.forward_on(tape, vars, st.tokens)?;
        per_seq.push(token_loss(tape, kind, logits, &st.targets, &st.weights)?);
    }
    mean_of(tape, &per_seq)
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = vars.split_first() else {
        return Err(invalid_input("batch has no answer targets"));
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, 1.0 / vars.len() as f64)
}

fn missing_subspace(id: &LayerId) -> Error {
    Error::Config(format!("no retain subspace for adapted layer {id}"))
}

/// `Σ_layers ‖Bᵀ P_B‖²_F` over every adapted layer, differentiable in `B`.
pub fn rol_loss(
    tape: &mut Tape,
    model: &TinyLm,
    vars: &ModelVars,
    subspaces: &BTreeMap<LayerId, RetainSubspace>,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (id, layer) in model.lora_layers() {
        let s = subspaces.get(&id).ok_or_else(|| missing_subspace(&id))?;
        if s.basis.rows() != layer.d_out() {
            return Err(Error::Config(format!(
                "retain subspace for {id} has dimension {}, layer output is {}",
                s.basis.rows(),
                layer.d_out()
            )));
        }
        let b = vars.lora_b(&id).ok_or_else(|| missing_subspace(&id))?;
        let bt = tape.transpose(b)?;
        let p = tape.constant(s.basis.clone());
        let prod = tape.matmul(bt, p)?;
        terms.push(tape.frobenius_sq(prod)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Value of [`rol_loss`] without a tape.
pub fn rol_value(model: &TinyLm, subspaces: &BTreeMap<LayerId, RetainSubspace>) -> Result<f64> {
    let mut total = 0.0;
    for (id, layer) in model.lora_layers() {
        let s = subspaces.get(&id).ok_or_else(|| missing_subspace(&id))?;
        total += layer.b.value.matmul_tn(&s.basis).frobenius_sq();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Ihl,
            gamma: 1.0,
            lambda: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub forget_term: f64,
    pub retain_term: f64,
    pub rol_term: f64,
    pub total: f64,
    pub loss_kind: LossKind,
}

impl LossBreakdown {
    pub fn combine(forget: f64, retain: f64, rol: f64, cfg: &LossConfig) -> Self {
        LossBreakdown {
            forget_term: forget,
            retain_term: retain,
            rol_term: rol,
            total: forget + cfg.gamma * retain + cfg.lambda * rol,
            loss_kind: cfg.kind,
        }
    }
}

/// `L_forget(D_f) + γ·L_CE(D_r) + λ·L_ROL`. For GD the forget term is
/// `GA(D_f) + CE(D_r)`. The penalty is skipped when `λ = 0` and no
/// subspaces are given.
pub fn total_loss(
    tape: &mut Tape,
    model: &TinyLm,
    vars: &ModelVars,
    forget: &Batch,
    retain: &Batch,
    cfg: &LossConfig,
    subspaces: &BTreeMap<LayerId, RetainSubspace>,
) -> Result<(Var, LossBreakdown)> {
    if forget.is_empty() || retain.is_empty() {
        return Err(invalid_input("forget and retain batches must be non-empty"));
    }
    let retain_ce = batch_loss(tape, model, vars, retain, TokenLoss::Ce)?;
    let forget_term = match cfg.kind {
        LossKind::Ga => batch_loss(tape, model, vars, forget, TokenLoss::Ga)?,
        LossKind::Ihl => batch_loss(tape, model, vars, forget, TokenLoss::Ihl)?,
        LossKind::Gd => {
            let ga = batch_loss(tape, model, vars, forget, TokenLoss::Ga)?;
            tape.add(ga, retain_ce)?
        }
    };
    let use_rol = cfg.lambda != 0.0 || !subspaces.is_empty();
    let rol = if use_rol {
        Some(rol_loss(tape, model, vars, subspaces)?)
    } else {
        None
    };

    let mut total = forget_term;
    if cfg.gamma != 0.0 {
        let r = tape.scale(retain_ce, cfg.gamma)?;
        total = tape.add(total, r)?;
    }
    if let (Some(r), true) = (rol, cfg.lambda != 0.0) {
        let r = tape.scale(r, cfg.lambda)?;
        total = tape.add(total, r)?;
    }
    let breakdown = LossBreakdown {
        forget_term: tape.scalar(forget_term),
        retain_term: tape.scalar(retain_ce),
        rol_term: rol.map_or(0.0, |r| tape.scalar(r)),
        total: tape.scalar(total),
        loss_kind: cfg.kind,
    };
    Ok((total, breakdown))
}

/// Mean `−log p(target)` over unmasked positions of one logit matrix.
pub fn mean_nll(logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let n = check_targets(logits, targets, mask)?;
    let mut total = 0.0;
    for p in 0..logits.rows() {
        if !mask[p] {
            continue;
        }
        let row = logits.row(p);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[p]];
    }
    Ok(total / n as f64)
}

/// Per-sequence mean answer-token NLL for every sequence of `batches` with at
/// least one target, paired with its record id.
pub fn sequence_nlls(model: &TinyLm, batches: &[Batch]) -> Result<Vec<(usize, f64)>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let base = tape.len();
    let mut out = Vec::new();
    for b in batches {
        for i in 0..b.len() {
            let st = b.targets(i);
            if st.n_targets() == 0 {
                continue;
            }
            let logits = model.forward_on(&mut tape, &vars, st.tokens)?;
            out.push((b.record_ids[i], mean_nll(tape.value(logits), &st.targets, &st.weights)?));
            tape.truncate(base);
        }
    }
    Ok(out)
}

/// Mean of [`sequence_nlls`].
pub fn mean_sequence_nll(model: &TinyLm, batches: &[Batch]) -> Result<f64> {
    let v = sequence_nlls(model, batches)?;
    if v.is_empty() {
        return Err(invalid_input("no answer targets to evaluate"));
    }
    Ok(v.iter().map(|(_, x)| x).sum::<f64>() / v.len() as f64)
}

/// Maximum relative error between tape gradients of `loss` and central
/// differences with step `h`, over every trainable tensor of `model`.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn model_grad_error<F>(model: &TinyLm, h: f64, loss: F) -> Result<f64>
where
    F: Fn(&TinyLm, &mut Tape, &ModelVars) -> Result<Var>,
{
    let eval = |m: &TinyLm| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape)?;
        let l = loss(m, &mut tape, &vars)?;
        Ok(tape.scalar(l))
    };
    let mut analytic = model.clone();
    analytic.zero_grads();
    {
        let mut tape = Tape::new();
        let vars = analytic.bind(&mut tape)?;
        let l = loss(&analytic, &mut tape, &vars)?;
        analytic.accumulate_grads(&tape, &vars, l)?;
    }
    let grads: Vec<Option<Matrix>> = analytic
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.requires_grad.then(|| t.grad_or_zeros()))
        .collect();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (ti, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for idx in 0..g.len() {
            let orig = probe.named_tensors()[ti].1.value.data()[idx];
            set_entry(&mut probe, ti, idx, orig + h);
            let plus = eval(&probe)?;
            set_entry(&mut probe, ti, idx, orig - h);
            let minus = eval(&probe)?;
            set_entry(&mut probe, ti, idx, orig);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(g.data()[idx], numeric));
        }
    }
    Ok(worst)
}

fn set_entry(model: &mut TinyLm, tensor: usize, idx: usize, v: f64) {
    let mut ts = model.named_tensors_mut();
    ts[tensor].1.value.data_mut()[idx] = v;
}
