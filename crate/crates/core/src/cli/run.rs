//! The end-to-end experiment: data → pretrain → phase one → unlearn →
//! evaluation, diagnostics and forget quality, with every artifact written
//! under the run directory and listed in a hashed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{diagnostics, fq_from_samples, ks_two_sample, record_nlls, DiagnosticsReport, FqReport};
use crate::cli::checkpoint::{load_model, save_model};
use crate::cli::config::{ExperimentConfig, Selection};
use crate::data::{corpus_jsonl, gen_corpus, hold_out_authors, split_forget, vocab_json, Corpus, ForgetSplit, Record};
use crate::error::{Error, Result};
use crate::model::TinyLm;
use crate::trainer::{
    answer_nll, phase_one, pretrain, restore, retrain_oracle, unlearn, EvalRecord, UnlearnData,
};

pub const MANIFEST: &str = "manifest.json";

/// Files every completed run directory must contain.
pub const REQUIRED: &[&str] = &[
    "config.toml",
    "corpus.jsonl",
    "vocab.json",
    "corpus.sha256",
    "pretrained.ckpt",
    "unlearned.ckpt",
    "init_report.json",
    "metrics.jsonl",
    "evals.json",
    "diagnostics.json",
    "summary.json",
];

pub struct RunData {
    pub corpus: Corpus,
    pub split: ForgetSplit,
    /// Retain records used by the retain loss.
    pub retain_train: Vec<Record>,
    /// Held-out retain authors, used only to measure utility.
    pub retain_eval: Vec<Record>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<RunData> {
    let d = &cfg.data;
    let seed = cfg.seeds.data_seed;
    let corpus = gen_corpus(d.n_authors, d.qa_per_author, seed)?;
    let split = split_forget(&corpus, d.forget_fraction, seed)?;
    let (retain_train, retain_eval) = hold_out_authors(&split.retain, d.holdout_fraction, seed);
    if retain_train.is_empty() || retain_eval.is_empty() {
        return Err(Error::Config(
            "data.holdout_fraction leaves no retain authors on one side of the split".into(),
        ));
    }
    Ok(RunData {
        corpus,
        split,
        retain_train,
        retain_eval,
    })
}

/// Pretrained model from `pretrain.checkpoint`, or trained from scratch on
/// the full corpus.
pub fn obtain_pretrained(cfg: &ExperimentConfig, data: &RunData) -> Result<TinyLm> {
    let mcfg = cfg.model_config(data.corpus.vocab.len())?;
    if let Some(path) = &cfg.pretrain.checkpoint {
        let (m, _) = load_model(path)?;
        if m.config != mcfg {
            return Err(Error::Config(format!(
                "pretrain.checkpoint {} has model config {:?}, expected {:?}",
                path.display(),
                m.config,
                mcfg
            )));
        }
        if !m.lora_layers().is_empty() {
            return Err(Error::Config("pretrain.checkpoint must be a dense model".into()));
        }
        return Ok(m);
    }
    let mut m = TinyLm::new(mcfg, cfg.seeds.init_seed)?;
    pretrain(&mut m, &data.corpus.records, &cfg.pretrain_config())?;
    Ok(m)
}

/// Retrain-from-scratch oracle; only the retain records are passed in.
pub fn train_oracle(cfg: &ExperimentConfig, data: &RunData) -> Result<TinyLm> {
    let mut m = TinyLm::new(cfg.model_config(data.corpus.vocab.len())?, cfg.seeds.init_seed)?;
    retrain_oracle(&mut m, &data.split.retain, &cfg.pretrain_config())?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub beta: f64,
    pub loss_kind: String,
    pub selected_step: usize,
    pub steps_run: usize,
    pub baseline_forget_nll: f64,
    pub baseline_retain_nll: f64,
    pub forget_nll: f64,
    pub retain_nll: f64,
    pub retain_ppl_ratio: f64,
    pub utility: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_orthogonality: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus_sha256: String,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Hashes every regular file in `dir` (except the manifest) and writes the
/// manifest.
pub fn write_manifest(dir: &Path) -> Result<Manifest> {
    let corpus_sha256 = fs::read_to_string(dir.join("corpus.sha256"))
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST)
        .collect();
    names.sort();
    let files = names
        .into_iter()
        .map(|path| {
            let bytes = fs::read(dir.join(&path))?;
            Ok(ManifestEntry {
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest { corpus_sha256, files };
    write_json(dir, MANIFEST, &m)?;
    Ok(m)
}

/// Confirms the manifest lists every required artifact and that each
/// listed file still matches its recorded hash.
pub fn check_integrity(dir: &Path, required: &[&str]) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Verification(format!("{}: missing manifest ({e})", dir.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    for r in required {
        if !m.files.iter().any(|f| f.path == *r) {
            return Err(Error::Verification(format!("{}: manifest lacks {r}", dir.display())));
        }
    }
    for f in &m.files {
        let bytes = fs::read(dir.join(&f.path))
            .map_err(|e| Error::Verification(format!("{}: {e}", f.path)))?;
        if sha256_hex(&bytes) != f.sha256 || bytes.len() as u64 != f.bytes {
            return Err(Error::Verification(format!("{}: content does not match manifest", f.path)));
        }
    }
    let corpus = fs::read(dir.join("corpus.jsonl"))
        .map_err(|e| Error::Verification(format!("corpus.jsonl: {e}")))?;
    if sha256_hex(&corpus) != m.corpus_sha256 {
        return Err(Error::Verification("corpus hash does not match corpus.jsonl".into()));
    }
    Ok(m)
}

pub fn write_corpus(dir: &Path, data: &RunData) -> Result<String> {
    let jsonl = corpus_jsonl(&data.corpus, Some(&data.split))?;
    let hash = sha256_hex(jsonl.as_bytes());
    fs::write(dir.join("corpus.jsonl"), &jsonl)?;
    fs::write(dir.join("vocab.json"), vocab_json(&data.corpus.vocab)? + "\n")?;
    fs::write(dir.join("corpus.sha256"), format!("{hash}\n"))?;
    Ok(hash)
}

fn config_echo(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    init: &'a DiagnosticsReport,
    #[serde(rename = "final")]
    final_: &'a DiagnosticsReport,
}

/// One complete run into `dir` from an already pretrained model (and, when
/// `eval.oracle` is set, an already trained oracle).
pub fn run_in_dir(
    cfg: &ExperimentConfig,
    dir: &Path,
    data: &RunData,
    pretrained: &TinyLm,
    oracle: Option<&TinyLm>,
) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    write_corpus(dir, data)?;
    let echo = config_echo(cfg)?;
    save_model(&dir.join("pretrained.ckpt"), pretrained, echo.clone())?;

    let p1 = phase_one(pretrained, &data.split.forget, &data.retain_train, &cfg.phase_one_config())?;
    write_json(dir, "init_report.json", &p1.report)?;
    let init_diag = diagnostics(
        &p1.model,
        &p1.forget_capture.inputs,
        &p1.retain_capture.inputs,
        &p1.subspaces,
        Some(&p1.report),
    )?;

    let mut model = p1.model.clone();
    let udata = UnlearnData {
        forget: &data.split.forget,
        retain: &data.retain_train,
        retain_eval: &data.retain_eval,
    };
    let ucfg = cfg.unlearn_config();
    let outcome = {
        let mut sink = BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
        let out = unlearn(&mut model, &udata, &p1.subspaces, &ucfg, Some(&mut sink))?;
        std::io::Write::flush(&mut sink)?;
        out
    };
    write_json(dir, "evals.json", &outcome.record.evals)?;

    let oracle_nlls = match oracle {
        Some(o) => {
            save_model(&dir.join("oracle.ckpt"), o, echo.clone())?;
            Some(record_nlls(o, &data.split.forget)?)
        }
        None => None,
    };
    let (eval, snap, ks): (EvalRecord, _, Option<f64>) = match (cfg.eval.selection, &oracle_nlls) {
        (Selection::Ks, Some(on)) => {
            let best = outcome.best_by(|s| {
                let mut m = model.clone();
                restore(&mut m, s);
                ks_two_sample(&record_nlls(&m, &data.split.forget)?, on)
            })?;
            let (e, s, v) = best.ok_or_else(|| Error::Verification("no checkpoint above the utility floor".into()))?;
            (e.clone(), s.clone(), Some(v))
        }
        (Selection::Ks, None) => return Err(Error::Config("eval.selection = \"ks\" requires eval.oracle".into())),
        (Selection::ForgetNll, _) => {
            let (e, s) = outcome
                .best_by_forget_nll()
                .ok_or_else(|| Error::Verification("no checkpoint above the utility floor".into()))?;
            (e.clone(), s.clone(), None)
        }
        (Selection::Last, _) => {
            let (e, s) = outcome
                .checkpoints
                .last()
                .ok_or_else(|| Error::Verification("no checkpoint above the utility floor".into()))?;
            (e.clone(), s.clone(), None)
        }
    };
    restore(&mut model, &snap);
    save_model(&dir.join("unlearned.ckpt"), &model, echo)?;

    let final_diag = diagnostics(
        &model,
        &p1.forget_capture.inputs,
        &p1.retain_capture.inputs,
        &p1.subspaces,
        Some(&p1.report),
    )?;
    write_json(
        dir,
        "diagnostics.json",
        &DiagnosticsFile {
            init: &init_diag,
            final_: &final_diag,
        },
    )?;

    let ks_distance = match &oracle_nlls {
        Some(on) => {
            let fq: FqReport = fq_from_samples(&record_nlls(&model, &data.split.forget)?, on, Some(eval.utility))?;
            write_json(dir, "fq_report.json", &fq)?;
            Some(ks.unwrap_or(fq.ks_distance))
        }
        None => None,
    };

    let summary = RunSummary {
        beta: cfg.unlearn.beta,
        loss_kind: cfg.unlearn.loss_kind.to_string(),
        selected_step: eval.step,
        steps_run: outcome.record.metrics.last().map_or(0, |r| r.step),
        baseline_forget_nll: outcome.baseline_forget_nll,
        baseline_retain_nll: outcome.baseline_retain_nll,
        forget_nll: eval.forget_nll,
        retain_nll: eval.retain_nll,
        retain_ppl_ratio: (eval.retain_nll - outcome.baseline_retain_nll).exp(),
        utility: eval.utility,
        ks_distance,
        mean_orthogonality: final_diag.mean_orthogonality(),
    };
    write_json(dir, "summary.json", &summary)?;
    write_manifest(dir)?;
    let mut required: Vec<&str> = REQUIRED.to_vec();
    if oracle.is_some() {
        required.extend(["oracle.ckpt", "fq_report.json"]);
    }
    check_integrity(dir, &required)?;
    Ok(summary)
}

fn beta_dir(root: &Path, beta: f64) -> PathBuf {
    root.join(format!("beta_{beta}"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct SweepRow {
    beta: f64,
    selected_step: usize,
    forget_nll: f64,
    retain_ppl_ratio: f64,
    utility: f64,
    ks_distance: Option<f64>,
    mean_orthogonality: Option<f64>,
}

/// Runs the configured experiment. With `sweep.beta` set, each value gets
/// its own run directory (sharing one pretrained model and oracle) and a
/// `sweep.csv` summary row.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let pretrained = obtain_pretrained(cfg, &data)?;
    let oracle = if cfg.eval.oracle { Some(train_oracle(cfg, &data)?) } else { None };
    let root = &cfg.output_dir;
    fs::create_dir_all(root)?;
    if cfg.sweep.beta.is_empty() {
        return Ok(vec![run_in_dir(cfg, root, &data, &pretrained, oracle.as_ref())?]);
    }
    let mut summaries = Vec::new();
    let mut csv = csv::Writer::from_path(root.join("sweep.csv")).map_err(csv_err)?;
    for &beta in &cfg.sweep.beta {
        let mut sub = cfg.clone();
        sub.unlearn.beta = beta;
        sub.sweep.beta.clear();
        sub.output_dir = beta_dir(root, beta);
        let s = run_in_dir(&sub, &sub.output_dir, &data, &pretrained, oracle.as_ref())?;
        csv.serialize(SweepRow {
            beta,
            selected_step: s.selected_step,
            forget_nll: s.forget_nll,
            retain_ppl_ratio: s.retain_ppl_ratio,
            utility: s.utility,
            ks_distance: s.ks_distance,
            mean_orthogonality: s.mean_orthogonality,
        })
        .map_err(csv_err)?;
        summaries.push(s);
    }
    csv.flush()?;
    fs::write(root.join("config.toml"), cfg.to_toml()?)?;
    Ok(summaries)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Forget/retain NLLs of a checkpoint against a run's data, plus its KS
/// distance to the run's oracle when one was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub forget_nll: f64,
    pub retain_train_nll: f64,
    pub retain_eval_nll: f64,
    pub retain_eval_ppl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_distance: Option<f64>,
}

pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&dir.join("config.toml"))
}

pub fn cmd_eval(dir: &Path, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let cfg = load_run_config(dir)?;
    let data = prepare_data(&cfg)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join("unlearned.ckpt"));
    let (m, _) = load_model(&path)?;
    let oracle = dir.join("oracle.ckpt");
    let ks_distance = if oracle.exists() {
        let (o, _) = load_model(&oracle)?;
        Some(ks_two_sample(&record_nlls(&m, &data.split.forget)?, &record_nlls(&o, &data.split.forget)?)?)
    } else {
        None
    };
    let retain_eval_nll = answer_nll(&m, &data.retain_eval)?;
    Ok(EvalReport {
        checkpoint: path.display().to_string(),
        forget_nll: answer_nll(&m, &data.split.forget)?,
        retain_train_nll: answer_nll(&m, &data.retain_train)?,
        retain_eval_nll,
        retain_eval_ppl: retain_eval_nll.exp(),
        ks_distance,
    })
}

/// Recomputes diagnostics of a checkpoint against the run's captured
/// representations and retain subspaces.
pub fn cmd_diag(dir: &Path, checkpoint: Option<&Path>) -> Result<DiagnosticsReport> {
    let cfg = load_run_config(dir)?;
    let data = prepare_data(&cfg)?;
    let (pre, _) = load_model(&dir.join("pretrained.ckpt"))?;
    let p1 = phase_one(&pre, &data.split.forget, &data.retain_train, &cfg.phase_one_config())?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join("unlearned.ckpt"));
    let (m, _) = load_model(&path)?;
    let layers: BTreeMap<_, _> = p1.model.lora_layers().into_iter().map(|(id, _)| (id, ())).collect();
    if m.lora_layers().iter().any(|(id, _)| !layers.contains_key(id)) {
        return Err(Error::Checkpoint("checkpoint adapters do not match the run".into()));
    }
    diagnostics(
        &m,
        &p1.forget_capture.inputs,
        &p1.retain_capture.inputs,
        &p1.subspaces,
        Some(&p1.report),
    )
}
