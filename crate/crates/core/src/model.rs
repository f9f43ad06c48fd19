//! Tiny pre-norm causal transformer whose blocks expose the seven target
//! projections (q/k/v/o attention, gate/up/down gated MLP).

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Batch;
use crate::error::{invalid_input, Error, Result};
use crate::linalg::Matrix;
use crate::lora::LoraLinear;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            context_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model = {} is not divisible by n_heads = {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProjKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl ProjKind {
    pub const ALL: [ProjKind; 7] = [
        ProjKind::Q,
        ProjKind::K,
        ProjKind::V,
        ProjKind::O,
        ProjKind::Gate,
        ProjKind::Up,
        ProjKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjKind::Q => "q_proj",
            ProjKind::K => "k_proj",
            ProjKind::V => "v_proj",
            ProjKind::O => "o_proj",
            ProjKind::Gate => "gate_proj",
            ProjKind::Up => "up_proj",
            ProjKind::Down => "down_proj",
        }
    }

    pub fn from_name(name: &str) -> Option<ProjKind> {
        ProjKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// `(d_out, d_in)` of this projection.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            ProjKind::Q | ProjKind::K | ProjKind::V | ProjKind::O => (cfg.d_model, cfg.d_model),
            ProjKind::Gate | ProjKind::Up => (cfg.d_ff, cfg.d_model),
            ProjKind::Down => (cfg.d_model, cfg.d_ff),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// A target projection: block index plus projection kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub kind: ProjKind,
}

impl LayerId {
    pub fn new(block: usize, kind: ProjKind) -> Self {
        LayerId { block, kind }
    }

    /// Every target projection of a model with `n_layers` blocks.
    pub fn all(n_layers: usize) -> Vec<LayerId> {
        (0..n_layers)
            .flat_map(|b| ProjKind::ALL.into_iter().map(move |k| LayerId::new(b, k)))
            .collect()
    }

    /// Parses `blocks.{b}.{proj}`.
    pub fn parse(s: &str) -> Option<LayerId> {
        let mut parts = s.split('.');
        if parts.next()? != "blocks" {
            return None;
        }
        let block = parts.next()?.parse().ok()?;
        let kind = ProjKind::from_name(parts.next()?)?;
        parts.next().is_none().then_some(LayerId { block, kind })
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.kind.name())
    }
}

/// A projection weight `d_out × d_in`, either dense or adapted.
#[derive(Clone, Debug, PartialEq)]
pub enum Linear {
    Dense(Tensor),
    Lora(LoraLinear),
}

impl Linear {
    /// `W_eff` as a dense matrix.
    pub fn effective_weight(&self) -> Matrix {
        match self {
            Linear::Dense(w) => w.value.clone(),
            Linear::Lora(l) => l.w_res.value.add(&l.effective_delta()),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Linear::Dense(w) => w.shape(),
            Linear::Lora(l) => l.w_res.shape(),
        }
    }

    pub fn as_lora(&self) -> Option<&LoraLinear> {
        match self {
            Linear::Lora(l) => Some(l),
            Linear::Dense(_) => None,
        }
    }

    pub fn as_lora_mut(&mut self) -> Option<&mut LoraLinear> {
        match self {
            Linear::Lora(l) => Some(l),
            Linear::Dense(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Norm gains are `1 + offset`; offsets start at zero.
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    /// Indexed by `ProjKind as usize`.
    pub proj: Vec<Linear>,
}

impl Block {
    pub fn linear(&self, kind: ProjKind) -> &Linear {
        &self.proj[kind.index()]
    }

    pub fn linear_mut(&mut self, kind: ProjKind) -> &mut Linear {
        &mut self.proj[kind.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLm {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

/// Per-token inputs and outputs of selected projections, pad excluded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RepCapture {
    pub inputs: BTreeMap<LayerId, Matrix>,
    pub outputs: BTreeMap<LayerId, Matrix>,
}

impl RepCapture {
    pub fn rows(&self) -> usize {
        self.outputs.values().next().map_or(0, Matrix::rows)
    }
}

#[derive(Default)]
struct CaptureBuf {
    layers: Vec<LayerId>,
    inputs: BTreeMap<LayerId, Vec<f64>>,
    outputs: BTreeMap<LayerId, Vec<f64>>,
}

impl CaptureBuf {
    fn record(&mut self, id: LayerId, x: &Matrix, y: &Matrix) {
        if self.layers.contains(&id) {
            self.inputs.entry(id).or_default().extend_from_slice(x.data());
            self.outputs.entry(id).or_default().extend_from_slice(y.data());
        }
    }
}

enum LinearVars {
    Dense { w_t: Var },
    Lora { w_res_t: Var, a_t: Var, b_t: Var, scale: f64 },
}

struct BlockVars {
    attn_gain: Var,
    mlp_gain: Var,
    proj: Vec<LinearVars>,
}

/// All parameters of a model bound as leaves on one tape.
pub struct ModelVars {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    final_gain: Var,
    head_t: Var,
    /// Leaf per tensor, in `named_tensors` order.
    leaves: Vec<Var>,
    /// `B` leaves of adapted layers.
    lora_b: BTreeMap<LayerId, Var>,
}

impl ModelVars {
    pub fn lora_b(&self, id: &LayerId) -> Option<Var> {
        self.lora_b.get(id).copied()
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl TinyLm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<TinyLm> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let tok_emb = Tensor::trainable(normal_matrix(config.vocab_size, d, &mut rng));
        let pos_emb = Tensor::trainable(normal_matrix(config.context_len, d, &mut rng));
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                attn_norm: Tensor::trainable(Matrix::zeros(1, d)),
                mlp_norm: Tensor::trainable(Matrix::zeros(1, d)),
                proj: ProjKind::ALL
                    .iter()
                    .map(|k| {
                        let (o, i) = k.dims(&config);
                        Linear::Dense(Tensor::trainable(normal_matrix(o, i, &mut rng)))
                    })
                    .collect(),
            })
            .collect();
        let final_norm = Tensor::trainable(Matrix::zeros(1, d));
        let head = Tensor::trainable(normal_matrix(config.vocab_size, d, &mut rng));
        Ok(TinyLm {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn linear(&self, id: LayerId) -> &Linear {
        self.blocks[id.block].linear(id.kind)
    }

    pub fn linear_mut(&mut self, id: LayerId) -> &mut Linear {
        self.blocks[id.block].linear_mut(id.kind)
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        LayerId::all(self.config.n_layers)
    }

    pub fn lora_layers(&self) -> Vec<(LayerId, &LoraLinear)> {
        self.layer_ids()
            .into_iter()
            .filter_map(|id| self.linear(id).as_lora().map(|l| (id, l)))
            .collect()
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{b}.attn_norm"), &block.attn_norm));
            out.push((format!("blocks.{b}.mlp_norm"), &block.mlp_norm));
            for kind in ProjKind::ALL {
                let id = LayerId::new(b, kind);
                match block.linear(kind) {
                    Linear::Dense(w) => out.push((format!("{id}.weight"), w)),
                    Linear::Lora(l) => {
                        out.push((format!("{id}.W_res"), &l.w_res));
                        out.push((format!("{id}.A"), &l.a));
                        out.push((format!("{id}.B"), &l.b));
                    }
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable counterpart of [`TinyLm::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (b, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{b}.attn_norm"), &mut block.attn_norm));
            out.push((format!("blocks.{b}.mlp_norm"), &mut block.mlp_norm));
            for (kind, lin) in ProjKind::ALL.into_iter().zip(block.proj.iter_mut()) {
                let id = LayerId::new(b, kind);
                match lin {
                    Linear::Dense(w) => out.push((format!("{id}.weight"), w)),
                    Linear::Lora(l) => {
                        out.push((format!("{id}.W_res"), &mut l.w_res));
                        out.push((format!("{id}.A"), &mut l.a));
                        out.push((format!("{id}.B"), &mut l.b));
                    }
                }
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn n_trainable(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(_, t)| t.value.len())
            .sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.requires_grad = on;
            t.grad = None;
        }
    }

    /// Deep copy with every tensor frozen and gradients dropped.
    pub fn clone_frozen(&self) -> TinyLm {
        let mut m = self.clone();
        m.set_requires_grad(false);
        m
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    /// Binds every parameter as a leaf on `tape`. Transposes and norm gains
    /// are computed once here and shared by every sequence on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelVars> {
        let mut leaves = Vec::new();
        let mut lora_b = BTreeMap::new();
        let leaf = |tape: &mut Tape, t: &Tensor, leaves: &mut Vec<Var>| {
            let v = tape.param(t);
            leaves.push(v);
            v
        };
        let ones = tape.constant(Matrix::from_fn(1, self.config.d_model, |_, _| 1.0));
        let tok_emb = leaf(tape, &self.tok_emb, &mut leaves);
        let pos_emb = leaf(tape, &self.pos_emb, &mut leaves);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let an = leaf(tape, &block.attn_norm, &mut leaves);
            let attn_gain = tape.add(ones, an)?;
            let mn = leaf(tape, &block.mlp_norm, &mut leaves);
            let mlp_gain = tape.add(ones, mn)?;
            let mut proj = Vec::with_capacity(7);
            for (kind, lin) in ProjKind::ALL.into_iter().zip(&block.proj) {
                proj.push(match lin {
                    Linear::Dense(w) => {
                        let wv = leaf(tape, w, &mut leaves);
                        LinearVars::Dense {
                            w_t: tape.transpose(wv)?,
                        }
                    }
                    Linear::Lora(l) => {
                        let wr = leaf(tape, &l.w_res, &mut leaves);
                        let a = leaf(tape, &l.a, &mut leaves);
                        let bv = leaf(tape, &l.b, &mut leaves);
                        lora_b.insert(LayerId::new(b, kind), bv);
                        LinearVars::Lora {
                            w_res_t: tape.transpose(wr)?,
                            a_t: tape.transpose(a)?,
                            b_t: tape.transpose(bv)?,
                            scale: l.scale(),
                        }
                    }
                });
            }
            blocks.push(BlockVars {
                attn_gain,
                mlp_gain,
                proj,
            });
        }
        let fnv = leaf(tape, &self.final_norm, &mut leaves);
        let ones = tape.constant(Matrix::from_fn(1, self.config.d_model, |_, _| 1.0));
        let final_gain = tape.add(ones, fnv)?;
        let head = leaf(tape, &self.head, &mut leaves);
        let head_t = tape.transpose(head)?;
        Ok(ModelVars {
            tok_emb,
            pos_emb,
            blocks,
            final_gain,
            head_t,
            leaves,
            lora_b,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid_input("empty token sequence"));
        }
        if tokens.len() > self.config.context_len {
            return Err(invalid_input(format!(
                "sequence length {} exceeds context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(invalid_input(format!(
                "token id {bad} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn apply_linear(
        &self,
        tape: &mut Tape,
        lv: &LinearVars,
        x: Var,
        id: LayerId,
        capture: &mut Option<&mut CaptureBuf>,
    ) -> Result<Var> {
        let y = match *lv {
            LinearVars::Dense { w_t } => tape.matmul(x, w_t)?,
            LinearVars::Lora {
                w_res_t,
                a_t,
                b_t,
                scale,
            } => {
                let base = tape.matmul(x, w_res_t)?;
                let ax = tape.matmul(x, a_t)?;
                let bax = tape.matmul(ax, b_t)?;
                let delta = tape.scale(bax, scale)?;
                tape.add(base, delta)?
            }
        };
        if let Some(buf) = capture.as_deref_mut() {
            buf.record(id, tape.value(x), tape.value(y));
        }
        Ok(y)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[u32],
        mut capture: Option<&mut CaptureBuf>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let te = tape.gather(vars.tok_emb, &ids)?;
        let pe = tape.gather(vars.pos_emb, &positions)?;
        let mut x = tape.add(te, pe)?;
        let dh = self.config.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for (b, bv) in vars.blocks.iter().enumerate() {
            let id = |kind| LayerId::new(b, kind);
            let n = tape.rms_norm(x)?;
            let h = tape.mul(n, bv.attn_gain)?;
            let q = self.apply_linear(tape, &bv.proj[0], h, id(ProjKind::Q), &mut capture)?;
            let k = self.apply_linear(tape, &bv.proj[1], h, id(ProjKind::K), &mut capture)?;
            let v = self.apply_linear(tape, &bv.proj[2], h, id(ProjKind::V), &mut capture)?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for head in 0..self.config.n_heads {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let qh = tape.slice(q, lo, hi)?;
                let kh = tape.slice(k, lo, hi)?;
                let vh = tape.slice(v, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, inv_sqrt)?;
                let s = tape.causal_mask(s)?;
                let p = tape.softmax(s)?;
                heads.push(tape.matmul(p, vh)?);
            }
            let att = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat(&heads)?
            };
            let o = self.apply_linear(tape, &bv.proj[3], att, id(ProjKind::O), &mut capture)?;
            x = tape.add(x, o)?;

            let n = tape.rms_norm(x)?;
            let h = tape.mul(n, bv.mlp_gain)?;
            let g = self.apply_linear(tape, &bv.proj[4], h, id(ProjKind::Gate), &mut capture)?;
            let u = self.apply_linear(tape, &bv.proj[5], h, id(ProjKind::Up), &mut capture)?;
            let sg = tape.silu(g)?;
            let m = tape.mul(sg, u)?;
            let dn = self.apply_linear(tape, &bv.proj[6], m, id(ProjKind::Down), &mut capture)?;
            x = tape.add(x, dn)?;
        }
        let n = tape.rms_norm(x)?;
        let h = tape.mul(n, vars.final_gain)?;
        tape.matmul(h, vars.head_t)
    }

    /// Next-token logits (`T × V`) for one sequence, recorded on `tape`
    /// against parameters previously bound with [`TinyLm::bind`].
    pub fn forward_on(&self, tape: &mut Tape, vars: &ModelVars, tokens: &[u32]) -> Result<Var> {
        self.forward_inner(tape, vars, tokens, None)
    }

    /// Logits for one sequence, evaluated on a throwaway tape.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let out = self.forward_on(&mut tape, &vars, tokens)?;
        Ok(tape.value(out).clone())
    }

    /// Logits for many sequences, reusing one set of bound parameters.
    pub fn forward_many<'a>(
        &self,
        seqs: impl IntoIterator<Item = &'a [u32]>,
    ) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let base = tape.len();
        let mut out = Vec::new();
        for s in seqs {
            let v = self.forward_on(&mut tape, &vars, s)?;
            out.push(tape.value(v).clone());
            tape.truncate(base);
        }
        Ok(out)
    }

    /// Pulls gradients of `loss` back into every trainable tensor.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ModelVars, loss: Var) -> Result<()> {
        let grads = tape.backward(loss)?;
        for ((_, t), &leaf) in self.named_tensors_mut().into_iter().zip(&vars.leaves) {
            if !t.requires_grad {
                continue;
            }
            match grads.wrt(leaf) {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&Matrix::zeros(t.value.rows(), t.value.cols())),
            }
        }
        Ok(())
    }
}

/// Stacks, for each selected projection, its per-token inputs `x` and outputs
/// `h` over every non-pad position of every batch. At most `max_rows` rows
/// are kept (in batch order) when a budget is given.
pub fn collect_representations(
    model: &TinyLm,
    batches: &[Batch],
    layers: &[LayerId],
    max_rows: Option<usize>,
) -> Result<RepCapture> {
    if batches.is_empty() || batches.iter().all(Batch::is_empty) {
        return Err(invalid_input("no batches to collect representations from"));
    }
    for id in layers {
        if id.block >= model.config.n_layers {
            return Err(invalid_input(format!("{id} does not exist in this model")));
        }
    }
    let mut buf = CaptureBuf {
        layers: layers.to_vec(),
        ..Default::default()
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let base = tape.len();
    let mut rows = 0usize;
    'outer: for batch in batches {
        for i in 0..batch.len() {
            if max_rows.is_some_and(|m| rows >= m) {
                break 'outer;
            }
            let tokens = batch.real_tokens(i);
            if tokens.is_empty() {
                continue;
            }
            model.forward_inner(&mut tape, &vars, tokens, Some(&mut buf))?;
            rows += tokens.len();
            tape.truncate(base);
        }
    }
    let mut capture = RepCapture::default();
    for id in layers {
        let (d_out, d_in) = id.kind.dims(&model.config);
        let x = buf.inputs.remove(id).unwrap_or_default();
        let y = buf.outputs.remove(id).unwrap_or_default();
        let mut x = Matrix::new(x.len() / d_in, d_in, x)?;
        let mut y = Matrix::new(y.len() / d_out, d_out, y)?;
        if let Some(m) = max_rows {
            if x.rows() > m {
                x = x.rows_range(0, m);
                y = y.rows_range(0, m);
            }
        }
        capture.inputs.insert(*id, x);
        capture.outputs.insert(*id, y);
    }
    Ok(capture)
}
