//! Small sequential next-item recommenders.
//!
//! Two architectures share one surface:
//!
//! * `attn-lite`: item + reversed-position embeddings, one single-head
//!   attention read from the most recent position, residual add, and a
//!   tied-embedding output layer.
//! * `recurrent`: a single gated recurrent cell over item embeddings with the
//!   same tied output layer.
//!
//! Scores are an `m x 1` column ordered by item id (row `i` is item `i + 1`).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndiff::{Graph, NdiffError, Tensor, Var};
use crate::seqdata::{ItemId, NextItemExample, SplitDataset};

pub const GRAD_CLIP_NORM: f64 = 5.0;
const CHECKPOINT_MAGIC: &str = "grolab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("item {item} outside 1..={num_items}")]
    ItemOutOfRange { item: ItemId, num_items: usize },
    #[error("requested top-{k} but only {available} items are rankable")]
    KTooLarge { k: usize, available: usize },
    #[error("ranking lists item {0} more than once")]
    DuplicateItem(ItemId),
    #[error("training diverged: non-finite {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] NdiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    AttnLite,
    Recurrent,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::AttnLite => "attn-lite",
            Architecture::Recurrent => "recurrent",
        })
    }
}

impl FromStr for Architecture {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attn-lite" => Ok(Architecture::AttnLite),
            "recurrent" => Ok(Architecture::Recurrent),
            other => Err(ModelError::InvalidDims(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Target,
    Student,
    Surrogate,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Target => "target",
            Role::Student => "student",
            Role::Surrogate => "surrogate",
        })
    }
}

impl FromStr for Role {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "target" => Ok(Role::Target),
            "student" => Ok(Role::Student),
            "surrogate" => Ok(Role::Surrogate),
            other => Err(ModelError::Checkpoint(format!("unknown role {other:?}"))),
        }
    }
}

/// Top-k items in descending score order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankingList(Vec<ItemId>);

impl RankingList {
    pub fn new(items: Vec<ItemId>) -> Result<Self, ModelError> {
        let mut seen = HashSet::with_capacity(items.len());
        for &i in &items {
            if !seen.insert(i) {
                return Err(ModelError::DuplicateItem(i));
            }
        }
        Ok(Self(items))
    }

    pub fn items(&self) -> &[ItemId] {
        &self.0
    }

    pub fn into_items(self) -> Vec<ItemId> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 1-based position of `item`, if listed.
    pub fn position(&self, item: ItemId) -> Option<usize> {
        self.0.iter().position(|&i| i == item).map(|p| p + 1)
    }
}

/// The `k` highest-scoring items not in `exclude`; ties go to the smaller id.
pub fn topk(scores: &[f64], k: usize, exclude: &[ItemId]) -> Result<RankingList, ModelError> {
    let m = scores.len();
    let mut masked = vec![false; m];
    for &e in exclude {
        if e >= 1 && (e as usize) <= m {
            masked[e as usize - 1] = true;
        }
    }
    let mut candidates: Vec<usize> = (0..m).filter(|&i| !masked[i]).collect();
    if k > candidates.len() {
        return Err(ModelError::KTooLarge { k, available: candidates.len() });
    }
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k > 0 && k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_by(cmp);
    candidates.truncate(k);
    Ok(RankingList(candidates.into_iter().map(|i| i as ItemId + 1).collect()))
}

/// A next-item scorer. Parameter order is fixed per architecture, see
/// [`SequenceModel::param_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    architecture: Architecture,
    role: Role,
    num_items: usize,
    dim: usize,
    max_len: usize,
    params: Vec<Tensor>,
}

impl SequenceModel {
    /// Parameters drawn from a seeded uniform(-0.1, 0.1).
    pub fn init(
        architecture: Architecture,
        num_items: usize,
        dim: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if dim < 4 {
            return Err(ModelError::InvalidDims(format!("dim {dim} < 4")));
        }
        if num_items == 0 || max_len == 0 {
            return Err(ModelError::InvalidDims("num_items and max_len must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::shapes(architecture, num_items, dim, max_len)
            .into_iter()
            .map(|(_, r, c)| Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-0.1..0.1)).collect()))
            .collect();
        Ok(Self {
            architecture,
            role: Role::Target,
            num_items,
            dim,
            max_len,
            params,
        })
    }

    fn shapes(arch: Architecture, m: usize, d: usize, max_len: usize) -> Vec<(&'static str, usize, usize)> {
        match arch {
            Architecture::AttnLite => vec![
                ("item_emb", m, d),
                ("pos_emb", max_len, d),
                ("w_query", d, d),
                ("w_key", d, d),
                ("w_value", d, d),
            ],
            Architecture::Recurrent => vec![
                ("item_emb", m, d),
                ("w_update", d, d),
                ("u_update", d, d),
                ("w_reset", d, d),
                ("u_reset", d, d),
                ("w_cand", d, d),
                ("u_cand", d, d),
            ],
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        Self::shapes(self.architecture, self.num_items, self.dim, self.max_len)
            .into_iter()
            .map(|(n, _, _)| n)
            .collect()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Adds every parameter to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    fn check_sequence<'a>(&self, seq: &'a [ItemId]) -> Result<&'a [ItemId], ModelError> {
        if seq.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        for &item in seq {
            if item == 0 || item as usize > self.num_items {
                return Err(ModelError::ItemOutOfRange { item, num_items: self.num_items });
            }
        }
        Ok(&seq[seq.len().saturating_sub(self.max_len)..])
    }

    /// Builds the scoring graph for `seq` and returns the `m x 1` score node.
    pub fn forward(&self, g: &mut Graph, bound: &[Var], seq: &[ItemId]) -> Result<Var, ModelError> {
        let seq = self.check_sequence(seq)?;
        let rows: Vec<usize> = seq.iter().map(|&i| i as usize - 1).collect();
        let len = rows.len();
        let item_emb = bound[0];
        let hidden = match self.architecture {
            Architecture::AttnLite => {
                let (pos_emb, wq, wk, wv) = (bound[1], bound[2], bound[3], bound[4]);
                let items = g.gather_rows(item_emb, &rows);
                let positions: Vec<usize> = (0..len).rev().collect();
                let pos = g.gather_rows(pos_emb, &positions);
                let x = g.add(items, pos);
                let last = g.gather_rows(x, &[len - 1]);
                let q = g.matmul(last, wq);
                let k = g.matmul(x, wk);
                let v = g.matmul(x, wv);
                let logits = g.matmul_nt(q, k);
                let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
                let att = g.softmax_rows(logits);
                let ctx = g.matmul(att, v);
                g.add(last, ctx)
            }
            Architecture::Recurrent => {
                let (wz, uz, wr, ur, wn, un) = (bound[1], bound[2], bound[3], bound[4], bound[5], bound[6]);
                let x = g.gather_rows(item_emb, &rows);
                let xz = g.matmul(x, wz);
                let xr = g.matmul(x, wr);
                let xn = g.matmul(x, wn);
                let mut h = g.leaf(Tensor::zeros(1, self.dim));
                for t in 0..len {
                    let hz = g.matmul(h, uz);
                    let xz_t = g.gather_rows(xz, &[t]);
                    let z = g.add(xz_t, hz);
                    let z = g.sigmoid(z);
                    let hr = g.matmul(h, ur);
                    let xr_t = g.gather_rows(xr, &[t]);
                    let r = g.add(xr_t, hr);
                    let r = g.sigmoid(r);
                    let rh = g.mul(r, h);
                    let rh = g.matmul(rh, un);
                    let xn_t = g.gather_rows(xn, &[t]);
                    let n = g.add(xn_t, rh);
                    let n = g.tanh(n);
                    let delta = g.sub(n, h);
                    let step = g.mul(z, delta);
                    h = g.add(h, step);
                }
                h
            }
        };
        Ok(g.matmul_nt(item_emb, hidden))
    }

    /// Scores for all `m` items given `seq` (truncated to its last `max_len` items).
    pub fn score_next(&self, seq: &[ItemId]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, seq)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Ranked recommendation for `seq`, never listing items already in it.
    pub fn recommend(&self, seq: &[ItemId], k: usize) -> Result<RankingList, ModelError> {
        let scores = self.score_next(seq)?;
        topk(&scores, k, seq)
    }

    /// SGD step with global-norm clipping; returns the pre-clip norm.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64, clip: f64) -> Result<f64, ModelError> {
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(ModelError::Divergence("gradient".into()));
        }
        let factor = if norm > clip { clip / norm } else { 1.0 };
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * factor * d;
            }
        }
        if !self.params_finite() {
            return Err(ModelError::Divergence("parameters".into()));
        }
        Ok(norm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Text checkpoint, see the crate README for the layout.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), ModelError> {
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(w, "architecture {}", self.architecture)?;
        writeln!(w, "role {}", self.role)?;
        writeln!(w, "num_items {}", self.num_items)?;
        writeln!(w, "dim {}", self.dim)?;
        writeln!(w, "max_len {}", self.max_len)?;
        for (name, t) in self.param_names().into_iter().zip(&self.params) {
            writeln!(w, "tensor {name} {} {}", t.rows(), t.cols())?;
            for r in 0..t.rows() {
                let line: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let f = BufReader::new(fs::File::open(path)?);
        Self::read_checkpoint(f)
    }

    pub fn read_checkpoint(r: impl BufRead) -> Result<Self, ModelError> {
        fn bad(msg: impl Into<String>) -> ModelError {
            ModelError::Checkpoint(msg.into())
        }
        let lines = r.lines().collect::<Result<Vec<_>, _>>()?;
        let mut cursor = lines.iter();
        let mut next = || cursor.next().ok_or_else(|| bad("unexpected end of file"));
        let header = next()?;
        if *header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let field = |line: &String, key: &str| -> Result<String, ModelError> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected {key}, found {line:?}")))
        };
        let parse_usize = |s: String| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let architecture: Architecture = field(next()?, "architecture")?.parse()?;
        let role: Role = field(next()?, "role")?.parse()?;
        let num_items = parse_usize(field(next()?, "num_items")?)?;
        let dim = parse_usize(field(next()?, "dim")?)?;
        let max_len = parse_usize(field(next()?, "max_len")?)?;
        let mut model = Self::init(architecture, num_items, dim, max_len, 0)?.with_role(role);
        let shapes = Self::shapes(architecture, num_items, dim, max_len);
        for (slot, (name, rows, cols)) in model.params.iter_mut().zip(shapes) {
            let expected = format!("{name} {rows} {cols}");
            let got = field(next()?, "tensor")?;
            if got != expected {
                return Err(bad(format!("expected tensor {expected}, found {got}")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                for tok in next()?.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|_| bad("bad float"))?);
                }
            }
            if data.len() != rows * cols {
                return Err(bad(format!("tensor {name} has {} values", data.len())));
            }
            *slot = Tensor::from_vec(rows, cols, data);
        }
        Ok(model)
    }
}

/// Parameter update rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(ModelError::InvalidDims(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Stateful optimizer bound to one model's parameter shapes. Gradients are
/// clipped to a global norm of [`GRAD_CLIP_NORM`] before either rule.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &SequenceModel, lr: f64) -> Self {
        let zeros = || model.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Self {
            kind,
            lr,
            step: 0,
            first,
            second,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, model: &mut SequenceModel, grads: &[Tensor]) -> Result<f64, ModelError> {
        if self.kind == OptimizerKind::Sgd {
            return model.sgd_step(grads, self.lr, GRAD_CLIP_NORM);
        }
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(ModelError::Divergence("gradient".into()));
        }
        let factor = if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 };
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((p, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((w, &d), mi), vi) in it {
                let d = d * factor;
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * d;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * d * d;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
        if !model.params_finite() {
            return Err(ModelError::Divergence("parameters".into()));
        }
        Ok(norm)
    }
}

/// Mean loss over a batch plus per-parameter gradients of that mean.
pub fn batch_gradients<T, F>(
    model: &SequenceModel,
    batch: &[T],
    mut loss_of: F,
) -> Result<(f64, Vec<Tensor>), ModelError>
where
    F: FnMut(&mut Graph, &[Var], &T) -> Result<Var, ModelError>,
{
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        losses.push(loss_of(&mut g, &bound, item)?);
    }
    let stacked = g.concat_rows(&losses);
    let mean = g.mean(stacked);
    let value = g.value(mean).item();
    if !value.is_finite() {
        return Err(ModelError::Divergence("loss".into()));
    }
    g.backward(mean)?;
    let grads = bound.iter().map(|&v| g.take_grad(v)).collect();
    Ok((value, grads))
}

fn ce_loss(model: &SequenceModel, g: &mut Graph, bound: &[Var], ex: &NextItemExample) -> Result<Var, ModelError> {
    let scores = model.forward(g, bound, &ex.prefix)?;
    Ok(g.softmax_cross_entropy(scores, ex.target as usize - 1))
}

/// Mean next-item cross-entropy over `examples` without updating anything.
pub fn ce_eval_loss(model: &SequenceModel, examples: &[NextItemExample]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let l = ce_loss(model, &mut g, &bound, ex)?;
        total += g.value(l).item();
    }
    Ok(total / examples.len().max(1) as f64)
}

/// One shuffled pass of next-item cross-entropy over every sliding position.
/// Returns the mean per-example loss observed during the pass.
pub fn ce_train_epoch(
    model: &mut SequenceModel,
    split: &SplitDataset,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    let mut examples = split.training_examples(model.max_len());
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ce_train_on(model, &examples, lr, batch_size)
}

pub fn ce_train_on(
    model: &mut SequenceModel,
    examples: &[NextItemExample],
    lr: f64,
    batch_size: usize,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for batch in examples.chunks(batch_size.max(1)) {
        let (loss, grads) = batch_gradients(model, batch, |g, b, ex| ce_loss(model, g, b, ex))?;
        total += loss * batch.len() as f64;
        model.sgd_step(&grads, lr, GRAD_CLIP_NORM)?;
    }
    Ok(total / examples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::grad_check;
    use crate::seqdata::{leave_one_out_split, InteractionDataset};

    #[test]
    fn topk_examples() {
        assert_eq!(topk(&[0.1, 0.9, 0.5], 2, &[]).unwrap().items(), &[2, 3]);
        assert_eq!(topk(&[1.0; 5], 3, &[]).unwrap().items(), &[1, 2, 3]);
        assert_eq!(topk(&[0.1, 0.9, 0.5], 2, &[2]).unwrap().items(), &[3, 1]);
        assert!(matches!(
            topk(&[0.1, 0.9, 0.5], 3, &[2]),
            Err(ModelError::KTooLarge { k: 3, available: 2 })
        ));
        assert_eq!(topk(&[0.3, 0.2], 2, &[]).unwrap().items(), &[1, 2]);
    }

    #[test]
    fn ranking_rejects_duplicates() {
        assert!(matches!(RankingList::new(vec![1, 2, 1]), Err(ModelError::DuplicateItem(1))));
        assert_eq!(RankingList::new(vec![4, 2]).unwrap().position(2), Some(2));
    }

    #[test]
    fn init_is_seeded() {
        for arch in [Architecture::AttnLite, Architecture::Recurrent] {
            let a = SequenceModel::init(arch, 30, 8, 5, 1).unwrap();
            let b = SequenceModel::init(arch, 30, 8, 5, 1).unwrap();
            let c = SequenceModel::init(arch, 30, 8, 5, 2).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
            assert_eq!(a.score_next(&[3, 4]).unwrap().len(), 30);
            assert!(a.params().iter().flat_map(|p| p.data()).all(|v| (-0.1..0.1).contains(v)));
        }
        let attn = SequenceModel::init(Architecture::AttnLite, 30, 8, 5, 1).unwrap();
        let rec = SequenceModel::init(Architecture::Recurrent, 30, 8, 5, 1).unwrap();
        assert_ne!(attn.params().len(), rec.params().len());
        assert!(SequenceModel::init(Architecture::AttnLite, 30, 3, 5, 1).is_err());
    }

    #[test]
    fn score_next_errors_and_purity() {
        let m = SequenceModel::init(Architecture::Recurrent, 10, 4, 3, 0).unwrap();
        assert!(matches!(m.score_next(&[]), Err(ModelError::EmptySequence)));
        assert!(matches!(m.score_next(&[11]), Err(ModelError::ItemOutOfRange { item: 11, .. })));
        assert!(matches!(m.score_next(&[0]), Err(ModelError::ItemOutOfRange { item: 0, .. })));
        assert_eq!(m.score_next(&[1, 2, 3, 4]).unwrap(), m.score_next(&[1, 2, 3, 4]).unwrap());
        // truncation to max_len
        assert_eq!(m.score_next(&[9, 2, 3, 4]).unwrap(), m.score_next(&[2, 3, 4]).unwrap());
    }

    #[test]
    fn recommend_excludes_history() {
        let m = SequenceModel::init(Architecture::AttnLite, 12, 4, 4, 3).unwrap();
        let seq = [1, 5, 7];
        let rec = m.recommend(&seq, 9).unwrap();
        assert!(rec.items().iter().all(|i| !seq.contains(i)));
    }

    fn model_grad_check(arch: Architecture) {
        // gradient w.r.t. every parameter entry, flattened into one vector
        let base = SequenceModel::init(arch, 7, 4, 3, 9).unwrap();
        let point: Vec<f64> = base.params().iter().flat_map(|p| p.data().to_vec()).collect();
        let shapes: Vec<(usize, usize)> = base.params().iter().map(Tensor::shape).collect();
        let report = grad_check(
            |g, x| {
                let mut offset = 0;
                let mut bound = Vec::new();
                for &(r, c) in &shapes {
                    let rows: Vec<Var> = (0..r)
                        .map(|i| {
                            let idx: Vec<usize> = (offset + i * c..offset + (i + 1) * c).collect();
                            let col = g.gather_rows(x, &idx);
                            g.transpose(col)
                        })
                        .collect();
                    bound.push(g.concat_rows(&rows));
                    offset += r * c;
                }
                let s = base.forward(g, &bound, &[3, 1, 6]).unwrap();
                g.softmax_cross_entropy(s, 4)
            },
            &point,
            1e-4,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.pass, "{arch}: {report:?}");
    }

    #[test]
    fn attn_lite_gradients_match_fd() {
        model_grad_check(Architecture::AttnLite);
    }

    #[test]
    fn recurrent_gradients_match_fd() {
        model_grad_check(Architecture::Recurrent);
    }

    fn tiny_split() -> SplitDataset {
        let ds = InteractionDataset::new(
            vec![vec![1, 2, 3, 4, 5, 6, 7, 8], vec![8, 7, 6, 5, 4, 3, 2, 1], vec![2, 4, 6, 8, 1, 3, 5, 7]],
            8,
        )
        .unwrap();
        leave_one_out_split(&ds).unwrap()
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let split = tiny_split();
        let mut m = SequenceModel::init(Architecture::AttnLite, 8, 8, 4, 4).unwrap();
        let before = m.clone();
        let loss = ce_train_epoch(&mut m, &split, 0.0, 4, 1).unwrap();
        assert_eq!(m, before);
        let eval = ce_eval_loss(&m, &split.training_examples(4)).unwrap();
        assert!((loss - eval).abs() < 1e-12, "{loss} vs {eval}");
    }

    #[test]
    fn single_user_memorization() {
        let ds = InteractionDataset::new(vec![vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]], 10).unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        for arch in [Architecture::AttnLite, Architecture::Recurrent] {
            let mut m = SequenceModel::init(arch, 10, 16, 8, 1).unwrap();
            let mut last = f64::INFINITY;
            for epoch in 0..200 {
                last = ce_train_epoch(&mut m, &split, 0.5, 8, epoch).unwrap();
            }
            let eval = ce_eval_loss(&m, &split.training_examples(8)).unwrap();
            assert!(eval < 0.1, "{arch}: final epoch loss {last}, eval {eval}");
            assert!(m.params_finite());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        for arch in [Architecture::AttnLite, Architecture::Recurrent] {
            let mut m = SequenceModel::init(arch, 9, 5, 4, 77).unwrap().with_role(Role::Surrogate);
            m.params_mut()[0].data_mut()[0] = 1.0 / 3.0;
            m.params_mut()[1].data_mut()[2] = -2.5e-300;
            let mut buf = Vec::new();
            m.write_checkpoint(&mut buf).unwrap();
            let back = SequenceModel::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let err = SequenceModel::read_checkpoint("nope\n".as_bytes()).unwrap_err();
        assert!(matches!(err, ModelError::Checkpoint(_)));
        let m = SequenceModel::init(Architecture::AttnLite, 9, 4, 4, 1).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("tensor pos_emb 4 4", "tensor pos_emb 4 5");
        assert!(SequenceModel::read_checkpoint(text.as_bytes()).is_err());
    }
}
