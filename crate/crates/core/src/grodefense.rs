//! Gradient-based ranking optimization.
//!
//! A target's top-k list for a sequence is encoded as a one-hot swap matrix
//! `A` (`k x m`). A student imitates the target through `A · S_student`, so
//! the gradient of the student's loss with respect to `A` says which item, put
//! at which position, would hurt imitation most. The row-wise argmax of that
//! gradient is the proposal `A'`, and the swap loss
//! `(1/k) Σ_i max((A_i - A'_i) · S_target + m_swap, 0)` pushes the target to
//! rank the proposed items at least as high as what it ranks now. The target
//! is fine-tuned on `L_target + λ L_swap` while the student follows its own
//! loss; afterwards the student is thrown away.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalmetrics::{hit_rate, MetricsError};
use crate::extraction::{ranking_hinge_loss, sample_negatives, ExtractionError};
use crate::ndiff::{compare_gradients, GradCheckReport, Graph, NdiffError, Tensor, Var};
use crate::recmodels::{ce_train_epoch, topk, ModelError, Role, SequenceModel, GRAD_CLIP_NORM};
use crate::seqdata::{ItemId, NextItemExample, SplitDataset};

#[derive(Debug, Error)]
pub enum GroError {
    #[error("invalid GRO config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("item {0} appears twice in the ranking")]
    DuplicateItem(ItemId),
    #[error("item {item} outside 1..={num_items}")]
    ItemOutOfRange { item: ItemId, num_items: usize },
    #[error("negative item {0} is one of the ranked items")]
    NegativeOverlap(ItemId),
    #[error("loss does not depend on the swap matrix")]
    NotConnected,
    #[error("target not converged: validation HR@10 {val_hr:.4} below {floor:.4}")]
    Unconverged { val_hr: f64, floor: f64 },
    #[error("non-finite loss at step {step}: L_target={l_target} L_student={l_student} L_swap={l_swap}")]
    Divergence {
        step: usize,
        l_target: f64,
        l_student: f64,
        l_swap: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] NdiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One-hot `k x m` matrix with pairwise distinct columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwapMatrix {
    m: usize,
    cols: Vec<usize>,
}

impl SwapMatrix {
    pub fn k(&self) -> usize {
        self.cols.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Zero-based column of the 1 in zero-based row `row`.
    pub fn column(&self, row: usize) -> usize {
        self.cols[row]
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.cols.iter().map(|&c| c as ItemId + 1).collect()
    }

    pub fn to_dense(&self) -> Tensor {
        one_hot(&self.cols, self.m)
    }

    /// `A · (1, 2, …, m)ᵀ`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let ids: Vec<f64> = (1..=self.m).map(|i| i as f64).collect();
        let dense = self.to_dense();
        (0..self.k()).map(|r| dense.row(r).iter().zip(&ids).map(|(a, b)| a * b).sum()).collect()
    }
}

fn one_hot(cols: &[usize], m: usize) -> Tensor {
    let mut t = Tensor::zeros(cols.len(), m);
    for (r, &c) in cols.iter().enumerate() {
        t.set(r, c, 1.0);
    }
    t
}

/// `∂L_student / ∂A`, same shape as the swap matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMatrix(pub Tensor);

impl GradientMatrix {
    pub fn entries(&self) -> &Tensor {
        &self.0
    }
}

/// One-hot rows; columns may repeat.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProposalMatrix {
    m: usize,
    cols: Vec<usize>,
    /// Rows whose largest admissible gradient was `<= 0`.
    pub nonpositive_rows: usize,
}

impl ProposalMatrix {
    pub fn from_items(items: &[ItemId], m: usize) -> Result<Self, GroError> {
        let cols = items
            .iter()
            .map(|&i| check_item(i, m).map(|_| i as usize - 1))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            m,
            cols,
            nonpositive_rows: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.cols.len()
    }

    pub fn column(&self, row: usize) -> usize {
        self.cols[row]
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.cols.iter().map(|&c| c as ItemId + 1).collect()
    }

    pub fn to_dense(&self) -> Tensor {
        one_hot(&self.cols, self.m)
    }
}

fn check_item(item: ItemId, m: usize) -> Result<(), GroError> {
    if item == 0 || item as usize > m {
        return Err(GroError::ItemOutOfRange { item, num_items: m });
    }
    Ok(())
}

pub fn topk_to_swap_matrix(ranking: &[ItemId], m: usize) -> Result<SwapMatrix, GroError> {
    if ranking.len() > m {
        return Err(GroError::Shape(format!("k = {} exceeds m = {m}", ranking.len())));
    }
    let mut seen = vec![false; m];
    let mut cols = Vec::with_capacity(ranking.len());
    for &item in ranking {
        check_item(item, m)?;
        let c = item as usize - 1;
        if std::mem::replace(&mut seen[c], true) {
            return Err(GroError::DuplicateItem(item));
        }
        cols.push(c);
    }
    Ok(SwapMatrix { m, cols })
}

/// `A · S`: the scores of the ranked items, in ranking order.
pub fn swapped_scores(a: &SwapMatrix, scores: &[f64]) -> Result<Vec<f64>, GroError> {
    if scores.len() != a.m {
        return Err(GroError::Shape(format!("A has {} columns, S has {} entries", a.m, scores.len())));
    }
    Ok(a.cols.iter().map(|&c| scores[c]).collect())
}

/// The student's margin loss on `A · S_student`, with `A` held in a fresh
/// leaf so its gradient can be read back. Returns `(loss, A leaf)`.
pub fn student_loss_on_swap(
    g: &mut Graph,
    a: &SwapMatrix,
    s_student: Var,
    negatives: &[ItemId],
    m1: f64,
    m2: f64,
) -> Result<(Var, Var), GroError> {
    if g.value(s_student).shape() != (a.m, 1) {
        return Err(GroError::Shape(format!(
            "student scores {:?}, expected ({}, 1)",
            g.value(s_student).shape(),
            a.m
        )));
    }
    let k = a.k();
    if k == 0 || negatives.is_empty() || negatives.len() % k != 0 {
        return Err(GroError::Shape(format!("{} negatives for {k} ranked items", negatives.len())));
    }
    let mut rows = Vec::with_capacity(negatives.len());
    for &n in negatives {
        check_item(n, a.m)?;
        if a.cols.contains(&(n as usize - 1)) {
            return Err(GroError::NegativeOverlap(n));
        }
        rows.push(n as usize - 1);
    }
    let leaf = g.leaf(a.to_dense());
    let swapped = g.matmul(leaf, s_student);
    let neg = g.gather_rows(s_student, &rows);
    Ok((ranking_hinge_loss(g, swapped, neg, m1, m2), leaf))
}

/// Backpropagates `loss` and returns the gradient that landed on the `A` leaf.
pub fn grad_wrt_swap(g: &mut Graph, a_leaf: Var, loss: Var) -> Result<GradientMatrix, GroError> {
    if !g.depends_on(loss, a_leaf) {
        return Err(GroError::NotConnected);
    }
    g.backward(loss)?;
    Ok(GradientMatrix(g.grad(a_leaf)))
}

/// Row-wise argmax of the gradient; ties go to the smallest column.
pub fn build_proposal(grad: &GradientMatrix) -> ProposalMatrix {
    build_proposal_masked(grad, &[])
}

/// As [`build_proposal`], but the columns of `exclude` are never chosen.
/// A row with every column excluded falls back to column 1.
pub fn build_proposal_masked(grad: &GradientMatrix, exclude: &[ItemId]) -> ProposalMatrix {
    let t = &grad.0;
    let m = t.cols();
    let mut allowed = vec![true; m];
    for &e in exclude {
        if e >= 1 && (e as usize) <= m {
            allowed[e as usize - 1] = false;
        }
    }
    let mut nonpositive_rows = 0;
    let cols = (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best: Option<usize> = None;
            for (c, &v) in row.iter().enumerate() {
                if allowed[c] && best.is_none_or(|b| v > row[b]) {
                    best = Some(c);
                }
            }
            let c = best.unwrap_or(0);
            if row[c] <= 0.0 {
                nonpositive_rows += 1;
            }
            c
        })
        .collect();
    ProposalMatrix {
        m,
        cols,
        nonpositive_rows,
    }
}

fn check_pair(a: &SwapMatrix, p: &ProposalMatrix, len: usize) -> Result<(), GroError> {
    if a.k() != p.k() || a.m != p.m || a.m != len {
        return Err(GroError::Shape(format!(
            "A {}x{}, A' {}x{}, S {len}",
            a.k(),
            a.m,
            p.k(),
            p.m
        )));
    }
    Ok(())
}

/// Plain evaluation of the swap loss on fixed target scores.
pub fn swap_loss_value(a: &SwapMatrix, p: &ProposalMatrix, s_target: &[f64], m_swap: f64) -> Result<f64, GroError> {
    check_pair(a, p, s_target.len())?;
    let total: f64 = (0..a.k())
        .map(|i| (s_target[a.cols[i]] - s_target[p.cols[i]] + m_swap).max(0.0))
        .sum();
    Ok(total / a.k().max(1) as f64)
}

/// The swap loss as a node; only `s_target` receives gradient.
pub fn swap_loss(g: &mut Graph, a: &SwapMatrix, p: &ProposalMatrix, s_target: Var, m_swap: f64) -> Result<Var, GroError> {
    let (rows, cols) = g.value(s_target).shape();
    if cols != 1 {
        return Err(GroError::Shape(format!("target scores must be a column, got {rows}x{cols}")));
    }
    check_pair(a, p, rows)?;
    let mut diff = a.to_dense();
    for (r, &c) in p.cols.iter().enumerate() {
        diff.set(r, c, diff.get(r, c) - 1.0);
    }
    let d = g.leaf(diff);
    let gap = g.matmul(d, s_target);
    let gap = g.add_scalar(gap, m_swap);
    let h = g.hinge(gap);
    Ok(g.mean(h))
}

/// Checks [`grad_wrt_swap`] against central differences over every entry of
/// `A`, treating `A` as a real matrix. Entries whose `±10h` perturbation flips
/// a hinge are excluded.
pub fn check_swap_gradient(
    a: &SwapMatrix,
    s_student: &[f64],
    negatives: &[ItemId],
    m1: f64,
    m2: f64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, GroError> {
    let mut g = Graph::new();
    let s = g.leaf(Tensor::column(s_student.to_vec()));
    let (loss, leaf) = student_loss_on_swap(&mut g, a, s, negatives, m1, m2)?;
    let analytic = grad_wrt_swap(&mut g, leaf, loss)?.0.into_vec();
    let base = g.activation_pattern();

    let (k, m) = (a.k(), a.m);
    let rows: Vec<usize> = negatives.iter().map(|&n| n as usize - 1).collect();
    let eval = |flat: &[f64]| -> (f64, Vec<bool>) {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::column(s_student.to_vec()));
        let a = g.leaf(Tensor::from_vec(k, m, flat.to_vec()));
        let swapped = g.matmul(a, s);
        let neg = g.gather_rows(s, &rows);
        let l = ranking_hinge_loss(&mut g, swapped, neg, m1, m2);
        (g.value(l).item(), g.activation_pattern())
    };

    let point = a.to_dense().into_vec();
    let mut excluded = Vec::new();
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe[i];
        for delta in [10.0 * h, -10.0 * h] {
            probe[i] = orig + delta;
            if eval(&probe).1 != base {
                excluded.push(i);
                break;
            }
        }
        probe[i] = orig;
    }
    Ok(compare_gradients(&analytic, |x| eval(x).0, &point, h, tol, 0.0, excluded)?)
}

/// Outcome of checking the first-occurrence property on a converged pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Lemma1Report {
    /// False when the swap loss at `m_swap = 0` is not zero.
    pub applicable: bool,
    pub positions_checked: usize,
    /// 1-based positions where a first-occurrence `a'_i` differs from `a_i`.
    pub violations: Vec<usize>,
}

fn first_occurrences(p: &ProposalMatrix) -> Vec<bool> {
    let mut seen = vec![false; p.m];
    p.cols.iter().map(|&c| !std::mem::replace(&mut seen[c], true)).collect()
}

/// If the swap loss with zero margin vanishes, every row of `A'` whose item
/// has not appeared in an earlier row should agree with `A`.
pub fn lemma1_verify(a: &SwapMatrix, p: &ProposalMatrix, s_target: &[f64]) -> Result<Lemma1Report, GroError> {
    let loss = swap_loss_value(a, p, s_target, 0.0)?;
    if loss != 0.0 {
        return Ok(Lemma1Report {
            applicable: false,
            positions_checked: 0,
            violations: vec![],
        });
    }
    let first = first_occurrences(p);
    let mut report = Lemma1Report {
        applicable: true,
        positions_checked: 0,
        violations: vec![],
    };
    for i in 0..a.k() {
        if first[i] {
            report.positions_checked += 1;
            if a.cols[i] != p.cols[i] {
                report.violations.push(i + 1);
            }
        }
    }
    Ok(report)
}

/// The part of the first-occurrence property that holds unconditionally:
/// with zero swap loss at `m_swap = 0`, rows before the first repeated row of
/// `A'` agree with `A`.
pub fn prefix_agreement_verify(a: &SwapMatrix, p: &ProposalMatrix, s_target: &[f64]) -> Result<Lemma1Report, GroError> {
    let loss = swap_loss_value(a, p, s_target, 0.0)?;
    if loss != 0.0 {
        return Ok(Lemma1Report {
            applicable: false,
            positions_checked: 0,
            violations: vec![],
        });
    }
    let first = first_occurrences(p);
    let upto = first.iter().position(|f| !f).unwrap_or(a.k());
    let violations = (0..upto).filter(|&i| a.cols[i] != p.cols[i]).map(|i| i + 1).collect();
    Ok(Lemma1Report {
        applicable: true,
        positions_checked: upto,
        violations,
    })
}

/// `(agreeing, total)` over first-occurrence rows of `A'`.
pub fn first_occurrence_agreement(a: &SwapMatrix, p: &ProposalMatrix) -> (usize, usize) {
    let first = first_occurrences(p);
    let mut agree = 0;
    let mut total = 0;
    for i in 0..a.k().min(p.k()) {
        if first[i] {
            total += 1;
            if a.cols[i] == p.cols[i] {
                agree += 1;
            }
        }
    }
    (agree, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroConfig {
    pub k: usize,
    pub lambda: f64,
    pub m_swap: f64,
    pub m1: f64,
    pub m2: f64,
    pub negatives_per_position: usize,
    pub lr_target: f64,
    pub lr_student: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep the student at its initialization.
    pub freeze_student: bool,
    /// Never propose items already in the input sequence.
    pub mask_history: bool,
}

impl Default for GroConfig {
    fn default() -> Self {
        Self {
            k: 100,
            lambda: 1.0,
            m_swap: 0.1,
            m1: 0.1,
            m2: 0.1,
            negatives_per_position: 1,
            lr_target: 0.1,
            lr_student: 0.5,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            freeze_student: false,
            mask_history: true,
        }
    }
}

impl GroConfig {
    pub fn validate(&self) -> Result<(), GroError> {
        let fail = |s: &str| Err(GroError::InvalidConfig(s.into()));
        if !(self.lambda >= 0.0) {
            return fail("lambda must be >= 0");
        }
        if !(self.m_swap >= 0.0 && self.m1 >= 0.0 && self.m2 >= 0.0) {
            return fail("margins must be >= 0");
        }
        if self.k == 0 || self.batch_size == 0 || self.negatives_per_position == 0 {
            return fail("k, batch_size and negatives_per_position must be positive");
        }
        Ok(())
    }
}

/// Batch means of the three loss terms, recorded per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub l_target: f64,
    pub l_student: f64,
    pub l_swap: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub l_target: f64,
    pub l_student: f64,
    pub l_swap: f64,
    pub nonpositive_rows: usize,
    pub rows: usize,
    /// First-occurrence rows of `A'` that agreed with `A`, and their count.
    pub agreement: (usize, usize),
}

/// One joint update over `batch`.
///
/// For each example the target's top-k gives `A`, the student's loss through
/// `A` gives `∂L_student/∂A` and hence `A'`, and the swap loss is taken on the
/// target's scores. The target steps along `∂(L_target + λ L_swap)/∂θ`, the
/// student along `∂L_student/∂φ`.
pub fn gro_joint_step(
    target: &mut SequenceModel,
    student: &mut SequenceModel,
    batch: &[NextItemExample],
    cfg: &GroConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats, GroError> {
    if batch.is_empty() {
        return Err(GroError::InvalidConfig("empty batch".into()));
    }
    let m = target.num_items();
    let mut tg = Graph::new();
    let tb = target.bind(&mut tg);
    let mut sg = Graph::new();
    let sb = student.bind(&mut sg);

    let mut ce = Vec::with_capacity(batch.len());
    let mut pending = Vec::with_capacity(batch.len());
    let mut student_losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let s_t = target.forward(&mut tg, &tb, &ex.prefix)?;
        ce.push(tg.softmax_cross_entropy(s_t, ex.target as usize - 1));
        let ranking = topk(tg.value(s_t).data(), cfg.k, &ex.prefix)?;
        let a = topk_to_swap_matrix(ranking.items(), m)?;
        let negs = sample_negatives(rng, m, ranking.items(), cfg.k * cfg.negatives_per_position)?;
        let s_s = student.forward(&mut sg, &sb, &ex.prefix)?;
        let (l, leaf) = student_loss_on_swap(&mut sg, &a, s_s, &negs, cfg.m1, cfg.m2)?;
        student_losses.push(l);
        pending.push((s_t, a, leaf));
    }
    let stacked = sg.concat_rows(&student_losses);
    let l_student = sg.mean(stacked);
    sg.backward(l_student)?;

    let mut swaps = Vec::with_capacity(batch.len());
    let mut nonpositive_rows = 0;
    let mut agreement = (0, 0);
    for ((s_t, a, leaf), ex) in pending.iter().zip(batch) {
        let grad = GradientMatrix(sg.grad(*leaf));
        let exclude: &[ItemId] = if cfg.mask_history { &ex.prefix } else { &[] };
        let p = build_proposal_masked(&grad, exclude);
        nonpositive_rows += p.nonpositive_rows;
        let (ag, tot) = first_occurrence_agreement(a, &p);
        agreement.0 += ag;
        agreement.1 += tot;
        swaps.push(swap_loss(&mut tg, a, &p, *s_t, cfg.m_swap)?);
    }
    let ce_stack = tg.concat_rows(&ce);
    let l_target = tg.mean(ce_stack);
    let swap_stack = tg.concat_rows(&swaps);
    let l_swap = tg.mean(swap_stack);
    let weighted = tg.scale(l_swap, cfg.lambda);
    let total = tg.add(l_target, weighted);

    let stats = StepStats {
        l_target: tg.value(l_target).item(),
        l_student: sg.value(l_student).item(),
        l_swap: tg.value(l_swap).item(),
        nonpositive_rows,
        rows: batch.len() * cfg.k,
        agreement,
    };
    if !(stats.l_target.is_finite() && stats.l_student.is_finite() && stats.l_swap.is_finite()) {
        return Err(GroError::Divergence {
            step: 0,
            l_target: stats.l_target,
            l_student: stats.l_student,
            l_swap: stats.l_swap,
        });
    }
    tg.backward(total)?;
    let target_grads: Vec<Tensor> = tb.iter().map(|&v| tg.take_grad(v)).collect();
    target.sgd_step(&target_grads, cfg.lr_target, GRAD_CLIP_NORM)?;
    if !cfg.freeze_student {
        let student_grads: Vec<Tensor> = sb.iter().map(|&v| sg.take_grad(v)).collect();
        student.sgd_step(&student_grads, cfg.lr_student, GRAD_CLIP_NORM)?;
    }
    Ok(stats)
}

/// Validation HR@10 a pretrained target must reach: three times the
/// hit rate of a uniformly random ranking.
pub fn convergence_floor(num_items: usize) -> f64 {
    3.0 * 10.0 / num_items as f64
}

#[derive(Clone, Debug)]
pub struct GroOutcome {
    pub target: SequenceModel,
    pub curve: Vec<CurvePoint>,
    pub nonpositive_rows: usize,
    pub rows: usize,
}

/// Fine-tunes a converged target jointly with a fresh student of the same
/// architecture and returns the protected target.
pub fn train_with_gro(target: &SequenceModel, data: &SplitDataset, cfg: &GroConfig) -> Result<GroOutcome, GroError> {
    cfg.validate()?;
    let mut outcome = GroOutcome {
        target: target.clone(),
        curve: Vec::new(),
        nonpositive_rows: 0,
        rows: 0,
    };
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    let floor = convergence_floor(target.num_items());
    let val_hr = hit_rate(target, &data.validation_examples(), 10)?;
    if val_hr < floor {
        return Err(GroError::Unconverged { val_hr, floor });
    }
    let mut student = SequenceModel::init(
        target.architecture(),
        target.num_items(),
        target.dim(),
        target.max_len(),
        cfg.seed.wrapping_add(1),
    )?
    .with_role(Role::Student);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = data.training_examples(target.max_len());
    let protected = &mut outcome.target;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        examples.shuffle(&mut rng);
        for batch in examples.chunks(cfg.batch_size) {
            let stats = gro_joint_step(protected, &mut student, batch, cfg, &mut rng).map_err(|e| match e {
                GroError::Divergence {
                    l_target,
                    l_student,
                    l_swap,
                    ..
                } => GroError::Divergence {
                    step,
                    l_target,
                    l_student,
                    l_swap,
                },
                other => other,
            })?;
            outcome.nonpositive_rows += stats.nonpositive_rows;
            outcome.rows += stats.rows;
            outcome.curve.push(CurvePoint {
                step,
                l_target: stats.l_target,
                l_student: stats.l_student,
                l_swap: stats.l_swap,
                lambda: cfg.lambda,
            });
            step += 1;
        }
    }
    Ok(outcome)
}

pub fn write_curve_csv(curve: &[CurvePoint], path: impl AsRef<Path>) -> Result<(), GroError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            batch_size: 32,
            max_epochs: 40,
            patience: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_hr: f64,
    pub train_loss: Vec<f64>,
    pub val_hr: Vec<f64>,
}

/// Cross-entropy training until validation HR@10 stops improving; the best
/// parameters seen are restored at the end.
pub fn pretrain_until_plateau(
    model: &mut SequenceModel,
    data: &SplitDataset,
    cfg: &PretrainConfig,
) -> Result<PretrainReport, GroError> {
    let val = data.validation_examples();
    let mut best_params = model.params().to_vec();
    let mut report = PretrainReport {
        epochs_run: 0,
        best_epoch: 0,
        best_val_hr: hit_rate(model, &val, 10)?,
        train_loss: Vec::new(),
        val_hr: Vec::new(),
    };
    for epoch in 1..=cfg.max_epochs {
        let loss = ce_train_epoch(model, data, cfg.lr, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))?;
        let hr = hit_rate(model, &val, 10)?;
        report.epochs_run = epoch;
        report.train_loss.push(loss);
        report.val_hr.push(hr);
        if hr > report.best_val_hr {
            report.best_val_hr = hr;
            report.best_epoch = epoch;
            best_params = model.params().to_vec();
        } else if epoch - report.best_epoch >= cfg.patience {
            break;
        }
    }
    model.params_mut().clone_from_slice(&best_params);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::surrogate_ranking_loss;
    use crate::ndiff::grad_check;
    use crate::recmodels::{ce_train_on, Architecture, RankingList};
    use crate::seqdata::{leave_one_out_split, synth_generate};
    use proptest::prelude::*;
    use rand::Rng;

    fn swap(items: &[ItemId], m: usize) -> SwapMatrix {
        topk_to_swap_matrix(items, m).unwrap()
    }

    fn proposal(items: &[ItemId], m: usize) -> ProposalMatrix {
        ProposalMatrix::from_items(items, m).unwrap()
    }

    #[test]
    fn swap_matrix_examples() {
        let a = swap(&[3, 1], 4);
        assert_eq!(a.to_dense().get(0, 2), 1.0);
        assert_eq!(a.to_dense().row(0).iter().sum::<f64>(), 1.0);
        let id = swap(&[1, 2, 3], 3).to_dense();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(id.get(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
        assert!(matches!(topk_to_swap_matrix(&[2, 2], 4), Err(GroError::DuplicateItem(2))));
        assert!(matches!(topk_to_swap_matrix(&[5], 4), Err(GroError::ItemOutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn reconstruction_and_gather(seed in any::<u64>(), m in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(1..=m);
            let ranking: Vec<ItemId> = rand::seq::index::sample(&mut rng, m, k).into_iter().map(|i| i as ItemId + 1).collect();
            let a = swap(&ranking, m);
            let rebuilt: Vec<f64> = ranking.iter().map(|&i| i as f64).collect();
            prop_assert_eq!(a.reconstruct(), rebuilt);
            let s: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let direct: Vec<f64> = ranking.iter().map(|&i| s[i as usize - 1]).collect();
            prop_assert_eq!(swapped_scores(&a, &s).unwrap(), direct);
        }
    }

    #[test]
    fn swapped_scores_examples() {
        assert_eq!(swapped_scores(&swap(&[3, 1], 3), &[10.0, 20.0, 30.0]).unwrap(), vec![30.0, 10.0]);
        assert_eq!(swapped_scores(&swap(&[1, 2, 3], 3), &[4.0, 5.0, 6.0]).unwrap(), vec![4.0, 5.0, 6.0]);
        assert!(matches!(swapped_scores(&swap(&[1], 3), &[1.0]), Err(GroError::Shape(_))));
    }

    fn student_loss(a: &SwapMatrix, s: &[f64], negs: &[ItemId], m1: f64, m2: f64) -> (Graph, Var, Var) {
        let mut g = Graph::new();
        let sv = g.leaf(Tensor::column(s.to_vec()));
        let (l, leaf) = student_loss_on_swap(&mut g, a, sv, negs, m1, m2).unwrap();
        (g, l, leaf)
    }

    #[test]
    fn student_loss_examples() {
        let a = swap(&[1, 2], 4);
        let (g, l, _) = student_loss(&a, &[10.0, 5.0, 0.0, 0.0], &[3, 4], 0.5, 0.5);
        assert_eq!(g.value(l).item(), 0.0);
        let s = [1.0, 2.0, 0.0, 0.0];
        let (g, l, _) = student_loss(&a, &s, &[3, 4], 0.5, 0.5);
        let direct = surrogate_ranking_loss(&s, &RankingList::new(vec![1, 2]).unwrap(), &[3, 4], 0.5, 0.5).unwrap();
        assert_eq!(g.value(l).item(), 1.5);
        assert_eq!(direct, 1.5);
        let mut g = Graph::new();
        let sv = g.leaf(Tensor::column(s.to_vec()));
        assert!(matches!(
            student_loss_on_swap(&mut g, &a, sv, &[2, 3], 0.5, 0.5),
            Err(GroError::NegativeOverlap(2))
        ));
    }

    #[test]
    fn student_loss_gradient_wrt_scores() {
        let a = swap(&[4, 2, 7], 8);
        let negs = [1, 3, 5];
        let point = [0.3, -0.2, 0.9, 0.1, 0.45, -0.7, 0.2, 0.05];
        let report = grad_check(
            |g, s| student_loss_on_swap(g, &a, s, &negs, 0.3, 0.2).unwrap().0,
            &point,
            1e-5,
            1e-5,
            0.0,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn grad_wrt_swap_examples() {
        let a = swap(&[1, 2], 4);
        let (mut g, l, leaf) = student_loss(&a, &[10.0, 5.0, 0.0, 0.0], &[3, 4], 0.5, 0.5);
        let grad = grad_wrt_swap(&mut g, leaf, l).unwrap();
        assert!(grad.entries().data().iter().all(|&v| v == 0.0));

        // only the pair hinge is active: u = (-1, +1)
        let s = [1.0, 2.0, -5.0, -5.0];
        let (mut g, l, leaf) = student_loss(&a, &s, &[3, 4], 0.5, 0.5);
        let grad = grad_wrt_swap(&mut g, leaf, l).unwrap();
        for j in 0..4 {
            assert_eq!(grad.entries().get(0, j), -s[j]);
            assert_eq!(grad.entries().get(1, j), s[j]);
        }

        let mut g = Graph::new();
        let stray = g.leaf(Tensor::zeros(2, 4));
        let x = g.leaf(Tensor::scalar(1.0));
        assert!(matches!(grad_wrt_swap(&mut g, stray, x), Err(GroError::NotConnected)));
    }

    #[test]
    fn swap_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let m = rng.gen_range(4..20);
            let k = rng.gen_range(1..=(m / 2));
            let ranking: Vec<ItemId> = rand::seq::index::sample(&mut rng, m, k).into_iter().map(|i| i as ItemId + 1).collect();
            let negs = sample_negatives(&mut rng, m, &ranking, k).unwrap();
            let s: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = check_swap_gradient(&swap(&ranking, m), &s, &negs, 0.2, 0.2, 1e-4, 1e-5).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn proposal_examples() {
        let mut t = Tensor::zeros(4, 3);
        for r in [0, 1, 3] {
            t.set(r, 1, 2.0);
        }
        t.set(2, 2, 1.0);
        let p = build_proposal(&GradientMatrix(t));
        assert_eq!(p.items(), vec![2, 2, 3, 2]);
        assert_eq!(p.nonpositive_rows, 0);

        let p = build_proposal(&GradientMatrix(Tensor::zeros(2, 5)));
        assert_eq!(p.items(), vec![1, 1]);
        assert_eq!(p.nonpositive_rows, 2);

        let mut t = Tensor::zeros(3, 3);
        for i in 0..3 {
            t.set(i, i, 5.0);
        }
        assert_eq!(build_proposal(&GradientMatrix(t.clone())).items(), vec![1, 2, 3]);
        assert_eq!(build_proposal_masked(&GradientMatrix(t), &[1]).items(), vec![2, 2, 3]);
    }

    #[test]
    fn swap_loss_examples() {
        let a = swap(&[1, 2], 3);
        let s = [3.0, 2.0, 1.0];
        let same = proposal(&[1, 2], 3);
        assert_eq!(swap_loss_value(&a, &same, &s, 0.0).unwrap(), 0.0);
        assert_eq!(swap_loss_value(&a, &same, &s, 0.1).unwrap(), 0.1);
        let p = proposal(&[2, 2], 3);
        assert!((swap_loss_value(&a, &p, &s, 0.1).unwrap() - 0.6).abs() < 1e-15);

        let mut g = Graph::new();
        let sv = g.leaf(Tensor::column(s.to_vec()));
        let l = swap_loss(&mut g, &a, &p, sv, 0.1).unwrap();
        assert!((g.value(l).item() - 0.6).abs() < 1e-15);
        g.backward(l).unwrap();
        // row 1 pushes item 1 down and item 2 up; row 2 cancels
        assert_eq!(g.grad(sv).data(), &[0.5, -0.5, 0.0]);
        assert!(matches!(swap_loss_value(&a, &proposal(&[1], 3), &s, 0.0), Err(GroError::Shape(_))));
    }

    #[test]
    fn lemma1_examples() {
        let s = [1.0, 5.0, 0.5, 0.2, 4.0];
        let a = swap(&[2, 5, 1], 5);
        let distinct = proposal(&[2, 5, 1], 5);
        let r = lemma1_verify(&a, &distinct, &s).unwrap();
        assert!(r.applicable && r.violations.is_empty());
        assert_eq!(r.positions_checked, 3);

        let a = swap(&[2, 5, 1], 5);
        let p = proposal(&[2, 2, 5], 5);
        assert!(lemma1_verify(&a, &p, &s).unwrap().applicable);
        assert_eq!(lemma1_verify(&a, &p, &s).unwrap().positions_checked, 2);

        let low = proposal(&[3, 3, 3], 5);
        assert!(!lemma1_verify(&a, &low, &s).unwrap().applicable);
    }

    #[test]
    fn prefix_agreement_holds_on_converged_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let m = rng.gen_range(3..15);
            let k = rng.gen_range(1..=m);
            let s: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
            let ranking = topk(&s, k, &[]).unwrap().into_items();
            let a = swap(&ranking, m);
            let chosen: Vec<ItemId> = (0..k).map(|i| ranking[rng.gen_range(0..=i)]).collect();
            let p = proposal(&chosen, m);
            let r = prefix_agreement_verify(&a, &p, &s).unwrap();
            assert!(r.applicable);
            assert!(r.violations.is_empty(), "{ranking:?} {chosen:?}");
        }
    }

    fn pretrained_fixture() -> (SequenceModel, SplitDataset) {
        let ds = synth_generate(150, 80, 14, 1, 7).unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        assert_eq!(ds.num_items(), 80);
        let mut model = SequenceModel::init(Architecture::AttnLite, 80, 16, 8, 1).unwrap();
        let cfg = PretrainConfig {
            max_epochs: 15,
            ..PretrainConfig::default()
        };
        pretrain_until_plateau(&mut model, &split, &cfg).unwrap();
        (model, split)
    }

    fn small_gro() -> GroConfig {
        GroConfig {
            k: 10,
            epochs: 1,
            batch_size: 16,
            seed: 3,
            ..GroConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ds = synth_generate(20, 30, 8, 1, 1).unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        let model = SequenceModel::init(Architecture::Recurrent, ds.num_items(), 6, 5, 2).unwrap();
        let out = train_with_gro(&model, &split, &GroConfig { epochs: 0, ..small_gro() }).unwrap();
        assert_eq!(out.target, model);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn unconverged_target_is_rejected() {
        let ds = synth_generate(40, 100, 10, 1, 1).unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        let m = ds.num_items();
        let mut model = SequenceModel::init(Architecture::AttnLite, m, 8, 6, 2).unwrap();
        // zero embeddings rank items by id: HR@10 equals the share of targets <= 10
        model.params_mut()[0] = Tensor::zeros(m, 8);
        let err = train_with_gro(&model, &split, &small_gro()).unwrap_err();
        assert!(matches!(err, GroError::Unconverged { .. }), "{err}");
    }

    #[test]
    fn joint_step_is_deterministic() {
        let (target, split) = pretrained_fixture();
        let batch = &split.training_examples(8)[..16];
        let student = SequenceModel::init(Architecture::AttnLite, 80, 16, 8, 9).unwrap();
        let run = || {
            let (mut t, mut s) = (target.clone(), student.clone());
            let stats = gro_joint_step(&mut t, &mut s, batch, &small_gro(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            (t, s, stats)
        };
        let (t1, s1, st1) = run();
        let (t2, s2, st2) = run();
        assert_eq!((&t1, &s1, &st1), (&t2, &s2, &st2));
        assert_ne!(t1, target);
        assert_ne!(s1, student);
    }

    #[test]
    fn lambda_zero_frozen_student_is_plain_fine_tuning() {
        let (target, split) = pretrained_fixture();
        let batch = &split.training_examples(8)[..16];
        let cfg = GroConfig {
            lambda: 0.0,
            freeze_student: true,
            lr_target: 0.1,
            ..small_gro()
        };
        let mut t = target.clone();
        let mut s = SequenceModel::init(Architecture::AttnLite, 80, 16, 8, 9).unwrap();
        let s0 = s.clone();
        gro_joint_step(&mut t, &mut s, batch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut plain = target.clone();
        ce_train_on(&mut plain, batch, 0.1, 16).unwrap();
        assert_eq!(s, s0);
        for (x, y) in t.params().iter().zip(plain.params()) {
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gro_run_writes_curve() {
        let (target, split) = pretrained_fixture();
        let out = train_with_gro(&target, &split, &small_gro()).unwrap();
        assert!(!out.curve.is_empty());
        assert_eq!(out.target.role(), Role::Target);
        assert!(out.curve.iter().all(|p| p.l_swap.is_finite() && p.lambda == 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_curve_csv(&out.curve, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,l_target,l_student,l_swap,lambda"));
        assert_eq!(text.lines().count(), out.curve.len() + 1);
    }

    #[test]
    fn pretraining_restores_best() {
        let (model, split) = pretrained_fixture();
        let hr = hit_rate(&model, &split.validation_examples(), 10).unwrap();
        assert!(hr >= convergence_floor(80), "val HR@10 {hr}");
    }
}
