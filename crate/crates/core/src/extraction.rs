//! Black-box model extraction against a deployed sequential recommender.
//!
//! The attacker only ever holds an [`OracleHandle`], which answers a query
//! sequence with a (possibly shielded) ranking and nothing else. Queries are
//! grown autoregressively from the oracle's own answers, and a surrogate is
//! trained on the recorded `(query, ranking)` pairs with a pairwise margin
//! loss: consecutive ranked items must keep their order by `m1`, and every
//! ranked item must beat a sampled unranked item by `m2`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndiff::{Graph, Var};
use crate::recmodels::{
    batch_gradients, Architecture, ModelError, Optimizer, OptimizerKind, RankingList, Role, SequenceModel,
};
use crate::seqdata::ItemId;
use crate::shield::{DefenseMode, Shield};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("negative item {0} also appears in the observed ranking")]
    NegativeOverlap(ItemId),
    #[error("expected {expected} negatives for {k} ranked items, got {got}")]
    NegativeCount { expected: usize, k: usize, got: usize },
    #[error("query log is empty")]
    EmptyLog,
    #[error("query log line {line}: {reason}")]
    BadLog { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryStrategy {
    Autoregressive,
    Random,
}

/// How the next query item is picked from the oracle's answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NextItemSampling {
    Uniform,
    /// Probability proportional to `1 / rank`.
    RankWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub n_queries: usize,
    pub k_response: usize,
    pub max_query_len: usize,
    pub strategy: QueryStrategy,
    pub sampling: NextItemSampling,
    pub m1: f64,
    pub m2: f64,
    pub negatives_per_position: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n_queries: 3000,
            k_response: 100,
            max_query_len: 20,
            strategy: QueryStrategy::Autoregressive,
            sampling: NextItemSampling::Uniform,
            m1: 0.1,
            m2: 0.1,
            negatives_per_position: 1,
            lr: 0.003,
            optimizer: OptimizerKind::Adam,
            epochs: 40,
            batch_size: 32,
            dim: 32,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        let fail = |m: &str| Err(ExtractionError::InvalidConfig(m.to_string()));
        if self.n_queries == 0 {
            return fail("n_queries must be at least 1");
        }
        if self.k_response == 0 || self.max_query_len == 0 {
            return fail("k_response and max_query_len must be positive");
        }
        if !(self.m1 >= 0.0 && self.m2 >= 0.0) {
            return fail("margins must be non-negative");
        }
        if self.negatives_per_position == 0 || self.batch_size == 0 {
            return fail("negatives_per_position and batch_size must be positive");
        }
        Ok(())
    }
}

/// Query access to a frozen deployed model. Reveals rankings only.
pub struct OracleHandle {
    model: Arc<SequenceModel>,
    shield: Shield,
    k_response: usize,
    calls: u64,
}

impl OracleHandle {
    pub fn new(model: Arc<SequenceModel>, mode: DefenseMode, k_response: usize) -> Self {
        Self {
            model,
            shield: Shield::new(mode),
            k_response,
            calls: 0,
        }
    }

    /// Catalog size, which the deployment exposes anyway.
    pub fn num_items(&self) -> usize {
        self.model.num_items()
    }

    pub fn k_response(&self) -> usize {
        self.k_response
    }

    /// Number of queries answered so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn query(&mut self, seq: &[ItemId]) -> Result<RankingList, ExtractionError> {
        self.calls += 1;
        let ranking = self.model.recommend(seq, self.k_response)?;
        Ok(self.shield.apply(&ranking))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub strategy: QueryStrategy,
    pub query: Vec<ItemId>,
    pub response: Vec<ItemId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryLog {
    pub strategy: QueryStrategy,
    pub records: Vec<QueryRecord>,
}

impl QueryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExtractionError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExtractionError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| ExtractionError::BadLog {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        let strategy = records.first().ok_or(ExtractionError::EmptyLog)?.strategy;
        Ok(Self { strategy, records })
    }
}

fn pick_next(rng: &mut ChaCha8Rng, ranking: &RankingList, sampling: NextItemSampling) -> ItemId {
    let items = ranking.items();
    match sampling {
        NextItemSampling::Uniform => *items.choose(rng).expect("non-empty response"),
        NextItemSampling::RankWeighted => {
            let weights: Vec<f64> = (1..=items.len()).map(|r| 1.0 / r as f64).collect();
            let dist = rand::distributions::WeightedIndex::new(&weights).expect("positive weights");
            items[rand::distributions::Distribution::sample(&dist, rng)]
        }
    }
}

/// Builds the attacker's query log.
///
/// Autoregressive: start from a uniform random item, then repeatedly query
/// and append an item drawn from the answer until `max_query_len`; the answer
/// to the complete sequence is recorded. That costs `max_query_len` oracle
/// calls per sequence. Random: `max_query_len` distinct uniform items and a
/// single recording call.
pub fn generate_queries(oracle: &mut OracleHandle, cfg: &AttackConfig) -> Result<QueryLog, ExtractionError> {
    cfg.validate()?;
    let m = oracle.num_items();
    if cfg.max_query_len + cfg.k_response > m {
        return Err(ExtractionError::InvalidConfig(format!(
            "max_query_len + k_response must not exceed the catalog size {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_queries);
    for _ in 0..cfg.n_queries {
        let query: Vec<ItemId> = match cfg.strategy {
            QueryStrategy::Autoregressive => {
                let mut seq = vec![rng.gen_range(1..=m as ItemId)];
                while seq.len() < cfg.max_query_len {
                    let answer = oracle.query(&seq)?;
                    seq.push(pick_next(&mut rng, &answer, cfg.sampling));
                }
                seq
            }
            QueryStrategy::Random => index::sample(&mut rng, m, cfg.max_query_len)
                .into_iter()
                .map(|i| i as ItemId + 1)
                .collect(),
        };
        let response = oracle.query(&query)?.into_items();
        records.push(QueryRecord {
            strategy: cfg.strategy,
            query,
            response,
        });
    }
    Ok(QueryLog {
        strategy: cfg.strategy,
        records,
    })
}

fn check_negatives(observed: &[ItemId], negatives: &[ItemId]) -> Result<usize, ExtractionError> {
    let k = observed.len();
    if k == 0 || negatives.len() % k != 0 || negatives.is_empty() {
        return Err(ExtractionError::NegativeCount {
            expected: k,
            k,
            got: negatives.len(),
        });
    }
    if let Some(&n) = negatives.iter().find(|n| observed.contains(n)) {
        return Err(ExtractionError::NegativeOverlap(n));
    }
    Ok(negatives.len() / k)
}

/// Direct evaluation of the attacker's margin loss on a score vector.
///
/// `negatives` holds `n` items per ranked position, position-major.
pub fn surrogate_ranking_loss(
    predicted: &[f64],
    observed: &RankingList,
    negatives: &[ItemId],
    m1: f64,
    m2: f64,
) -> Result<f64, ExtractionError> {
    let items = observed.items();
    let per = check_negatives(items, negatives)?;
    let s = |i: ItemId| predicted[i as usize - 1];
    let mut loss = 0.0;
    for w in items.windows(2) {
        loss += (s(w[1]) - s(w[0]) + m1).max(0.0);
    }
    for (i, &item) in items.iter().enumerate() {
        for &neg in &negatives[i * per..(i + 1) * per] {
            loss += (s(neg) - s(item) + m2).max(0.0);
        }
    }
    Ok(loss)
}

/// Graph form of the margin loss over already-gathered scores.
///
/// `ranked` is `k x 1` in ranking order; `negative` is `(k * n) x 1`,
/// position-major.
pub fn ranking_hinge_loss(g: &mut Graph, ranked: Var, negative: Var, m1: f64, m2: f64) -> Var {
    let k = g.value(ranked).rows();
    let per = g.value(negative).rows() / k;
    let rep: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat(i).take(per)).collect();
    let anchor = g.gather_rows(ranked, &rep);
    let neg_gap = g.sub(negative, anchor);
    let neg_gap = g.add_scalar(neg_gap, m2);
    let neg_hinge = g.hinge(neg_gap);
    let neg_term = g.sum(neg_hinge);
    if k < 2 {
        return neg_term;
    }
    let lower: Vec<usize> = (1..k).collect();
    let upper: Vec<usize> = (0..k - 1).collect();
    let below = g.gather_rows(ranked, &lower);
    let above = g.gather_rows(ranked, &upper);
    let gap = g.sub(below, above);
    let gap = g.add_scalar(gap, m1);
    let pair_hinge = g.hinge(gap);
    let pair_term = g.sum(pair_hinge);
    g.add(pair_term, neg_term)
}

/// Uniform items from `1..=m` outside `observed`, with replacement.
pub fn sample_negatives(
    rng: &mut ChaCha8Rng,
    num_items: usize,
    observed: &[ItemId],
    count: usize,
) -> Result<Vec<ItemId>, ExtractionError> {
    let mut blocked = vec![false; num_items + 1];
    for &o in observed {
        blocked[o as usize] = true;
    }
    let pool: Vec<ItemId> = (1..=num_items as ItemId).filter(|&i| !blocked[i as usize]).collect();
    if pool.is_empty() {
        return Err(ExtractionError::InvalidConfig("no items left to sample negatives from".into()));
    }
    Ok((0..count).map(|_| *pool.choose(rng).expect("non-empty pool")).collect())
}

/// Margin loss node for one `(sequence, ranking)` pair.
pub fn ranking_loss_node(
    model: &SequenceModel,
    g: &mut Graph,
    bound: &[Var],
    query: &[ItemId],
    ranking: &[ItemId],
    negatives: &[ItemId],
    m1: f64,
    m2: f64,
) -> Result<Var, ModelError> {
    let scores = model.forward(g, bound, query)?;
    let ranked_rows: Vec<usize> = ranking.iter().map(|&i| i as usize - 1).collect();
    let neg_rows: Vec<usize> = negatives.iter().map(|&i| i as usize - 1).collect();
    let ranked = g.gather_rows(scores, &ranked_rows);
    let negative = g.gather_rows(scores, &neg_rows);
    Ok(ranking_hinge_loss(g, ranked, negative, m1, m2))
}

/// Trains a fresh surrogate on the query log. Negatives are redrawn every
/// epoch; the seed fixes initialization, shuffling and sampling.
pub fn train_surrogate(
    log: &QueryLog,
    architecture: Architecture,
    num_items: usize,
    cfg: &AttackConfig,
) -> Result<SequenceModel, ExtractionError> {
    cfg.validate()?;
    if log.is_empty() {
        return Err(ExtractionError::EmptyLog);
    }
    let mut model = SequenceModel::init(architecture, num_items, cfg.dim, cfg.max_query_len, cfg.seed)?
        .with_role(Role::Surrogate);
    let mut opt = Optimizer::new(cfg.optimizer, &model, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a11);
    let mut order: Vec<usize> = (0..log.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&QueryRecord, Vec<ItemId>)> = chunk
                .iter()
                .map(|&i| {
                    let rec = &log.records[i];
                    let count = rec.response.len() * cfg.negatives_per_position;
                    sample_negatives(&mut rng, num_items, &rec.response, count).map(|n| (rec, n))
                })
                .collect::<Result<_, _>>()?;
            let (_, grads) = batch_gradients(&model, &batch, |g, bound, (rec, negs)| {
                ranking_loss_node(&model, g, bound, &rec.query, &rec.response, negs, cfg.m1, cfg.m2)
            })?;
            opt.step(&mut model, &grads)?;
        }
    }
    Ok(model)
}

/// Number of items two rankings share.
pub fn overlap(a: &RankingList, b: &RankingList) -> usize {
    a.items().iter().filter(|i| b.items().contains(i)).count()
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut out = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &p in &idx[i..=j] {
                out[p] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
