//! Interaction sequences: loading, filtering, leave-one-out splitting,
//! corpus statistics and a seeded synthetic generator.
//!
//! Two on-disk formats are understood:
//!
//! * `delimited-ratings`: one interaction per line,
//!   `user<sep>item<sep>rating<sep>timestamp` (default separator `::`).
//!   Ratings are ignored; every row is one implicit interaction.
//! * `tsv-sequences`: one user per line, tab-separated item ids in
//!   consumption order.
//!
//! User and item ids are re-densified to `1..=n` in ascending order of the
//! original ids after filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ItemId = u32;

/// Shortest sequence that still leaves one training item after the split.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Debug, Error)]
pub enum SeqDataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("no interactions left after filtering")]
    EmptyAfterFiltering,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("user {user} has a sequence of length {len}, need at least {MIN_SEQUENCE_LEN}")]
    SequenceTooShort { user: usize, len: usize },
    #[error("item {item} of user {user} is outside 1..={num_items}")]
    ItemOutOfRange { user: usize, item: ItemId, num_items: usize },
    #[error("item {0} never occurs; item ids must be dense")]
    SparseItems(ItemId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputFormat {
    DelimitedRatings { separator: String },
    TsvSequences,
}

impl InputFormat {
    pub fn delimited() -> Self {
        InputFormat::DelimitedRatings {
            separator: "::".to_string(),
        }
    }
}

/// Per-user ordered item sequences over a dense vocabulary `1..=num_items`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionDataset {
    sequences: Vec<Vec<ItemId>>,
    num_items: usize,
}

impl InteractionDataset {
    /// Validates range, minimum length and id density.
    pub fn new(sequences: Vec<Vec<ItemId>>, num_items: usize) -> Result<Self, SeqDataError> {
        if sequences.is_empty() || num_items == 0 {
            return Err(SeqDataError::EmptyAfterFiltering);
        }
        let mut seen = vec![false; num_items];
        for (u, seq) in sequences.iter().enumerate() {
            if seq.len() < MIN_SEQUENCE_LEN {
                return Err(SeqDataError::SequenceTooShort { user: u + 1, len: seq.len() });
            }
            for &item in seq {
                if item == 0 || item as usize > num_items {
                    return Err(SeqDataError::ItemOutOfRange { user: u + 1, item, num_items });
                }
                seen[item as usize - 1] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(SeqDataError::SparseItems(missing as ItemId + 1));
        }
        Ok(Self { sequences, num_items })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Sequence of a 1-based user id.
    pub fn sequence(&self, user: usize) -> &[ItemId] {
        &self.sequences[user - 1]
    }

    pub fn sequences(&self) -> &[Vec<ItemId>] {
        &self.sequences
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Leave-one-out split: the last item is the test target, the one before it
/// the validation target, and everything earlier is training prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Vec<Vec<ItemId>>,
    pub val_target: Vec<ItemId>,
    pub test_target: Vec<ItemId>,
    pub num_items: usize,
}

/// One next-item prediction example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NextItemExample {
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    /// Every sliding position of every training sequence; prefixes are
    /// truncated to their last `max_len` items.
    pub fn training_examples(&self, max_len: usize) -> Vec<NextItemExample> {
        let mut out = Vec::new();
        for seq in &self.train {
            for end in 1..seq.len() {
                let start = end.saturating_sub(max_len);
                out.push(NextItemExample {
                    prefix: seq[start..end].to_vec(),
                    target: seq[end],
                });
            }
        }
        out
    }

    /// Validation examples: prefix = training sequence.
    pub fn validation_examples(&self) -> Vec<NextItemExample> {
        self.train
            .iter()
            .zip(&self.val_target)
            .map(|(t, &v)| NextItemExample { prefix: t.clone(), target: v })
            .collect()
    }

    /// Test examples: prefix = training sequence followed by the validation item.
    pub fn test_examples(&self) -> Vec<NextItemExample> {
        self.train
            .iter()
            .zip(self.val_target.iter().zip(&self.test_target))
            .map(|(t, (&v, &y))| {
                let mut prefix = t.clone();
                prefix.push(v);
                NextItemExample { prefix, target: y }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub avg_length: f64,
    pub density: f64,
}

fn read_file(path: &Path) -> Result<String, SeqDataError> {
    fs::read_to_string(path).map_err(|source| SeqDataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_id(token: &str, line: usize, what: &str) -> Result<u64, SeqDataError> {
    token.trim().parse::<u64>().map_err(|_| SeqDataError::Malformed {
        line,
        reason: format!("{what} id {token:?} is not a non-negative integer"),
    })
}

/// Raw per-user sequences keyed by original user id, items by original id.
fn parse_rows(text: &str, format: &InputFormat) -> Result<BTreeMap<u64, Vec<u64>>, SeqDataError> {
    let mut users: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    match format {
        InputFormat::DelimitedRatings { separator } => {
            if separator.is_empty() {
                return Err(SeqDataError::InvalidParameter("empty separator".into()));
            }
            // (timestamp, file order, item) per user
            let mut rows: BTreeMap<u64, Vec<(i64, usize, u64)>> = BTreeMap::new();
            for (idx, raw) in text.lines().enumerate() {
                let line = idx + 1;
                if raw.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = raw.split(separator.as_str()).collect();
                if fields.len() != 4 {
                    return Err(SeqDataError::Malformed {
                        line,
                        reason: format!("expected 4 fields, found {}", fields.len()),
                    });
                }
                let user = parse_id(fields[0], line, "user")?;
                let item = parse_id(fields[1], line, "item")?;
                fields[2].trim().parse::<f64>().map_err(|_| SeqDataError::Malformed {
                    line,
                    reason: format!("rating {:?} is not a number", fields[2]),
                })?;
                let ts = fields[3].trim().parse::<i64>().map_err(|_| SeqDataError::Malformed {
                    line,
                    reason: format!("timestamp {:?} is not an integer", fields[3]),
                })?;
                rows.entry(user).or_default().push((ts, idx, item));
            }
            for (user, mut events) in rows {
                events.sort_by_key(|&(ts, order, _)| (ts, order));
                users.insert(user, events.into_iter().map(|(_, _, item)| item).collect());
            }
        }
        InputFormat::TsvSequences => {
            let mut next_user = 0u64;
            for (idx, raw) in text.lines().enumerate() {
                if raw.trim().is_empty() {
                    continue;
                }
                let items = raw
                    .split('\t')
                    .map(|t| parse_id(t, idx + 1, "item"))
                    .collect::<Result<Vec<_>, _>>()?;
                next_user += 1;
                users.insert(next_user, items);
            }
        }
    }
    Ok(users)
}

fn filter_and_densify(
    users: BTreeMap<u64, Vec<u64>>,
    min_seq_len: usize,
    min_item_count: usize,
) -> Result<InteractionDataset, SeqDataError> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for seq in users.values() {
        for &item in seq {
            *counts.entry(item).or_default() += 1;
        }
    }
    let kept: Vec<Vec<u64>> = users
        .into_values()
        .map(|seq| seq.into_iter().filter(|i| counts[i] >= min_item_count).collect::<Vec<_>>())
        .filter(|seq| seq.len() >= min_seq_len)
        .collect();
    if kept.is_empty() {
        return Err(SeqDataError::EmptyAfterFiltering);
    }
    let vocab: BTreeSet<u64> = kept.iter().flatten().copied().collect();
    let remap: BTreeMap<u64, ItemId> = vocab
        .iter()
        .enumerate()
        .map(|(i, &orig)| (orig, i as ItemId + 1))
        .collect();
    let sequences = kept
        .into_iter()
        .map(|seq| seq.into_iter().map(|i| remap[&i]).collect())
        .collect();
    InteractionDataset::new(sequences, vocab.len())
}

/// Loads and filters an interaction file.
///
/// Items with fewer than `min_item_count` interactions are dropped first,
/// then users left with fewer than `min_seq_len` interactions.
pub fn load_interactions(
    path: impl AsRef<Path>,
    format: &InputFormat,
    min_seq_len: usize,
    min_item_count: usize,
) -> Result<InteractionDataset, SeqDataError> {
    if min_seq_len < MIN_SEQUENCE_LEN {
        return Err(SeqDataError::InvalidParameter(format!(
            "min_seq_len must be at least {MIN_SEQUENCE_LEN}"
        )));
    }
    let text = read_file(path.as_ref())?;
    let users = parse_rows(&text, format)?;
    filter_and_densify(users, min_seq_len, min_item_count)
}

/// Writes the dataset in `tsv-sequences` format, one user per line.
pub fn write_tsv_sequences(ds: &InteractionDataset, path: impl AsRef<Path>) -> Result<(), SeqDataError> {
    let path = path.as_ref();
    let io_err = |source| SeqDataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for seq in ds.sequences() {
        let line: Vec<String> = seq.iter().map(|i| i.to_string()).collect();
        writeln!(f, "{}", line.join("\t")).map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

pub fn leave_one_out_split(ds: &InteractionDataset) -> Result<SplitDataset, SeqDataError> {
    let mut split = SplitDataset {
        train: Vec::with_capacity(ds.num_users()),
        val_target: Vec::with_capacity(ds.num_users()),
        test_target: Vec::with_capacity(ds.num_users()),
        num_items: ds.num_items(),
    };
    for (u, seq) in ds.sequences().iter().enumerate() {
        let n = seq.len();
        if n < MIN_SEQUENCE_LEN {
            return Err(SeqDataError::SequenceTooShort { user: u + 1, len: n });
        }
        split.train.push(seq[..n - 2].to_vec());
        split.val_target.push(seq[n - 2]);
        split.test_target.push(seq[n - 1]);
    }
    Ok(split)
}

pub fn dataset_stats(ds: &InteractionDataset) -> DatasetStats {
    let interactions = ds.num_interactions() as f64;
    let users = ds.num_users() as f64;
    DatasetStats {
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        avg_length: interactions / users,
        density: interactions / (users * ds.num_items() as f64),
    }
}

const LATENT_RANK: usize = 8;
const TRANSITION_SHARPNESS: f64 = 6.0;
const USER_TASTE_WEIGHT: f64 = 2.0;

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; LATENT_RANK] {
    let mut v = [0.0; LATENT_RANK];
    for x in &mut v {
        *x = StandardNormal.sample(rng);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.map(|x| x / norm)
}

fn dot(a: &[f64; LATENT_RANK], b: &[f64; LATENT_RANK]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws from `exp(logits)` restricted to items not yet used.
fn sample_unused(rng: &mut ChaCha8Rng, logits: &[f64], used: &[bool]) -> usize {
    let max = logits
        .iter()
        .zip(used)
        .filter(|(_, &u)| !u)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .zip(used)
        .map(|(l, &u)| if u { 0.0 } else { (l - max).exp() })
        .collect();
    WeightedIndex::new(&weights).expect("at least one unused item").sample(rng)
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
fn stationary(transition: &[Vec<f64>]) -> Vec<f64> {
    let m = transition.len();
    let mut pi = vec![1.0 / m as f64; m];
    for _ in 0..500 {
        let mut next = vec![0.0; m];
        for (i, row) in transition.iter().enumerate() {
            for (n, p) in next.iter_mut().zip(row) {
                *n += pi[i] * p;
            }
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-13 {
            break;
        }
    }
    pi
}

/// Hidden structure of the synthetic generator, exposed for tests.
#[derive(Clone, Debug)]
pub struct SynthModel {
    /// Item-to-item transition matrix without user taste, rows sum to 1.
    pub transition: Vec<Vec<f64>>,
    /// Stationary distribution of `transition`.
    pub stationary: Vec<f64>,
}

/// Seeded synthetic corpus with planted low-rank structure.
///
/// Each item carries an "in" and an "out" factor of rank 8 plus a Zipf-like
/// popularity; each user a taste vector. For `markov_order >= 1` the next
/// item is drawn with log-weight
/// `6·mean⟨out(prev), in(j)⟩ + 2·⟨taste, in(j)⟩ + log pop(j)` over the last
/// `markov_order` items; `markov_order = 0` draws from the stationary
/// distribution of the taste-free first-order chain. A user never repeats an
/// item. Lengths are uniform in `[avg_len/2, avg_len + avg_len/2]`.
///
/// If some item never occurs, ids are re-densified, so `num_items` is an
/// upper bound on the returned vocabulary.
pub fn synth_generate(
    num_users: usize,
    num_items: usize,
    avg_len: usize,
    markov_order: usize,
    seed: u64,
) -> Result<InteractionDataset, SeqDataError> {
    synth_generate_with_model(num_users, num_items, avg_len, markov_order, seed).map(|(ds, _)| ds)
}

pub fn synth_generate_with_model(
    num_users: usize,
    num_items: usize,
    avg_len: usize,
    markov_order: usize,
    seed: u64,
) -> Result<(InteractionDataset, SynthModel), SeqDataError> {
    if num_items < 20 {
        return Err(SeqDataError::InvalidParameter("num_items must be at least 20".into()));
    }
    if avg_len < 4 {
        return Err(SeqDataError::InvalidParameter("avg_len must be at least 4".into()));
    }
    if num_users == 0 {
        return Err(SeqDataError::InvalidParameter("num_users must be positive".into()));
    }
    let m = num_items;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_factors: Vec<_> = (0..m).map(|_| unit_vector(&mut rng)).collect();
    let out_factors: Vec<_> = (0..m).map(|_| unit_vector(&mut rng)).collect();
    let mut pop_rank: Vec<usize> = (0..m).collect();
    pop_rank.shuffle(&mut rng);
    let log_pop: Vec<f64> = pop_rank.iter().map(|&r| -0.8 * ((r + 10) as f64).ln()).collect();

    let affinity = |from: usize, to: usize| TRANSITION_SHARPNESS * dot(&out_factors[from], &in_factors[to]);

    let transition: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let logits: Vec<f64> = (0..m)
                .map(|j| if i == j { f64::NEG_INFINITY } else { affinity(i, j) + log_pop[j] })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect()
        })
        .collect();
    let pi = stationary(&transition);
    let log_pi: Vec<f64> = pi.iter().map(|p| p.max(1e-300).ln()).collect();

    let mut first_items: Vec<usize> = (0..m).collect();
    first_items.shuffle(&mut rng);

    let half = avg_len / 2;
    let mut sequences = Vec::with_capacity(num_users);
    for u in 0..num_users {
        let taste = unit_vector(&mut rng);
        let len = rng.gen_range(avg_len - half..=avg_len + half).clamp(MIN_SEQUENCE_LEN, m);
        let mut used = vec![false; m];
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        let first = if markov_order == 0 {
            sample_unused(&mut rng, &log_pi, &used)
        } else if u < m {
            first_items[u]
        } else {
            pi_sample(&mut rng, &pi)
        };
        used[first] = true;
        seq.push(first);
        while seq.len() < len {
            let next = if markov_order == 0 {
                sample_unused(&mut rng, &log_pi, &used)
            } else {
                let context = &seq[seq.len().saturating_sub(markov_order)..];
                let logits: Vec<f64> = (0..m)
                    .map(|j| {
                        let a: f64 = context.iter().map(|&c| affinity(c, j)).sum::<f64>() / context.len() as f64;
                        a + USER_TASTE_WEIGHT * dot(&taste, &in_factors[j]) + log_pop[j]
                    })
                    .collect();
                sample_unused(&mut rng, &logits, &used)
            };
            used[next] = true;
            seq.push(next);
        }
        sequences.push(seq.into_iter().map(|i| i as u64 + 1).collect::<Vec<u64>>());
    }

    let users: BTreeMap<u64, Vec<u64>> = sequences
        .into_iter()
        .enumerate()
        .map(|(u, s)| (u as u64 + 1, s))
        .collect();
    let ds = filter_and_densify(users, MIN_SEQUENCE_LEN, 1)?;
    Ok((ds, SynthModel { transition, stationary: pi }))
}

fn pi_sample(rng: &mut ChaCha8Rng, pi: &[f64]) -> usize {
    WeightedIndex::new(pi).expect("stationary distribution").sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_users_same_items() {
        let mut text = String::new();
        for u in 1..=3 {
            for (t, item) in [10, 20, 30, 40, 50].iter().enumerate() {
                text.push_str(&format!("{u}::{item}::4::{}\n", 100 + t));
            }
        }
        let f = write_temp(&text);
        let ds = load_interactions(f.path(), &InputFormat::delimited(), 3, 1).unwrap();
        assert_eq!(ds.num_users(), 3);
        assert_eq!(ds.num_items(), 5);
        assert!(ds.sequences().iter().all(|s| s.len() == 5 && s == &[1, 2, 3, 4, 5]));
    }

    #[test]
    fn rare_item_is_removed_and_ids_redensified() {
        // 10 rows; item 7 occurs once
        let rows = [
            (1, 3, 100),
            (1, 5, 101),
            (1, 7, 102),
            (1, 9, 103),
            (2, 3, 100),
            (2, 5, 101),
            (2, 9, 102),
            (3, 9, 100),
            (3, 5, 101),
            (3, 3, 102),
        ];
        let text: String = rows.iter().map(|(u, i, t)| format!("{u}::{i}::5::{t}\n")).collect();
        let f = write_temp(&text);
        let ds = load_interactions(f.path(), &InputFormat::delimited(), 3, 2).unwrap();

        // brute force: count, drop rare, drop short users, remap by sorted id
        let mut counts = BTreeMap::new();
        for (_, i, _) in rows {
            *counts.entry(i).or_insert(0) += 1;
        }
        let keep: Vec<u64> = counts.iter().filter(|(_, &c)| c >= 2).map(|(&i, _)| i).collect();
        assert_eq!(keep, vec![3, 5, 9]);
        assert_eq!(ds.num_items(), 3);
        assert_eq!(ds.sequences(), &[vec![1, 2, 3], vec![1, 2, 3], vec![3, 2, 1]]);
    }

    #[test]
    fn timestamps_sort_with_stable_ties() {
        let text = "1::5::1::20\n1::6::1::10\n1::7::1::10\n1::8::1::5\n";
        let f = write_temp(text);
        let ds = load_interactions(f.path(), &InputFormat::delimited(), 3, 1).unwrap();
        // 8 (t=5), 6 (t=10, first in file), 7 (t=10), 5 (t=20)
        assert_eq!(ds.sequence(1), &[4, 2, 3, 1]);
    }

    #[test]
    fn custom_separator_and_tsv() {
        let f = write_temp("1,1,3.5,1\n1,2,3,2\n1,3,1,3\n");
        let fmt = InputFormat::DelimitedRatings { separator: ",".into() };
        let ds = load_interactions(f.path(), &fmt, 3, 1).unwrap();
        assert_eq!(ds.sequence(1), &[1, 2, 3]);

        let f = write_temp("4\t8\t15\n16\t23\t42\t4\n");
        let ds = load_interactions(f.path(), &InputFormat::TsvSequences, 3, 1).unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.num_items(), 6);
        assert_eq!(ds.sequence(2), &[4, 5, 6, 1]);
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_temp("1::1::5::1\n1::x::5::2\n");
        match load_interactions(f.path(), &InputFormat::delimited(), 3, 1) {
            Err(SeqDataError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_temp("1::1::5\n");
        assert!(matches!(
            load_interactions(f.path(), &InputFormat::delimited(), 3, 1),
            Err(SeqDataError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn loading_errors() {
        assert!(matches!(
            load_interactions("/nonexistent/ratings.dat", &InputFormat::delimited(), 3, 1),
            Err(SeqDataError::Io { .. })
        ));
        let f = write_temp("1::1::5::1\n1::2::5::2\n");
        assert!(matches!(
            load_interactions(f.path(), &InputFormat::delimited(), 3, 1),
            Err(SeqDataError::EmptyAfterFiltering)
        ));
        assert!(matches!(
            load_interactions(f.path(), &InputFormat::delimited(), 2, 1),
            Err(SeqDataError::InvalidParameter(_))
        ));
    }

    #[test]
    fn split_examples() {
        let ds = InteractionDataset::new(vec![vec![1, 2, 3, 4, 5], vec![9, 8, 7, 6, 5, 4, 3, 2, 1]], 9).unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        assert_eq!(split.train[0], vec![1, 2, 3]);
        assert_eq!((split.val_target[0], split.test_target[0]), (4, 5));

        let ds = InteractionDataset::new(vec![vec![9, 8, 7], vec![1, 2, 3, 4, 5, 6]], 9).unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        assert_eq!(split.train[0], vec![9]);
        assert_eq!((split.val_target[0], split.test_target[0]), (8, 7));
    }

    #[test]
    fn dataset_invariants_enforced() {
        assert!(matches!(
            InteractionDataset::new(vec![vec![1, 2]], 2),
            Err(SeqDataError::SequenceTooShort { user: 1, len: 2 })
        ));
        assert!(matches!(
            InteractionDataset::new(vec![vec![1, 2, 4]], 3),
            Err(SeqDataError::ItemOutOfRange { item: 4, .. })
        ));
        assert!(matches!(
            InteractionDataset::new(vec![vec![1, 2, 1]], 3),
            Err(SeqDataError::SparseItems(3))
        ));
    }

    #[test]
    fn stats_hand_count() {
        let ds = InteractionDataset::new(
            vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8, 9, 10]],
            10,
        )
        .unwrap();
        let s = dataset_stats(&ds);
        assert_eq!(s.avg_length, 5.0);
        assert_eq!(s.density, 0.5);

        let ds = InteractionDataset::new(vec![(1..=7).collect()], 7).unwrap();
        assert_eq!(dataset_stats(&ds).density, 1.0);
    }

    #[test]
    fn training_examples_slide_and_truncate() {
        let ds = InteractionDataset::new(vec![vec![1, 2, 3, 4, 5, 6]], 6).unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        let ex = split.training_examples(2);
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0], NextItemExample { prefix: vec![1], target: 2 });
        assert_eq!(ex[2], NextItemExample { prefix: vec![2, 3], target: 4 });
        assert_eq!(split.test_examples()[0].prefix, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = synth_generate(60, 40, 10, 1, 7).unwrap();
        let b = synth_generate(60, 40, 10, 1, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(60, 40, 10, 1, 8).unwrap());
        assert_eq!(a.num_items(), 40);
        for seq in a.sequences() {
            let distinct: BTreeSet<_> = seq.iter().collect();
            assert_eq!(distinct.len(), seq.len(), "no repeats within a user");
        }
        let s = dataset_stats(&a);
        assert!((s.avg_length - 10.0).abs() < 1.5, "{s:?}");
    }

    #[test]
    fn synth_rejects_small_parameters() {
        assert!(synth_generate(10, 19, 10, 1, 0).is_err());
        assert!(synth_generate(10, 40, 3, 1, 0).is_err());
    }

    #[test]
    fn order_zero_ignores_previous_item() {
        // first items are drawn from the stationary distribution; the
        // chi-square statistic against it stays small
        let (ds, model) = synth_generate_with_model(4000, 20, 4, 0, 3).unwrap();
        assert_eq!(ds.num_items(), 20);
        let mut counts = [0.0f64; 20];
        for seq in ds.sequences() {
            counts[seq[0] as usize - 1] += 1.0;
        }
        let n = ds.num_users() as f64;
        let chi2: f64 = counts
            .iter()
            .zip(&model.stationary)
            .map(|(c, p)| (c - n * p).powi(2) / (n * p))
            .sum();
        // 19 degrees of freedom; 43.8 is the 0.999 quantile
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }
}
