//! Full-ranking leave-one-out evaluation: HR@k and NDCG@k.
//!
//! Every item in the catalog is scored; only items already in the prefix are
//! excluded. A shield, when present, permutes the top-`k_eval` list before the
//! target's position is read off, so a perturbed deployment is measured the
//! way its users would see it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recmodels::{topk, ModelError, SequenceModel};
use crate::seqdata::{ItemId, NextItemExample};
use crate::shield::Shield;

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no ranks to aggregate")]
    EmptyRanks,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("target item {item} outside 1..={num_items}")]
    InvalidTarget { item: ItemId, num_items: usize },
    #[error("cutoff {k} exceeds evaluated list length {k_eval}")]
    CutoffTooLarge { k: usize, k_eval: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// 1-based position of the held-out item, or `None` when it is not listed.
pub type Rank = Option<usize>;

/// Position of `target` within the shielded top-`k_eval` list for `prefix`.
pub fn rank_of_target(
    model: &SequenceModel,
    prefix: &[ItemId],
    target: ItemId,
    shield: &mut Shield,
    k_eval: usize,
) -> Result<Rank, MetricsError> {
    let m = model.num_items();
    if target == 0 || target as usize > m {
        return Err(MetricsError::InvalidTarget { item: target, num_items: m });
    }
    let scores = model.score_next(prefix)?;
    let available = m - prefix.iter().collect::<std::collections::HashSet<_>>().len();
    let list = topk(&scores, k_eval.min(available), prefix)?;
    Ok(shield.apply(&list).position(target))
}

/// Hit ratio and NDCG at cutoff `k` for single-relevant-item rankings.
pub fn hr_ndcg(ranks: &[Rank], k: usize) -> Result<(f64, f64), MetricsError> {
    if ranks.is_empty() {
        return Err(MetricsError::EmptyRanks);
    }
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let mut hits = 0usize;
    let mut gain = 0.0;
    for r in ranks.iter().flatten() {
        if *r <= k {
            hits += 1;
            gain += 1.0 / ((*r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok((hits as f64 / n, gain / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub role: String,
    pub defense: String,
    pub num_users: usize,
    pub metrics: BTreeMap<usize, AtK>,
}

impl MetricsReport {
    pub fn from_ranks(role: &str, defense: &str, ranks: &[Rank], ks: &[usize]) -> Result<Self, MetricsError> {
        let mut metrics = BTreeMap::new();
        for &k in ks {
            let (hr, ndcg) = hr_ndcg(ranks, k)?;
            debug_assert!(ndcg <= hr + 1e-12);
            metrics.insert(k, AtK { hr, ndcg });
        }
        Ok(Self {
            role: role.to_string(),
            defense: defense.to_string(),
            num_users: ranks.len(),
            metrics,
        })
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.hr)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.ndcg)
    }

    /// Pretty JSON; keys appear in a fixed order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Ranks of every example's target under `shield`, in example order.
pub fn ranks_for(
    model: &SequenceModel,
    examples: &[NextItemExample],
    shield: &mut Shield,
    k_eval: usize,
) -> Result<Vec<Rank>, MetricsError> {
    examples
        .iter()
        .map(|ex| rank_of_target(model, &ex.prefix, ex.target, shield, k_eval))
        .collect()
}

/// Evaluates `model` over `examples` at every cutoff in `ks`.
pub fn evaluate(
    model: &SequenceModel,
    examples: &[NextItemExample],
    shield: &mut Shield,
    k_eval: usize,
    ks: &[usize],
    defense_tag: &str,
) -> Result<MetricsReport, MetricsError> {
    if let Some(&k) = ks.iter().find(|&&k| k > k_eval) {
        return Err(MetricsError::CutoffTooLarge { k, k_eval });
    }
    let ranks = ranks_for(model, examples, shield, k_eval)?;
    MetricsReport::from_ranks(&model.role().to_string(), defense_tag, &ranks, ks)
}

/// Unshielded HR@k, used for convergence checks.
pub fn hit_rate(model: &SequenceModel, examples: &[NextItemExample], k: usize) -> Result<f64, MetricsError> {
    let mut shield = Shield::new(crate::shield::DefenseMode::None);
    let ranks = ranks_for(model, examples, &mut shield, k)?;
    Ok(hr_ndcg(&ranks, k)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::Tensor;
    use crate::recmodels::Architecture;
    use crate::shield::DefenseMode;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        assert_eq!(hr_ndcg(&[Some(1), Some(1)], 10).unwrap(), (1.0, 1.0));
        assert_eq!(hr_ndcg(&[Some(3)], 10).unwrap(), (1.0, 0.5));
        assert_eq!(hr_ndcg(&[Some(3)], 3).unwrap(), (1.0, 0.5));
        assert_eq!(hr_ndcg(&[Some(3)], 2).unwrap(), (0.0, 0.0));
        assert_eq!(hr_ndcg(&[None, Some(1)], 5).unwrap(), (0.5, 0.5));
        assert!(matches!(hr_ndcg(&[], 5), Err(MetricsError::EmptyRanks)));
        assert!(matches!(hr_ndcg(&[Some(1)], 0), Err(MetricsError::ZeroK)));
    }

    /// Model whose scores are a fixed function of item id, regardless of input.
    fn fixed_score_model(scores: &[f64]) -> SequenceModel {
        // zero attention weights leave hidden = item_emb[last] + pos_emb[0] = [s_last + 1, 0, 0, 0];
        // callers put the prefix item at score 0 so every item scores s_i
        let m = scores.len();
        let mut model = SequenceModel::init(Architecture::AttnLite, m, 4, 4, 0).unwrap();
        let mut emb = Tensor::zeros(m, 4);
        for (i, &s) in scores.iter().enumerate() {
            emb.set(i, 0, s);
        }
        let mut pos = Tensor::zeros(4, 4);
        pos.set(0, 0, 1.0);
        let params = model.params_mut();
        params[0] = emb;
        params[1] = pos;
        for p in &mut params[2..] {
            *p = Tensor::zeros(4, 4);
        }
        model
    }

    #[test]
    fn rank_examples() {
        let model = fixed_score_model(&[0.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05]);
        let scores = model.score_next(&[1]).unwrap();
        assert_eq!(scores[1], 5.0);
        let best = 2;

        let mut none = Shield::new(DefenseMode::None);
        assert_eq!(rank_of_target(&model, &[1], best, &mut none, 10).unwrap(), Some(1));
        let mut rev = Shield::new(DefenseMode::Reverse);
        assert_eq!(rank_of_target(&model, &[1], best, &mut rev, 10).unwrap(), Some(10));
        let last = topk(&scores, 11, &[1]).unwrap().items()[10];
        for mode in [DefenseMode::None, DefenseMode::Reverse, DefenseMode::Random { seed: 1 }] {
            let mut s = Shield::new(mode);
            assert_eq!(rank_of_target(&model, &[1], last, &mut s, 10).unwrap(), None);
        }
        assert!(matches!(
            rank_of_target(&model, &[1], 13, &mut none, 10),
            Err(MetricsError::InvalidTarget { item: 13, .. })
        ));
    }

    #[test]
    fn shield_keeps_hr_changes_ndcg() {
        let model = fixed_score_model(&[0.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05]);
        // targets concentrated near the top: permuting moves them down
        let examples: Vec<NextItemExample> = [2, 2, 3, 9, 12]
            .into_iter()
            .map(|t| NextItemExample { prefix: vec![1], target: t })
            .collect();
        let base = evaluate(&model, &examples, &mut Shield::new(DefenseMode::None), 5, &[5], "none").unwrap();
        for mode in [DefenseMode::Reverse, DefenseMode::Random { seed: 9 }] {
            let r = evaluate(&model, &examples, &mut Shield::new(mode), 5, &[5], mode.tag()).unwrap();
            assert_eq!(r.hr(5), base.hr(5));
            if mode == DefenseMode::Reverse {
                assert!(r.ndcg(5).unwrap() < base.ndcg(5).unwrap());
            }
        }
    }

    #[test]
    fn report_json_has_stable_key_order() {
        let r = MetricsReport::from_ranks("target", "none", &[Some(1), None, Some(4)], &[10, 1, 5]).unwrap();
        let json = r.to_json();
        let pos = |needle: &str| json.find(needle).unwrap();
        assert!(pos("\"role\"") < pos("\"defense\""));
        assert!(pos("\"defense\"") < pos("\"num_users\""));
        assert!(pos("\"1\"") < pos("\"5\"") && pos("\"5\"") < pos("\"10\""));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn metrics_are_monotone_in_k(ranks in proptest::collection::vec(proptest::option::of(1usize..30), 1..50)) {
            let mut prev = (0.0, 0.0);
            for k in 1..30 {
                let cur = hr_ndcg(&ranks, k).unwrap();
                prop_assert!(cur.0 >= prev.0 && cur.1 >= prev.1);
                prop_assert!(cur.1 <= cur.0 + 1e-12 && cur.0 <= 1.0);
                prev = cur;
            }
        }
    }
}
