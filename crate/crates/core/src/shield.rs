//! Inference-time output perturbations applied to a deployed ranking.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::recmodels::RankingList;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DefenseMode {
    None,
    Random { seed: u64 },
    Reverse,
}

impl DefenseMode {
    pub fn tag(&self) -> &'static str {
        match self {
            DefenseMode::None => "none",
            DefenseMode::Random { .. } => "random",
            DefenseMode::Reverse => "reverse",
        }
    }
}

impl fmt::Display for DefenseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

fn permute(ranking: &RankingList, mode: DefenseMode, rng: Option<&mut ChaCha8Rng>) -> RankingList {
    let mut items = ranking.items().to_vec();
    match mode {
        DefenseMode::None => {}
        DefenseMode::Reverse => items.reverse(),
        DefenseMode::Random { .. } => {
            let rng = rng.expect("random shield needs a generator");
            items.shuffle(rng);
        }
    }
    RankingList::new(items).expect("a permutation of a valid ranking is valid")
}

/// Stateless form: a random shield draws its permutation from a generator
/// freshly seeded with the mode's seed, so equal inputs give equal outputs.
pub fn apply_output_defense(ranking: &RankingList, mode: DefenseMode) -> RankingList {
    match mode {
        DefenseMode::Random { seed } => permute(ranking, mode, Some(&mut ChaCha8Rng::seed_from_u64(seed))),
        _ => permute(ranking, mode, None),
    }
}

/// Stateful shield for a serving loop: one generator, advanced per response.
#[derive(Clone, Debug)]
pub struct Shield {
    mode: DefenseMode,
    rng: ChaCha8Rng,
}

impl Shield {
    pub fn new(mode: DefenseMode) -> Self {
        let seed = match mode {
            DefenseMode::Random { seed } => seed,
            _ => 0,
        };
        Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> DefenseMode {
        self.mode
    }

    pub fn apply(&mut self, ranking: &RankingList) -> RankingList {
        permute(ranking, self.mode, Some(&mut self.rng))
    }
}
