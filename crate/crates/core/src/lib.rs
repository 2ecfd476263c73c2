//! Defending sequential recommenders against model extraction.
//!
//! The crate bundles everything needed to run the full attack/defense loop
//! at desk scale:
//!
//! * [`seqdata`]: interaction corpora, leave-one-out splits, a synthetic generator
//! * [`ndiff`]: reverse-mode differentiation and finite-difference checks
//! * [`recmodels`]: attention and recurrent next-item recommenders
//! * [`shield`]: output-perturbation baselines (none, random, reverse)
//! * [`extraction`]: the black-box attacker and its surrogate training
//! * [`grodefense`]: swap matrices, gradient-driven proposals and joint training
//! * [`evalmetrics`]: full-ranking HR@k / NDCG@k
//! * [`harness`]: configuration, end-to-end runs and sweeps

pub mod evalmetrics;
pub mod extraction;
pub mod grodefense;
pub mod harness;
pub mod ndiff;
pub mod recmodels;
pub mod seqdata;
pub mod shield;
