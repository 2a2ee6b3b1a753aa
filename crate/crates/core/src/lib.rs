//! Offline imitation learning from mixed-quality demonstrations: weighted
//! behavior cloning where the weights come from an action ranker trained with
//! a pairwise loss and a bi-level meta-goal.

pub mod data;
pub mod envs;
pub mod eval;
pub mod gradcheck;
pub mod models;
pub mod rng;
pub mod train;
