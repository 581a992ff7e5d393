//! Hybrid text detector core: corpus handling, text processing, a small
//! reverse-mode autodiff engine, the CNN/GRU hybrid classifier, evaluation
//! statistics, and artifact persistence.
//!
//! The crate is dependency-light and fully deterministic: every stochastic
//! step draws from a seeded [`rng::DetRng`], so a seed plus a corpus
//! reproduces splits, initialization, training, and reports bit-for-bit.

pub mod corpus;
pub mod evalstats;
pub mod hybridnet;
pub mod numgrad;
pub mod persist;
pub mod rng;
pub mod textproc;
