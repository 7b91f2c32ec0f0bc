//! walar-core: a composite machine-translation reward and a small,
//! fully deterministic reinforcement-learning laboratory built around it.
//!
//! The reward combines three signals:
//! 1. **Quality estimation** (`qe`): a source-based translation score on the
//!    `[-25, 0]` scale, with oracle, deliberately-flawed ("holey"), and
//!    remote-service backends.
//! 2. **Word alignment** (`align`): bidirectional softmax similarity over
//!    per-word embeddings, threshold intersection, and coverage F1.
//! 3. **Language alignment** (`lid`): a trainable character-n-gram language
//!    identifier with code-switch masking and a binary language gate.
//!
//! These are combined in `reward` and optimized by the GRPO trainer in
//! `grpo` over the synthetic translation environment in `env`. `curation`
//! and `eval` implement the data pipeline and scoring diagnostics, and
//! `runner` orchestrates whole experiments.

pub mod align;
pub mod curation;
pub mod env;
pub mod eval;
pub mod grpo;
pub mod lid;
pub mod qe;
pub mod reward;
pub mod runner;
pub mod text;
