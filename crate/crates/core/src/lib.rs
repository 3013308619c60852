//! Lifelong predicate prediction with knowledge-keyed in-context prompts.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: cosine similarity, exact top-k, softmax, seeded randomness.
//! - [`datastream`]: relation instances, stage schedules, synthetic data, the
//!   `LSGG-EMB` file format.
//! - [`prompt_pool`]: prompt blocks with knowledge keys and bounded exemplar
//!   stores.
//! - [`token_mapper`]: feature vector to token block encoder.
//! - [`scorer`]: in-context sequence assembly and the frozen readout.
//! - [`trainer`]: losses, analytic gradients, AdamW and the stage loop.
//! - [`metrics`]: recall, mean recall, forgetting, weighted mAP.
//! - [`harness`]: experiment runs, ablation presets and reports.

#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod datastream;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod prompt_pool;
pub mod scorer;
pub mod token_mapper;
pub mod trainer;
