//! Desk-scale simulator for contribution-oriented personalized federated
//! learning.
//!
//! Clients hold label-skewed shards of a synthetic classification problem and
//! train small models. Each client grows a binary mask over the flat
//! parameter vector ([`pwpm`]); masked coordinates stay local while the rest
//! are aggregated by the server with weights derived from per-client
//! contribution scores ([`cowa`]). Local training alternates between the two
//! submodels with separate moment buffers ([`mamo`]). [`orchestrator`] runs
//! the rounds, including the FedAvg, FedAvg+FT, local-only and fixed-head
//! baselines, and [`cli`] wraps it all in the `copfl` binary.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod cli;
pub mod config;
pub mod cowa;
pub mod data;
pub mod error;
pub mod mamo;
pub mod model;
pub mod orchestrator;
pub mod param;
pub mod pwpm;
pub mod report;
pub mod rng;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use mamo::{MamoConfig, MamoState, Phase};
pub use model::{LabeledBatch, ModelKind, ModelSpec};
pub use orchestrator::{AlgorithmKind, Experiment, RoundRecord};
pub use param::{Mask, ParameterVector};

// mdbook cannot run listings that depend on this crate, so the chapters are
// pulled in here and checked by `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/parameters.md")]
    mod parameters {}
    #[doc = include_str!("../../../book/src/mamo.md")]
    mod mamo {}
    #[doc = include_str!("../../../book/src/pwpm.md")]
    mod pwpm {}
    #[doc = include_str!("../../../book/src/cowa.md")]
    mod cowa {}
    #[doc = include_str!("../../../book/src/rounds.md")]
    mod rounds {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
