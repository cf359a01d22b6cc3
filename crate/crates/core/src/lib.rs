//! Cost-effective batch prompting for entity resolution.
//!
//! The pipeline turns candidate pairs into feature vectors, clusters and
//! batches them, allocates labeled demonstrations to each batch, prompts an
//! LLM once per batch and scores the answers, keeping a ledger of API and
//! labeling spend along the way.
//!
//! ```no_run
//! use batcher::pipeline::{run_pipeline, RunConfig};
//!
//! let cfg: RunConfig = toml::from_str(&std::fs::read_to_string("run.toml")?)?;
//! let outcome = run_pipeline(&cfg)?;
//! println!("F1 {:.3}, ${:.2}", outcome.report.metrics.f1, outcome.report.cost.total_dollars);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod batching;
pub mod costeval;
pub mod data;
pub mod error;
pub mod features;
pub mod llm;
pub mod pipeline;
pub mod selection;
pub mod serialize;
pub mod synth;

pub use data::{load_dataset, split_dataset, Dataset, EntityPair, EntityRecord, MatchLabel, SplitSpec};
pub use error::{Error, Result};
