//! Concept tokens for frozen causal language models.
//!
//! Learns a single new input-embedding row from a definitional corpus,
//! persists it as a portable artifact, injects it into prompts in asserted
//! or negated form to steer generation, and evaluates the effect with an
//! LLM-as-a-judge pipeline plus report metrics.

#![deny(unsafe_code)]

pub mod adapter;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod judge;
pub mod metrics;
pub mod par;
pub mod steering;
pub mod testing;
pub mod tinylm;
pub mod tokenizer;
pub mod trainer;

pub use adapter::{BackendConfig, ConceptTokenHandle, EmbeddingInit, LanguageModel, TokenSequence};
pub use corpus::{ConceptSpec, CorpusFormat, DefinitionalCorpus, InstantiatedCorpus};
pub use error::{Error, Result};
pub use judge::{Judge, JudgeConfig, LabelValue};
pub use metrics::{QaCounts, QaReport, RecastCounts, RecastReport};
pub use steering::{Condition, Task, TemplateSet};
pub use tinylm::{TinyLm, TinyLmConfig};
pub use trainer::{LearnedEmbedding, TrainConfig, TrainOutcome};
