//! Key-based coreset optimization for in-context demonstration retrieval.
//!
//! A small class-balanced coreset is drawn from a support pack of embeddings;
//! each entry carries a key that the remaining (untapped) samples pull toward
//! their own features. Retrieval at inference time scans the optimized keys.
//!
//! Module map:
//! - [`store`]: embedding packs and their JSONL / binary formats
//! - [`coreset`]: the coreset, snapshots, dispersion statistics
//! - [`init`]: random, k-center, InfoScore and filling-based initialization
//! - [`engine`]: target selection and batch / online key updates
//! - [`retrieval`]: top-k retrieval and multiple-choice prompt emission
//! - [`eval`]: k-NN proxy evaluation, sweeps, synthetic data

pub mod coreset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod init;
pub mod metric;
pub mod retrieval;
pub mod rng;
pub mod store;

pub use coreset::{Coreset, CoresetEntry, DispersionStats};
pub use engine::{TargetStrategy, UpdateConfig};
pub use error::{ErrorKind, KecoError, Result};
pub use init::{InfoScores, InitSpec, InitStrategy, KcenterMetric};
pub use metric::cosine_similarity;
pub use retrieval::{RetrievalResult, Similarity};
pub use store::{EmbeddingPack, EmbeddingRecord, PackFormat};
