//! Desk-scale federated instruction tuning with personalized sparse LoRA.
//!
//! Each client expands its LoRA rank, prunes the expanded adapters back to its
//! parameter budget with saliency scores computed on local data, and then takes
//! part in federated rounds where the server averages uploads densely and masks
//! the result with every recipient's own masks.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: matrices, seeded streams, bit masks, order statistics
//! - [`backbone`]: frozen tiny transformer with Q/K/V adapter sites and adapter-only gradients
//! - [`adapters`]: LoRA pairs, dense-rank expansion, initialization, checkpoints
//! - [`saliency`]: first/second-order/mixed scores and the iterative mask search
//! - [`data`]: JSONL ingestion, synthetic corpus, byte tokenizer, non-IID partitions
//! - [`federation`]: clients, server, personalized aggregation, rounds
//! - [`metrics`]: perplexity, mask similarity, CSV/manifest emission
//! - [`cli`]: the `fedprune` command line

pub mod adapters;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod numerics;
pub mod saliency;

pub use error::{Error, Result};
