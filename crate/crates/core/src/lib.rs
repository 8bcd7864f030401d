//! Toy decoder-only transformer with classic and activated low-rank adapters.
//!
//! Activated adapters (aLoRA) project positions before their activation point
//! with base weights, so the keys and values of a conversation prefix are the
//! same for the base model and every activated adapter. The engine exploits
//! that to reuse one base KV cache across adapters, and the cost ledger counts
//! every operation so that the savings can be checked exactly.

pub mod adapters;
pub mod bench;
pub mod cost;
pub mod engine;
pub mod error;
pub mod exec;
pub mod format;
pub mod kv_cache;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

/// Byte-level token id.
pub type TokenId = u32;

/// Token id that ends a generation.
pub const EOS: TokenId = 0;
