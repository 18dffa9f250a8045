//! Policy-aware embedded datastore: data units with attached purpose/entity
//! policies, an append-only action history, four erasure modes of
//! increasing strictness, invariant checks over the history, and a
//! deterministic benchmark harness.

pub mod bench;
pub mod checker;
pub(crate) mod codec;
pub mod error;
pub mod ledger;
pub mod model;
pub mod store;

pub use error::{Error, Result};
