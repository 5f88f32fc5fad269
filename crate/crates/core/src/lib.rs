pub mod annotate;
pub mod bindnet;
pub mod curate;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod simindex;
pub mod store;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use store::EmbeddingStore;
pub use types::{ItemId, ItemRecord, MatchConfig, Modality, Split};
