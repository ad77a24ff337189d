pub mod align;
pub mod ann;
pub mod corpus;
pub mod crossmodal;
pub mod error;
pub mod pipeline;
pub mod shard;
pub mod unimodal;
pub mod vector;

pub use error::{Error, Result};
