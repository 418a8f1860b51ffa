//! Token-aware LoRA adapters for the cross-attention layers of a miniature
//! latent-diffusion model.
//!
//! Adapters act on the Key and Value projections only at the positions of
//! their concept's rare token, so several of them compose by summation
//! without touching each other's tokens. Training adds an L1 loss that pulls
//! the rare token's key toward its class noun's key.

pub mod adapters;
pub mod analysis;
pub mod attention;
pub mod diffusion;
pub mod error;
pub mod numerics;
pub mod text;
pub mod training;
pub mod world;

pub use adapters::{AdapterRegistry, LoraAdapter};
pub use error::{Error, Result};
pub use numerics::Matrix;
pub use text::{ConceptBinding, TokenId, TokenSequence, Vocabulary};
pub use world::{World, WorldConfig};
