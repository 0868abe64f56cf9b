//! Shape estimation from radiographs through triplet-loss embeddings.
//!
//! The crate covers the whole experiment: phantom volumes, rendered
//! projections, a small convolutional encoder trained with the triplet loss,
//! embedding-based classification and verification, and mesh distances for
//! judging the retrieved shapes.

pub mod drr;
pub mod encoder;
pub mod error;
pub mod fingerprint;
pub mod io;
pub mod mesh;
pub mod phantom;
pub mod pipeline;
pub mod seed;
pub mod triplet;

pub use error::{Error, Result};
