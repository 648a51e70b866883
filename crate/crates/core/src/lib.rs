//! Speaking-turn multimodal graphs with factorization nodes, contrastive
//! pretraining within a video, and question answering on top.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`tape`]) over
//! dense `f64` matrices.

pub mod analysis;
pub mod attention;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod graph;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod probe;
pub mod qa;
pub mod tape;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
