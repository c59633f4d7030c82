//! Glass detection network (GDNet-B) built from scratch on a small
//! reverse-mode autodiff engine.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod kv;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
