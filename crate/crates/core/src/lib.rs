//! Cross-domain random pre-training with prototypes.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - [`collect`]: reward-free uniform-random data collection per domain,
//! - [`protolearn`]: prototypical self-supervised pre-training with
//!   [`sinkhorn`] targets and the prototype-diffusion loss,
//! - [`rlagent`]: soft actor-critic on the frozen encoder with the
//!   [`intrinsic`] kNN exploration bonus,
//! - [`metrics`]: prototype coverage, PCA and linear-probe diagnostics,
//! - [`config`] / [`pipeline`]: flat configuration files and reproducible runs.
//!
//! Toy domains live in [`envsuite`]; the numeric core is [`ndmath`].

mod binio;
pub mod collect;
pub mod config;
pub mod envsuite;
pub mod error;
pub mod exec;
pub mod intrinsic;
pub mod metrics;
pub mod ndmath;
pub mod pipeline;
pub mod protolearn;
pub mod rlagent;
pub mod seeds;
pub mod sinkhorn;

pub use error::{Error, Result};
