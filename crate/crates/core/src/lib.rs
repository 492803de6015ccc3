//! Fingerprint-guided coreset selection and rehearsal-buffer management for
//! learning from a stream of pre-trained embeddings.

pub mod buffer;
pub mod checks;
pub mod cli;
pub mod coreset;
pub mod error;
pub mod exec;
pub mod fingerprints;
pub mod learner;
pub mod math;
pub mod rng;
pub mod stream_sim;

pub use error::{Error, Result};
pub use exec::ExecPolicy;
