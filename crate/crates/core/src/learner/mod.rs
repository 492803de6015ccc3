//! Surrogate stream learner: embedding sources, the prototype classifier
//! trained by K-step gradient descent, and continual-learning metrics.

pub mod embedder;
pub mod metrics;
pub mod model;

pub use embedder::{BatchSpec, Embedder, EmbeddingBatch, FileEmbedder, SyntheticEmbedder};
pub use metrics::{average_accuracy, average_forgetting, AccuracyMatrix};
pub use model::{ForwardOutput, Gradients, PrototypeModel};
