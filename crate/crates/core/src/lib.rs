//! Depth pruning toolkit for small decoder-only transformers.
//!
//! The pipeline: profile per-layer importance from residual-stream cosine
//! similarity, remove the most redundant contiguous block, train a
//! lightweight replacement network on recorded hidden-state pairs, and
//! evaluate the compressed model with accuracy plus a prediction-consistency
//! stability metric.

pub mod tensor;
