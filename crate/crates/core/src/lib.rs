//! Community detection on multimodal graphs.
//!
//! A heterogeneous, optionally timestamped graph ([`graph`]) is embedded by
//! a typed attention encoder ([`model`]) trained on topological and
//! temporal contexts ([`sampling`]). The embeddings are clustered by a
//! Bayesian mixture whose component count adapts through split/merge moves
//! ([`clustering`]), and the two stages alternate in [`pipeline`].

pub mod clustering;
pub mod eval;
pub mod graph;
pub mod io;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod sampling;
pub mod stats;
