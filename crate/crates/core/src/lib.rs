//! Hierarchical federated unlearning over LoRA adapter deltas.
//!
//! Clients train unlearning (and optionally retention) adapters on private
//! data; the server clusters the uploaded deltas by cosine similarity,
//! TIES-votes inside each cluster and sums across clusters, then applies the
//! result to the broadcast model in a single round.

pub mod adapter;
pub mod container;
pub mod error;
pub mod eval;
pub mod merge;
pub mod protocol;
pub mod similarity;
pub mod tensor;
pub mod toy;

pub use adapter::{
    align, apply_delta, flatten, linear_combine, recover_dense, unflatten, AdapterDelta,
    DeltaEntry, DeltaMetadata, LoraFactors, Role,
};
pub use container::Container;
pub use error::{Error, ErrorCode, Result};
pub use merge::{
    merge, merge_avg, merge_hierarchical, merge_sum, ties_elect_sign, ties_merge, ties_trim,
    MergeOutcome, MergeReport, MergeStrategy, TiesConfig, TrimScope,
};
pub use similarity::{cluster, cosine, similarity_matrix, Clustering, SimilarityMatrix};
pub use tensor::{ModelParams, TensorF32};
