//! Datasets, loaders and client partitioners.

mod dataset;
pub mod idx;
pub mod partition;
pub mod synth;

pub use dataset::Dataset;
pub use idx::load_idx;
pub use partition::{partition_dirichlet, partition_iid, Partition, Scheme};
pub use synth::{synth_blobs, Affinity, BlobSpec};
