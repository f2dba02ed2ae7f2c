//! One-shot distributed kernel PCA for vertically partitioned data.
//!
//! Every agent holds all `T` samples but only a slice of the features. Each
//! agent computes its local Gram matrix, keeps the leading eigenpairs and
//! ships them to a fusion center in a single message. The center rebuilds an
//! approximation of the global Gram matrix (a sum of the local
//! reconstructions for the linear kernel, their Hadamard product for the RBF
//! kernel) and extracts its leading eigenvectors.
//!
//! Modules, bottom-up:
//!
//! - [`linalg`]: truncated symmetric eigendecomposition and sin-Θ distances.
//! - [`kernels`]: kernel specs, feature blocks and Gram construction.
//! - [`agent`]: the local computation, including adaptive rank selection.
//! - [`fusion`]: aggregation, global truncation, error bounds, projection.
//! - [`protocol`]: the binary wire format, transports and cost accounting.
//! - [`data`]: synthetic generation, table ingestion and partitioning.
//! - [`experiment`]: sweep runners and the agent-count planner.

pub mod agent;
pub mod data;
mod error;
pub mod experiment;
pub mod fusion;
pub mod kernels;
pub mod linalg;
pub mod protocol;

pub use error::{Error, Result};

pub use agent::{adaptive_d, center_features, local_truncation, AgentMessage, AgentState, RankPolicy};
pub use data::{partition, synth_lowrank, Dataset, PartitionScheme, SynthParams};
pub use fusion::{aggregate, global_truncation, project, subspace_bound, BoundReport, FusionResult};
pub use kernels::{cross_kernel, gram, hadamard, FeatureBlock, KernelKind, KernelSpec};
pub use linalg::{sin_theta, subspace_error, sym_eig_topd, GramMatrix, SpectralTruncation, SubspaceAngles};
pub use protocol::{decode, encode, run_one_shot, CostReport, Transport};
