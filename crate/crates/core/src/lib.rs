//! Multi-assignment Sinkhorn-Knopp and structure-preserving consistency
//! losses for multi-modal embedding learning.
//!
//! - [`matrix_io`]: dense containers and the CSV interchange formats.
//! - [`solvers`]: vanilla, modified and multi-assignment Sinkhorn-Knopp.
//! - [`oracle`]: brute-force exact many-to-many assignment for small instances.
//! - [`losses`]: scaled cosine similarity, BCE-with-logits, the consistency
//!   losses, InfoNCE and their analytic gradients.
//! - [`trainer`]: synthetic data, gated projection heads, memory bank,
//!   training loop and retrieval/structure evaluation.

pub mod losses;
pub mod matrix_io;
pub mod oracle;
pub mod solvers;
pub mod trainer;

pub use oracle::{solve_exact, OracleError, OracleResult};
pub use matrix_io::{DenseMatrix, DenseTensor3, MatrixIoError};
pub use solvers::{
    build_similarity_tensor, extract_assignment, multi_sinkhorn_with, Acceleration, modified_sinkhorn, multi_sinkhorn,
    vanilla_sinkhorn, Assignment, AssignmentMatrix, MultiAssignment, SolveReport, SolverConfig,
    SolverError,
};
