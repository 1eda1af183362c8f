//! Sparse-Tucker-decomposed SpMV for linear fascicle evaluation.
//!
//! The connectome matrix `M` is represented as a coordinate-format sparse
//! tensor contracted with a dense dictionary ([`tensor`]). This crate provides
//! the two SpMV kernels over that representation (`y = M w` and `w = M^T y`,
//! [`engine`]), the data restructuring that sorts the coefficient list to expose
//! reuse and run-aligned thread mappings ([`restructure`]), and the subspace
//! Barzilai-Borwein NNLS solver that drives them ([`solver`]).
//!
//! [`datagen`] produces deterministic synthetic instances, [`io`] stores them in
//! a portable little-endian container, and [`verify`] checks every kernel
//! against a dense materialization of `M`.

pub mod datagen;
pub mod engine;
pub mod error;
pub mod io;
pub mod restructure;
pub mod solver;
pub mod tensor;
pub mod verify;

pub use datagen::{generate, GenConfig, Problem};
pub use engine::{ExecutionPlan, KernelStats, PartitionKind, PartitionStrategy, SpmvOp};
pub use error::{Error, Result};
pub use restructure::{autotune, detect_runs, sort_by, Permutation, RestructureChoice, RunTable};
pub use solver::{solve, SolverConfig, SolverTrace, SpmvSetup};
pub use tensor::{
    materialize_dense, precompute_offsets, validate, CoeffOrder, DenseM, Dictionary, Dims, Key,
    OffsetPhiTensor, PhiTensor, SignalVector, WeightVector,
};
