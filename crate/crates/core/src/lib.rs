//! Kernel-independent fast multipole method built on tensor Chebyshev
//! interpolation, with eight interchangeable representations of the
//! multipole-to-local (M2L) operator.
//!
//! The pipeline is generic over the scalar field: the Laplace kernel runs in
//! `f64`, the Helmholtz kernel in `Complex64`, through identical code paths.
//!
//! Module map:
//! - [`interp`]: Chebyshev roots, interpolation weights, multi-index flattening.
//! - [`kernels`]: kernel functions and dense M2L assembly.
//! - [`octree`]: uniform octree, transfer vectors, interaction lists.
//! - [`lowrank`]: truncated SVD and ACA with SVD recompression.
//! - [`symmetry`]: cone reduction of transfer vectors and index permutations.
//! - [`m2l`]: the NA/NAsym/NAblk/SA/SArcmp/IA/IAsym/IAblk handlers.
//! - [`engine`]: P2M, M2M, M2L, L2L, L2P and P2P over the tree.

pub mod engine;
pub mod error;
pub mod interp;
pub mod kernels;
pub mod lowrank;
pub mod m2l;
pub mod octree;
pub mod scalar;
pub mod symmetry;

pub use engine::{direct_sum, FmmPlan};
pub use error::{Error, Result};
pub use interp::{AffineMap, ChebyshevGrid, MultiIndex};
pub use kernels::{Helmholtz, Kernel, Laplace};
pub use lowrank::LowRankFactors;
pub use m2l::{Compression, FlopRecord, M2lConfig, M2lHandler, Variant};
pub use octree::{CellId, InteractionLists, Octree, TransferVector};
pub use scalar::{Scalar, ScalarKind};
pub use symmetry::{PermutationSpec, SymmetryMap};

/// A point in three-dimensional space.
pub type Point = [f64; 3];
