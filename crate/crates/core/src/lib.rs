//! Adaptive subspace principal component analysis and Hilbert-space
//! principal component regression for data observed on regular grids.
//!
//! The pipeline runs in four steps. An [`AmbientSpace`] fixes the discrete
//! inner product. A [`BasisSet`] is whitened into an orthonormal frame.
//! [`pca::fit_aspca`] estimates eigenpairs inside the frame's span. Finally
//! [`hspcr::fit_hspcr`] regresses a scalar response on Euclidean
//! covariates plus the leading component scores.

// Checks of the form `!(x > tol)` are written so that NaN also fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod error;
pub mod hspcr;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod normal;
pub mod pca;
pub mod rng;
pub mod simgen;
pub mod space;

pub use basis::{bspline_tensor_basis, mask_space, tri_pl_basis, BasisSet, KnotVector, Provenance, Triangulation};
pub use error::{Error, Result};
pub use space::{
    gram, inner, mean_element, norm, orthonormal_frame, project_scores, whiten, AmbientSpace, Element, GramMatrix,
    SampleSet, Whitener, DEFAULT_DROP_TOL,
};
