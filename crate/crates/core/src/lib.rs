//! Selected configuration interaction with core-optimized orbitals.
//!
//! The crate is organized around a small set of value types: [`hamio::IntegralSet`]
//! holds the one- and two-body integrals of a second-quantized Hamiltonian,
//! [`detspace::Determinant`] and [`detspace::DetSet`] represent the sparse
//! determinant basis, and [`detspace::Wavefunction`] couples a determinant set
//! to a normalized coefficient vector. On top of these sit the Davidson
//! eigensolver ([`eigen`]), the trim-based core search and three-phase driver
//! ([`trimci`]), orbital optimization ([`coo`]), reduced density matrices and
//! entanglement observables ([`obsrv`]), and perturbative/extrapolation
//! analysis ([`analysis`]).

pub mod analysis;
pub mod coo;
pub mod detspace;
pub mod eigen;
pub mod hamio;
pub mod linalg;
pub mod obsrv;
pub mod trimci;

// force linkage of the system BLAS/LAPACK
use openblas_src as _;
