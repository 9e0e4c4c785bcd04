pub mod amp;
pub mod error;
pub mod hamiltonian;
pub mod linalg;
pub mod mixture;
pub mod pseudomax;
pub mod scalar;
pub mod solvability;
pub mod state_evolution;

pub use error::{Error, Result};
pub use scalar::{Coefficient, Real};

/// Floating-point mixture used by the algorithms.
pub type Mixture = mixture::MixtureSpec<f64>;
/// Exact rational mixture for reproducing closed forms.
pub type ExactMixture = mixture::MixtureSpec<num_rational::Ratio<i128>>;
/// Instance with f64 storage.
pub type Instance = hamiltonian::HamiltonianInstance<f64>;
