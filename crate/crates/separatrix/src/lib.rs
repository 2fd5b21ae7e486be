//! Numerical laboratory for the separatrix map of the generalized Arnold
//! example: a rotor-pendulum Hamiltonian with trigonometric perturbations.
//!
//! The crate is organized around the pipeline
//!
//! ```text
//! hamiltonian -> geometry -> melnikov -> map
//!                                \-> flow (ground truth)
//!                                \-> diffusion (stochastic model)
//! ```
//!
//! `hamiltonian` defines the model family, `geometry` the unperturbed
//! separatrix data, `melnikov` the splitting potentials and resonance
//! bookkeeping, `map` the separatrix map in its published asymptotic forms,
//! `flow` the direct numerical return map used to validate them, and
//! `diffusion` the associated random-walk model.

pub mod diffusion;
pub mod flow;
pub mod geometry;
pub mod hamiltonian;
pub mod map;
pub mod melnikov;
pub mod quad;

pub use geometry::SeparatrixBranch;
pub use hamiltonian::{ModelSpec, PhasePoint, TrigPerturbation};
pub use map::SepMapState;
