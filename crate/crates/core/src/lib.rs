//! KL-regularized dynamic games.
//!
//! Feedback Nash equilibria for games where each player trades its own cost
//! against a KL penalty toward a (possibly multi-modal) reference policy:
//! an exact solver for the linear-quadratic-Gaussian case ([`klqg`]), an iterative
//! linear-quadratic-Laplace solver for nonlinear games ([`ilq`]), a scenario-tree
//! variant for mixture references ([`scenario`]) and a receding-horizon harness
//! ([`sim`]).

pub mod bench;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod ilq;
pub mod klqg;
pub mod linalg;
pub mod par;
pub mod reference;
pub mod scenario;
pub mod sim;

pub use error::{KlError, Result};
