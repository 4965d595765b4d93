//! Stable-manifold and turnpike computations for infinite-horizon optimal
//! control of control-affine systems.

pub mod error;
pub mod hamiltonian;
pub mod io;
pub mod linalg;
pub mod manifold;
pub mod ocp;
pub mod ode;
pub mod sampling;
pub mod systems;

pub use error::{Error, Result};
