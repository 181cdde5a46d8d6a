//! Model-predictive trajectory planner that optimizes one trajectory over
//! weighted maneuver alternatives under Gaussian uncertainty, with a
//! chance-constrained full-braking fallback, plus a receding-horizon
//! simulator for scenario studies.

pub mod costs;
pub mod error;
pub mod geometry;
pub mod nlp;
pub mod sim;
pub mod solver;
pub mod uncertainty;
pub mod vehicle;
