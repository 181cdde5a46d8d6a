//! Interior-point solver with forward-mode automatic differentiation.

pub mod ad;
pub mod ipm;
pub mod ldl;
