//! Iterative convex MPC with linearized discrete-time high-order control
//! barrier functions (iMPC-DHOCBF).
//!
//! The crate is organized around the pipeline that runs at every control
//! step: a nominal trajectory is linearized ([`dynamics`]), obstacle
//! boundaries are locally replaced by tangent halfspaces ([`geometry`],
//! [`sbd`]), the halfspaces are unrolled into convex high-order barrier
//! constraint rows ([`cbf`]), the resulting quadratic program is solved
//! ([`qp`]), and the whole thing is iterated to convergence inside a
//! receding-horizon controller ([`impc`]).

pub mod cbf;
pub mod detector;
pub mod dynamics;
pub mod geometry;
pub mod impc;
pub mod qp;
pub mod sbd;
