//! Certified inverse kinematics for serial chains of spherical joints.
//!
//! IK is posed as finding the point of the constraint variety nearest to a
//! reference `xi`. The resulting QCQP is relaxed with a sparse bounded-degree
//! sum-of-squares program over overlapping joint triplets and solved as a
//! block SDP. Rank-one moment blocks certify a global optimum; an unbounded
//! SOS side certifies that no configuration exists.

pub mod baseline;
pub mod bsos;
pub mod campaign;
pub mod chain;
pub mod error;
pub mod extract;
mod geom;
pub mod partition;
pub mod pipeline;
pub mod poly;
pub mod qcqp;

pub use error::{CoreError, Result};
