//! Random compositions of circle maps that are expanding on the average.
//!
//! The crate provides map templates and selection laws ([`maps`],
//! [`ensemble`]), grid densities and observables ([`density`],
//! [`observable`]), transfer and Koopman operators ([`transfer`]), the
//! coupling machinery behind memory loss ([`coupling`]), Monte Carlo
//! trajectories ([`trajectory`]) and limit statistics of Birkhoff sums
//! ([`limit`]).

// `!(x < y)` comparisons deliberately treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coupling;
pub mod density;
pub mod ensemble;
pub mod limit;
pub mod maps;
pub mod observable;
pub mod rng;
pub mod stats;
pub mod trajectory;
pub mod transfer;
