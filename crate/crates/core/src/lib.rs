//! A desk-scale laboratory for the discrete Gaussian free field on `Z^d`:
//! lattice potential theory, exact field sampling, level-set disconnection,
//! coarse-graining of interfaces, Brownian solidification probes, and
//! conditional Monte Carlo for push-down and profile experiments.

pub mod brownian;
pub mod coarse;
pub mod dirichlet;
pub mod energy;
pub mod error;
pub mod fftn;
pub mod gff;
pub mod green;
pub mod lab;
pub mod lattice;
pub mod mc;
pub mod observables;
pub mod percolation;
pub mod solidify;
pub mod potential;
pub mod testfn;
pub mod walk;

pub use error::{LabError, Result};
