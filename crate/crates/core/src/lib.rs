//! Numerical laboratory for perturbation-induced quantum scars in a
//! two-dimensional harmonic oscillator threaded by a perpendicular,
//! homogeneous magnetic field.
//!
//! All quantities are in atomic units (ħ = m = e = 1).
//!
//! * [`grid`]: real-space lattice, complex and real fields, FFTs.
//! * [`potential`]: confinement and Gaussian impurity potentials.
//! * [`classical`]: closed-form orbits of the unperturbed system,
//!   resonance fields, trajectory integration and Poincaré sections.
//! * [`eigensolver`]: imaginary time propagation with an exactly
//!   factorized magnetic kinetic propagator.
//! * [`analysis`]: Fock–Darwin reference spectra, density of states,
//!   scar scoring and the pinning overlap curve.
//!
//! With the default `parallel` feature the data-parallel loops (states,
//! trajectories, rotation angles) run on rayon; without it everything runs
//! on the calling thread with identical arithmetic.

pub mod analysis;
pub mod classical;
pub mod eigensolver;
pub mod grid;
pub mod par;
pub mod potential;

pub use num_complex::Complex64;
