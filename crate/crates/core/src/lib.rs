//! Hybrid neural-network / ODE epidemic models.
//!
//! A small feedforward network stands in for the unknown infection function of
//! an SIS or SIR system. The network is trained by backpropagating through a
//! fixed-step RK4 integration of the hybrid model, with a loss that adds a
//! penalty whenever the basic reproduction number of the fitted function drops
//! below the bifurcation threshold 1.

pub mod autodiff;
pub mod nn;
pub mod ode;
pub mod epimodels;
pub mod data;
pub mod train;
pub mod experiment;
