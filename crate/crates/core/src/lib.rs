//! Nodal electricity price forecasting on power-grid graphs.
//!
//! The crate has two halves. [`market`] synthesizes an hourly market by
//! solving DC optimal power flow and decomposing nodal prices into an energy
//! component, line duals and a congestion flag. [`model`], [`train`] and
//! [`eval`] fit and score graph-convolutional forecasters on that data,
//! built on the reverse-mode engine in [`tensor`] and the spectral basis in
//! [`grid`].

pub mod grid;
pub mod market;
pub mod tensor;
pub mod model;
pub mod train;
pub mod eval;
