//! Simulation, calibration and characterization toolkit for capacitive
//! fabric tactile skins.
//!
//! * [`capmodel`] closed-form taxel capacitance under compression and bending
//! * [`dynamics`] noise, hysteresis, quantization and wear drift
//! * [`topology`] skin layout, addressing and contact localization
//! * [`daq`] scan loop, frame codec and frame streaming
//! * [`calib`] regression fits and force calibration
//! * [`metrics`] characterization statistics
//! * [`experiments`] standard characterization procedures

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod calib;
pub mod capmodel;
pub mod daq;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod topology;

pub use error::DomainError;
