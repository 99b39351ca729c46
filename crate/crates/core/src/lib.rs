//! Desk-scale reimplementation of learned motion-compensation calibration:
//! a two-path 3D CNN regresses the motor-step delta between two volumetric
//! acquisitions, trained and evaluated against a synthetic phantom simulator.

pub mod adam;
pub mod gemm;
pub mod conv;
pub mod network;
pub mod ops;
pub mod tape;
pub mod tensor;
