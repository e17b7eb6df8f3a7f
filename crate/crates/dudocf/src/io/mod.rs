//! On-disk formats: DDT1 tensors and PGM slice dumps.

pub mod ddt;
pub mod pgm;
