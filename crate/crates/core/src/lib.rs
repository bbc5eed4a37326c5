//! Deterministic simulator for MAPE-K control loops placed across a
//! device / fog / cloud hierarchy, with a smart-building scenario generator.

pub mod coordination;
pub mod engine;
pub mod mape;
pub mod metrics;
pub mod model;
pub mod placement;
pub mod scenario;
pub mod simnet;
pub mod smartbuilding;
pub mod value;
