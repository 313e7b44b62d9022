//! Adaptive parallel arc-length continuation.

pub mod alm;
pub mod curve;
pub mod engine;
pub mod io;
pub mod problem;
pub mod runtime;
