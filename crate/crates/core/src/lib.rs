//! Symbolic execution engine for sBPF programs.

pub mod bytecode;
pub mod explore;
pub mod oracles;
pub mod report;
pub mod runtime;
pub mod symcore;
