//! Symbolic core: expressions, constraint solving, memory and machine state.

pub mod expr;
pub mod memory;
pub mod solver;
pub mod state;

pub use expr::Expr;
pub use solver::{Model, SatResult, Solver, SolverConfig};
pub use state::{step, Env, Status, SymState};
