//! Instruction set, program loading and fixture tooling.

pub mod analysis;
pub mod asm;
pub mod cfg;
pub mod elf_writer;
pub mod image;
pub mod interp;
pub mod isa;

pub use image::{load_program, LoadError, ProgramImage};
pub use isa::{decode, DecodeError, Instruction, Op, SbpfVersion};
