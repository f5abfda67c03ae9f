//! SWK: a directive-annotated kernel language, a dual-target compiler and a
//! deterministic emulator of a heterogeneous manycore chip (one management
//! core plus 64 compute elements with scratchpad memories), together with the
//! job-server offload runtime that dispatches outlined target regions and an
//! analytic speedup model for profiling reports.
//!
//! The crate is organized around the pipeline:
//!
//! ```text
//! .swk source -> frontend -> passes (outline, mark, inline, devirt, lower,
//! link) -> ProgramImage -> emu + runtime (execute)  |  interp (reference)
//! ```
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `swk` binary for the command-line driver.

pub mod diag;
pub mod frontend;
pub mod interp;
pub mod ir;
pub mod passes;

pub use diag::{Diagnostic, Severity, Span};
