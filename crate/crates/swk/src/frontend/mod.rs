//! Frontend for the SWK kernel language: lexer, parser, validator and
//! pretty-printer.

pub mod ast;
pub mod lexer;
pub mod parser;
pub mod pretty;
pub mod sema;
pub mod token;

pub use ast::*;
pub use lexer::{tokenize, SourceFile};
pub use parser::{parse, parse_source};
pub use sema::{validate, validate_with, SemaInfo, TypedUnit, ValidateOpts};

#[cfg(test)]
mod tests;
