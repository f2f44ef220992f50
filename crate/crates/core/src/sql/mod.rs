//! Lexer, syntax tree and recursive-descent parser for the SQL dialect.

pub mod ast;
mod lexer;
mod parser;

pub use ast::*;
pub use parser::parse_sql;

use thiserror::Error;

/// A syntax error with the byte offset where parsing stopped.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at offset {offset}: {message}")]
pub struct SyntaxError {
    pub message: String,
    pub offset: usize,
}

impl SyntaxError {
    pub fn new(message: impl Into<String>, offset: usize) -> Self {
        SyntaxError {
            message: message.into(),
            offset,
        }
    }
}
