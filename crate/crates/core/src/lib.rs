pub mod activity;
pub mod anf;
pub mod api;
pub mod ast;
pub mod bench;
pub mod builtins;
pub mod check;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod forward;
pub mod kernels;
pub mod lexer;
pub mod names;
pub mod optimizer;
pub mod parser;
pub mod parray;
pub mod printer;
pub mod reverse;
pub mod tape;
pub mod template;
pub mod validate;
pub mod value;

pub use error::{Error, Result};
