use thiserror::Error;

use crate::validate::Diagnostic;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax { line: u32, col: u32, message: String },

    #[error("program failed validation:\n{}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),

    #[error("unknown function '{0}'")]
    UnknownFunction(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("tape label mismatch: expected '{expected}', found '{found}'")]
    TapeMismatch { expected: String, found: String },

    #[error("pop from empty tape (label '{0}')")]
    TapeEmpty(String),

    #[error("no adjoint template registered for primitive '{0}'")]
    MissingTemplate(String),

    #[error("no tangent template registered for primitive '{0}'")]
    MissingTangent(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("transform error: {0}")]
    Transform(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("persistent array error: {0}")]
    PArray(String),
}

impl Error {
    pub fn syntax(line: u32, col: u32, message: impl Into<String>) -> Self {
        Error::Syntax {
            line,
            col,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Error::Runtime(message.into())
    }

    pub fn transform(message: impl Into<String>) -> Self {
        Error::Transform(message.into())
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}
