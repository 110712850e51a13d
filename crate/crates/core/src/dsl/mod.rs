//! The feature-program language: grammar, parser, type checker,
//! deterministic evaluator, and the DAG view of the AST.
//!
//! Program files are UTF-8 text with extension `.fp`. The grammar,
//! also published in `docs/grammar.md`:
//!
//! ```ebnf
//! program   = "def" ident "(" ident ")" ":" sep* statement (sep statement)* sep* ;
//! statement = binding | return ;
//! binding   = ident "=" expr ;
//! return    = "return" "[" feature ("," feature)* [","] "]" ;
//! feature   = "(" string "," expr ")" ;
//! sep       = ";" | NEWLINE ;                    (* newlines inside () or [] are ignored *)
//! expr      = term (("+" | "-") term)* ;
//! term      = factor (("*" | "/") factor)* ;
//! factor    = "-" factor | atom ;
//! atom      = number | string | ident | ident "(" [expr ("," expr)*] ")" | "(" expr ")" ;
//! ident     = (letter | "_") (letter | digit | "_")* ;   (* except "def", "return" *)
//! string    = '"' (char | '\"' | '\\')* '"' ;
//! number    = decimal literal, optional exponent; always a finite real ;
//! ```
//!
//! Comments run from `#` to end of line. A program is one function: its
//! parameter is the observation handle, bindings are straight-line (no
//! forward references, no rebinding), and the return list names each
//! scalar feature. There are no loops or conditionals; branching comes
//! from primitives like `where` and `threshold`.

pub mod ast;
pub mod dag;
pub mod eval;
pub mod gen;
mod lexer;
pub mod parser;
pub mod printer;
pub mod typecheck;

pub use ast::{BinOp, Binding, Expr, FeatureProgram, NamedExpr};
pub use dag::{ast_to_dag, DagEdge, DagNode, NodeId, NodeKind, ProgramDag};
pub use eval::{evaluate, AstSite, EvalLimits, Evaluator, RunHooks, RuntimeError};
pub use gen::{arbitrary_program, random_feature, random_program, GeneratorConfig};
pub use parser::parse;
pub use printer::{canonical_expr, pretty_print};
pub use typecheck::{typecheck, TypeError};

use crate::primitives::PrimitiveRegistry;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{col}: {message}; expected {}", expected.join(" or "))]
    Syntax {
        line: u32,
        col: u32,
        message: String,
        expected: Vec<String>,
    },
    #[error("unbound identifier {name:?} at {line}:{col}")]
    UnboundIdentifier { name: String, line: u32, col: u32 },
    #[error("invalid program at {line}:{col}: {message}")]
    Invalid { line: u32, col: u32, message: String },
}

impl ParseError {
    pub(crate) fn syntax(line: u32, col: u32, message: String, expected: &[&str]) -> Self {
        ParseError::Syntax {
            line,
            col,
            message,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub(crate) fn invalid(line: u32, col: u32, message: String) -> Self {
        ParseError::Invalid { line, col, message }
    }
}

/// Parse-or-typecheck failure, for callers that want one funnel.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompileError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("type errors: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Type(Vec<TypeError>),
}

/// Parse then typecheck in one step.
pub fn parse_and_check(
    source: &str,
    registry: &PrimitiveRegistry,
) -> Result<FeatureProgram, CompileError> {
    let program = parse(source)?;
    typecheck(&program, registry).map_err(CompileError::Type)?;
    Ok(program)
}
