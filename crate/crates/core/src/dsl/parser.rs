//! Recursive-descent parser. Total over the published grammar; everything
//! else is a positioned error with the expected-token set.

use std::collections::HashSet;

use super::ast::{is_valid_identifier, Binding, Expr, FeatureProgram, NamedExpr};
use super::lexer::{lex, Tok, Token};
use super::ParseError;

const MAX_EXPR_DEPTH: usize = 64;
const MAX_BINDINGS: usize = 256;
const MAX_FEATURES: usize = 64;
const MAX_CALL_ARGS: usize = 8;

pub fn parse(source: &str) -> Result<FeatureProgram, ParseError> {
    let tokens = lex(source)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        bound: HashSet::new(),
    };
    p.program()
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    bound: HashSet<String>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error_here(&self, message: impl Into<String>, expected: &[&str]) -> ParseError {
        let t = self.peek();
        ParseError::syntax(
            t.line,
            t.col,
            format!("{} but found {}", message.into(), t.tok.describe()),
            expected,
        )
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<Token, ParseError> {
        if std::mem::discriminant(&self.peek().tok) == std::mem::discriminant(&tok) {
            Ok(self.advance())
        } else {
            Err(self.error_here(format!("expected {expected}"), &[expected]))
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, u32, u32), ParseError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Ident(name) => {
                self.advance();
                Ok((name, t.line, t.col))
            }
            _ => Err(self.error_here(format!("expected {what}"), &["identifier"])),
        }
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek().tok, Tok::Newline) {
            self.advance();
        }
    }

    /// Consume at least one statement separator (newline or semicolon).
    fn expect_separator(&mut self) -> Result<(), ParseError> {
        if !matches!(self.peek().tok, Tok::Newline | Tok::Semicolon) {
            return Err(self.error_here("expected end of statement", &["';'", "newline"]));
        }
        while matches!(self.peek().tok, Tok::Newline | Tok::Semicolon) {
            self.advance();
        }
        Ok(())
    }

    fn program(&mut self) -> Result<FeatureProgram, ParseError> {
        self.skip_newlines();
        self.expect(Tok::Def, "'def'")?;
        let (name, ..) = self.expect_ident("function name")?;
        self.expect(Tok::LParen, "'('")?;
        let (param, line, col) = self.expect_ident("parameter name")?;
        if !is_valid_identifier(&param) {
            return Err(ParseError::invalid(line, col, format!("invalid parameter {param:?}")));
        }
        self.expect(Tok::RParen, "')'")?;
        self.expect(Tok::Colon, "':'")?;
        self.skip_separators_soft();

        self.bound.insert(param.clone());
        let mut bindings = Vec::new();
        let features;
        loop {
            match &self.peek().tok {
                Tok::Return => {
                    features = self.return_stmt()?;
                    break;
                }
                Tok::Ident(_) => {
                    if bindings.len() >= MAX_BINDINGS {
                        let t = self.peek();
                        return Err(ParseError::invalid(
                            t.line,
                            t.col,
                            format!("too many bindings (limit {MAX_BINDINGS})"),
                        ));
                    }
                    bindings.push(self.binding()?);
                    self.expect_separator()?;
                }
                _ => {
                    return Err(
                        self.error_here("expected a binding or 'return'", &["identifier", "'return'"])
                    )
                }
            }
        }
        self.skip_separators_soft();
        if !matches!(self.peek().tok, Tok::Eof) {
            return Err(self.error_here("expected end of program after return", &["end of input"]));
        }
        let program = FeatureProgram {
            name,
            param,
            bindings,
            features,
        };
        debug_assert!(program.validate().is_ok(), "parser let an invalid program through");
        Ok(program)
    }

    fn skip_separators_soft(&mut self) {
        while matches!(self.peek().tok, Tok::Newline | Tok::Semicolon) {
            self.advance();
        }
    }

    fn binding(&mut self) -> Result<Binding, ParseError> {
        let (name, line, col) = self.expect_ident("binding name")?;
        if self.bound.contains(&name) {
            return Err(ParseError::invalid(
                line,
                col,
                format!("identifier {name:?} is already bound"),
            ));
        }
        self.expect(Tok::Assign, "'='")?;
        let expr = self.expr(0)?;
        self.bound.insert(name.clone());
        Ok(Binding { name, expr })
    }

    fn return_stmt(&mut self) -> Result<Vec<NamedExpr>, ParseError> {
        let ret = self.advance(); // 'return'
        self.expect(Tok::LBracket, "'['")?;
        let mut features = Vec::new();
        let mut seen = HashSet::new();
        loop {
            if matches!(self.peek().tok, Tok::RBracket) {
                self.advance();
                break;
            }
            if features.len() >= MAX_FEATURES {
                let t = self.peek();
                return Err(ParseError::invalid(
                    t.line,
                    t.col,
                    format!("too many features (limit {MAX_FEATURES})"),
                ));
            }
            self.expect(Tok::LParen, "'('")?;
            let t = self.peek().clone();
            let name = match t.tok {
                Tok::Str(s) => {
                    self.advance();
                    s
                }
                _ => return Err(self.error_here("expected feature name", &["string"])),
            };
            if name.is_empty() {
                return Err(ParseError::invalid(t.line, t.col, "empty feature name".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(ParseError::invalid(
                    t.line,
                    t.col,
                    format!("duplicate feature name {name:?}"),
                ));
            }
            self.expect(Tok::Comma, "','")?;
            let expr = self.expr(0)?;
            self.expect(Tok::RParen, "')'")?;
            features.push(NamedExpr { name, expr });
            match &self.peek().tok {
                Tok::Comma => {
                    self.advance();
                }
                Tok::RBracket => {}
                _ => return Err(self.error_here("expected ',' or ']'", &["','", "']'"])),
            }
        }
        if features.is_empty() {
            return Err(ParseError::invalid(
                ret.line,
                ret.col,
                "return list must contain at least one feature".into(),
            ));
        }
        Ok(features)
    }

    fn expr(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth > MAX_EXPR_DEPTH {
            let t = self.peek();
            return Err(ParseError::invalid(
                t.line,
                t.col,
                format!("expression nesting exceeds {MAX_EXPR_DEPTH}"),
            ));
        }
        let mut lhs = self.term(depth + 1)?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => super::ast::BinOp::Add,
                Tok::Minus => super::ast::BinOp::Sub,
                _ => break,
            };
            self.advance();
            let rhs = self.term(depth + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self, depth: usize) -> Result<Expr, ParseError> {
        let mut lhs = self.factor(depth + 1)?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => super::ast::BinOp::Mul,
                Tok::Slash => super::ast::BinOp::Div,
                _ => break,
            };
            self.advance();
            let rhs = self.factor(depth + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn factor(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth > MAX_EXPR_DEPTH {
            let t = self.peek();
            return Err(ParseError::invalid(
                t.line,
                t.col,
                format!("expression nesting exceeds {MAX_EXPR_DEPTH}"),
            ));
        }
        if matches!(self.peek().tok, Tok::Minus) {
            self.advance();
            let inner = self.factor(depth + 1)?;
            return Ok(Expr::neg(inner));
        }
        self.atom(depth)
    }

    fn atom(&mut self, depth: usize) -> Result<Expr, ParseError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Number(v) => {
                self.advance();
                Ok(Expr::Number(v))
            }
            Tok::Str(s) => {
                self.advance();
                Ok(Expr::Text(s))
            }
            Tok::LParen => {
                self.advance();
                let inner = self.expr(depth + 1)?;
                self.expect(Tok::RParen, "')'")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.advance();
                if matches!(self.peek().tok, Tok::LParen) {
                    self.advance();
                    let mut args = Vec::new();
                    if !matches!(self.peek().tok, Tok::RParen) {
                        loop {
                            if args.len() >= MAX_CALL_ARGS {
                                let at = self.peek();
                                return Err(ParseError::invalid(
                                    at.line,
                                    at.col,
                                    format!("too many call arguments (limit {MAX_CALL_ARGS})"),
                                ));
                            }
                            args.push(self.expr(depth + 1)?);
                            match self.peek().tok {
                                Tok::Comma => {
                                    self.advance();
                                }
                                Tok::RParen => break,
                                _ => {
                                    return Err(
                                        self.error_here("expected ',' or ')'", &["','", "')'"])
                                    )
                                }
                            }
                        }
                    }
                    self.expect(Tok::RParen, "')'")?;
                    Ok(Expr::call(name, args))
                } else {
                    if !self.bound.contains(&name) {
                        return Err(ParseError::UnboundIdentifier {
                            name,
                            line: t.line,
                            col: t.col,
                        });
                    }
                    Ok(Expr::var(name))
                }
            }
            _ => Err(self.error_here(
                "expected an expression",
                &["number", "string", "identifier", "'('", "'-'"],
            )),
        }
    }
}
