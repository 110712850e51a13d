//! Canonical text form. `parse(pretty_print(p))` is structurally `p`,
//! which is what lets parent programs ride back into prompts.

use std::fmt::Write;

use super::ast::{BinOp, Expr, FeatureProgram};

pub fn pretty_print(program: &FeatureProgram) -> String {
    let mut out = String::new();
    let _ = write!(out, "def {}({}):", program.name, program.param);
    out.push('\n');
    for b in &program.bindings {
        let _ = write!(out, "    {} = ", b.name);
        write_expr(&mut out, &b.expr, 0, false);
        out.push('\n');
    }
    out.push_str("    return [");
    for (i, f) in program.features.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "({}, ", quote(&f.name));
        write_expr(&mut out, &f.expr, 0, false);
        out.push(')');
    }
    out.push_str("]\n");
    out
}

pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            other => out.push(other),
        }
    }
    out.push('"');
    out
}

fn precedence(expr: &Expr) -> u8 {
    match expr {
        Expr::Binary { op: BinOp::Add | BinOp::Sub, .. } => 1,
        Expr::Binary { op: BinOp::Mul | BinOp::Div, .. } => 2,
        Expr::Neg(_) => 3,
        _ => 4,
    }
}

/// `is_right` forces parens on right operands of equal precedence so the
/// printed text re-parses to the same (left-associated) shape.
fn write_expr(out: &mut String, expr: &Expr, parent_prec: u8, is_right: bool) {
    let prec = precedence(expr);
    let needs_parens = prec < parent_prec || (is_right && prec == parent_prec);
    if needs_parens {
        out.push('(');
    }
    match expr {
        Expr::Number(v) => {
            let _ = write!(out, "{v:?}");
        }
        Expr::Text(s) => out.push_str(&quote(s)),
        Expr::Var(name) => out.push_str(name),
        Expr::Call { name, args } => {
            out.push_str(name);
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(out, a, 0, false);
            }
            out.push(')');
        }
        Expr::Binary { op, lhs, rhs } => {
            write_expr(out, lhs, prec, false);
            let _ = write!(out, " {} ", op.symbol());
            write_expr(out, rhs, prec, true);
        }
        Expr::Neg(inner) => {
            out.push('-');
            write_expr(out, inner, prec, false);
        }
    }
    if needs_parens {
        out.push(')');
    }
}

/// One-line canonical form of an expression with binding references
/// inlined; cache keys and structural dedup both hang off this.
pub fn canonical_expr(expr: &Expr, program: &FeatureProgram) -> String {
    let mut out = String::new();
    write_canonical(&mut out, expr, program, 0, false, 0);
    out
}

fn write_canonical(
    out: &mut String,
    expr: &Expr,
    program: &FeatureProgram,
    parent_prec: u8,
    is_right: bool,
    depth: usize,
) {
    if depth > 128 || out.len() > 16_384 {
        out.push('…');
        return;
    }
    if let Expr::Var(name) = expr {
        if name == &program.param {
            out.push_str("$in");
            return;
        }
        if let Some(b) = program.bindings.iter().find(|b| &b.name == name) {
            write_canonical(out, &b.expr, program, parent_prec, is_right, depth + 1);
            return;
        }
        out.push_str(name);
        return;
    }
    let prec = precedence(expr);
    let needs_parens = prec < parent_prec || (is_right && prec == parent_prec);
    if needs_parens {
        out.push('(');
    }
    match expr {
        Expr::Number(v) => {
            let _ = write!(out, "{v:?}");
        }
        Expr::Text(s) => out.push_str(&quote(s)),
        Expr::Var(_) => unreachable!("handled above"),
        Expr::Call { name, args } => {
            out.push_str(name);
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_canonical(out, a, program, 0, false, depth + 1);
            }
            out.push(')');
        }
        Expr::Binary { op, lhs, rhs } => {
            write_canonical(out, lhs, program, prec, false, depth + 1);
            let _ = write!(out, " {} ", op.symbol());
            write_canonical(out, rhs, program, prec, true, depth + 1);
        }
        Expr::Neg(inner) => {
            out.push('-');
            write_canonical(out, inner, program, prec, false, depth + 1);
        }
    }
    if needs_parens {
        out.push(')');
    }
}
