//! Abstract syntax of feature programs: one function, straight-line
//! let-bindings, and a returned list of named scalar features.

use std::collections::HashSet;

/// A parsed feature program. Immutable after construction; bindings are a
/// topological order by definition, so the AST is acyclic.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProgram {
    pub name: String,
    /// The single input-descriptor parameter.
    pub param: String,
    pub bindings: Vec<Binding>,
    /// Non-empty; feature names are unique.
    pub features: Vec<NamedExpr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub name: String,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedExpr {
    pub name: String,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Text(String),
    Var(String),
    Call { name: String, args: Vec<Expr> },
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Neg(Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    /// The registry primitive carrying the same semantics.
    pub fn primitive_name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

impl Expr {
    /// Negation with the literal fold that keeps printing canonical:
    /// `-(2.0)` and the literal `-2.0` are the same AST.
    #[allow(clippy::should_implement_trait)]
    pub fn neg(expr: Expr) -> Expr {
        match expr {
            Expr::Number(v) => Expr::Number(-v),
            other => Expr::Neg(Box::new(other)),
        }
    }

    pub fn call(name: impl Into<String>, args: Vec<Expr>) -> Expr {
        Expr::Call {
            name: name.into(),
            args,
        }
    }

    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    /// All identifiers this expression references.
    pub fn free_vars<'a>(&'a self, out: &mut HashSet<&'a str>) {
        match self {
            Expr::Number(_) | Expr::Text(_) => {}
            Expr::Var(name) => {
                out.insert(name);
            }
            Expr::Call { args, .. } => {
                for a in args {
                    a.free_vars(out);
                }
            }
            Expr::Binary { lhs, rhs, .. } => {
                lhs.free_vars(out);
                rhs.free_vars(out);
            }
            Expr::Neg(inner) => inner.free_vars(out),
        }
    }

    /// Rename variable references in place (used by program recombination).
    pub fn rename_vars(&mut self, rename: &dyn Fn(&str) -> Option<String>) {
        match self {
            Expr::Number(_) | Expr::Text(_) => {}
            Expr::Var(name) => {
                if let Some(new) = rename(name) {
                    *name = new;
                }
            }
            Expr::Call { args, .. } => {
                for a in args {
                    a.rename_vars(rename);
                }
            }
            Expr::Binary { lhs, rhs, .. } => {
                lhs.rename_vars(rename);
                rhs.rename_vars(rename);
            }
            Expr::Neg(inner) => inner.rename_vars(rename),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Number(_) | Expr::Text(_) | Expr::Var(_) => 1,
            Expr::Call { args, .. } => 1 + args.iter().map(Expr::node_count).sum::<usize>(),
            Expr::Binary { lhs, rhs, .. } => 1 + lhs.node_count() + rhs.node_count(),
            Expr::Neg(inner) => 1 + inner.node_count(),
        }
    }
}

pub fn is_valid_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_') && !matches!(s, "def" | "return")
}

impl FeatureProgram {
    /// Check the structural invariants: identifier validity, no forward or
    /// free references, no rebinding, non-empty unique features, finite
    /// literals. Parsing establishes these; programs assembled in code go
    /// through here too.
    pub fn validate(&self) -> Result<(), String> {
        if !is_valid_identifier(&self.name) {
            return Err(format!("invalid program name {:?}", self.name));
        }
        if !is_valid_identifier(&self.param) {
            return Err(format!("invalid parameter name {:?}", self.param));
        }
        let mut bound: HashSet<&str> = HashSet::new();
        bound.insert(self.param.as_str());
        for b in &self.bindings {
            if !is_valid_identifier(&b.name) {
                return Err(format!("invalid binding name {:?}", b.name));
            }
            check_expr(&b.expr, &bound)?;
            if !bound.insert(b.name.as_str()) {
                return Err(format!("identifier {:?} bound twice", b.name));
            }
        }
        if self.features.is_empty() {
            return Err("program returns no features".to_string());
        }
        let mut feature_names = HashSet::new();
        for f in &self.features {
            if f.name.is_empty() {
                return Err("empty feature name".to_string());
            }
            if !feature_names.insert(f.name.as_str()) {
                return Err(format!("duplicate feature name {:?}", f.name));
            }
            check_expr(&f.expr, &bound)?;
        }
        Ok(())
    }

    /// Binding indexes reachable (backwards) from the return list. Dead
    /// bindings are exactly the `false` entries.
    pub fn live_bindings(&self) -> Vec<bool> {
        let mut needed: HashSet<&str> = HashSet::new();
        for f in &self.features {
            f.expr.free_vars(&mut needed);
        }
        let mut live = vec![false; self.bindings.len()];
        for (i, b) in self.bindings.iter().enumerate().rev() {
            if needed.contains(b.name.as_str()) {
                live[i] = true;
                b.expr.free_vars(&mut needed);
            }
        }
        live
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }
}

fn check_expr(expr: &Expr, bound: &HashSet<&str>) -> Result<(), String> {
    match expr {
        Expr::Number(v) => {
            if !v.is_finite() {
                return Err(format!("non-finite literal {v}"));
            }
            Ok(())
        }
        Expr::Text(_) => Ok(()),
        Expr::Var(name) => {
            if bound.contains(name.as_str()) {
                Ok(())
            } else {
                Err(format!("unbound identifier {name:?}"))
            }
        }
        Expr::Call { name, args } => {
            if !is_valid_identifier(name) {
                return Err(format!("invalid call target {name:?}"));
            }
            for a in args {
                check_expr(a, bound)?;
            }
            Ok(())
        }
        Expr::Binary { lhs, rhs, .. } => {
            check_expr(lhs, bound)?;
            check_expr(rhs, bound)
        }
        Expr::Neg(inner) => check_expr(inner, bound),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> FeatureProgram {
        FeatureProgram {
            name: "f".into(),
            param: "loc".into(),
            bindings: vec![Binding {
                name: "m".into(),
                expr: Expr::call(
                    "mask",
                    vec![Expr::var("loc"), Expr::Text("road".into())],
                ),
            }],
            features: vec![NamedExpr {
                name: "road_frac".into(),
                expr: Expr::call("area_fraction", vec![Expr::var("m")]),
            }],
        }
    }

    #[test]
    fn minimal_program_validates() {
        assert!(minimal().validate().is_ok());
    }

    #[test]
    fn free_variable_rejected() {
        let mut p = minimal();
        p.features[0].expr = Expr::var("ghost");
        assert!(p.validate().unwrap_err().contains("unbound"));
    }

    #[test]
    fn duplicate_feature_rejected() {
        let mut p = minimal();
        p.features.push(p.features[0].clone());
        assert!(p.validate().unwrap_err().contains("duplicate feature"));
    }

    #[test]
    fn live_set_skips_unused_binding() {
        let mut p = minimal();
        p.bindings.push(Binding {
            name: "unused".into(),
            expr: Expr::call(
                "mask",
                vec![Expr::var("loc"), Expr::Text("park".into())],
            ),
        });
        assert_eq!(p.live_bindings(), vec![true, false]);
    }

    #[test]
    fn neg_literal_folds() {
        assert_eq!(Expr::neg(Expr::Number(3.0)), Expr::Number(-3.0));
    }
}
