//! Kind checking against a primitive registry. Reports the complete list
//! of mismatches instead of stopping at the first.

use std::collections::HashMap;

use crate::primitives::value::Kind;
use crate::primitives::PrimitiveRegistry;

use super::ast::{BinOp, Expr, FeatureProgram};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TypeError {
    #[error("unknown primitive {name:?}")]
    UnknownPrimitive { name: String },
    #[error("{name}({found}) matches no signature; available: {available}")]
    SignatureMismatch {
        name: String,
        found: String,
        available: String,
    },
    #[error("operator {op} cannot combine {lhs} and {rhs}")]
    BadOperator { op: &'static str, lhs: Kind, rhs: Kind },
    #[error("negation of {found} (needs Scalar or Grid)")]
    BadNegation { found: Kind },
    #[error("feature {feature:?} must be Scalar, found {found}")]
    NonScalarFeature { feature: String, found: Kind },
    #[error("unbound identifier {name:?}")]
    Unbound { name: String },
}

/// Ok iff every call matches a registered signature and every feature is
/// Scalar.
pub fn typecheck(
    program: &FeatureProgram,
    registry: &PrimitiveRegistry,
) -> Result<(), Vec<TypeError>> {
    let mut errors = Vec::new();
    let mut env: HashMap<&str, Option<Kind>> = HashMap::new();
    env.insert(program.param.as_str(), Some(Kind::Input));
    for b in &program.bindings {
        let kind = infer(&b.expr, &env, registry, &mut errors);
        env.insert(b.name.as_str(), kind);
    }
    for f in &program.features {
        if let Some(kind) = infer(&f.expr, &env, registry, &mut errors) {
            if kind != Kind::Scalar {
                errors.push(TypeError::NonScalarFeature {
                    feature: f.name.clone(),
                    found: kind,
                });
            }
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Infix operators carry the elementwise Scalar/Grid rules regardless of
/// what the registry holds.
fn infix_kind(lhs: Kind, rhs: Kind) -> Option<Kind> {
    use Kind::*;
    match (lhs, rhs) {
        (Scalar, Scalar) => Some(Scalar),
        (Grid, Grid) | (Grid, Scalar) | (Scalar, Grid) => Some(Grid),
        _ => None,
    }
}

/// `None` marks an expression whose kind is unknowable because of an
/// already-reported error; it poisons consumers without re-reporting.
fn infer(
    expr: &Expr,
    env: &HashMap<&str, Option<Kind>>,
    registry: &PrimitiveRegistry,
    errors: &mut Vec<TypeError>,
) -> Option<Kind> {
    match expr {
        Expr::Number(_) => Some(Kind::Scalar),
        Expr::Text(_) => Some(Kind::Text),
        Expr::Var(name) => match env.get(name.as_str()) {
            Some(kind) => *kind,
            None => {
                errors.push(TypeError::Unbound { name: name.clone() });
                None
            }
        },
        Expr::Neg(inner) => {
            let kind = infer(inner, env, registry, errors)?;
            match kind {
                Kind::Scalar | Kind::Grid => Some(kind),
                found => {
                    errors.push(TypeError::BadNegation { found });
                    None
                }
            }
        }
        Expr::Binary { op, lhs, rhs } => {
            let lk = infer(lhs, env, registry, errors);
            let rk = infer(rhs, env, registry, errors);
            let (lk, rk) = (lk?, rk?);
            match infix_kind(lk, rk) {
                Some(kind) => Some(kind),
                None => {
                    errors.push(TypeError::BadOperator {
                        op: binop_symbol(*op),
                        lhs: lk,
                        rhs: rk,
                    });
                    None
                }
            }
        }
        Expr::Call { name, args } => {
            let arg_kinds: Vec<Option<Kind>> = args
                .iter()
                .map(|a| infer(a, env, registry, errors))
                .collect();
            let entry = match registry.get(name) {
                Some(e) => e,
                None => {
                    errors.push(TypeError::UnknownPrimitive { name: name.clone() });
                    return None;
                }
            };
            // poisoned argument: skip the signature check, error already out
            let kinds: Option<Vec<Kind>> = arg_kinds.into_iter().collect();
            let kinds = kinds?;
            match entry.result_kind(&kinds) {
                Some(result) => Some(result),
                None => {
                    errors.push(TypeError::SignatureMismatch {
                        name: name.clone(),
                        found: kinds
                            .iter()
                            .map(|k| k.to_string())
                            .collect::<Vec<_>>()
                            .join(", "),
                        available: entry
                            .signatures
                            .iter()
                            .map(|(params, result)| {
                                format!(
                                    "({}) -> {result}",
                                    params
                                        .iter()
                                        .map(|k| k.to_string())
                                        .collect::<Vec<_>>()
                                        .join(", ")
                                )
                            })
                            .collect::<Vec<_>>()
                            .join("; "),
                    });
                    None
                }
            }
        }
    }
}

fn binop_symbol(op: BinOp) -> &'static str {
    op.symbol()
}
