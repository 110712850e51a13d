//! Deterministic evaluator. Programs are lowered once (name resolution,
//! liveness, cache keys, node sites) and then run per observation under a
//! step budget and wall-clock timeout.
//!
//! Dead bindings are never evaluated, so removing them cannot change any
//! feature value — the dead-code eliminator relies on that.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::primitives::value::Value;
use crate::primitives::{ops, CacheKey, InputDescriptor, PrimError, PrimitiveCache, PrimitiveRegistry};

use super::ast::{BinOp, Expr, FeatureProgram};
use super::printer::canonical_expr;

/// Defaults sized for generated programs that may be pathological.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EvalLimits {
    /// Primitive-cell operations allowed per observation.
    pub step_budget: u64,
    pub timeout_ms: u64,
}

impl Default for EvalLimits {
    fn default() -> Self {
        EvalLimits {
            step_budget: 1_000_000,
            timeout_ms: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("step budget exhausted ({used} of {budget} cell-ops)")]
    StepLimit { used: u64, budget: u64 },
    #[error("evaluation timed out after {elapsed_ms} ms")]
    Timeout { elapsed_ms: u64 },
    #[error(transparent)]
    Domain(#[from] PrimError),
    #[error("feature {feature:?} evaluated to non-finite {value}")]
    NonFiniteFeature { feature: String, value: f64 },
    #[error("call produced non-finite scalar in {op}")]
    NonFiniteIntermediate { op: String },
    #[error("{0} (evaluator reached an unchecked program)")]
    Internal(String),
}

/// Address of an operation inside a program: which binding or feature it
/// lives under, plus the argument path down the expression tree. The DAG
/// view and the importance pass both speak in sites.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AstSite {
    /// expression under binding `i`; empty path = the binding's own value
    BindingExpr(usize, Vec<usize>),
    /// expression under returned feature `j`
    FeatureExpr(usize, Vec<usize>),
}

/// Primitives worth caching per observation: they are observation-rooted
/// and dominate runtime.
fn cacheable(name: &str) -> bool {
    matches!(name, "mask" | "scalar_field" | "distance_transform")
}

const MAX_CACHE_KEY_LEN: usize = 4096;

#[derive(Debug, Clone)]
enum LExpr {
    Num(f64),
    Text(Arc<str>),
    Param,
    Slot(usize),
    Call {
        name: Arc<str>,
        args: Vec<LExpr>,
        cache_args: Option<Arc<str>>,
        site: AstSite,
    },
    Binary {
        op: BinOp,
        lhs: Box<LExpr>,
        rhs: Box<LExpr>,
        site: AstSite,
    },
    Neg {
        inner: Box<LExpr>,
        site: AstSite,
    },
}

/// A program lowered against a registry, reusable across observations.
pub struct Evaluator<'a> {
    registry: &'a PrimitiveRegistry,
    cache: Option<&'a PrimitiveCache>,
    limits: EvalLimits,
    bindings: Vec<Option<LExpr>>, // None = dead binding, never evaluated
    features: Vec<(String, LExpr)>,
}

/// Side effects an individual run may carry: value recording for the
/// importance pass, or a single-site value override.
#[derive(Default)]
pub struct RunHooks<'h> {
    pub record: Option<&'h mut BTreeMap<AstSite, Value>>,
    pub override_site: Option<(&'h AstSite, &'h Value)>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        program: &FeatureProgram,
        registry: &'a PrimitiveRegistry,
        cache: Option<&'a PrimitiveCache>,
        limits: EvalLimits,
    ) -> Self {
        let live = program.live_bindings();
        let lower = Lowerer { program };
        let bindings = program
            .bindings
            .iter()
            .enumerate()
            .zip(&live)
            .map(|((i, b), &alive)| {
                alive.then(|| lower.lower(&b.expr, SitePrefix::Binding(i), Vec::new()))
            })
            .collect();
        let features = program
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| {
                (
                    f.name.clone(),
                    lower.lower(&f.expr, SitePrefix::Feature(j), Vec::new()),
                )
            })
            .collect();
        Evaluator {
            registry,
            cache,
            limits,
            bindings,
            features,
        }
    }

    /// One scalar per returned feature, in declaration order.
    pub fn eval(&self, input: &InputDescriptor) -> Result<Vec<f64>, RuntimeError> {
        self.eval_hooked(input, RunHooks::default())
    }

    pub fn eval_hooked(
        &self,
        input: &InputDescriptor,
        hooks: RunHooks<'_>,
    ) -> Result<Vec<f64>, RuntimeError> {
        let mut run = Run {
            evaluator: self,
            input,
            slots: vec![None; self.bindings.len()],
            steps: 0,
            started: Instant::now(),
            deadline: Duration::from_millis(self.limits.timeout_ms),
            hooks,
        };
        for i in 0..self.bindings.len() {
            if let Some(expr) = &self.bindings[i] {
                let site = AstSite::BindingExpr(i, Vec::new());
                let v = match run.hooks.override_site {
                    Some((s, v)) if *s == site => v.clone(),
                    _ => run.eval_expr(expr)?,
                };
                if let Some(rec) = run.hooks.record.as_deref_mut() {
                    rec.insert(site, v.clone());
                }
                run.slots[i] = Some(v);
            }
        }
        let mut out = Vec::with_capacity(self.features.len());
        for (name, expr) in &self.features {
            let v = run.eval_expr(expr)?;
            match v {
                Value::Scalar(s) if s.is_finite() => out.push(s),
                Value::Scalar(s) => {
                    return Err(RuntimeError::NonFiniteFeature {
                        feature: name.clone(),
                        value: s,
                    })
                }
                other => {
                    return Err(RuntimeError::Internal(format!(
                        "feature {name:?} produced {} value",
                        other.kind()
                    )))
                }
            }
        }
        Ok(out)
    }
}

enum SitePrefix {
    Binding(usize),
    Feature(usize),
}

impl SitePrefix {
    fn site(&self, path: Vec<usize>) -> AstSite {
        match self {
            SitePrefix::Binding(i) => AstSite::BindingExpr(*i, path),
            SitePrefix::Feature(j) => AstSite::FeatureExpr(*j, path),
        }
    }
}

struct Lowerer<'p> {
    program: &'p FeatureProgram,
}

impl Lowerer<'_> {
    fn lower(&self, expr: &Expr, prefix: SitePrefix, path: Vec<usize>) -> LExpr {
        match expr {
            Expr::Number(v) => LExpr::Num(*v),
            Expr::Text(s) => LExpr::Text(Arc::from(s.as_str())),
            Expr::Var(name) => {
                if name == &self.program.param {
                    LExpr::Param
                } else {
                    let idx = self
                        .program
                        .bindings
                        .iter()
                        .position(|b| &b.name == name)
                        .expect("validated program");
                    LExpr::Slot(idx)
                }
            }
            Expr::Call { name, args } => {
                let cache_args = if cacheable(name) {
                    let rendered = args
                        .iter()
                        .map(|a| canonical_expr(a, self.program))
                        .collect::<Vec<_>>()
                        .join(", ");
                    (rendered.len() <= MAX_CACHE_KEY_LEN).then(|| Arc::from(rendered.as_str()))
                } else {
                    None
                };
                let lowered_args = args
                    .iter()
                    .enumerate()
                    .map(|(k, a)| {
                        let mut p = path.clone();
                        p.push(k);
                        self.lower_at(a, &prefix, p)
                    })
                    .collect();
                LExpr::Call {
                    name: Arc::from(name.as_str()),
                    args: lowered_args,
                    cache_args,
                    site: prefix.site(path),
                }
            }
            Expr::Binary { op, lhs, rhs } => {
                let mut lp = path.clone();
                lp.push(0);
                let mut rp = path.clone();
                rp.push(1);
                LExpr::Binary {
                    op: *op,
                    lhs: Box::new(self.lower_at(lhs, &prefix, lp)),
                    rhs: Box::new(self.lower_at(rhs, &prefix, rp)),
                    site: prefix.site(path),
                }
            }
            Expr::Neg(inner) => {
                let mut ip = path.clone();
                ip.push(0);
                LExpr::Neg {
                    inner: Box::new(self.lower_at(inner, &prefix, ip)),
                    site: prefix.site(path),
                }
            }
        }
    }

    fn lower_at(&self, expr: &Expr, prefix: &SitePrefix, path: Vec<usize>) -> LExpr {
        let p = match prefix {
            SitePrefix::Binding(i) => SitePrefix::Binding(*i),
            SitePrefix::Feature(j) => SitePrefix::Feature(*j),
        };
        self.lower(expr, p, path)
    }
}

struct Run<'a, 'b, 'h> {
    evaluator: &'a Evaluator<'b>,
    input: &'a InputDescriptor,
    slots: Vec<Option<Value>>,
    steps: u64,
    started: Instant,
    deadline: Duration,
    hooks: RunHooks<'h>,
}

impl Run<'_, '_, '_> {
    fn charge(&mut self, cost: u64) -> Result<(), RuntimeError> {
        self.steps += cost;
        if self.steps > self.evaluator.limits.step_budget {
            return Err(RuntimeError::StepLimit {
                used: self.steps,
                budget: self.evaluator.limits.step_budget,
            });
        }
        let elapsed = self.started.elapsed();
        if elapsed > self.deadline {
            return Err(RuntimeError::Timeout {
                elapsed_ms: elapsed.as_millis() as u64,
            });
        }
        Ok(())
    }

    fn sited(&mut self, site: &AstSite, value: Value) -> Value {
        if let Some(rec) = self.hooks.record.as_deref_mut() {
            rec.insert(site.clone(), value.clone());
        }
        value
    }

    fn overridden(&self, site: &AstSite) -> Option<Value> {
        match self.hooks.override_site {
            Some((s, v)) if s == site => Some(v.clone()),
            _ => None,
        }
    }

    fn eval_expr(&mut self, expr: &LExpr) -> Result<Value, RuntimeError> {
        match expr {
            LExpr::Num(v) => Ok(Value::Scalar(*v)),
            LExpr::Text(s) => Ok(Value::Text(s.clone())),
            LExpr::Param => Ok(Value::Input(Arc::new(self.input.clone()))),
            LExpr::Slot(idx) => self.slots[*idx]
                .clone()
                .ok_or_else(|| RuntimeError::Internal("read of dead binding".into())),
            LExpr::Call {
                name,
                args,
                cache_args,
                site,
            } => {
                if let Some(v) = self.overridden(site) {
                    return Ok(self.sited(site, v));
                }
                let mut values = Vec::with_capacity(args.len());
                for a in args {
                    values.push(self.eval_expr(a)?);
                }
                let use_cache = self.hooks.override_site.is_none();
                let result = match (self.evaluator.cache, cache_args) {
                    (Some(cache), Some(key_args)) if use_cache => {
                        let key = CacheKey {
                            observation: self.input.id.clone(),
                            primitive: name.to_string(),
                            args: key_args.to_string(),
                        };
                        cache.get_or_insert_with(key, || {
                            self.evaluator.registry.call(name, &values)
                        })?
                    }
                    _ => self.evaluator.registry.call(name, &values)?,
                };
                let result = self.finish_call(name, &values, result)?;
                Ok(self.sited(site, result))
            }
            LExpr::Binary { op, lhs, rhs, site } => {
                if let Some(v) = self.overridden(site) {
                    return Ok(self.sited(site, v));
                }
                let l = self.eval_expr(lhs)?;
                let r = self.eval_expr(rhs)?;
                let values = [l, r];
                let result =
                    ops::dispatch(op.primitive_name(), &values, &self.evaluator.registry.config)?;
                let result = self.finish_call(op.primitive_name(), &values, result)?;
                Ok(self.sited(site, result))
            }
            LExpr::Neg { inner, site } => {
                if let Some(v) = self.overridden(site) {
                    return Ok(self.sited(site, v));
                }
                let v = self.eval_expr(inner)?;
                let values = [v];
                let result = ops::dispatch("negate", &values, &self.evaluator.registry.config)?;
                let result = self.finish_call("negate", &values, result)?;
                Ok(self.sited(site, result))
            }
        }
    }

    fn finish_call(
        &mut self,
        op: &str,
        args: &[Value],
        result: Value,
    ) -> Result<Value, RuntimeError> {
        self.charge(ops::call_cost(args, &result))?;
        if let Value::Scalar(s) = &result {
            if !s.is_finite() {
                return Err(RuntimeError::NonFiniteIntermediate { op: op.to_string() });
            }
        }
        Ok(result)
    }
}

/// Convenience single-shot evaluation (tests, CLI one-offs). Long loops
/// should build an [`Evaluator`] once instead.
pub fn evaluate(
    program: &FeatureProgram,
    input: &InputDescriptor,
    registry: &PrimitiveRegistry,
    cache: Option<&PrimitiveCache>,
    limits: EvalLimits,
) -> Result<Vec<f64>, RuntimeError> {
    Evaluator::new(program, registry, cache, limits).eval(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parser::parse;
    use crate::raster::Raster;
    use std::collections::BTreeMap;

    fn half_water_input() -> InputDescriptor {
        // left half of an 8x8 tile is water; brute-force count = 32/64
        let mut raster = Raster::new(8, 8);
        let mut cells = vec![0u8; 64];
        for y in 0..8 {
            for x in 0..4 {
                cells[y * 8 + x] = 1;
            }
        }
        raster.push_channel("water", cells);
        raster.push_channel("road", {
            let mut c = vec![0u8; 64];
            c[0] = 1;
            c
        });
        let mut fields = BTreeMap::new();
        fields.insert("elevation".to_string(), 120.0);
        InputDescriptor::new("obs_0", -100.0, 40.0, Arc::new(raster), fields).unwrap()
    }

    #[test]
    fn constant_program() {
        let p = parse("def f(loc): return [(\"c\", 2.5)]").unwrap();
        let reg = PrimitiveRegistry::standard();
        let out = evaluate(&p, &half_water_input(), &reg, None, EvalLimits::default()).unwrap();
        assert_eq!(out, vec![2.5]);
    }

    #[test]
    fn half_water_fraction() {
        let p = parse("def f(loc): return [(\"w\", area_fraction(mask(loc, \"water\")))]").unwrap();
        let reg = PrimitiveRegistry::standard();
        let out = evaluate(&p, &half_water_input(), &reg, None, EvalLimits::default()).unwrap();
        assert_eq!(out, vec![0.5]);
    }

    #[test]
    fn log1p_of_zero_mask() {
        let p = parse(
            "def f(loc): m = and(mask(loc, \"water\"), not(mask(loc, \"water\"))); return [(\"z\", log1p(area_fraction(m)))]",
        )
        .unwrap();
        let reg = PrimitiveRegistry::standard();
        let out = evaluate(&p, &half_water_input(), &reg, None, EvalLimits::default()).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn scalar_field_passthrough() {
        let p = parse("def f(loc): return [(\"e\", scalar_field(loc, \"elevation\"))]").unwrap();
        let reg = PrimitiveRegistry::standard();
        let out = evaluate(&p, &half_water_input(), &reg, None, EvalLimits::default()).unwrap();
        assert_eq!(out, vec![120.0]);
    }

    #[test]
    fn unknown_concept_fails_with_message() {
        let p = parse("def f(loc): return [(\"x\", area_fraction(mask(loc, \"dragon_lair\")))]")
            .unwrap();
        let reg = PrimitiveRegistry::standard();
        let err = evaluate(&p, &half_water_input(), &reg, None, EvalLimits::default()).unwrap_err();
        assert!(err.to_string().contains("dragon_lair"));
    }

    #[test]
    fn unknown_field_fails() {
        let p = parse("def f(loc): return [(\"x\", scalar_field(loc, \"rainfall\"))]").unwrap();
        let reg = PrimitiveRegistry::standard();
        let err = evaluate(&p, &half_water_input(), &reg, None, EvalLimits::default()).unwrap_err();
        assert!(matches!(err, RuntimeError::Domain(PrimError::UnknownField(_))));
    }

    #[test]
    fn dead_bindings_never_run() {
        // the dead binding would raise a domain error if evaluated
        let p = parse(
            "def f(loc): dead = log1p(-2.0); return [(\"w\", area_fraction(mask(loc, \"water\")))]",
        )
        .unwrap();
        let reg = PrimitiveRegistry::standard();
        let out = evaluate(&p, &half_water_input(), &reg, None, EvalLimits::default()).unwrap();
        assert_eq!(out, vec![0.5]);
    }

    #[test]
    fn step_budget_trips() {
        let p = parse(
            "def f(loc): d = distance_transform(mask(loc, \"water\")); return [(\"x\", mean(d + d + d + d))]",
        )
        .unwrap();
        let reg = PrimitiveRegistry::standard();
        let limits = EvalLimits {
            step_budget: 100,
            timeout_ms: 2_000,
        };
        let err = evaluate(&p, &half_water_input(), &reg, None, limits).unwrap_err();
        assert!(matches!(err, RuntimeError::StepLimit { .. }));
    }

    #[test]
    fn cache_transparency_and_hits() {
        let p = parse(
            "def f(loc): m = mask(loc, \"water\"); d = distance_transform(m); return [(\"a\", mean(d)), (\"b\", area_fraction(m))]",
        )
        .unwrap();
        let reg = PrimitiveRegistry::standard();
        let input = half_water_input();
        let uncached = evaluate(&p, &input, &reg, None, EvalLimits::default()).unwrap();

        let cache = PrimitiveCache::default();
        let ev = Evaluator::new(&p, &reg, Some(&cache), EvalLimits::default());
        let first = ev.eval(&input).unwrap();
        let hits_after_first = cache.stats().hits;
        let second = ev.eval(&input).unwrap();
        assert_eq!(first, uncached);
        assert_eq!(second, uncached);
        assert!(cache.stats().hits >= hits_after_first + 2, "repeat run must hit");
    }

    #[test]
    fn determinism_bitwise() {
        let p = parse(
            "def f(loc): d = distance_transform(mask(loc, \"road\")); return [(\"x\", log1p(mean(d)) * 0.7)]",
        )
        .unwrap();
        let reg = PrimitiveRegistry::standard();
        let input = half_water_input();
        let a = evaluate(&p, &input, &reg, None, EvalLimits::default()).unwrap();
        let b = evaluate(&p, &input, &reg, None, EvalLimits::default()).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn recording_and_override() {
        let p = parse(
            "def f(loc): m = mask(loc, \"water\"); a = area_fraction(m); return [(\"x\", a * 2.0)]",
        )
        .unwrap();
        let reg = PrimitiveRegistry::standard();
        let input = half_water_input();
        let ev = Evaluator::new(&p, &reg, None, EvalLimits::default());

        let mut recorded = BTreeMap::new();
        let out = ev
            .eval_hooked(
                &input,
                RunHooks {
                    record: Some(&mut recorded),
                    override_site: None,
                },
            )
            .unwrap();
        assert_eq!(out, vec![1.0]);
        let a_site = AstSite::BindingExpr(1, vec![]);
        assert_eq!(recorded.get(&a_site), Some(&Value::Scalar(0.5)));

        // overriding the area_fraction binding with 0.25 halves the feature
        let forced = Value::Scalar(0.25);
        let out = ev
            .eval_hooked(
                &input,
                RunHooks {
                    record: None,
                    override_site: Some((&a_site, &forced)),
                },
            )
            .unwrap();
        assert_eq!(out, vec![0.5]);
    }
}
