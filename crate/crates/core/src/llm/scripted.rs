//! Deterministic stand-in for the language model. Responses are a pure
//! function of (prompt hash, sampling seed), which makes whole runs
//! reproducible transcript-for-transcript.
//!
//! The crossover class runs a syntactic recombiner: it parses the parent
//! programs back out of the prompt and merges a seeded prefix of parent
//! 1's bindings (with the parent-1 features that prefix still supports)
//! with all of parent 2's bindings and return features. Mutation perturbs
//! one constant by ×(1±0.1); the critic class grafts a feature aimed at
//! the worst stratum named in the prompt.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsl::{
    canonical_expr, parse, pretty_print, random_program, BinOp, Binding, Expr, FeatureProgram,
    GeneratorConfig, NamedExpr,
};

use super::prompt::{MARKER_CRITIC, MARKER_CROSSOVER, MARKER_MUTATION, MARKER_OBJECTIVE};
use super::{fnv1a64, LlmBackend, LlmError, Sampling};

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    pub generator: GeneratorConfig,
    /// Offspring feature-list cap applied after canonical dedup.
    pub max_features: usize,
    /// Chance a crossover splices in one freshly drawn feature.
    pub fresh_feature_prob: f64,
}

impl ScriptedBackend {
    pub fn new(generator: GeneratorConfig) -> Self {
        ScriptedBackend {
            generator,
            max_features: 8,
            fresh_feature_prob: 0.1,
        }
    }

    fn rng_for(&self, prompt: &str, sampling: &Sampling) -> ChaCha8Rng {
        let material = fnv1a64(prompt) ^ sampling.seed.wrapping_mul(0x9E3779B97F4A7C15);
        ChaCha8Rng::seed_from_u64(material)
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, prompt: &str, sampling: &Sampling) -> Result<String, LlmError> {
        let mut rng = self.rng_for(prompt, sampling);
        // markers are ordered: generation prompts embed the objective, so
        // the last marker present decides the class
        let class = [
            (MARKER_CROSSOVER, PromptClass::Crossover),
            (MARKER_MUTATION, PromptClass::Mutation),
            (MARKER_CRITIC, PromptClass::Critic),
            (MARKER_OBJECTIVE, PromptClass::Objective),
        ]
        .iter()
        .filter_map(|(marker, class)| prompt.find(marker).map(|pos| (pos, *class)))
        .max_by_key(|(pos, _)| *pos);
        let Some((marker_pos, class)) = class else {
            return Err(LlmError::UnclassifiablePrompt);
        };
        let tail = &prompt[marker_pos..];

        let program = match class {
            PromptClass::Objective => random_program(&mut rng, &self.generator),
            PromptClass::Crossover => {
                let parents = parse_embedded_programs(tail);
                match parents.len() {
                    0 => random_program(&mut rng, &self.generator),
                    1 => perturb_constant(&parents[0], &mut rng),
                    _ => self.recombine(&parents[0], &parents[1], &mut rng),
                }
            }
            PromptClass::Mutation => match parse_embedded_programs(tail).first() {
                Some(p) => perturb_constant(p, &mut rng),
                None => random_program(&mut rng, &self.generator),
            },
            PromptClass::Critic => match parse_embedded_programs(tail).first() {
                Some(p) => {
                    let stratum = first_worst_stratum(tail);
                    self.address_stratum(p, stratum.as_deref(), &mut rng)
                }
                None => random_program(&mut rng, &self.generator),
            },
        };
        Ok(format!(
            "Candidate program:\n```\n{}```\n",
            pretty_print(&program)
        ))
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PromptClass {
    Objective,
    Crossover,
    Mutation,
    Critic,
}

/// Every fenced block after the marker that parses as a program.
fn parse_embedded_programs(text: &str) -> Vec<FeatureProgram> {
    let mut programs = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = start + 3;
        let Some(nl) = rest[after..].find('\n') else { break };
        let body_start = after + nl + 1;
        let Some(end) = rest[body_start..].find("```") else { break };
        if let Ok(p) = parse(&rest[body_start..body_start + end]) {
            programs.push(p);
        }
        rest = &rest[body_start + end + 3..];
    }
    programs
}

/// First stratum name in the "Worst strata:" table.
fn first_worst_stratum(text: &str) -> Option<String> {
    let table = text.split("Worst strata:").nth(1)?;
    table
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .and_then(|l| l.split_whitespace().next())
        .map(str::to_string)
}

impl ScriptedBackend {
    fn recombine(
        &self,
        p1: &FeatureProgram,
        p2: &FeatureProgram,
        rng: &mut ChaCha8Rng,
    ) -> FeatureProgram {
        if self.generator.single_feature {
            return recombine_single(p1, p2, rng);
        }
        let k = rng.gen_range(0..=p1.bindings.len());
        let mut bindings: Vec<Binding> = p1.bindings[..k].to_vec();
        let mut bound: HashSet<String> = bindings.iter().map(|b| b.name.clone()).collect();
        bound.insert(p1.param.clone());

        let p1_features: Vec<NamedExpr> = p1
            .features
            .iter()
            .filter(|f| {
                let mut vars = HashSet::new();
                f.expr.free_vars(&mut vars);
                vars.iter().all(|v| bound.contains(*v))
            })
            .cloned()
            .collect();

        // graft all of parent 2, renaming around collisions
        let mut taken: HashSet<String> = bound.clone();
        let rename: Vec<(String, String)> = p2
            .bindings
            .iter()
            .map(|b| {
                let mut name = b.name.clone();
                while taken.contains(&name) {
                    name.push('b');
                }
                taken.insert(name.clone());
                (b.name.clone(), name)
            })
            .collect();
        let rename_fn = |old: &str| -> Option<String> {
            if old == p2.param {
                return Some(p1.param.clone());
            }
            rename
                .iter()
                .find(|(from, _)| from == old)
                .map(|(_, to)| to.clone())
        };
        for b in &p2.bindings {
            let mut expr = b.expr.clone();
            expr.rename_vars(&rename_fn);
            bindings.push(Binding {
                name: rename_fn(&b.name).expect("renamed binding"),
                expr,
            });
        }
        let mut p2_features: Vec<NamedExpr> = Vec::new();
        for f in &p2.features {
            let mut expr = f.expr.clone();
            expr.rename_vars(&rename_fn);
            p2_features.push(NamedExpr {
                name: f.name.clone(),
                expr,
            });
        }

        // occasionally splice in one freshly drawn feature as new genetic
        // material the parents did not carry
        let mut fresh_features: Vec<NamedExpr> = Vec::new();
        if rng.gen_bool(self.fresh_feature_prob) {
            let (extra_bindings, mut feature) = crate::dsl::random_feature(rng, &self.generator);
            let fresh_rename: Vec<(String, String)> = extra_bindings
                .iter()
                .map(|b| {
                    let mut name = b.name.clone();
                    while taken.contains(&name) {
                        name.push('f');
                    }
                    taken.insert(name.clone());
                    (b.name.clone(), name)
                })
                .collect();
            let param = p1.param.clone();
            let fresh_rename_fn = move |old: &str| -> Option<String> {
                if old == "loc" {
                    return Some(param.clone());
                }
                fresh_rename
                    .iter()
                    .find(|(from, _)| from == old)
                    .map(|(_, to)| to.clone())
            };
            for b in extra_bindings {
                let mut expr = b.expr;
                expr.rename_vars(&fresh_rename_fn);
                bindings.push(Binding {
                    name: fresh_rename_fn(&b.name).expect("renamed fresh binding"),
                    expr,
                });
            }
            feature.expr.rename_vars(&fresh_rename_fn);
            fresh_features.push(feature);
        }

        let mut merged = FeatureProgram {
            name: "estimate".to_string(),
            param: p1.param.clone(),
            bindings,
            features: Vec::new(),
        };
        // the fresh splice leads, then parent 2's features, then parent
        // 1's prefix features; structurally identical features collapse
        let mut seen_canonical: HashSet<String> = HashSet::new();
        let mut seen_names: HashSet<String> = HashSet::new();
        for f in fresh_features
            .into_iter()
            .chain(p2_features)
            .chain(p1_features)
        {
            merged.features.push(f);
            let canonical = canonical_expr(
                &merged.features.last().expect("just pushed").expr,
                &merged,
            );
            if !seen_canonical.insert(canonical) {
                merged.features.pop();
                continue;
            }
            let f = merged.features.last_mut().expect("present");
            while !seen_names.insert(f.name.clone()) {
                f.name.push('x');
            }
            if merged.features.len() >= self.max_features {
                break;
            }
        }
        if merged.features.is_empty() {
            return p2.clone();
        }
        match merged.validate() {
            Ok(()) => merged,
            Err(_) => p2.clone(),
        }
    }

    /// Critic response: graft one feature aimed at the named stratum.
    fn address_stratum(
        &self,
        program: &FeatureProgram,
        stratum: Option<&str>,
        rng: &mut ChaCha8Rng,
    ) -> FeatureProgram {
        let Some(concept) = stratum else {
            return program.clone();
        };
        if concept == "other" || !self.generator.concepts.iter().any(|c| c == concept) {
            return program.clone();
        }
        let mask = Expr::call(
            "mask",
            vec![Expr::var(&program.param), Expr::Text(concept.to_string())],
        );
        let expr = if rng.gen_bool(0.5) {
            Expr::call("area_fraction", vec![mask])
        } else {
            Expr::call(
                "log1p",
                vec![Expr::call(
                    "mean",
                    vec![Expr::call("distance_transform", vec![mask])],
                )],
            )
        };
        let mut revised = program.clone();
        if self.generator.single_feature {
            let base = revised.features[0].expr.clone();
            revised.features[0].expr = Expr::binary(
                BinOp::Add,
                base,
                Expr::binary(BinOp::Mul, Expr::Number(0.5), expr),
            );
        } else {
            let canonical = canonical_expr(&expr, &revised);
            let already_there = revised
                .features
                .iter()
                .any(|f| canonical_expr(&f.expr, &revised) == canonical);
            if already_there || revised.features.len() >= self.max_features {
                return program.clone();
            }
            let mut name = format!("{concept}_critic");
            while revised.features.iter().any(|f| f.name == name) {
                name.push('x');
            }
            revised.features.push(NamedExpr { name, expr });
        }
        revised
    }
}

/// Single-feature crossover: a seeded convex blend of the two predictors.
fn recombine_single(
    p1: &FeatureProgram,
    p2: &FeatureProgram,
    rng: &mut ChaCha8Rng,
) -> FeatureProgram {
    let alpha = *[0.3, 0.5, 0.7]
        .get(rng.gen_range(0..3))
        .expect("alpha choice");
    let mut bindings = p1.bindings.clone();
    let mut taken: HashSet<String> = bindings.iter().map(|b| b.name.clone()).collect();
    taken.insert(p1.param.clone());
    let rename: Vec<(String, String)> = p2
        .bindings
        .iter()
        .map(|b| {
            let mut name = b.name.clone();
            while taken.contains(&name) {
                name.push('b');
            }
            taken.insert(name.clone());
            (b.name.clone(), name)
        })
        .collect();
    let rename_fn = |old: &str| -> Option<String> {
        if old == p2.param {
            return Some(p1.param.clone());
        }
        rename
            .iter()
            .find(|(from, _)| from == old)
            .map(|(_, to)| to.clone())
    };
    for b in &p2.bindings {
        let mut expr = b.expr.clone();
        expr.rename_vars(&rename_fn);
        bindings.push(Binding {
            name: rename_fn(&b.name).expect("renamed"),
            expr,
        });
    }
    let mut f2 = p2.features[0].expr.clone();
    f2.rename_vars(&rename_fn);
    let blended = Expr::binary(
        BinOp::Add,
        Expr::binary(BinOp::Mul, Expr::Number(alpha), p1.features[0].expr.clone()),
        Expr::binary(BinOp::Mul, Expr::Number(1.0 - alpha), f2),
    );
    let program = FeatureProgram {
        name: "estimate".to_string(),
        param: p1.param.clone(),
        bindings,
        features: vec![NamedExpr {
            name: "prediction".to_string(),
            expr: blended,
        }],
    };
    match program.validate() {
        Ok(()) => program,
        Err(_) => p2.clone(),
    }
}

/// Multiply one numeric literal by 1.1 or 0.9; a program without
/// constants comes back unchanged.
pub fn perturb_constant(program: &FeatureProgram, rng: &mut ChaCha8Rng) -> FeatureProgram {
    let mut out = program.clone();
    let total = count_constants(&out);
    if total == 0 {
        return out;
    }
    let target = rng.gen_range(0..total);
    let factor = if rng.gen_bool(0.5) { 1.1 } else { 0.9 };
    let mut counter = 0usize;
    for b in &mut out.bindings {
        scale_nth_constant(&mut b.expr, target, &mut counter, factor);
    }
    for f in &mut out.features {
        scale_nth_constant(&mut f.expr, target, &mut counter, factor);
    }
    out
}

fn count_constants(program: &FeatureProgram) -> usize {
    fn walk(expr: &Expr) -> usize {
        match expr {
            Expr::Number(_) => 1,
            Expr::Text(_) | Expr::Var(_) => 0,
            Expr::Call { args, .. } => args.iter().map(walk).sum(),
            Expr::Binary { lhs, rhs, .. } => walk(lhs) + walk(rhs),
            Expr::Neg(inner) => walk(inner),
        }
    }
    program
        .bindings
        .iter()
        .map(|b| walk(&b.expr))
        .chain(program.features.iter().map(|f| walk(&f.expr)))
        .sum()
}

fn scale_nth_constant(expr: &mut Expr, target: usize, counter: &mut usize, factor: f64) {
    match expr {
        Expr::Number(v) => {
            if *counter == target {
                *v *= factor;
            }
            *counter += 1;
        }
        Expr::Text(_) | Expr::Var(_) => {}
        Expr::Call { args, .. } => {
            for a in args {
                scale_nth_constant(a, target, counter, factor);
            }
        }
        Expr::Binary { lhs, rhs, .. } => {
            scale_nth_constant(lhs, target, counter, factor);
            scale_nth_constant(rhs, target, counter, factor);
        }
        Expr::Neg(inner) => scale_nth_constant(inner, target, counter, factor),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::typecheck;
    use crate::fitness::{Candidate, Origin, Provenance};
    use crate::llm::prompt::{build_crossover_prompt, build_mutation_prompt, PromptBundle};
    use crate::primitives::PrimitiveRegistry;

    fn backend() -> ScriptedBackend {
        ScriptedBackend::new(GeneratorConfig::default())
    }

    fn as_candidate(src: &str, score: f64) -> Candidate {
        let mut c = Candidate::invalid(
            1,
            parse(src).unwrap(),
            Provenance::new(Origin::Init),
            String::new(),
        );
        c.valid = true;
        c.score_train = score;
        c
    }

    fn bundle() -> PromptBundle {
        PromptBundle::new(
            "population density",
            &PrimitiveRegistry::standard(),
            &GeneratorConfig::default().concepts,
        )
    }

    #[test]
    fn identical_prompt_and_seed_replays() {
        let b = backend();
        let s = Sampling::generation(7);
        let r1 = b.complete(&bundle().objective, &s).unwrap();
        let r2 = b.complete(&bundle().objective, &s).unwrap();
        assert_eq!(r1, r2);
        let s2 = Sampling::generation(8);
        let r3 = b.complete(&bundle().objective, &s2).unwrap();
        assert_ne!(r1, r3);
    }

    #[test]
    fn recombined_offspring_parse_and_typecheck() {
        let reg = PrimitiveRegistry::standard();
        let b = backend();
        let bun = bundle();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..200 {
            let p1 = random_program(&mut rng, &b.generator);
            let p2 = random_program(&mut rng, &b.generator);
            let c1 = as_candidate(&pretty_print(&p1), 0.4);
            let c2 = as_candidate(&pretty_print(&p2), 0.6);
            let prompt = build_crossover_prompt(&c1, &c2, &bun);
            let response = b.complete(&prompt, &Sampling::generation(i)).unwrap();
            let program = super::super::extract_program(&response, &reg)
                .unwrap_or_else(|e| panic!("seed {i}: {e}\n{response}"));
            typecheck(&program, &reg).unwrap();
        }
    }

    #[test]
    fn crossover_carries_parent2_features() {
        let b = backend();
        let bun = bundle();
        let c1 = as_candidate(
            "def f(loc): m = mask(loc, \"water\"); return [(\"wet\", area_fraction(m))]",
            0.4,
        );
        let c2 = as_candidate(
            "def g(loc): r = mask(loc, \"road\"); return [(\"roads\", area_fraction(r))]",
            0.6,
        );
        let prompt = build_crossover_prompt(&c1, &c2, &bun);
        let response = b.complete(&prompt, &Sampling::generation(11)).unwrap();
        let program =
            super::super::extract_program(&response, &PrimitiveRegistry::standard()).unwrap();
        assert!(
            program.features.iter().any(|f| f.name == "roads"),
            "parent-2 features must survive: {response}"
        );
    }

    #[test]
    fn mutation_perturbs_exactly_one_constant() {
        let b = backend();
        let bun = bundle();
        let parent = as_candidate(
            "def f(loc): return [(\"x\", 2.0 * area_fraction(mask(loc, \"road\")) + 4.0)]",
            0.3,
        );
        let prompt = build_mutation_prompt(&parent, &bun);
        let response = b.complete(&prompt, &Sampling::generation(5)).unwrap();
        let program =
            super::super::extract_program(&response, &PrimitiveRegistry::standard()).unwrap();
        let constants = collect_constants(&program);
        let originals = [2.0, 4.0];
        let changed: Vec<f64> = constants
            .iter()
            .copied()
            .filter(|c| !originals.contains(c))
            .collect();
        assert_eq!(changed.len(), 1, "constants {constants:?}");
        let c = changed[0];
        let matches_perturbation = originals
            .iter()
            .any(|o| (c - o * 1.1).abs() < 1e-12 || (c - o * 0.9).abs() < 1e-12);
        assert!(matches_perturbation, "changed constant {c}");
    }

    fn collect_constants(program: &FeatureProgram) -> Vec<f64> {
        fn walk(expr: &Expr, out: &mut Vec<f64>) {
            match expr {
                Expr::Number(v) => out.push(*v),
                Expr::Text(_) | Expr::Var(_) => {}
                Expr::Call { args, .. } => args.iter().for_each(|a| walk(a, out)),
                Expr::Binary { lhs, rhs, .. } => {
                    walk(lhs, out);
                    walk(rhs, out);
                }
                Expr::Neg(inner) => walk(inner, out),
            }
        }
        let mut out = Vec::new();
        for b in &program.bindings {
            walk(&b.expr, &mut out);
        }
        for f in &program.features {
            walk(&f.expr, &mut out);
        }
        out
    }

    #[test]
    fn constant_free_program_survives_mutation_unchanged() {
        let src = "def f(loc): return [(\"x\", area_fraction(mask(loc, \"road\")))]";
        let program = parse(src).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_constant(&program, &mut rng), program);
    }

    #[test]
    fn unclassifiable_prompt_is_an_error() {
        let b = backend();
        let err = b
            .complete("just some text", &Sampling::generation(1))
            .unwrap_err();
        assert!(matches!(err, LlmError::UnclassifiablePrompt));
    }

    #[test]
    fn critic_response_targets_worst_stratum() {
        let b = backend();
        let bun = bundle();
        let c = as_candidate(
            "def f(loc): return [(\"r\", area_fraction(mask(loc, \"road\")))]",
            0.5,
        );
        let worst = vec![("water".to_string(), 0.95, 14)];
        let prompt = super::super::build_critic_prompt(&c, &worst, 0.5, &bun);
        let response = b.complete(&prompt, &Sampling::refinement(9)).unwrap();
        let program =
            super::super::extract_program(&response, &PrimitiveRegistry::standard()).unwrap();
        let printed = pretty_print(&program);
        assert!(printed.contains("water"), "{printed}");
        assert_eq!(program.features.len(), 2);
    }
}
