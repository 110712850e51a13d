//! Prompt construction for the objective, crossover, mutation, and critic
//! exchanges. Every generation prompt embeds the objective so the search
//! stays anchored to the task description.

use std::collections::BTreeMap;

use crate::fitness::Candidate;
use crate::primitives::PrimitiveRegistry;

/// Section markers; the scripted backend classifies prompts by them.
pub const MARKER_OBJECTIVE: &str = "## Task";
pub const MARKER_CROSSOVER: &str = "## Crossover";
pub const MARKER_MUTATION: &str = "## Mutation";
pub const MARKER_CRITIC: &str = "## Critique";

/// Character budget standing in for a token budget (heuristic: four
/// characters per token).
pub const DEFAULT_MAX_PROMPT_CHARS: usize = 16_384;

#[derive(Debug, Clone)]
pub struct PromptBundle {
    /// The objective prompt p_o, fully rendered.
    pub objective: String,
    pub grammar_blurb: String,
    pub primitive_catalog: String,
    pub max_prompt_chars: usize,
    /// Optional few-shot example programs appended to the objective.
    pub few_shot: Vec<String>,
    /// Single-feature mode changes the return-shape instruction.
    pub single_feature: bool,
}

const GRAMMAR_BLURB: &str = "\
Write one function in this restricted language (not general Python):

    def estimate(loc):
        name = primitive(args)          # straight-line bindings only
        other = name * 2.0 + 1.0        # arithmetic: + - * /
        return [(\"feature_name\", scalar_expr), ...]

Rules: one parameter (the location handle); every binding uses previously
defined names only; no loops, conditionals, imports, or attribute access;
string literals appear only as primitive arguments; the function ends with
a single return of a list of (name, scalar expression) pairs.";

impl PromptBundle {
    pub fn new(descr: &str, registry: &PrimitiveRegistry, vocabulary: &[String]) -> Self {
        let mut catalog = String::from("Available primitives:\n");
        for entry in registry.entries() {
            catalog.push_str("- ");
            catalog.push_str(&entry.description);
            catalog.push('\n');
        }
        if !vocabulary.is_empty() {
            catalog.push_str(&format!(
                "\nConcepts known to mask(loc, concept) — use these exact names: {}.\n",
                vocabulary.join(", ")
            ));
        }
        let mut bundle = PromptBundle {
            objective: String::new(),
            grammar_blurb: GRAMMAR_BLURB.to_string(),
            primitive_catalog: catalog,
            max_prompt_chars: DEFAULT_MAX_PROMPT_CHARS,
            few_shot: Vec::new(),
            single_feature: false,
        };
        bundle.objective = bundle.render_objective(descr);
        bundle
    }

    pub fn with_single_feature(mut self, descr: &str, single: bool) -> Self {
        self.single_feature = single;
        self.objective = self.render_objective(descr);
        self
    }

    fn render_objective(&self, descr: &str) -> String {
        let shape = if self.single_feature {
            "Return exactly one feature: your full prediction expression, constants included."
        } else {
            "Return a list of predictive features; a linear regression over them is fitted for you, so emit informative raw features rather than guessing coefficients."
        };
        let mut out = format!(
            "{MARKER_OBJECTIVE}\nGiven a satellite image, write a function to estimate {descr}.\n\n{}\n\n{}\n{shape}\n",
            self.grammar_blurb, self.primitive_catalog
        );
        for example in &self.few_shot {
            out.push_str("\nExample program:\n```\n");
            out.push_str(example);
            out.push_str("```\n");
        }
        out.push_str("\nAnswer with the program in a fenced code block.\n");
        out
    }
}

fn fenced(program_text: &str) -> String {
    format!("```\n{program_text}```\n")
}

/// Render a candidate's program for a prompt, shrinking oversized programs
/// bindings-first so the feature list survives truncation.
fn program_for_prompt(c: &Candidate, budget_chars: usize) -> String {
    let full = crate::dsl::pretty_print(&c.program);
    if full.len() <= budget_chars {
        return full;
    }
    let lines: Vec<&str> = full.lines().collect();
    let (header, rest) = lines.split_first().expect("program has a header");
    let return_line = *rest.last().expect("program has a return");
    let mut kept: Vec<&str> = Vec::new();
    let mut used = header.len() + return_line.len() + 64;
    // keep the latest bindings, the ones the return list most likely uses
    for line in rest[..rest.len() - 1].iter().rev() {
        if used + line.len() > budget_chars {
            break;
        }
        used += line.len() + 1;
        kept.push(line);
    }
    kept.reverse();
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    out.push_str("    # ... earlier bindings truncated ...\n");
    for line in kept {
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(return_line);
    out.push('\n');
    out
}

pub fn build_objective_prompt(bundle: &PromptBundle) -> String {
    bundle.objective.clone()
}

pub fn build_crossover_prompt(p1: &Candidate, p2: &Candidate, bundle: &PromptBundle) -> String {
    // split the budget: objective + instructions get what they need, the
    // two parents share the rest
    let overhead = bundle.objective.len() + 512;
    let per_parent = bundle.max_prompt_chars.saturating_sub(overhead) / 2;
    format!(
        "{}\n{MARKER_CROSSOVER}\nHere are two parent programs with their fitness scores (lower is better).\n\nParent 1 (score {:.4}):\n{}\nParent 2 (score {:.4}):\n{}\nCombine elements of both parents into one new program that should score better than either. Keep the strongest features of each. Answer with the program in a fenced code block.\n",
        bundle.objective,
        p1.score_train,
        fenced(&program_for_prompt(p1, per_parent)),
        p2.score_train,
        fenced(&program_for_prompt(p2, per_parent)),
    )
}

pub fn build_mutation_prompt(parent: &Candidate, bundle: &PromptBundle) -> String {
    let overhead = bundle.objective.len() + 512;
    let budget = bundle.max_prompt_chars.saturating_sub(overhead);
    format!(
        "{}\n{MARKER_MUTATION}\nHere is a program with its fitness score (lower is better).\n\nProgram (score {:.4}):\n{}\nMutate the program: adjust a constant, swap a primitive, or add or drop one feature. Answer with the full modified program in a fenced code block.\n",
        bundle.objective,
        parent.score_train,
        fenced(&program_for_prompt(parent, budget)),
    )
}

/// Worst strata are rendered as an aligned text table the model (and the
/// scripted stand-in) can read back.
pub fn build_critic_prompt(
    candidate: &Candidate,
    worst: &[(String, f64, usize)],
    overall: f64,
    bundle: &PromptBundle,
) -> String {
    let overhead = bundle.objective.len() + 768;
    let budget = bundle.max_prompt_chars.saturating_sub(overhead);
    let mut table = String::from("Worst strata:\n");
    for (name, score, n) in worst {
        table.push_str(&format!("  {name:<16} score {score:.4}  (n={n})\n"));
    }
    format!(
        "{}\n{MARKER_CRITIC}\nThis program scores {overall:.4} overall (lower is better), but a stratified evaluation shows it performs poorly on some land-use strata.\n\nProgram:\n{}\n{table}\nImprove the program specifically on the worst strata listed above, without hurting the rest. Answer with the full revised program in a fenced code block.\n",
        bundle.objective,
        fenced(&program_for_prompt(candidate, budget)),
    )
}

/// Leftover `{placeholder}` patterns, for template-hygiene checks.
pub fn unresolved_placeholders(text: &str) -> Vec<String> {
    let mut found = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len()
                && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_')
            {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'}' && j > i + 1 {
                found.push(text[i + 1..j].to_string());
                i = j;
            }
        }
        i += 1;
    }
    found
}

/// Per-stratum scores ranked worst-first, sentinel (empty) strata dropped.
pub fn worst_strata(
    strata_scores: &BTreeMap<String, f64>,
    sizes: &BTreeMap<String, usize>,
    k: usize,
) -> Vec<(String, f64, usize)> {
    let mut rows: Vec<(String, f64, usize)> = strata_scores
        .iter()
        .filter(|(_, s)| s.is_finite())
        .map(|(name, s)| (name.clone(), *s, sizes.get(name).copied().unwrap_or(0)))
        .collect();
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    rows.truncate(k);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;
    use crate::fitness::{Origin, Provenance};

    fn candidate(src: &str, score: f64) -> Candidate {
        let mut c = Candidate::invalid(
            1,
            parse(src).unwrap(),
            Provenance::new(Origin::Init),
            String::new(),
        );
        c.valid = true;
        c.score_train = score;
        c.note = None;
        c
    }

    fn bundle() -> PromptBundle {
        PromptBundle::new(
            "population density",
            &PrimitiveRegistry::standard(),
            &["road".to_string(), "water".to_string()],
        )
    }

    #[test]
    fn objective_contains_required_sentence_and_catalog() {
        let b = bundle();
        let p = build_objective_prompt(&b);
        assert!(p.contains("Given a satellite image, write a function to estimate population density"));
        assert!(p.contains("area_fraction"));
        assert!(p.contains("use these exact names: road, water"));
        assert!(unresolved_placeholders(&p).is_empty());
    }

    #[test]
    fn empty_registry_still_valid() {
        let b = PromptBundle::new("poverty", &PrimitiveRegistry::empty(), &[]);
        let p = build_objective_prompt(&b);
        assert!(p.contains("write a function to estimate poverty"));
        assert!(unresolved_placeholders(&p).is_empty());
    }

    #[test]
    fn crossover_embeds_both_parents_and_scores() {
        let b = bundle();
        let p1 = candidate("def f(loc): return [(\"a\", 1.0)]", 0.123456);
        let p2 = candidate("def g(loc): return [(\"b\", 2.0)]", 0.75);
        let prompt = build_crossover_prompt(&p1, &p2, &b);
        assert!(prompt.contains("def f(loc):"));
        assert!(prompt.contains("def g(loc):"));
        assert!(prompt.contains("0.1235")); // 4-decimal format
        assert!(prompt.contains("0.7500"));
        assert!(prompt.contains(MARKER_CROSSOVER));
        assert!(prompt.contains(MARKER_OBJECTIVE), "objective included");
        assert!(unresolved_placeholders(&prompt).is_empty());
    }

    #[test]
    fn mutation_mirrors_crossover() {
        let b = bundle();
        let p = candidate("def f(loc): return [(\"a\", 1.0)]", 0.5);
        let prompt = build_mutation_prompt(&p, &b);
        assert!(prompt.contains("def f(loc):"));
        assert!(prompt.contains("0.5000"));
        assert!(prompt.contains(MARKER_MUTATION));
        assert!(prompt.contains(MARKER_OBJECTIVE));
    }

    #[test]
    fn oversized_parents_truncate_bindings_first() {
        use crate::dsl::{BinOp, Binding, Expr, FeatureProgram, NamedExpr};
        let bindings: Vec<Binding> = (0..2000)
            .map(|i| Binding {
                name: format!("b{i}"),
                expr: Expr::binary(BinOp::Add, Expr::Number(i as f64), Expr::Number(1.0)),
            })
            .collect();
        let program = FeatureProgram {
            name: "f".into(),
            param: "loc".into(),
            bindings,
            features: vec![NamedExpr {
                name: "keep_me".into(),
                expr: Expr::binary(BinOp::Mul, Expr::var("b0"), Expr::Number(1.0)),
            }],
        };
        let b = bundle();
        let mut big = Candidate::invalid(
            7,
            program,
            Provenance::new(Origin::Init),
            String::new(),
        );
        big.valid = true;
        big.score_train = 1.0;
        let small = candidate("def g(loc): return [(\"tiny\", 2.0)]", 0.9);
        let prompt = build_crossover_prompt(&big, &small, &b);
        assert!(prompt.len() <= b.max_prompt_chars + 1024, "len {}", prompt.len());
        assert!(prompt.contains("keep_me"), "feature list survives truncation");
        assert!(prompt.contains("truncated"));
    }

    #[test]
    fn critic_prompt_lists_worst_strata() {
        let b = bundle();
        let c = candidate("def f(loc): return [(\"a\", 1.0)]", 0.4);
        let worst = vec![
            ("water".to_string(), 0.9, 10),
            ("forest".to_string(), 0.7, 12),
        ];
        let prompt = build_critic_prompt(&c, &worst, 0.4, &b);
        assert!(prompt.contains("Worst strata:"));
        assert!(prompt.contains("water"));
        assert!(prompt.contains(MARKER_CRITIC));
    }

    #[test]
    fn worst_strata_ranking_is_stable_and_skips_sentinels() {
        let mut scores = BTreeMap::new();
        scores.insert("a".to_string(), 0.5);
        scores.insert("b".to_string(), 0.9);
        scores.insert("c".to_string(), f64::INFINITY);
        scores.insert("d".to_string(), 0.9);
        let mut sizes = BTreeMap::new();
        for k in ["a", "b", "c", "d"] {
            sizes.insert(k.to_string(), 5);
        }
        let worst = worst_strata(&scores, &sizes, 2);
        assert_eq!(worst.len(), 2);
        assert_eq!(worst[0].0, "b"); // ties broken by name
        assert_eq!(worst[1].0, "d");
    }

    #[test]
    fn placeholder_scanner_finds_leftovers() {
        assert_eq!(unresolved_placeholders("x {foo} y"), vec!["foo"]);
        assert!(unresolved_placeholders("no braces here").is_empty());
        assert!(unresolved_placeholders("empty {} braces").is_empty());
    }
}
