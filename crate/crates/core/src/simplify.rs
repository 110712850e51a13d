//! Program simplification: recursive dead-leaf removal on the binding
//! graph, regression-weight pruning at 5% of the largest weight, and the
//! composed pass iterated to a fixpoint.

use crate::data::Observation;
use crate::dsl::FeatureProgram;
use crate::fitness::{make_candidate, Candidate, EvalContext, HeadMode, Metric};

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.05;
/// Relative train-score slack allowed before a prune is rolled back.
pub const DEFAULT_PRUNE_SLACK: f64 = 0.05;

/// Remove every binding the return list cannot reach, round by round:
/// each round deletes the bindings nothing references, and deleting them
/// may expose new leaves for the next round.
pub fn dead_code_eliminate(program: &FeatureProgram) -> FeatureProgram {
    let mut out = program.clone();
    loop {
        let mut referenced: std::collections::HashSet<&str> = std::collections::HashSet::new();
        for f in &out.features {
            f.expr.free_vars(&mut referenced);
        }
        for b in &out.bindings {
            b.expr.free_vars(&mut referenced);
        }
        let dead: Vec<String> = out
            .bindings
            .iter()
            .filter(|b| !referenced.contains(b.name.as_str()))
            .map(|b| b.name.clone())
            .collect();
        if dead.is_empty() {
            return out;
        }
        out.bindings.retain(|b| !dead.contains(&b.name));
    }
}

/// Drop features whose standardized weight sits strictly below
/// `threshold_ratio` of the largest; the largest-weight feature always
/// survives. Pruning re-runs dead-code elimination and refits on train.
/// A prune that worsens the train score by more than the slack is rolled
/// back.
#[allow(clippy::too_many_arguments)]
pub fn prune_features(
    candidate: Candidate,
    threshold_ratio: f64,
    slack: f64,
    train: &[&Observation],
    test: &[&Observation],
    metric: &Metric,
    ctx: &EvalContext<'_>,
    mode: HeadMode,
) -> Candidate {
    let Some(head) = candidate.head.as_ref() else {
        return candidate;
    };
    if candidate.program.features.len() <= 1 {
        return candidate;
    }
    let magnitudes: Vec<f64> = head.weights.iter().map(|w| w.abs()).collect();
    let max_mag = magnitudes.iter().copied().fold(0.0f64, f64::max);
    let cutoff = threshold_ratio * max_mag;
    let argmax = magnitudes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite weights"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let keep: Vec<bool> = magnitudes
        .iter()
        .enumerate()
        .map(|(i, &m)| i == argmax || m >= cutoff)
        .collect();
    if keep.iter().all(|&k| k) {
        return candidate;
    }

    let mut pruned_program = candidate.program.clone();
    let mut it = keep.iter();
    pruned_program.features.retain(|_| *it.next().expect("aligned"));
    let pruned_program = dead_code_eliminate(&pruned_program);

    let refit = make_candidate(
        candidate.id,
        pruned_program,
        candidate.provenance.clone(),
        train,
        test,
        metric,
        ctx,
        mode,
    );
    if !refit.valid {
        return candidate;
    }
    // guard: correlated features can carry shared signal, so a prune that
    // costs more than the slack is rejected and logged on the candidate
    if refit.score_train > candidate.score_train * (1.0 + slack) {
        let mut kept = candidate;
        kept.note = Some(format!(
            "prune reverted: train score {:.6} -> {:.6} exceeds slack {:.0}%",
            kept.score_train,
            refit.score_train,
            slack * 100.0
        ));
        return kept;
    }
    refit
}

/// Full pass: dead-code elimination, weight pruning, and elimination
/// again, iterated until the program stops changing (bounded by the
/// feature count). The result is refitted and rescored.
#[allow(clippy::too_many_arguments)]
pub fn simplify(
    candidate: Candidate,
    threshold_ratio: f64,
    slack: f64,
    train: &[&Observation],
    test: &[&Observation],
    metric: &Metric,
    ctx: &EvalContext<'_>,
    mode: HeadMode,
) -> Candidate {
    if !candidate.valid {
        return candidate;
    }
    let mut current = candidate;
    let max_rounds = current.program.features.len() + 1;
    for _ in 0..max_rounds {
        let before = current.program.clone();
        // dead-code removal never changes feature values, so the fitted
        // head and scores carry over unchanged
        let eliminated = dead_code_eliminate(&current.program);
        if eliminated != current.program {
            current.program = eliminated;
        }
        current = prune_features(current, threshold_ratio, slack, train, test, metric, ctx, mode);
        if current.program == before {
            break;
        }
    }
    current.provenance.simplified = true;
    current
}
