//! Post-hoc interpretation: per-node importance by ablation and a DOT
//! export whose red edge widths carry the importances.

use std::collections::BTreeMap;
use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Observation;
use crate::dsl::{ast_to_dag, AstSite, Evaluator, NodeKind, ProgramDag, RunHooks};
use crate::fitness::{Candidate, EvalContext, Metric};
use crate::primitives::value::{Grid, Mask, Value};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: usize,
    pub label: String,
    /// Relative score degradation when the node's output is frozen to its
    /// train-set mean; clamped at zero.
    pub importance: f64,
    /// Node whose neutralization breaks evaluation (or that no metric can
    /// see): rendered as a plain computation edge.
    pub structural: bool,
}

/// Freeze each call/binding node to its mean value over the subset and
/// measure the relative score change. The head is NOT refitted: deletion
/// would change the feature dimensionality, neutralization keeps the
/// comparison honest.
pub fn node_importance(
    candidate: &Candidate,
    subset: &[&Observation],
    metric: &Metric,
    ctx: &EvalContext<'_>,
) -> Vec<NodeReport> {
    let Some(head) = candidate.head.as_ref() else {
        return Vec::new();
    };
    let dag = ast_to_dag(&candidate.program);
    let targets: Vec<(usize, String, AstSite)> = dag
        .nodes
        .iter()
        .filter_map(|n| {
            n.site
                .as_ref()
                .map(|s| (n.id, n.label.clone(), s.clone()))
        })
        .collect();
    if targets.is_empty() {
        return Vec::new();
    }

    let evaluator = Evaluator::new(&candidate.program, ctx.registry, ctx.cache, ctx.limits);

    // pass 1: record every sited value and the base predictions
    let mut per_site: BTreeMap<AstSite, Accumulator> = BTreeMap::new();
    let mut base_pairs: Vec<(f64, f64)> = Vec::new();
    let mut usable = 0usize;
    for o in subset {
        let mut record = BTreeMap::new();
        let out = evaluator.eval_hooked(
            &o.input,
            RunHooks {
                record: Some(&mut record),
                override_site: None,
            },
        );
        let Ok(features) = out else { continue };
        usable += 1;
        base_pairs.push((head.predict(&features), o.target));
        for (site, value) in record {
            per_site.entry(site).or_default().add(&value);
        }
    }
    let Ok(base_score) = metric.score_pairs(&base_pairs) else {
        return Vec::new();
    };

    // pass 2: rescore with each node frozen to its accumulated mean
    let reports: Vec<NodeReport> = targets
        .par_iter()
        .map(|(node, label, site)| {
            let neutral = per_site.get(site).and_then(Accumulator::neutral_value);
            let Some(neutral) = neutral else {
                // dead node: never evaluated, freezing it changes nothing
                return NodeReport {
                    node: *node,
                    label: label.clone(),
                    importance: 0.0,
                    structural: false,
                };
            };
            let mut pairs = Vec::with_capacity(subset.len());
            let mut failures = 0usize;
            for o in subset.iter() {
                let out = evaluator.eval_hooked(
                    &o.input,
                    RunHooks {
                        record: None,
                        override_site: Some((site, &neutral)),
                    },
                );
                match out {
                    Ok(features) => pairs.push((head.predict(&features), o.target)),
                    Err(_) => failures += 1,
                }
            }
            let failure_rate = failures as f64 / subset.len().max(1) as f64;
            if failure_rate > ctx.max_error_rate || pairs.is_empty() {
                return NodeReport {
                    node: *node,
                    label: label.clone(),
                    importance: 0.0,
                    structural: true,
                };
            }
            let ablated = metric
                .score_pairs(&pairs)
                .unwrap_or(f64::INFINITY);
            let denom = base_score.max(1e-12);
            let importance = ((ablated - base_score) / denom).max(0.0);
            NodeReport {
                node: *node,
                label: label.clone(),
                importance,
                structural: !importance.is_finite(),
            }
        })
        .collect();
    debug_assert!(usable > 0);
    reports
}

#[derive(Default)]
struct Accumulator {
    count: usize,
    scalar_sum: f64,
    grid_sum: Option<(u32, u32, Vec<f64>)>,
    mask_sum: Option<(u32, u32, Vec<u64>)>,
    bool_true: usize,
    kind_mismatch: bool,
}

impl Accumulator {
    fn add(&mut self, value: &Value) {
        self.count += 1;
        match value {
            Value::Scalar(s) => self.scalar_sum += s,
            Value::Grid(g) => match &mut self.grid_sum {
                None => {
                    self.grid_sum = Some((g.width(), g.height(), g.cells().to_vec()));
                }
                Some((w, h, sum)) if *w == g.width() && *h == g.height() => {
                    for (acc, c) in sum.iter_mut().zip(g.cells()) {
                        *acc += c;
                    }
                }
                _ => self.kind_mismatch = true,
            },
            Value::Mask(m) => match &mut self.mask_sum {
                None => {
                    self.mask_sum = Some((
                        m.width(),
                        m.height(),
                        m.cells().iter().map(|&c| u64::from(c)).collect(),
                    ));
                }
                Some((w, h, sum)) if *w == m.width() && *h == m.height() => {
                    for (acc, c) in sum.iter_mut().zip(m.cells()) {
                        *acc += u64::from(*c);
                    }
                }
                _ => self.kind_mismatch = true,
            },
            Value::Bool(b) => {
                if *b {
                    self.bool_true += 1;
                }
            }
            Value::Input(_) | Value::Text(_) => self.kind_mismatch = true,
        }
    }

    /// Scalar: mean. Grid: cellwise mean. Mask: cellwise majority. The
    /// value's kind is preserved so downstream operations still apply.
    fn neutral_value(&self) -> Option<Value> {
        if self.count == 0 || self.kind_mismatch {
            return None;
        }
        let n = self.count as f64;
        if let Some((w, h, sum)) = &self.grid_sum {
            let cells = sum.iter().map(|s| s / n).collect();
            return Some(Value::Grid(Grid::new(*w, *h, cells)));
        }
        if let Some((w, h, sum)) = &self.mask_sum {
            let half = self.count as u64;
            let cells = sum.iter().map(|&s| u8::from(2 * s >= half)).collect();
            return Some(Value::Mask(Mask::new(*w, *h, cells)));
        }
        if self.bool_true > 0 || self.scalar_sum == 0.0 {
            // ambiguous accumulators only happen for bools
            if self.bool_true > 0 {
                return Some(Value::Bool(2 * self.bool_true >= self.count));
            }
        }
        Some(Value::Scalar(self.scalar_sum / n))
    }
}

/// Graphviz export. Edge pen-widths grow with the producing node's
/// importance; structural nodes keep plain black edges; feature edges
/// into the return node carry the feature name. Node order is the DAG's,
/// so output is deterministic.
pub fn export_dot(
    dag: &ProgramDag,
    importances: Option<&[NodeReport]>,
    graph_name: &str,
) -> String {
    let by_node: BTreeMap<usize, &NodeReport> = importances
        .map(|reports| reports.iter().map(|r| (r.node, r)).collect())
        .unwrap_or_default();
    let max_importance = by_node
        .values()
        .map(|r| r.importance)
        .fold(0.0f64, f64::max);

    let mut out = String::new();
    let _ = writeln!(out, "digraph {} {{", sanitize_name(graph_name));
    out.push_str("    rankdir=LR;\n    node [fontname=\"Helvetica\"];\n");
    for node in &dag.nodes {
        let shape = match node.kind {
            NodeKind::Param => "ellipse",
            NodeKind::Constant => "plaintext",
            NodeKind::Call => "oval",
            NodeKind::Binding => "box",
            NodeKind::Return => "doubleoctagon",
        };
        let _ = writeln!(
            out,
            "    n{} [label=\"{}\", shape={}];",
            node.id,
            escape_label(&node.label),
            shape
        );
    }
    for edge in &dag.edges {
        let mut attrs: Vec<String> = Vec::new();
        if let Some(label) = &edge.label {
            attrs.push(format!("label=\"{}\"", escape_label(label)));
        }
        match by_node.get(&edge.from) {
            Some(report) if !report.structural && max_importance > 0.0 => {
                let width = 1.0 + 5.0 * (report.importance / max_importance);
                attrs.push(format!("penwidth={width:.2}"));
                attrs.push("color=red".to_string());
            }
            Some(_) => {
                attrs.push("penwidth=1.00".to_string());
                attrs.push("color=black".to_string());
            }
            None => {
                if importances.is_some() {
                    attrs.push("penwidth=1.00".to_string());
                    attrs.push("color=black".to_string());
                }
            }
        }
        let rendered = if attrs.is_empty() {
            String::new()
        } else {
            format!(" [{}]", attrs.join(", "))
        };
        let _ = writeln!(out, "    n{} -> n{}{};", edge.from, edge.to, rendered);
    }
    out.push_str("}\n");
    out
}

fn sanitize_name(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    if cleaned.is_empty() {
        "program".to_string()
    } else {
        cleaned
    }
}

fn escape_label(label: &str) -> String {
    label.replace('\\', "\\\\").replace('"', "\\\"")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_world, SynthParams};
    use crate::dsl::parse;
    use crate::fitness::{make_candidate, HeadMode, MetricId, Origin, Provenance};
    use crate::primitives::PrimitiveRegistry;

    fn world() -> crate::data::ObservationSet {
        let hidden = parse(
            "def h(loc): return [(\"t\", 2.0 * area_fraction(mask(loc, \"water\")) + 0.1 * area_fraction(mask(loc, \"road\")))]",
        )
        .unwrap();
        generate_synthetic_world(&SynthParams::new(9, 50, 16, hidden, 0.01)).unwrap()
    }

    fn fitted(set: &crate::data::ObservationSet, src: &str) -> (Candidate, PrimitiveRegistry) {
        let registry = PrimitiveRegistry::standard();
        let metric = Metric::new(MetricId::Rmse);
        let ctx = EvalContext::new(&registry, None);
        let c = make_candidate(
            1,
            parse(src).unwrap(),
            Provenance::new(Origin::Init),
            &set.all(),
            &[],
            &metric,
            &ctx,
            HeadMode::FeatureSet,
        );
        assert!(c.valid, "{:?}", c.note);
        (c, registry)
    }

    #[test]
    fn constant_program_has_no_ablatable_nodes() {
        let set = world();
        let (c, registry) = fitted(&set, "def f(loc): return [(\"c\", 2.5)]");
        let ctx = EvalContext::new(&registry, None);
        let reports = node_importance(&c, &set.all(), &Metric::new(MetricId::Rmse), &ctx);
        assert!(reports.iter().all(|r| r.importance == 0.0));
    }

    #[test]
    fn dominant_term_outranks_weak_term() {
        let set = world();
        let (c, registry) = fitted(
            &set,
            "def f(loc):\n w = area_fraction(mask(loc, \"water\"))\n r = area_fraction(mask(loc, \"road\"))\n return [(\"w\", w), (\"r\", r)]",
        );
        let ctx = EvalContext::new(&registry, None);
        let reports = node_importance(&c, &set.all(), &Metric::new(MetricId::Rmse), &ctx);
        let by_label = |needle: &str| {
            reports
                .iter()
                .find(|r| r.label.contains(needle))
                .unwrap()
                .importance
        };
        assert!(
            by_label("w =") > by_label("r ="),
            "water term (coef 2.0) must dominate road term (coef 0.1): {reports:?}"
        );
    }

    #[test]
    fn ablating_sole_feature_recovers_mean_baseline_gap() {
        let set = world();
        let (c, registry) = fitted(
            &set,
            "def f(loc): return [(\"w\", area_fraction(mask(loc, \"water\")))]",
        );
        let metric = Metric::new(MetricId::Rmse);
        let ctx = EvalContext::new(&registry, None);
        let train = set.all();
        let reports = node_importance(&c, &train, &metric, &ctx);
        // the feature's top call node: freezing it to its train mean turns
        // the head into the intercept-only mean predictor
        let feature_node = reports
            .iter()
            .find(|r| r.label == "area_fraction")
            .unwrap();
        let mean_candidate = crate::fitness::mean_baseline(&train, &[], &metric, &ctx);
        let expected = (mean_candidate.score_train - c.score_train) / c.score_train.max(1e-12);
        assert!(
            (feature_node.importance - expected).abs() < 1e-6,
            "{} vs {expected}",
            feature_node.importance
        );
    }

    #[test]
    fn dot_export_is_deterministic_and_balanced() {
        let set = world();
        let (c, registry) = fitted(
            &set,
            "def f(loc):\n m = mask(loc, \"water\")\n return [(\"w\", area_fraction(m)), (\"d\", mean(distance_transform(m)))]",
        );
        let ctx = EvalContext::new(&registry, None);
        let dag = ast_to_dag(&c.program);
        let reports = node_importance(&c, &set.all(), &Metric::new(MetricId::Rmse), &ctx);
        let a = export_dot(&dag, Some(&reports), "best");
        let b = export_dot(&dag, Some(&reports), "best");
        assert_eq!(a, b);
        assert!(a.starts_with("digraph best {"));
        assert_eq!(a.matches('{').count(), a.matches('}').count());
        assert!(a.contains("color=red"));
        assert!(a.contains("label=\"w\""), "feature edge labels present");
        // minimal structural check: every edge references declared nodes
        for line in a.lines().filter(|l| l.contains("->")) {
            let ids: Vec<&str> = line
                .trim()
                .trim_end_matches(';')
                .split("->")
                .map(str::trim)
                .collect();
            for id in ids {
                let id = id.split_whitespace().next().unwrap().trim_start_matches('n');
                let id: usize = id
                    .chars()
                    .take_while(|c| c.is_ascii_digit())
                    .collect::<String>()
                    .parse()
                    .unwrap();
                assert!(id < dag.nodes.len());
            }
        }
    }

    #[test]
    fn uniform_widths_without_importances() {
        let set = world();
        let (c, _) = fitted(
            &set,
            "def f(loc): return [(\"w\", area_fraction(mask(loc, \"water\")))]",
        );
        let dag = ast_to_dag(&c.program);
        let dot = export_dot(&dag, None, "plain");
        assert!(!dot.contains("penwidth="));
        assert!(!dot.contains("color=red"));
    }

    #[test]
    fn zero_weight_downstream_means_zero_importance() {
        let set = world();
        // constant feature gets weight 0; its producing node can't matter
        let (c, registry) = fitted(
            &set,
            "def f(loc):\n w = area_fraction(mask(loc, \"water\"))\n z = area_fraction(mask(loc, \"forest\"))\n return [(\"w\", w), (\"dead_weight\", z * 0.0)]",
        );
        let ctx = EvalContext::new(&registry, None);
        let reports = node_importance(&c, &set.all(), &Metric::new(MetricId::Rmse), &ctx);
        let z_node = reports.iter().find(|r| r.label.contains("z =")).unwrap();
        assert!(z_node.importance < 1e-9, "{z_node:?}");
    }
}
