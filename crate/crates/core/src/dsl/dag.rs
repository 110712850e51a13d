//! Data-dependency DAG view of a program.
//!
//! Granularity: the single parameter and every numeric literal are root
//! nodes; each binding is one node absorbing its top-level operation;
//! nested sub-expressions become call nodes; text literals fold into the
//! owning call's label (they configure the op rather than flow data); the
//! return statement is the single sink. Unused bindings surface as
//! non-return leaves, which is exactly what the dead-code pass removes.

use super::ast::{Expr, FeatureProgram};
use super::eval::AstSite;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Constant,
    Param,
    Call,
    Binding,
    Return,
}

#[derive(Debug, Clone)]
pub struct DagNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub label: String,
    /// Where this node lives in the AST; constants, the param, and the
    /// return sink have no ablatable site.
    pub site: Option<AstSite>,
}

#[derive(Debug, Clone)]
pub struct DagEdge {
    pub from: NodeId,
    pub to: NodeId,
    /// Set on edges into the return node: the feature name.
    pub label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ProgramDag {
    pub nodes: Vec<DagNode>,
    pub edges: Vec<DagEdge>,
    pub param_node: NodeId,
    pub return_node: NodeId,
}

impl ProgramDag {
    pub fn in_degree(&self, id: NodeId) -> usize {
        self.edges.iter().filter(|e| e.to == id).count()
    }

    pub fn out_degree(&self, id: NodeId) -> usize {
        self.edges.iter().filter(|e| e.from == id).count()
    }

    /// Zero-in-degree nodes; by construction exactly the constants plus
    /// the parameter.
    pub fn roots(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&id| self.in_degree(id) == 0)
            .collect()
    }

    /// Sinks other than the return node, i.e. dead code.
    pub fn non_return_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&id| id != self.return_node && self.out_degree(id) == 0)
            .collect()
    }
}

pub fn ast_to_dag(program: &FeatureProgram) -> ProgramDag {
    let mut b = DagBuilder {
        program,
        nodes: Vec::new(),
        edges: Vec::new(),
        binding_nodes: Vec::new(),
    };

    let param_node = b.push(NodeKind::Param, program.param.clone(), None);

    for (i, binding) in program.bindings.iter().enumerate() {
        let site = AstSite::BindingExpr(i, vec![]);
        let label = format!("{} = {}", binding.name, head_label(&binding.expr));
        let node = b.push(NodeKind::Binding, label, Some(site));
        b.binding_nodes.push(node);
        b.wire_children(&binding.expr, node, i, true);
    }

    let return_node = b.push(NodeKind::Return, "return".to_string(), None);
    for (j, feature) in program.features.iter().enumerate() {
        let producer = b.feature_producer(&feature.expr, j);
        b.edges.push(DagEdge {
            from: producer,
            to: return_node,
            label: Some(feature.name.clone()),
        });
    }

    ProgramDag {
        nodes: b.nodes,
        edges: b.edges,
        param_node,
        return_node,
    }
}

/// Display form of an expression's top operation, text args folded in.
fn head_label(expr: &Expr) -> String {
    match expr {
        Expr::Number(v) => format!("{v:?}"),
        Expr::Text(s) => format!("{s:?}"),
        Expr::Var(name) => name.clone(),
        Expr::Call { name, args } => {
            let texts: Vec<String> = args
                .iter()
                .filter_map(|a| match a {
                    Expr::Text(s) => Some(s.clone()),
                    _ => None,
                })
                .collect();
            if texts.is_empty() {
                name.clone()
            } else {
                format!("{name}({})", texts.join(", "))
            }
        }
        Expr::Binary { op, .. } => op.symbol().to_string(),
        Expr::Neg(_) => "negate".to_string(),
    }
}

struct DagBuilder<'p> {
    program: &'p FeatureProgram,
    nodes: Vec<DagNode>,
    edges: Vec<DagEdge>,
    binding_nodes: Vec<NodeId>,
}

impl DagBuilder<'_> {
    fn push(&mut self, kind: NodeKind, label: String, site: Option<AstSite>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(DagNode {
            id,
            kind,
            label,
            site,
        });
        id
    }

    fn edge(&mut self, from: NodeId, to: NodeId) {
        self.edges.push(DagEdge {
            from,
            to,
            label: None,
        });
    }

    fn var_node(&self, name: &str) -> NodeId {
        if name == self.program.param {
            return 0; // param is always the first node
        }
        let idx = self
            .program
            .bindings
            .iter()
            .position(|b| b.name == name)
            .expect("validated program");
        self.binding_nodes[idx]
    }

    /// Wire the operands of `expr` into `consumer`. When `absorb` is set
    /// the expression's own operation lives inside the consumer node
    /// (binding absorption); otherwise `expr` gets a node of its own
    /// first.
    fn wire_children(&mut self, expr: &Expr, consumer: NodeId, binding_idx: usize, absorb: bool) {
        if absorb {
            match expr {
                Expr::Number(_) => {
                    // keep constants as roots instead of absorbing them
                    let node = self.push(NodeKind::Constant, head_label(expr), None);
                    self.edge(node, consumer);
                }
                Expr::Text(_) => {
                    let node = self.push(NodeKind::Constant, head_label(expr), None);
                    self.edge(node, consumer);
                }
                Expr::Var(name) => {
                    let node = self.var_node(name);
                    self.edge(node, consumer);
                }
                Expr::Call { args, .. } => {
                    for (k, a) in args.iter().enumerate() {
                        self.operand(a, consumer, SiteOwner::Binding(binding_idx), vec![k]);
                    }
                }
                Expr::Binary { lhs, rhs, .. } => {
                    self.operand(lhs, consumer, SiteOwner::Binding(binding_idx), vec![0]);
                    self.operand(rhs, consumer, SiteOwner::Binding(binding_idx), vec![1]);
                }
                Expr::Neg(inner) => {
                    self.operand(inner, consumer, SiteOwner::Binding(binding_idx), vec![0]);
                }
            }
        }
    }

    /// Producer node for a returned feature expression.
    fn feature_producer(&mut self, expr: &Expr, feature_idx: usize) -> NodeId {
        match expr {
            Expr::Var(name) => self.var_node(name),
            Expr::Number(_) | Expr::Text(_) => {
                self.push(NodeKind::Constant, head_label(expr), None)
            }
            _ => self.expr_node(expr, SiteOwner::Feature(feature_idx), vec![]),
        }
    }

    /// Create a call node for a compound expression and wire its operands.
    fn expr_node(&mut self, expr: &Expr, owner: SiteOwner, path: Vec<usize>) -> NodeId {
        let site = owner.site(path.clone());
        let node = self.push(NodeKind::Call, head_label(expr), Some(site));
        match expr {
            Expr::Call { args, .. } => {
                for (k, a) in args.iter().enumerate() {
                    let mut p = path.clone();
                    p.push(k);
                    self.operand(a, node, owner, p);
                }
            }
            Expr::Binary { lhs, rhs, .. } => {
                let mut lp = path.clone();
                lp.push(0);
                self.operand(lhs, node, owner, lp);
                let mut rp = path;
                rp.push(1);
                self.operand(rhs, node, owner, rp);
            }
            Expr::Neg(inner) => {
                let mut p = path;
                p.push(0);
                self.operand(inner, node, owner, p);
            }
            _ => unreachable!("expr_node is only called on compound expressions"),
        }
        node
    }

    fn operand(&mut self, expr: &Expr, consumer: NodeId, owner: SiteOwner, path: Vec<usize>) {
        match expr {
            Expr::Text(_) => {} // folded into the consumer's label
            Expr::Number(_) => {
                let node = self.push(NodeKind::Constant, head_label(expr), None);
                self.edge(node, consumer);
            }
            Expr::Var(name) => {
                let node = self.var_node(name);
                self.edge(node, consumer);
            }
            _ => {
                let node = self.expr_node(expr, owner, path);
                self.edge(node, consumer);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum SiteOwner {
    Binding(usize),
    Feature(usize),
}

impl SiteOwner {
    fn site(self, path: Vec<usize>) -> AstSite {
        match self {
            SiteOwner::Binding(i) => AstSite::BindingExpr(i, path),
            SiteOwner::Feature(j) => AstSite::FeatureExpr(j, path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parser::parse;

    #[test]
    fn minimal_program_has_four_nodes() {
        // param, binding (absorbing mask), call (area_fraction), return
        let p = parse(
            "def f(loc): m = mask(loc, \"road\"); return [(\"x\", area_fraction(m))]",
        )
        .unwrap();
        let dag = ast_to_dag(&p);
        assert_eq!(dag.nodes.len(), 4);
        assert_eq!(dag.out_degree(dag.return_node), 0);
        assert_eq!(dag.in_degree(dag.param_node), 0);
    }

    #[test]
    fn straight_line_count_is_bindings_plus_constants_plus_two() {
        // 3 bindings, 2 numeric constants, identifier-only return list
        let p = parse(
            "def f(loc):\n m = mask(loc, \"road\")\n a = area_fraction(m)\n b = a * 2.0 + 1.0\n return [(\"x\", b), (\"raw\", a)]",
        )
        .unwrap();
        let dag = ast_to_dag(&p);
        // (a * 2.0) is a nested call node under b's absorbed '+'
        let call_nodes = dag
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Call)
            .count();
        assert_eq!(call_nodes, 1);
        assert_eq!(dag.nodes.len(), 3 + 2 + 2 + call_nodes);
    }

    #[test]
    fn straight_line_without_nesting() {
        let p = parse(
            "def f(loc):\n m = mask(loc, \"road\")\n a = area_fraction(m)\n c = a * 3.0\n return [(\"x\", c)]",
        )
        .unwrap();
        let dag = ast_to_dag(&p);
        assert_eq!(dag.nodes.len(), 3 + 1 + 2); // bindings + constants + param/return
    }

    #[test]
    fn unused_binding_is_a_non_return_leaf() {
        let p = parse(
            "def f(loc): u = mask(loc, \"park\"); m = mask(loc, \"road\"); return [(\"x\", area_fraction(m))]",
        )
        .unwrap();
        let dag = ast_to_dag(&p);
        let leaves = dag.non_return_leaves();
        assert_eq!(leaves.len(), 1);
        assert!(dag.nodes[leaves[0]].label.starts_with("u ="));
    }

    #[test]
    fn roots_are_exactly_constants_and_param() {
        let p = parse(
            "def f(loc):\n m = mask(loc, \"water\")\n d = distance_transform(m)\n s = mean(d) + 0.5\n return [(\"x\", s * 2.0)]",
        )
        .unwrap();
        let dag = ast_to_dag(&p);
        let roots = dag.roots();
        for id in &roots {
            assert!(matches!(
                dag.nodes[*id].kind,
                NodeKind::Constant | NodeKind::Param
            ));
        }
        let constant_count = dag
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Constant)
            .count();
        assert_eq!(roots.len(), constant_count + 1);
    }

    #[test]
    fn acyclic_by_construction() {
        let p = parse(
            "def f(loc): m = mask(loc, \"a\"); n = not(m); return [(\"x\", area_fraction(and(m, n)))]",
        )
        .unwrap();
        let dag = ast_to_dag(&p);
        // Kahn's algorithm must consume every node
        let mut indeg: Vec<usize> = (0..dag.nodes.len()).map(|id| dag.in_degree(id)).collect();
        let mut queue: Vec<NodeId> = (0..dag.nodes.len()).filter(|&n| indeg[n] == 0).collect();
        let mut seen = 0;
        while let Some(n) = queue.pop() {
            seen += 1;
            for e in dag.edges.iter().filter(|e| e.from == n) {
                indeg[e.to] -= 1;
                if indeg[e.to] == 0 {
                    queue.push(e.to);
                }
            }
        }
        assert_eq!(seen, dag.nodes.len(), "cycle detected");
    }

    #[test]
    fn shared_binding_has_multiple_consumers() {
        let p = parse(
            "def f(loc): m = mask(loc, \"a\"); return [(\"x\", area_fraction(m)), (\"y\", mean(distance_transform(m)))]",
        )
        .unwrap();
        let dag = ast_to_dag(&p);
        let m_node = dag
            .nodes
            .iter()
            .find(|n| n.label.starts_with("m ="))
            .unwrap();
        assert!(dag.out_degree(m_node.id) >= 2);
    }
}
