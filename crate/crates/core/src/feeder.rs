//! Rooted radial feeder model and linearized voltage sensitivities.
//!
//! A feeder is a tree rooted at the slack bus (node 0) with `N` non-slack
//! nodes and exactly `N` lines. The entry `R[i][j]` (`X[i][j]`) of the
//! sensitivity pair is the summed resistance (reactance) of the lines shared
//! by the paths from the slack to nodes `i` and `j`; under the linearized
//! branch-flow model the node voltages are then the affine map
//! `v = R p + X q + v_tilde`.

use ndarray::{Array1, Array2};
use std::fmt;

use crate::linalg::{matvec, FlopCounter};
use crate::validation::ValidationReport;
use crate::{Error, Result};

/// One distribution line, directed from parent to child.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub parent: usize,
    pub child: usize,
    /// Series resistance, p.u. Strictly positive.
    pub r: f64,
    /// Series reactance, p.u. Strictly positive.
    pub x: f64,
}

/// A rooted radial feeder.
///
/// Node ids are dense integers `0..=N` with 0 reserved for the slack bus;
/// `p0`/`q0` hold the fixed, uncontrollable injections at each non-slack
/// node (index 0 of those vectors is node 1). Dispatched device injections
/// are modeled separately and add on top of this background.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    node_count: usize,
    lines: Vec<Line>,
    v0: f64,
    p0: Array1<f64>,
    q0: Array1<f64>,
    /// parent[i] = parent of node i+1, valid once the tree checks out.
    parent: Vec<usize>,
    /// children[n] = child node ids of node n (0..=N), ascending.
    children: Vec<Vec<usize>>,
}

/// Structural problems reported by [`validate_tree`].
#[derive(Debug, Clone, PartialEq)]
pub enum TreeViolation {
    LineCount { expected: usize, got: usize },
    UnknownNode { line: usize, node: usize },
    SlackHasParent { line: usize },
    SelfLoop { line: usize, node: usize },
    DuplicateParent { node: usize },
    NonpositiveImpedance { line: usize },
    Cycle { nodes: Vec<usize> },
    Unreachable { nodes: Vec<usize> },
    NonfiniteInjection { node: usize },
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LineCount { expected, got } => {
                write!(
                    f,
                    "expected {expected} lines for {expected} non-slack nodes, got {got}"
                )
            }
            Self::UnknownNode { line, node } => {
                write!(f, "line {line} references unknown node {node}")
            }
            Self::SlackHasParent { line } => write!(f, "line {line} makes the slack a child"),
            Self::SelfLoop { line, node } => write!(f, "line {line} is a self-loop at {node}"),
            Self::DuplicateParent { node } => write!(f, "node {node} has more than one parent"),
            Self::NonpositiveImpedance { line } => {
                write!(f, "nonpositive impedance on line {line}")
            }
            Self::Cycle { nodes } => {
                let ids: Vec<String> = nodes.iter().map(|n| n.to_string()).collect();
                write!(f, "cycle {{{}}}", ids.join(","))
            }
            Self::Unreachable { nodes } => {
                let ids: Vec<String> = nodes.iter().map(|n| n.to_string()).collect();
                write!(f, "unreachable from slack: {{{}}}", ids.join(","))
            }
            Self::NonfiniteInjection { node } => write!(f, "nonfinite injection at node {node}"),
        }
    }
}

/// Dense sensitivity matrices and the affine voltage offset.
///
/// `r` and `x` are symmetric `N x N` with nonnegative entries; off-diagonal
/// zeros occur exactly when two nodes share no path line (sibling branches
/// off the slack). `v_tilde` already includes the fixed background
/// injections, so [`voltages`] takes controllable injections only.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPair {
    pub r: Array2<f64>,
    pub x: Array2<f64>,
    pub v_tilde: Array1<f64>,
}

impl SensitivityPair {
    pub fn node_count(&self) -> usize {
        self.v_tilde.len()
    }
}

impl FeederModel {
    /// Builds a model and validates it, returning the first report failure
    /// as an error.
    pub fn new(
        node_count: usize,
        lines: Vec<Line>,
        v0: f64,
        p0: Vec<f64>,
        q0: Vec<f64>,
    ) -> Result<Self> {
        if p0.len() != node_count {
            return Err(Error::DimensionMismatch {
                expected: node_count,
                got: p0.len(),
            });
        }
        if q0.len() != node_count {
            return Err(Error::DimensionMismatch {
                expected: node_count,
                got: q0.len(),
            });
        }
        let mut model = Self {
            node_count,
            lines,
            v0,
            p0: Array1::from(p0),
            q0: Array1::from(q0),
            parent: Vec::new(),
            children: Vec::new(),
        };
        validate_tree(&model).into_result()?;
        model.index_topology();
        Ok(model)
    }

    /// Model with zero background injections at every node.
    pub fn without_loads(node_count: usize, lines: Vec<Line>, v0: f64) -> Result<Self> {
        Self::new(
            node_count,
            lines,
            v0,
            vec![0.0; node_count],
            vec![0.0; node_count],
        )
    }

    fn index_topology(&mut self) {
        self.parent = vec![usize::MAX; self.node_count];
        self.children = vec![Vec::new(); self.node_count + 1];
        for line in &self.lines {
            self.parent[line.child - 1] = line.parent;
            self.children[line.parent].push(line.child);
        }
        for c in &mut self.children {
            c.sort_unstable();
        }
    }

    /// Number of non-slack nodes `N`.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn p0(&self) -> &Array1<f64> {
        &self.p0
    }

    pub fn q0(&self) -> &Array1<f64> {
        &self.q0
    }

    /// Parent of a non-slack node.
    pub fn parent_of(&self, node: usize) -> Result<usize> {
        if node == 0 || node > self.node_count {
            return Err(Error::UnknownNode(node));
        }
        Ok(self.parent[node - 1])
    }

    /// Children of any node (including the slack), ascending.
    pub fn children_of(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// The line feeding `node` from its parent.
    pub fn line_into(&self, node: usize) -> Result<&Line> {
        if node == 0 || node > self.node_count {
            return Err(Error::UnknownNode(node));
        }
        self.lines
            .iter()
            .find(|l| l.child == node)
            .ok_or(Error::UnknownNode(node))
    }

    /// Non-slack nodes in parent-before-child order starting from the
    /// slack's children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.node_count);
        let mut stack: Vec<usize> = self.children[0].iter().rev().copied().collect();
        while let Some(n) = stack.pop() {
            order.push(n);
            for &c in self.children[n].iter().rev() {
                stack.push(c);
            }
        }
        order
    }

    /// All nodes of the subtree rooted at `node` (inclusive), ascending.
    pub fn subtree_of(&self, node: usize) -> Result<Vec<usize>> {
        if node == 0 || node > self.node_count {
            return Err(Error::UnknownNode(node));
        }
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend_from_slice(&self.children[n]);
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Checks the rooted-tree invariants and collects every violation found.
pub fn validate_tree(model: &FeederModel) -> ValidationReport<TreeViolation> {
    let n = model.node_count;
    let mut violations = Vec::new();

    if model.lines.len() != n {
        violations.push(TreeViolation::LineCount {
            expected: n,
            got: model.lines.len(),
        });
    }

    let mut parent_seen: Vec<Option<usize>> = vec![None; n + 1];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (idx, line) in model.lines.iter().enumerate() {
        let lineno = idx + 1;
        let mut bad_ids = false;
        for node in [line.parent, line.child] {
            if node > n {
                violations.push(TreeViolation::UnknownNode { line: lineno, node });
                bad_ids = true;
            }
        }
        if bad_ids {
            continue;
        }
        if line.child == 0 {
            violations.push(TreeViolation::SlackHasParent { line: lineno });
            continue;
        }
        if line.parent == line.child {
            violations.push(TreeViolation::SelfLoop {
                line: lineno,
                node: line.child,
            });
            continue;
        }
        if !(line.r > 0.0) || !(line.x > 0.0) {
            violations.push(TreeViolation::NonpositiveImpedance { line: lineno });
        }
        match parent_seen[line.child] {
            Some(_) => violations.push(TreeViolation::DuplicateParent { node: line.child }),
            None => {
                parent_seen[line.child] = Some(line.parent);
                children[line.parent].push(line.child);
            }
        }
    }

    for i in 0..n {
        if !model.p0[i].is_finite() || !model.q0[i].is_finite() {
            violations.push(TreeViolation::NonfiniteInjection { node: i + 1 });
        }
    }

    // Reachability from the slack over the recorded parent links.
    let mut reached = vec![false; n + 1];
    reached[0] = true;
    let mut stack = vec![0usize];
    while let Some(node) = stack.pop() {
        for &c in &children[node] {
            if !reached[c] {
                reached[c] = true;
                stack.push(c);
            }
        }
    }
    let unreachable: Vec<usize> = (1..=n).filter(|&i| !reached[i]).collect();
    if !unreachable.is_empty() {
        // Walk parent pointers inside the unreachable set to name cycles.
        let mut in_cycle = vec![false; n + 1];
        for &start in &unreachable {
            let mut slow = start;
            let mut seen = vec![start];
            while let Some(p) = parent_seen[slow] {
                if p == 0 || reached[p] || in_cycle[p] {
                    seen.clear();
                    break;
                }
                if seen.contains(&p) {
                    // Everything from p onwards closes the loop.
                    let pos = seen.iter().position(|&s| s == p).unwrap();
                    for &m in &seen[pos..] {
                        in_cycle[m] = true;
                    }
                    seen.clear();
                    break;
                }
                seen.push(p);
                slow = p;
            }
        }
        let mut cycle_nodes: Vec<usize> = (1..=n).filter(|&i| in_cycle[i]).collect();
        let strays: Vec<usize> = unreachable
            .iter()
            .copied()
            .filter(|&i| !in_cycle[i])
            .collect();
        if !cycle_nodes.is_empty() {
            cycle_nodes.sort_unstable();
            violations.push(TreeViolation::Cycle { nodes: cycle_nodes });
        }
        if !strays.is_empty() {
            violations.push(TreeViolation::Unreachable { nodes: strays });
        }
    }

    ValidationReport::new(violations)
}

/// Lines on the unique path from the slack down to node `i`, in root-first
/// order.
pub fn path_to_root(model: &FeederModel, node: usize) -> Result<Vec<Line>> {
    if node == 0 {
        return Err(Error::SlackHasNoPath);
    }
    if node > model.node_count() {
        return Err(Error::UnknownNode(node));
    }
    let mut rev = Vec::new();
    let mut cur = node;
    while cur != 0 {
        let line = *model.line_into(cur)?;
        cur = line.parent;
        rev.push(line);
    }
    rev.reverse();
    Ok(rev)
}

/// Builds the dense sensitivity pair in `O(N^2)`.
///
/// Rows are filled in parent-before-child order from the recurrence
/// `R[i][j] = R[parent(i)][j] + r_i * [j in subtree(i)]`, which accumulates
/// each shared path root-first; entries with the same common path therefore
/// come out bitwise identical. The matrix is then mirrored from the upper
/// triangle so symmetry holds exactly.
pub fn build_sensitivity(model: &FeederModel) -> Result<SensitivityPair> {
    validate_tree(model).into_result()?;
    let n = model.node_count();

    // Euler tour intervals for O(1) subtree membership.
    let mut tin = vec![0usize; n + 1];
    let mut tout = vec![0usize; n + 1];
    let mut clock = 0usize;
    // Iterative DFS with explicit post-visit records.
    let mut stack: Vec<(usize, bool)> = vec![(0, false)];
    while let Some((node, done)) = stack.pop() {
        if done {
            tout[node] = clock;
            continue;
        }
        tin[node] = clock;
        clock += 1;
        stack.push((node, true));
        for &c in model.children_of(node).iter().rev() {
            stack.push((c, false));
        }
    }
    let in_subtree = |root: usize, node: usize| tin[root] <= tin[node] && tin[node] < tout[root];

    let mut r = Array2::<f64>::zeros((n, n));
    let mut x = Array2::<f64>::zeros((n, n));
    for i in model.topological_order() {
        let line = model.line_into(i)?;
        let pi = line.parent;
        for j in 1..=n {
            let (base_r, base_x) = if pi == 0 {
                (0.0, 0.0)
            } else {
                (r[[pi - 1, j - 1]], x[[pi - 1, j - 1]])
            };
            let inc = in_subtree(i, j);
            r[[i - 1, j - 1]] = base_r + if inc { line.r } else { 0.0 };
            x[[i - 1, j - 1]] = base_x + if inc { line.x } else { 0.0 };
        }
    }
    // Mirror the upper triangle onto the lower.
    for a in 0..n {
        for b in (a + 1)..n {
            r[[b, a]] = r[[a, b]];
            x[[b, a]] = x[[a, b]];
        }
    }

    let mut flops = FlopCounter::new();
    let mut v_tilde = matvec(&r, model.p0(), &mut flops);
    let xq = matvec(&x, model.q0(), &mut flops);
    for i in 0..n {
        v_tilde[i] += xq[i] + model.v0();
    }

    Ok(SensitivityPair { r, x, v_tilde })
}

/// Evaluates the linearized voltage map `v = R p + X q + v_tilde`.
pub fn voltages(sens: &SensitivityPair, p: &Array1<f64>, q: &Array1<f64>) -> Result<Array1<f64>> {
    let n = sens.node_count();
    for v in [p.len(), q.len()] {
        if v != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: v,
            });
        }
    }
    let mut flops = FlopCounter::new();
    let mut v = matvec(&sens.r, p, &mut flops);
    let xq = matvec(&sens.x, q, &mut flops);
    for i in 0..n {
        v[i] += xq[i] + sens.v_tilde[i];
    }
    Ok(v)
}

/// Net active power injected at the feeder head: `P0 = -P_I - sum(p)`.
pub fn feeder_head_power(p: &Array1<f64>, p_inelastic: f64) -> f64 {
    let mut total = 0.0;
    for &v in p.iter() {
        total += v;
    }
    -p_inelastic - total
}
