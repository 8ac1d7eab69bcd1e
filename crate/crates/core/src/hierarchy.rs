//! Hierarchical distributed implementation of the primal-dual iteration.
//!
//! The feeder is partitioned into descendant-closed subtrees ("autonomous
//! grids"), each managed by a regional coordinator (RC) that knows only its
//! own subtree's lines plus the two trunk scalars for the shared path back
//! to the slack. A central coordinator (CC) knows only the reduced network
//! formed by the subtree roots and the unclustered nodes. Any node of one
//! subtree shares the same path-to-slack intersection with every node of
//! another subtree, so the cross-subtree sensitivity entry collapses to the
//! root-pair entry and the dense coupling products `R d`, `X d` (with
//! `d = mu_hi - mu_lo`) decompose into
//!
//! * an intra-subtree product each RC computes from its own block,
//! * one shared scalar per subtree the CC assembles from per-subtree dual
//!   aggregates over reduced-network entries, and
//! * reduced-network products for the unclustered nodes.
//!
//! Rounds are barrier-synchronized: node updates, dual aggregation upward,
//! CC outer terms, RC inner terms, a voltage measurement from the physical
//! system, and the head-gradient broadcast. Summation order is fixed
//! (ascending node index within an agent, ascending subtree index at the
//! CC) so runs are deterministic, and the iterate sequence matches the
//! central driver up to floating-point regrouping.

use ndarray::{Array1, Array2};
use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use crate::central::{
    DivergenceDetector, RunTrace, SolveOptions, StopCriterion, TraceRow, VoltageSource,
    HEAD_POWER_WARMUP,
};
use crate::feeder::{build_sensitivity, feeder_head_power, FeederModel, Line, SensitivityPair};
use crate::linalg::FlopCounter;
use crate::opf::{project_box, DeviceSpec, IterateState, OpfProblem};
use crate::validation::ValidationReport;
use crate::{Error, Result};

/// One autonomous grid: a subtree root and its full member set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutonomousGrid {
    pub root: usize,
    /// Sorted ascending; contains `root` and all of its descendants.
    pub members: Vec<usize>,
}

/// Grouping of the feeder into disjoint subtrees plus unclustered nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    ags: Vec<AutonomousGrid>,
    unclustered: Vec<usize>,
}

impl Partition {
    /// Builds the partition induced by the given subtree roots; everything
    /// outside the subtrees stays unclustered.
    pub fn from_roots(model: &FeederModel, roots: &[usize]) -> Result<Self> {
        let n = model.node_count();
        let mut assigned = vec![false; n + 1];
        let mut ags = Vec::with_capacity(roots.len());
        for &root in roots {
            let members = model.subtree_of(root)?;
            for &m in &members {
                if assigned[m] {
                    return Err(Error::Validation(format!(
                        "subtree roots overlap: node {m} claimed twice"
                    )));
                }
                assigned[m] = true;
            }
            ags.push(AutonomousGrid { root, members });
        }
        ags.sort_by_key(|ag| ag.root);
        let unclustered = (1..=n).filter(|&i| !assigned[i]).collect();
        Ok(Self { ags, unclustered })
    }

    /// Assembles a partition from explicit parts without checking anything;
    /// run [`validate_partition`] separately.
    pub fn from_parts(ags: Vec<AutonomousGrid>, unclustered: Vec<usize>) -> Self {
        Self { ags, unclustered }
    }

    pub fn ags(&self) -> &[AutonomousGrid] {
        &self.ags
    }

    pub fn unclustered(&self) -> &[usize] {
        &self.unclustered
    }

    pub fn ag_count(&self) -> usize {
        self.ags.len()
    }

    pub fn clustered_node_count(&self) -> usize {
        self.ags.iter().map(|ag| ag.members.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionViolation {
    UnknownNode {
        node: usize,
    },
    SlackIncluded {
        ag: usize,
    },
    RootNotMember {
        ag: usize,
    },
    /// A member that is not a descendant of the declared root.
    NotSubtree {
        ag: usize,
        node: usize,
    },
    /// A descendant of the root missing from the member set.
    NotDescendantClosed {
        ag: usize,
        missing: usize,
    },
    Nondisjoint {
        node: usize,
    },
    CoverageGap {
        node: usize,
    },
    DuplicateUnclustered {
        node: usize,
    },
}

impl fmt::Display for PartitionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownNode { node } => write!(f, "unknown node {node}"),
            Self::SlackIncluded { ag } => write!(f, "subtree {ag} includes the slack"),
            Self::RootNotMember { ag } => write!(f, "subtree {ag} does not contain its root"),
            Self::NotSubtree { ag, node } => {
                write!(
                    f,
                    "node {node} in subtree {ag} is not a descendant of its root"
                )
            }
            Self::NotDescendantClosed { ag, missing } => {
                write!(
                    f,
                    "subtree {ag} not descendant-closed: missing node {missing}"
                )
            }
            Self::Nondisjoint { node } => write!(f, "nondisjoint: node {node} assigned twice"),
            Self::CoverageGap { node } => write!(f, "node {node} not covered"),
            Self::DuplicateUnclustered { node } => {
                write!(f, "node {node} listed unclustered twice")
            }
        }
    }
}

/// Checks subtree closure, disjointness, and coverage.
pub fn validate_partition(
    model: &FeederModel,
    partition: &Partition,
) -> ValidationReport<PartitionViolation> {
    let n = model.node_count();
    let mut violations = Vec::new();
    let mut ag_count = vec![0usize; n + 1];
    let mut uncl_count = vec![0usize; n + 1];

    for (k, ag) in partition.ags().iter().enumerate() {
        let mut ids_ok = true;
        for &m in &ag.members {
            if m == 0 {
                violations.push(PartitionViolation::SlackIncluded { ag: k });
                ids_ok = false;
            } else if m > n {
                violations.push(PartitionViolation::UnknownNode { node: m });
                ids_ok = false;
            } else {
                ag_count[m] += 1;
            }
        }
        if ag.root == 0 || ag.root > n {
            violations.push(PartitionViolation::UnknownNode { node: ag.root });
            continue;
        }
        if !ag.members.contains(&ag.root) {
            violations.push(PartitionViolation::RootNotMember { ag: k });
        }
        if !ids_ok {
            continue;
        }
        let expected = model.subtree_of(ag.root).expect("root id checked above");
        let expected_set: HashSet<usize> = expected.iter().copied().collect();
        let member_set: HashSet<usize> = ag.members.iter().copied().collect();
        for &m in &ag.members {
            if !expected_set.contains(&m) {
                violations.push(PartitionViolation::NotSubtree { ag: k, node: m });
            }
        }
        for &e in &expected {
            if !member_set.contains(&e) {
                violations.push(PartitionViolation::NotDescendantClosed { ag: k, missing: e });
            }
        }
    }

    for &u in partition.unclustered() {
        if u == 0 || u > n {
            violations.push(PartitionViolation::UnknownNode { node: u });
        } else {
            uncl_count[u] += 1;
        }
    }

    for node in 1..=n {
        if ag_count[node] > 1 || (ag_count[node] >= 1 && uncl_count[node] >= 1) {
            violations.push(PartitionViolation::Nondisjoint { node });
        }
        if uncl_count[node] > 1 {
            violations.push(PartitionViolation::DuplicateUnclustered { node });
        }
        if ag_count[node] == 0 && uncl_count[node] == 0 {
            violations.push(PartitionViolation::CoverageGap { node });
        }
    }

    ValidationReport::new(violations)
}

/// The network the CC manages: subtree roots, unclustered nodes, and the
/// sensitivity entries among them, computed from the reduced topology only.
#[derive(Debug, Clone)]
pub struct ReducedNetwork {
    /// Global ids of reduced nodes, ascending.
    nodes: Vec<usize>,
    /// Global id -> local index (usize::MAX when absent).
    index: Vec<usize>,
    sens: SensitivityPair,
}

impl ReducedNetwork {
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn contains(&self, node: usize) -> bool {
        node < self.index.len() && self.index[node] != usize::MAX
    }

    fn local(&self, node: usize) -> Result<usize> {
        if self.contains(node) {
            Ok(self.index[node])
        } else {
            Err(Error::InfoHiding(format!(
                "node {node} is not part of the reduced network"
            )))
        }
    }

    /// Sensitivity entries between two reduced nodes (global ids).
    pub fn r_entry(&self, a: usize, b: usize) -> Result<f64> {
        Ok(self.sens.r[[self.local(a)?, self.local(b)?]])
    }

    pub fn x_entry(&self, a: usize, b: usize) -> Result<f64> {
        Ok(self.sens.x[[self.local(a)?, self.local(b)?]])
    }
}

/// Builds the reduced network from the reduced topology alone.
///
/// In a valid partition every ancestor of a reduced node is itself reduced
/// (or the slack), so the reduced nodes with their original parent lines
/// form a tree whose path sums equal the full-network sensitivity entries
/// at the same node pairs.
pub fn build_reduced(model: &FeederModel, partition: &Partition) -> Result<ReducedNetwork> {
    validate_partition(model, partition).into_result()?;
    let mut nodes: Vec<usize> = partition
        .ags()
        .iter()
        .map(|ag| ag.root)
        .chain(partition.unclustered().iter().copied())
        .collect();
    nodes.sort_unstable();

    let mut index = vec![usize::MAX; model.node_count() + 1];
    for (local, &g) in nodes.iter().enumerate() {
        index[g] = local + 1; // local feeder ids are 1-based
    }

    let mut lines = Vec::with_capacity(nodes.len());
    for &g in &nodes {
        let line = model.line_into(g)?;
        let parent_local = if line.parent == 0 {
            0
        } else if index[line.parent] != usize::MAX {
            index[line.parent]
        } else {
            return Err(Error::Validation(format!(
                "reduced node {g} has non-reduced parent {}",
                line.parent
            )));
        };
        lines.push(Line {
            parent: parent_local,
            child: index[g],
            r: line.r,
            x: line.x,
        });
    }
    let reduced_model = FeederModel::without_loads(nodes.len(), lines, model.v0())?;
    let sens = build_sensitivity(&reduced_model)?;
    // store 0-based local indices for entry lookups
    for &g in &nodes {
        index[g] -= 1;
    }
    Ok(ReducedNetwork { nodes, index, sens })
}

/// Outcome of the common-path collapse check.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseOutcome {
    pub holds: bool,
    pub counterexample: Option<CollapseWitness>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseWitness {
    pub i: usize,
    pub j: usize,
    pub entry: f64,
    pub expected: f64,
}

/// Verifies that every cross-subtree entry of the full sensitivity matrices
/// equals the corresponding root-pair entry, and every unclustered-vs-
/// subtree entry equals the node-to-root entry. Equality is exact: both
/// values accumulate the same lines in the same order.
pub fn common_path_collapse(sens: &SensitivityPair, partition: &Partition) -> CollapseOutcome {
    let witness = |i: usize, j: usize, entry: f64, expected: f64| CollapseOutcome {
        holds: false,
        counterexample: Some(CollapseWitness {
            i,
            j,
            entry,
            expected,
        }),
    };
    let ags = partition.ags();
    for (h, ag_h) in ags.iter().enumerate() {
        for ag_k in ags.iter().skip(h + 1) {
            let er = sens.r[[ag_h.root - 1, ag_k.root - 1]];
            let ex = sens.x[[ag_h.root - 1, ag_k.root - 1]];
            for &i in &ag_h.members {
                for &j in &ag_k.members {
                    if sens.r[[i - 1, j - 1]] != er {
                        return witness(i, j, sens.r[[i - 1, j - 1]], er);
                    }
                    if sens.x[[i - 1, j - 1]] != ex {
                        return witness(i, j, sens.x[[i - 1, j - 1]], ex);
                    }
                }
            }
        }
    }
    for &u in partition.unclustered() {
        for ag in ags {
            let er = sens.r[[u - 1, ag.root - 1]];
            let ex = sens.x[[u - 1, ag.root - 1]];
            for &j in &ag.members {
                if sens.r[[u - 1, j - 1]] != er {
                    return witness(u, j, sens.r[[u - 1, j - 1]], er);
                }
                if sens.x[[u - 1, j - 1]] != ex {
                    return witness(u, j, sens.x[[u - 1, j - 1]], ex);
                }
            }
        }
    }
    CollapseOutcome {
        holds: true,
        counterexample: None,
    }
}

/// What one node agent knows: its own device, bounds, and the algorithm's
/// dual regularization.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeView {
    pub node: usize,
    pub device: DeviceSpec,
    pub v_lo: f64,
    pub v_hi: f64,
    pub phi: f64,
}

/// What one regional coordinator knows: its subtree topology and the trunk
/// scalars the CC informed it of. The intra-subtree sensitivity block is
/// derived from exactly that data, so an `RcView` cannot hold entries
/// involving nodes outside its subtree.
#[derive(Debug, Clone)]
pub struct RcView {
    /// Index of this subtree in the partition, ascending by root id.
    pub index: usize,
    pub root: usize,
    /// Members ascending (including the root).
    members: Vec<usize>,
    r_block: Array2<f64>,
    x_block: Array2<f64>,
}

impl RcView {
    /// Builds the coordinator's view from subtree-internal lines and the
    /// trunk entries `R[root][root]`, `X[root][root]`.
    ///
    /// Every line must connect two members; anything else is rejected as an
    /// information-hiding violation.
    pub fn new(
        index: usize,
        root: usize,
        members: Vec<usize>,
        lines: &[Line],
        trunk_r: f64,
        trunk_x: f64,
    ) -> Result<Self> {
        let mut members = members;
        members.sort_unstable();
        if !members.contains(&root) {
            return Err(Error::InfoHiding(format!(
                "subtree {index} member list does not contain root {root}"
            )));
        }
        let member_set: HashSet<usize> = members.iter().copied().collect();
        if member_set.len() != members.len() {
            return Err(Error::InfoHiding(format!(
                "subtree {index} has duplicate members"
            )));
        }
        // local ids: root -> 0 (local slack), other members ascending -> 1..
        let locals: Vec<usize> = members.iter().copied().filter(|&m| m != root).collect();
        let local_of = |g: usize| -> Option<usize> {
            if g == root {
                Some(0)
            } else {
                locals.binary_search(&g).ok().map(|i| i + 1)
            }
        };
        let mut local_lines = Vec::with_capacity(lines.len());
        for line in lines {
            let (Some(lp), Some(lc)) = (local_of(line.parent), local_of(line.child)) else {
                return Err(Error::InfoHiding(format!(
                    "subtree {index} given line ({}, {}) touching a node outside its members",
                    line.parent, line.child
                )));
            };
            local_lines.push(Line {
                parent: lp,
                child: lc,
                r: line.r,
                x: line.x,
            });
        }
        let local_model = FeederModel::without_loads(locals.len(), local_lines, 1.0)
            .map_err(|e| Error::Validation(format!("subtree {index} is not a tree: {e}")))?;
        let local_sens = build_sensitivity(&local_model)?;

        let nk = members.len();
        let mut r_block = Array2::zeros((nk, nk));
        let mut x_block = Array2::zeros((nk, nk));
        for (a, &ga) in members.iter().enumerate() {
            for (b, &gb) in members.iter().enumerate() {
                let (lr, lx) = match (local_of(ga), local_of(gb)) {
                    (Some(0), _) | (_, Some(0)) => (0.0, 0.0),
                    (Some(la), Some(lb)) => (
                        local_sens.r[[la - 1, lb - 1]],
                        local_sens.x[[la - 1, lb - 1]],
                    ),
                    _ => unreachable!("members checked above"),
                };
                r_block[[a, b]] = trunk_r + lr;
                x_block[[a, b]] = trunk_x + lx;
            }
        }
        Ok(Self {
            index,
            root,
            members,
            r_block,
            x_block,
        })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    /// Intra-subtree coupling terms for every member, from per-member dual
    /// differences (aligned with `members()` order).
    pub fn inner_coupling(&self, diffs: &[f64], flops: &mut FlopCounter) -> Vec<(f64, f64)> {
        assert_eq!(diffs.len(), self.members.len());
        let nk = self.members.len();
        let mut out = Vec::with_capacity(nk);
        for a in 0..nk {
            let mut alpha = 0.0;
            let mut beta = 0.0;
            for b in 0..nk {
                alpha += self.r_block[[a, b]] * diffs[b];
                beta += self.x_block[[a, b]] * diffs[b];
            }
            flops.add_multiply_adds(2 * nk as u64);
            out.push((alpha, beta));
        }
        out
    }

    /// Sum of the members' dual differences, ascending member order.
    pub fn aggregate(&self, diffs: &[f64]) -> f64 {
        let mut s = 0.0;
        for &d in diffs {
            s += d;
        }
        s
    }
}

/// What the central coordinator knows: the reduced network plus the
/// substation-side quantities (head cost and total inelastic load).
#[derive(Debug, Clone)]
pub struct CcView {
    pub reduced: ReducedNetwork,
    pub alpha: f64,
    pub p0_hat: f64,
    pub p_inelastic: f64,
}

impl CcView {
    pub fn head_gradient(&self, p0: f64) -> f64 {
        2.0 * self.alpha * (p0 - self.p0_hat)
    }

    /// Outer coupling scalars for every subtree: the cross-subtree and
    /// unclustered contributions collapsed onto root-pair entries. One
    /// `(alpha_out, beta_out)` pair per subtree, shared by all its members.
    pub fn outer_coupling(
        &self,
        partition: &Partition,
        aggregates: &[f64],
        uncl_diffs: &[f64],
        flops: &mut FlopCounter,
    ) -> Result<Vec<(f64, f64)>> {
        let ags = partition.ags();
        assert_eq!(aggregates.len(), ags.len());
        assert_eq!(uncl_diffs.len(), partition.unclustered().len());
        let mut out = Vec::with_capacity(ags.len());
        for (k, ag_k) in ags.iter().enumerate() {
            let mut alpha = 0.0;
            let mut beta = 0.0;
            let mut mas = 0u64;
            for (h, ag_h) in ags.iter().enumerate() {
                if h == k {
                    continue;
                }
                alpha += self.reduced.r_entry(ag_h.root, ag_k.root)? * aggregates[h];
                beta += self.reduced.x_entry(ag_h.root, ag_k.root)? * aggregates[h];
                mas += 2;
            }
            for (ui, &u) in partition.unclustered().iter().enumerate() {
                alpha += self.reduced.r_entry(u, ag_k.root)? * uncl_diffs[ui];
                beta += self.reduced.x_entry(u, ag_k.root)? * uncl_diffs[ui];
                mas += 2;
            }
            flops.add_multiply_adds(mas);
            out.push((alpha, beta));
        }
        Ok(out)
    }

    /// Full coupling terms for the unclustered nodes, computed entirely on
    /// the reduced network.
    pub fn unclustered_coupling(
        &self,
        partition: &Partition,
        aggregates: &[f64],
        uncl_diffs: &[f64],
        flops: &mut FlopCounter,
    ) -> Result<Vec<(f64, f64)>> {
        let uncl = partition.unclustered();
        let mut out = Vec::with_capacity(uncl.len());
        for &i in uncl {
            let mut alpha = 0.0;
            let mut beta = 0.0;
            let mut mas = 0u64;
            for (k, ag) in partition.ags().iter().enumerate() {
                alpha += self.reduced.r_entry(i, ag.root)? * aggregates[k];
                beta += self.reduced.x_entry(i, ag.root)? * aggregates[k];
                mas += 2;
            }
            for (uj, &j) in uncl.iter().enumerate() {
                alpha += self.reduced.r_entry(i, j)? * uncl_diffs[uj];
                beta += self.reduced.x_entry(i, j)? * uncl_diffs[uj];
                mas += 2;
            }
            flops.add_multiply_adds(mas);
            out.push((alpha, beta));
        }
        Ok(out)
    }
}

/// The complete agent population for one run.
#[derive(Debug, Clone)]
pub struct AgentViews {
    pub cc: CcView,
    pub rcs: Vec<RcView>,
    pub nodes: Vec<NodeView>,
}

/// Constructs every agent's view from the model, partition, and problem.
///
/// The full sensitivity matrices are never formed: the CC's entries come
/// from the reduced topology, each RC's block from its own subtree plus the
/// trunk scalars the CC provides, and node views carry only local data.
pub fn build_agent_views(
    model: &FeederModel,
    partition: &Partition,
    prob: &OpfProblem,
) -> Result<AgentViews> {
    if prob.node_count() != model.node_count() {
        return Err(Error::DimensionMismatch {
            expected: model.node_count(),
            got: prob.node_count(),
        });
    }
    let reduced = build_reduced(model, partition)?;
    let mut rcs = Vec::with_capacity(partition.ag_count());
    for (k, ag) in partition.ags().iter().enumerate() {
        let member_set: HashSet<usize> = ag.members.iter().copied().collect();
        let lines: Vec<Line> = model
            .lines()
            .iter()
            .copied()
            .filter(|l| member_set.contains(&l.child) && l.child != ag.root)
            .collect();
        let trunk_r = reduced.r_entry(ag.root, ag.root)?;
        let trunk_x = reduced.x_entry(ag.root, ag.root)?;
        rcs.push(RcView::new(
            k,
            ag.root,
            ag.members.clone(),
            &lines,
            trunk_r,
            trunk_x,
        )?);
    }
    let nodes = (1..=model.node_count())
        .map(|i| NodeView {
            node: i,
            device: *prob.device(i),
            v_lo: prob.v_lo()[i - 1],
            v_hi: prob.v_hi()[i - 1],
            phi: prob.phi(),
        })
        .collect();
    let cc = CcView {
        reduced,
        alpha: prob.alpha(),
        p0_hat: prob.p0_hat(),
        p_inelastic: prob.p_inelastic(),
    };
    Ok(AgentViews { cc, rcs, nodes })
}

/// Assembles the full coupling vectors `(R d, X d)` from agent views alone.
pub fn coupling_via_hierarchy(
    partition: &Partition,
    views: &AgentViews,
    mu_diff: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let n = mu_diff.len();
    let mut flops = FlopCounter::new();
    let (alpha, beta) = assemble_coupling(partition, views, mu_diff, &mut flops, None)?;
    debug_assert_eq!(alpha.len(), n);
    Ok((alpha, beta))
}

/// Message traffic bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentId {
    Node(usize),
    Rc(usize),
    Cc,
    /// Broadcast to all agents.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    /// Per-node dual difference.
    DualDiff,
    /// Per-subtree aggregate of dual differences.
    DualAggregate,
    /// Shared outer coupling pair for one subtree.
    CouplingOut,
    /// Final per-node coupling pair.
    CouplingTotal,
    /// Head-cost derivative broadcast.
    HeadGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageRecord {
    pub sender: AgentId,
    pub receiver: AgentId,
    pub kind: PayloadKind,
    pub scalars: u64,
}

/// Per-round message totals, grouped by channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundTotals {
    pub round: usize,
    pub node_to_rc: u64,
    pub uncl_to_cc: u64,
    pub rc_to_cc: u64,
    pub cc_to_rc: u64,
    pub rc_to_node: u64,
    pub cc_to_uncl: u64,
    pub broadcast: u64,
}

impl RoundTotals {
    pub fn total_scalars(&self) -> u64 {
        self.node_to_rc
            + self.uncl_to_cc
            + self.rc_to_cc
            + self.cc_to_rc
            + self.rc_to_node
            + self.cc_to_uncl
            + self.broadcast
    }
}

/// Log of everything that crossed an agent boundary, per round.
#[derive(Debug, Clone, Default)]
pub struct RoundMessageLog {
    pub per_round: Vec<RoundTotals>,
    /// Individual records, kept only when `detailed_messages` is set.
    pub detailed: Option<Vec<Vec<MessageRecord>>>,
}

impl RoundMessageLog {
    fn push_round(&mut self, totals: RoundTotals, records: Option<Vec<MessageRecord>>) {
        self.per_round.push(totals);
        if let Some(detail) = &mut self.detailed {
            detail.push(records.unwrap_or_default());
        }
    }
}

/// Runs steps 2-4 of a round: aggregation, CC outer terms, RC inner terms.
/// Returns the assembled per-node coupling vectors. When `records` is given
/// the individual messages are appended to it.
fn assemble_coupling(
    partition: &Partition,
    views: &AgentViews,
    mu_diff: &Array1<f64>,
    flops: &mut FlopCounter,
    mut records: Option<&mut Vec<MessageRecord>>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let n = mu_diff.len();
    let ags = partition.ags();
    let uncl = partition.unclustered();

    // step 2: nodes report dual differences; RCs aggregate.
    let mut aggregates = Vec::with_capacity(ags.len());
    let mut member_diffs: Vec<Vec<f64>> = Vec::with_capacity(ags.len());
    for (k, rc) in views.rcs.iter().enumerate() {
        let diffs: Vec<f64> = rc.members().iter().map(|&m| mu_diff[m - 1]).collect();
        if let Some(rec) = records.as_mut() {
            for &m in rc.members() {
                rec.push(MessageRecord {
                    sender: AgentId::Node(m),
                    receiver: AgentId::Rc(k),
                    kind: PayloadKind::DualDiff,
                    scalars: 1,
                });
            }
        }
        let s = rc.aggregate(&diffs);
        if let Some(rec) = records.as_mut() {
            rec.push(MessageRecord {
                sender: AgentId::Rc(k),
                receiver: AgentId::Cc,
                kind: PayloadKind::DualAggregate,
                scalars: 1,
            });
        }
        aggregates.push(s);
        member_diffs.push(diffs);
    }
    let uncl_diffs: Vec<f64> = uncl.iter().map(|&u| mu_diff[u - 1]).collect();
    if let Some(rec) = records.as_mut() {
        for &u in uncl {
            rec.push(MessageRecord {
                sender: AgentId::Node(u),
                receiver: AgentId::Cc,
                kind: PayloadKind::DualDiff,
                scalars: 1,
            });
        }
    }

    // step 3: CC computes outer terms and the unclustered totals.
    let outer = views
        .cc
        .outer_coupling(partition, &aggregates, &uncl_diffs, flops)?;
    let uncl_total = views
        .cc
        .unclustered_coupling(partition, &aggregates, &uncl_diffs, flops)?;
    if let Some(rec) = records.as_mut() {
        for k in 0..ags.len() {
            rec.push(MessageRecord {
                sender: AgentId::Cc,
                receiver: AgentId::Rc(k),
                kind: PayloadKind::CouplingOut,
                scalars: 2,
            });
        }
        for &u in uncl {
            rec.push(MessageRecord {
                sender: AgentId::Cc,
                receiver: AgentId::Node(u),
                kind: PayloadKind::CouplingTotal,
                scalars: 2,
            });
        }
    }

    // step 4: RCs add their intra-subtree products to the shared scalar.
    let mut alpha = Array1::zeros(n);
    let mut beta = Array1::zeros(n);
    for (k, rc) in views.rcs.iter().enumerate() {
        let inner = rc.inner_coupling(&member_diffs[k], flops);
        let (a_out, b_out) = outer[k];
        for (slot, &m) in rc.members().iter().enumerate() {
            alpha[m - 1] = inner[slot].0 + a_out;
            beta[m - 1] = inner[slot].1 + b_out;
            if let Some(rec) = records.as_mut() {
                rec.push(MessageRecord {
                    sender: AgentId::Rc(k),
                    receiver: AgentId::Node(m),
                    kind: PayloadKind::CouplingTotal,
                    scalars: 2,
                });
            }
        }
    }
    for (ui, &u) in uncl.iter().enumerate() {
        alpha[u - 1] = uncl_total[ui].0;
        beta[u - 1] = uncl_total[ui].1;
    }

    Ok((alpha, beta))
}

fn round_totals(round: usize, partition: &Partition) -> RoundTotals {
    let clustered = partition.clustered_node_count() as u64;
    let k = partition.ag_count() as u64;
    let u = partition.unclustered().len() as u64;
    RoundTotals {
        round,
        node_to_rc: clustered,
        uncl_to_cc: u,
        rc_to_cc: k,
        cc_to_rc: 2 * k,
        rc_to_node: 2 * clustered,
        cc_to_uncl: 2 * u,
        broadcast: 1,
    }
}

/// Runs the hierarchical iteration. Mathematically it reproduces the
/// central driver step for step; the trace's flop column counts only the
/// multiply-adds the RCs and the CC actually execute on their blocks.
pub fn run_hierarchical(
    prob: &OpfProblem,
    views: &AgentViews,
    partition: &Partition,
    opts: &SolveOptions,
    source: &VoltageSource,
) -> Result<(IterateState, RunTrace, RoundMessageLog)> {
    let n = prob.node_count();
    check_views_coherent(prob, views, partition, n)?;
    if !(opts.epsilon > 0.0) {
        return Err(Error::Infeasible(format!(
            "epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    let eps = opts.epsilon;
    let start = Instant::now();

    let (mut p, mut q) = prob.initial_dispatch();
    let mut mu_lo = Array1::<f64>::zeros(n);
    let mut mu_hi = Array1::<f64>::zeros(n);
    let mut v = source.voltages(&p, &q)?;
    let mut p0 = feeder_head_power(&p, views.cc.p_inelastic);
    let mut c0p = views.cc.head_gradient(p0);
    // duals start at zero, so the first coupling terms are zero without
    // any computation or exchange
    let mut alpha = Array1::<f64>::zeros(n);
    let mut beta = Array1::<f64>::zeros(n);

    let mut trace = RunTrace::default();
    let mut log = RoundMessageLog {
        per_round: Vec::new(),
        detailed: if opts.detailed_messages {
            Some(Vec::new())
        } else {
            None
        },
    };
    let mut iterates = if opts.record_iterates {
        Some(Vec::new())
    } else {
        None
    };
    let push_iterate = |store: &mut Option<Vec<Vec<f64>>>,
                        p: &Array1<f64>,
                        q: &Array1<f64>,
                        lo: &Array1<f64>,
                        hi: &Array1<f64>| {
        if let Some(list) = store {
            let mut z = Vec::with_capacity(4 * p.len());
            z.extend(p.iter());
            z.extend(q.iter());
            z.extend(lo.iter());
            z.extend(hi.iter());
            list.push(z);
        }
    };

    trace.rows.push(TraceRow {
        t: 0,
        residual: f64::INFINITY,
        objective: prob.objective(&p, &q),
        v_min: v.iter().copied().fold(f64::INFINITY, f64::min),
        v_max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        p0,
        coupling_flops: 0,
        messages: 1,
        wall_secs: start.elapsed().as_secs_f64(),
    });
    log.push_round(
        RoundTotals {
            round: 0,
            broadcast: 1,
            ..Default::default()
        },
        Some(vec![MessageRecord {
            sender: AgentId::Cc,
            receiver: AgentId::All,
            kind: PayloadKind::HeadGradient,
            scalars: 1,
        }]),
    );
    push_iterate(&mut iterates, &p, &q, &mu_lo, &mu_hi);

    let mut detector = DivergenceDetector::new(opts.sigma);
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=opts.max_iter {
        let mut flops = FlopCounter::new();
        let mut records = if opts.detailed_messages {
            Some(Vec::new())
        } else {
            None
        };

        // step 1: every node updates from its own data and what it was sent.
        let mut res_sq = 0.0f64;
        let mut res_inf = 0.0f64;
        let mut p_new = Array1::zeros(n);
        let mut q_new = Array1::zeros(n);
        let mut lo_new = Array1::zeros(n);
        let mut hi_new = Array1::zeros(n);
        for view in &views.nodes {
            let i = view.node - 1;
            let dev = &view.device;
            let gp = 2.0 * dev.cp * (p[i] - dev.p_target) - c0p + alpha[i];
            let gq = 2.0 * dev.cq * (q[i] - dev.q_target) + beta[i];
            let (pi, qi) = project_box((p[i] - eps * gp, q[i] - eps * gq), &dev.bounds);
            let li = (mu_lo[i] + eps * (view.v_lo - v[i] - view.phi * mu_lo[i])).max(0.0);
            let hi = (mu_hi[i] + eps * (v[i] - view.v_hi - view.phi * mu_hi[i])).max(0.0);
            for d in [pi - p[i], qi - q[i], li - mu_lo[i], hi - mu_hi[i]] {
                res_sq += d * d;
                res_inf = res_inf.max(d.abs());
            }
            p_new[i] = pi;
            q_new[i] = qi;
            lo_new[i] = li;
            hi_new[i] = hi;
        }
        p = p_new;
        q = q_new;
        mu_lo = lo_new;
        mu_hi = hi_new;

        // steps 2-4: coupling terms for the *new* duals.
        let diff = &mu_hi - &mu_lo;
        let (a_new, b_new) =
            assemble_coupling(partition, views, &diff, &mut flops, records.as_mut())?;
        alpha = a_new;
        beta = b_new;

        // step 5: the physical system reports voltages at the new dispatch.
        v = source.voltages(&p, &q)?;
        let p0_prev = p0;
        p0 = feeder_head_power(&p, views.cc.p_inelastic);

        // step 6: CC broadcasts the head-cost derivative.
        c0p = views.cc.head_gradient(p0);
        if let Some(rec) = records.as_mut() {
            rec.push(MessageRecord {
                sender: AgentId::Cc,
                receiver: AgentId::All,
                kind: PayloadKind::HeadGradient,
                scalars: 1,
            });
        }

        let residual = res_sq.sqrt();
        let totals = round_totals(t, partition);
        trace.rows.push(TraceRow {
            t,
            residual,
            objective: prob.objective(&p, &q),
            v_min: v.iter().copied().fold(f64::INFINITY, f64::min),
            v_max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            p0,
            coupling_flops: flops.total(),
            messages: totals.total_scalars(),
            wall_secs: start.elapsed().as_secs_f64(),
        });
        log.push_round(totals, records);
        push_iterate(&mut iterates, &p, &q, &mu_lo, &mu_hi);
        iterations = t;

        let stop = match opts.stop {
            StopCriterion::FixedPoint => res_inf <= opts.sigma,
            StopCriterion::HeadPower => t >= HEAD_POWER_WARMUP && (p0 - p0_prev).abs() < opts.sigma,
        };
        if stop {
            converged = true;
            break;
        }
        detector.check(t, residual)?;
    }

    trace.converged = converged;
    trace.iterations = iterations;
    trace.iterates = iterates;
    let state = IterateState {
        t: iterations,
        p,
        q,
        mu_lo,
        mu_hi,
        v,
        p0,
    };
    Ok((state, trace, log))
}

fn check_views_coherent(
    prob: &OpfProblem,
    views: &AgentViews,
    partition: &Partition,
    n: usize,
) -> Result<()> {
    if views.rcs.len() != partition.ag_count() {
        return Err(Error::InfoHiding(format!(
            "{} coordinator views for {} subtrees",
            views.rcs.len(),
            partition.ag_count()
        )));
    }
    for (k, (rc, ag)) in views.rcs.iter().zip(partition.ags()).enumerate() {
        if rc.root != ag.root || rc.members() != ag.members.as_slice() {
            return Err(Error::InfoHiding(format!(
                "coordinator view {k} does not match partition subtree {k}"
            )));
        }
    }
    if views.nodes.len() != n {
        return Err(Error::InfoHiding(format!(
            "{} node views for {n} nodes",
            views.nodes.len()
        )));
    }
    for (i, view) in views.nodes.iter().enumerate() {
        let node = i + 1;
        if view.node != node
            || view.device != *prob.device(node)
            || view.v_lo != prob.v_lo()[i]
            || view.v_hi != prob.v_hi()[i]
            || view.phi != prob.phi()
        {
            return Err(Error::InfoHiding(format!(
                "node view {node} does not match the problem data"
            )));
        }
    }
    if views.cc.alpha != prob.alpha()
        || views.cc.p0_hat != prob.p0_hat()
        || views.cc.p_inelastic != prob.p_inelastic()
    {
        return Err(Error::InfoHiding(
            "central coordinator view does not match the problem data".into(),
        ));
    }
    Ok(())
}

/// Coupling multiply-adds (as flops: multiply + add) per iteration of the
/// central driver: two dense `N x N` products.
pub fn central_coupling_flops(n: usize) -> u64 {
    let n = n as u64;
    2 * (2 * n * n)
}

/// Coupling flops per iteration of the hierarchical driver: each RC's two
/// block products plus the CC's reduced-network terms.
pub fn hierarchical_coupling_flops(partition: &Partition) -> u64 {
    let k = partition.ag_count() as u64;
    let u = partition.unclustered().len() as u64;
    let rc: u64 = partition
        .ags()
        .iter()
        .map(|ag| {
            let nk = ag.members.len() as u64;
            4 * nk * nk
        })
        .sum();
    rc + 4 * k * (k.saturating_sub(1) + u) + 4 * u * (k + u)
}
