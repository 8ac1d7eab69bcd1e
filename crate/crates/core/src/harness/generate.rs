//! Synthetic feeder generation and greedy subtree partitioning.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::feeder::{validate_tree, FeederModel, Line};
use crate::hierarchy::{validate_partition, Partition};
use crate::{Error, Result};

/// Parameters for the random rooted-tree generator. Ranges are inclusive;
/// a degenerate range pins the value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    /// Number of non-slack nodes.
    pub nodes: usize,
    /// Maximum children per node.
    pub max_branching: usize,
    pub r_range: (f64, f64),
    pub x_range: (f64, f64),
    pub p0_range: (f64, f64),
    pub q0_range: (f64, f64),
    pub v0: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            nodes: 50,
            max_branching: 3,
            r_range: (0.005, 0.02),
            x_range: (0.01, 0.04),
            p0_range: (-0.03, -0.01),
            q0_range: (-0.015, -0.005),
            v0: 1.0,
        }
    }
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::Infeasible(
                "generator needs at least one node".into(),
            ));
        }
        if self.max_branching == 0 {
            return Err(Error::Infeasible("max_branching must be at least 1".into()));
        }
        for (name, (lo, hi)) in [
            ("r", self.r_range),
            ("x", self.x_range),
            ("p0", self.p0_range),
            ("q0", self.q0_range),
        ] {
            if lo > hi {
                return Err(Error::Infeasible(format!(
                    "{name} range is empty: [{lo}, {hi}]"
                )));
            }
        }
        if !(self.r_range.0 > 0.0) || !(self.x_range.0 > 0.0) {
            return Err(Error::Infeasible(
                "impedance ranges must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Generates a random rooted tree with impedances and background loads
/// drawn from the spec's ranges. Deterministic per seed.
pub fn generate_feeder(spec: &GeneratorSpec, seed: u64) -> Result<FeederModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.nodes;
    let mut lines = Vec::with_capacity(n);
    let mut child_count = vec![0usize; n + 1];
    for child in 1..=n {
        let eligible: Vec<usize> = (0..child)
            .filter(|&c| child_count[c] < spec.max_branching)
            .collect();
        // a fresh node always has spare capacity, so this cannot be empty
        let parent = eligible[rng.gen_range(0..eligible.len())];
        child_count[parent] += 1;
        lines.push(Line {
            parent,
            child,
            r: draw(&mut rng, spec.r_range),
            x: draw(&mut rng, spec.x_range),
        });
    }
    let p0 = (0..n).map(|_| draw(&mut rng, spec.p0_range)).collect();
    let q0 = (0..n).map(|_| draw(&mut rng, spec.q0_range)).collect();
    let model = FeederModel::new(n, lines, spec.v0, p0, q0)?;
    debug_assert!(validate_tree(&model).is_ok());
    Ok(model)
}

/// Greedy subtree selection: repeatedly take the largest still-available
/// subtree that fits the remaining per-group budget
/// `ceil(unassigned / groups_left)`; when nothing fits, take the smallest
/// available subtree so the requested count is still met. Ties break to the
/// smallest node id. Whatever remains is left unclustered.
pub fn auto_partition(model: &FeederModel, k: usize) -> Result<Partition> {
    if k == 0 {
        return Err(Error::Infeasible(
            "partition needs at least one subtree".into(),
        ));
    }
    let n = model.node_count();
    let mut subtree: Vec<Vec<usize>> = Vec::with_capacity(n + 1);
    subtree.push(Vec::new()); // slack placeholder
    for node in 1..=n {
        subtree.push(model.subtree_of(node)?);
    }

    let mut assigned = vec![false; n + 1];
    let mut blocked = vec![false; n + 1]; // ancestors of chosen roots
    let mut roots = Vec::with_capacity(k);
    let mut unassigned = n;

    for picked in 0..k {
        let budget = unassigned.div_ceil(k - picked);
        let mut best_fit: Option<(usize, usize)> = None; // (size, node), max size
        let mut smallest: Option<(usize, usize)> = None; // fallback, min size
        for node in 1..=n {
            if assigned[node] || blocked[node] {
                continue;
            }
            let size = subtree[node].len();
            if size <= budget {
                let better = match best_fit {
                    Some((s, id)) => size > s || (size == s && node < id),
                    None => true,
                };
                if better {
                    best_fit = Some((size, node));
                }
            }
            let better = match smallest {
                Some((s, id)) => size < s || (size == s && node < id),
                None => true,
            };
            if better {
                smallest = Some((size, node));
            }
        }
        let Some((size, root)) = best_fit.or(smallest) else {
            return Err(Error::Infeasible(format!(
                "requested {k} subtrees but only {picked} disjoint subtrees are available"
            )));
        };
        for &m in &subtree[root] {
            assigned[m] = true;
        }
        let mut anc = root;
        loop {
            let parent = model.parent_of(anc)?;
            if parent == 0 {
                break;
            }
            blocked[parent] = true;
            anc = parent;
        }
        unassigned -= size;
        roots.push(root);
    }

    roots.sort_unstable();
    let partition = Partition::from_roots(model, &roots)?;
    debug_assert!(validate_partition(model, &partition).is_ok());
    Ok(partition)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_spec_gives_two_node_feeder() {
        let spec = GeneratorSpec {
            nodes: 1,
            ..Default::default()
        };
        let model = generate_feeder(&spec, 1).unwrap();
        assert_eq!(model.node_count(), 1);
        assert_eq!(model.lines().len(), 1);
    }

    #[test]
    fn same_seed_same_model() {
        let spec = GeneratorSpec {
            nodes: 80,
            ..Default::default()
        };
        let a = generate_feeder(&spec, 99).unwrap();
        let b = generate_feeder(&spec, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_feeder(&spec, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn depth_grows_at_least_logarithmically() {
        let spec = GeneratorSpec {
            nodes: 200,
            max_branching: 3,
            ..Default::default()
        };
        let model = generate_feeder(&spec, 7).unwrap();
        assert!(validate_tree(&model).is_ok());
        let mut max_depth = 0;
        for node in 1..=200 {
            let mut depth = 0;
            let mut cur = node;
            while cur != 0 {
                cur = model.parent_of(cur).unwrap();
                depth += 1;
            }
            max_depth = max_depth.max(depth);
        }
        // a ternary tree on 200 nodes cannot be shallower than log3(200)
        assert!(max_depth >= 5, "depth {max_depth}");
    }

    #[test]
    fn k1_on_chain_takes_whole_tree() {
        let spec = GeneratorSpec {
            nodes: 10,
            max_branching: 1,
            ..Default::default()
        };
        let model = generate_feeder(&spec, 3).unwrap();
        let partition = auto_partition(&model, 1).unwrap();
        assert_eq!(partition.ags().len(), 1);
        assert_eq!(partition.ags()[0].root, 1);
        assert_eq!(partition.ags()[0].members.len(), 10);
        assert!(partition.unclustered().is_empty());
    }

    #[test]
    fn chain_admits_only_one_subtree() {
        // every pair of subtrees on a chain is nested, so k >= 2 cannot be
        // satisfied: after the first pick everything else is an ancestor
        let spec = GeneratorSpec {
            nodes: 6,
            max_branching: 1,
            ..Default::default()
        };
        let model = generate_feeder(&spec, 3).unwrap();
        let err = auto_partition(&model, 2).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn k4_on_200_nodes_covers_most_of_the_feeder() {
        let spec = GeneratorSpec {
            nodes: 200,
            max_branching: 3,
            ..Default::default()
        };
        let model = generate_feeder(&spec, 7).unwrap();
        let partition = auto_partition(&model, 4).unwrap();
        assert_eq!(partition.ag_count(), 4);
        assert!(validate_partition(&model, &partition).is_ok());
        let covered = partition.clustered_node_count();
        assert!(
            covered * 100 >= 200 * 60,
            "only {covered}/200 nodes clustered"
        );
    }

    #[test]
    fn k_equal_n_on_star_yields_singletons() {
        // star: every node hangs off the slack, so singleton subtrees exist
        let lines = (1..=5)
            .map(|child| Line {
                parent: 0,
                child,
                r: 0.01,
                x: 0.02,
            })
            .collect();
        let model = FeederModel::without_loads(5, lines, 1.0).unwrap();
        let partition = auto_partition(&model, 5).unwrap();
        assert_eq!(partition.ag_count(), 5);
        assert!(partition.ags().iter().all(|ag| ag.members.len() == 1));
    }
}
