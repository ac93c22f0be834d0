use serde::{Deserialize, Serialize};

use super::{CoherenceError, Result};

/// Communication cost class of a rank pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CostClass {
    IntraNode,
    InterNode,
}

/// Config-declared node membership: `nodes[k]` lists the ranks on node `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLayout {
    pub nodes: Vec<Vec<usize>>,
}

impl NodeLayout {
    /// `nodes` nodes of `ranks_per_node` consecutive ranks each.
    pub fn uniform(nodes: usize, ranks_per_node: usize) -> Self {
        Self::from_sizes(&vec![ranks_per_node; nodes])
    }

    /// Consecutive rank ranges of the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut next = 0;
        let nodes = sizes
            .iter()
            .map(|&k| {
                let r: Vec<usize> = (next..next + k).collect();
                next += k;
                r
            })
            .collect();
        Self { nodes }
    }

    pub fn world_size(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TopologyGraph {
    node_of: Vec<usize>,
    nodes: Vec<Vec<usize>>,
    representatives: Vec<usize>,
}

/// Builds the rank graph from a declared layout. Ranks must be exactly
/// `0..world_size`, each on one nonempty node.
pub fn discover_topology(layout: &NodeLayout) -> Result<TopologyGraph> {
    let world = layout.world_size();
    if world == 0 {
        return Err(CoherenceError::InvalidLayout("no ranks declared".into()));
    }
    let mut node_of = vec![usize::MAX; world];
    let mut nodes = Vec::with_capacity(layout.nodes.len());
    for (k, members) in layout.nodes.iter().enumerate() {
        if members.is_empty() {
            return Err(CoherenceError::InvalidLayout(format!("node {k} is empty")));
        }
        let mut sorted = members.clone();
        sorted.sort_unstable();
        for &r in &sorted {
            if r >= world {
                return Err(CoherenceError::InvalidLayout(format!(
                    "rank {r} outside 0..{world}"
                )));
            }
            if node_of[r] != usize::MAX {
                return Err(CoherenceError::InvalidLayout(format!("duplicate rank {r}")));
            }
            node_of[r] = k;
        }
        nodes.push(sorted);
    }
    let representatives = nodes.iter().map(|m| m[0]).collect();
    Ok(TopologyGraph {
        node_of,
        nodes,
        representatives,
    })
}

impl TopologyGraph {
    pub fn world_size(&self) -> usize {
        self.node_of.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_of(&self, rank: usize) -> usize {
        self.node_of[rank]
    }

    pub fn node_members(&self, node: usize) -> &[usize] {
        &self.nodes[node]
    }

    /// Minimum rank of each node, in node order.
    pub fn representatives(&self) -> &[usize] {
        &self.representatives
    }

    pub fn representative_of(&self, rank: usize) -> usize {
        self.representatives[self.node_of[rank]]
    }

    pub fn is_representative(&self, rank: usize) -> bool {
        self.representative_of(rank) == rank
    }

    pub fn edge_cost(&self, a: usize, b: usize) -> CostClass {
        if self.node_of[a] == self.node_of[b] {
            CostClass::IntraNode
        } else {
            CostClass::InterNode
        }
    }

    pub fn all_ranks(&self) -> Vec<usize> {
        (0..self.world_size()).collect()
    }
}
