use std::collections::BTreeMap;

use crate::mdp::{Action, State};

use super::{ApgError, SplitRecord};

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    /// Zero-based abstract-state index.
    Leaf(usize),
    Split { feature: usize, children: [usize; 2] },
    /// Placeholder while a tree is rebuilt from records.
    Open,
}

/// One binary split tree per action class. Leaves are abstract states;
/// descending by the feature values of a state finds its node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitForest {
    roots: BTreeMap<Action, usize>,
    arena: Vec<TreeNode>,
}

impl SplitForest {
    /// Returns the arena slot of the new root leaf.
    pub(crate) fn add_root(&mut self, action: Action, node: usize) -> usize {
        let slot = self.arena.len();
        self.arena.push(TreeNode::Leaf(node));
        self.roots.insert(action, slot);
        slot
    }

    /// Turns leaf `slot` into a split; returns the slots of the two new leaves.
    pub(crate) fn split_leaf(&mut self, slot: usize, feature: usize, zero: usize, one: usize) -> [usize; 2] {
        debug_assert!(matches!(self.arena[slot], TreeNode::Leaf(_)));
        let z = self.arena.len();
        self.arena.push(TreeNode::Leaf(zero));
        self.arena.push(TreeNode::Leaf(one));
        self.arena[slot] = TreeNode::Split {
            feature,
            children: [z, z + 1],
        };
        [z, z + 1]
    }

    /// Zero-based node index of `s` within the class of `action`.
    pub fn classify(&self, action: Action, s: &State) -> Option<usize> {
        let mut slot = *self.roots.get(&action)?;
        loop {
            match &self.arena[slot] {
                TreeNode::Leaf(node) => return Some(*node),
                TreeNode::Split { feature, children } => slot = children[s.value(*feature) as usize],
                TreeNode::Open => return None,
            }
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        self.roots.keys().copied()
    }

    /// Rebuilds the trees from the split records of nodes `0..records.len()`.
    /// Records must be root-to-leaf paths of complete binary trees.
    pub fn from_records(records: &[SplitRecord]) -> Result<Self, ApgError> {
        let mut forest = SplitForest::default();
        for (node, record) in records.iter().enumerate() {
            let mut slot = match forest.roots.get(&record.action) {
                Some(&slot) => slot,
                None => {
                    let slot = forest.arena.len();
                    forest.arena.push(TreeNode::Open);
                    forest.roots.insert(record.action, slot);
                    slot
                }
            };
            for &(feature, value) in &record.constraints {
                slot = match forest.arena[slot].clone() {
                    TreeNode::Open => {
                        let z = forest.arena.len();
                        forest.arena.push(TreeNode::Open);
                        forest.arena.push(TreeNode::Open);
                        forest.arena[slot] = TreeNode::Split {
                            feature,
                            children: [z, z + 1],
                        };
                        z + value as usize
                    }
                    TreeNode::Split { feature: f, children } if f == feature => children[value as usize],
                    _ => return Err(ApgError::InconsistentRecords(node + 1)),
                };
            }
            match forest.arena[slot] {
                TreeNode::Open => forest.arena[slot] = TreeNode::Leaf(node),
                _ => return Err(ApgError::InconsistentRecords(node + 1)),
            }
        }
        if forest.arena.iter().any(|n| matches!(n, TreeNode::Open)) {
            return Err(ApgError::IncompleteTree);
        }
        Ok(forest)
    }
}
