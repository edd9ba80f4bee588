//! Class hierarchies as ordered levels of leaf-class partitions.
//!
//! A hierarchy orders its levels coarse to fine and always materializes the
//! finest level as one singleton node per leaf class. Every level is a
//! partition of the leaf set, and every coarse node is a union of nodes of
//! the next finer level, so "sum over levels" in the hierarchical losses is
//! a plain iteration over `0..num_levels()`.
//!
//! The occlusal hierarchy used throughout this crate has leaves
//! `[Background, MTP, MFP]` and one coarse level `[Background, FULL]` with
//! `FULL = {MTP, MFP}`. A class that persists across levels (Background)
//! appears as a singleton node at every level.

use serde::Deserialize;
use thiserror::Error;

/// Leaf index of the Background class in the occlusal hierarchy.
pub const OCCLUSAL_BACKGROUND: u8 = 0;
/// Leaf index of the medically-true-positive contact class.
pub const OCCLUSAL_MTP: u8 = 1;
/// Leaf index of the medically-false-positive contact class.
pub const OCCLUSAL_MFP: u8 = 2;

/// Bundled config for the occlusal contact hierarchy.
pub const OCCLUSAL_HIERARCHY_TOML: &str = include_str!("../assets/occlusal_hierarchy.toml");

#[derive(Debug, Error, PartialEq)]
pub enum HierarchyError {
    #[error("hierarchy needs at least 2 leaf classes, got {0}")]
    TooFewLeaves(usize),
    #[error("duplicate leaf name '{0}'")]
    DuplicateLeaf(String),
    #[error("node '{0}' has an empty leaf set")]
    EmptyNode(String),
    #[error("node '{node}' references unknown leaf '{leaf}'")]
    UnknownLeaf { node: String, leaf: String },
    #[error("node '{node}' overlaps another node at the same level on leaf '{leaf}'")]
    OverlappingNodes { node: String, leaf: String },
    #[error("level {level} does not cover leaf '{leaf}'")]
    MissingLeaf { level: usize, leaf: String },
    #[error("node '{0}' is not a union of nodes of the next finer level")]
    NonRefining(String),
    #[error("leaf index {leaf} out of range (num_leaves = {num_leaves})")]
    LeafOutOfRange { leaf: usize, num_leaves: usize },
    #[error("level index {level} out of range (num_levels = {num_levels})")]
    LevelOutOfRange { level: usize, num_levels: usize },
    #[error("probability vector has length {got}, hierarchy has {expected} leaves")]
    BadProbLength { got: usize, expected: usize },
    #[error("probabilities must be nonnegative and sum to 1, got sum {0}")]
    NotNormalized(f64),
    #[error("hierarchy config: {0}")]
    Config(String),
}

/// One node of a hierarchy level: a named set of leaf indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    name: String,
    /// Sorted, deduplicated leaf indices.
    leaves: Vec<usize>,
}

impl Node {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Leaf indices covered by this node, in ascending order.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn contains(&self, leaf: usize) -> bool {
        self.leaves.binary_search(&leaf).is_ok()
    }
}

/// Builder input: leaf names plus the coarser levels, each a list of
/// `(node name, leaf names)` groups ordered coarse to fine. The finest
/// singleton level is materialized automatically.
#[derive(Debug, Clone, Default)]
pub struct HierarchySpec {
    pub leaves: Vec<String>,
    pub coarse_levels: Vec<Vec<(String, Vec<String>)>>,
}

/// An immutable, validated class hierarchy.
///
/// Construction goes through [`ClassHierarchy::build`], which enforces the
/// partition and refinement invariants; afterwards the value is read-only
/// and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHierarchy {
    leaf_names: Vec<String>,
    /// Coarse to fine; the last level is always the singleton partition.
    levels: Vec<Vec<Node>>,
    /// `leaf_to_node[level][leaf]` = index of the node containing the leaf.
    leaf_to_node: Vec<Vec<usize>>,
}

impl ClassHierarchy {
    /// Validate a spec and build the hierarchy.
    pub fn build(spec: &HierarchySpec) -> Result<Self, HierarchyError> {
        let n = spec.leaves.len();
        if n < 2 {
            return Err(HierarchyError::TooFewLeaves(n));
        }
        for (i, name) in spec.leaves.iter().enumerate() {
            if spec.leaves[..i].contains(name) {
                return Err(HierarchyError::DuplicateLeaf(name.clone()));
            }
        }

        let leaf_index = |name: &str| spec.leaves.iter().position(|l| l == name);

        let mut levels = Vec::with_capacity(spec.coarse_levels.len() + 1);
        for groups in &spec.coarse_levels {
            let mut owner: Vec<Option<usize>> = vec![None; n];
            let mut nodes = Vec::with_capacity(groups.len());
            for (node_idx, (name, members)) in groups.iter().enumerate() {
                if members.is_empty() {
                    return Err(HierarchyError::EmptyNode(name.clone()));
                }
                let mut leaves = Vec::with_capacity(members.len());
                for leaf_name in members {
                    let leaf = leaf_index(leaf_name).ok_or_else(|| HierarchyError::UnknownLeaf {
                        node: name.clone(),
                        leaf: leaf_name.clone(),
                    })?;
                    if owner[leaf].is_some() {
                        return Err(HierarchyError::OverlappingNodes {
                            node: name.clone(),
                            leaf: leaf_name.clone(),
                        });
                    }
                    owner[leaf] = Some(node_idx);
                    leaves.push(leaf);
                }
                leaves.sort_unstable();
                leaves.dedup();
                nodes.push(Node {
                    name: name.clone(),
                    leaves,
                });
            }
            if let Some(leaf) = owner.iter().position(Option::is_none) {
                return Err(HierarchyError::MissingLeaf {
                    level: levels.len(),
                    leaf: spec.leaves[leaf].clone(),
                });
            }
            levels.push(nodes);
        }
        // The finest level is always the identity partition, in leaf order.
        levels.push(
            spec.leaves
                .iter()
                .enumerate()
                .map(|(i, name)| Node {
                    name: name.clone(),
                    leaves: vec![i],
                })
                .collect(),
        );

        let leaf_to_node: Vec<Vec<usize>> = levels
            .iter()
            .map(|nodes| {
                let mut table = vec![0usize; n];
                for (node_idx, node) in nodes.iter().enumerate() {
                    for &leaf in &node.leaves {
                        table[leaf] = node_idx;
                    }
                }
                table
            })
            .collect();

        // Refinement: every node of a finer level must lie inside exactly one
        // node of the level above it.
        for l in 0..levels.len() - 1 {
            for fine in &levels[l + 1] {
                let parent = leaf_to_node[l][fine.leaves[0]];
                if fine.leaves.iter().any(|&leaf| leaf_to_node[l][leaf] != parent) {
                    return Err(HierarchyError::NonRefining(fine.name.clone()));
                }
            }
        }

        Ok(ClassHierarchy {
            leaf_names: spec.leaves.clone(),
            levels,
            leaf_to_node,
        })
    }

    /// Parse a hierarchy config document (TOML: `leaves` plus ordered
    /// `[[levels]]` tables, each listing `nodes = [{ name, leaves }]`).
    pub fn from_toml_str(text: &str) -> Result<Self, HierarchyError> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| HierarchyError::Config(e.to_string()))?;
        let spec = HierarchySpec {
            leaves: file.leaves,
            coarse_levels: file
                .levels
                .into_iter()
                .map(|level| {
                    level
                        .nodes
                        .into_iter()
                        .map(|node| (node.name, node.leaves))
                        .collect()
                })
                .collect(),
        };
        Self::build(&spec)
    }

    /// The hierarchy of the occlusal contact classes: leaves
    /// `[Background, MTP, MFP]`, one coarse level `[Background, FULL]`.
    pub fn occlusal() -> Self {
        Self::from_toml_str(OCCLUSAL_HIERARCHY_TOML)
            .expect("bundled occlusal hierarchy config is valid")
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_names.len()
    }

    /// Number of levels, including the materialized finest level.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Index of the finest level (the singleton partition).
    pub fn finest_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn leaf_names(&self) -> &[String] {
        &self.leaf_names
    }

    /// Nodes of one level, coarse levels first.
    pub fn level(&self, level: usize) -> Result<&[Node], HierarchyError> {
        self.levels
            .get(level)
            .map(Vec::as_slice)
            .ok_or(HierarchyError::LevelOutOfRange {
                level,
                num_levels: self.levels.len(),
            })
    }

    /// Index of the node at `level` whose leaf set contains `leaf_label`.
    pub fn project_target(&self, leaf_label: usize, level: usize) -> Result<usize, HierarchyError> {
        if level >= self.levels.len() {
            return Err(HierarchyError::LevelOutOfRange {
                level,
                num_levels: self.levels.len(),
            });
        }
        if leaf_label >= self.num_leaves() {
            return Err(HierarchyError::LeafOutOfRange {
                leaf: leaf_label,
                num_leaves: self.num_leaves(),
            });
        }
        Ok(self.leaf_to_node[level][leaf_label])
    }

    /// Aggregate a per-pixel leaf probability vector to node probabilities
    /// at `level`. Node probability is the sum over its leaf set, so the
    /// output again sums to 1.
    pub fn aggregate_probs(&self, leaf_probs: &[f64], level: usize) -> Result<Vec<f64>, HierarchyError> {
        let nodes = self.level(level)?;
        if leaf_probs.len() != self.num_leaves() {
            return Err(HierarchyError::BadProbLength {
                got: leaf_probs.len(),
                expected: self.num_leaves(),
            });
        }
        let sum: f64 = leaf_probs.iter().sum();
        if leaf_probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(HierarchyError::NotNormalized(sum));
        }
        Ok(nodes
            .iter()
            .map(|node| node.leaves.iter().map(|&k| leaf_probs[k]).sum())
            .collect())
    }

    /// Lookup table `leaf -> node index` for one level. Hot paths in the
    /// losses use this instead of per-pixel `project_target` calls.
    pub fn node_table(&self, level: usize) -> Result<&[usize], HierarchyError> {
        if level >= self.levels.len() {
            return Err(HierarchyError::LevelOutOfRange {
                level,
                num_levels: self.levels.len(),
            });
        }
        Ok(&self.leaf_to_node[level])
    }
}

#[derive(Debug, Deserialize)]
struct ConfigFile {
    leaves: Vec<String>,
    #[serde(default)]
    levels: Vec<ConfigLevel>,
}

#[derive(Debug, Deserialize)]
struct ConfigLevel {
    nodes: Vec<ConfigNode>,
}

#[derive(Debug, Deserialize)]
struct ConfigNode {
    name: String,
    leaves: Vec<String>,
}
