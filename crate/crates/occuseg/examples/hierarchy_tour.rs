//! Tour of class hierarchies: the bundled occlusal hierarchy, target
//! projection, probability aggregation, and building a custom hierarchy.
//!
//! ```bash
//! cargo run -p occuseg --example hierarchy_tour
//! ```

use occuseg::hierarchy::{ClassHierarchy, HierarchySpec};

fn main() {
    let h = ClassHierarchy::occlusal();
    println!(
        "occlusal hierarchy: {} leaves {:?}, {} levels",
        h.num_leaves(),
        h.leaf_names(),
        h.num_levels()
    );
    for level in 0..h.num_levels() {
        let nodes: Vec<String> = h
            .level(level)
            .unwrap()
            .iter()
            .map(|n| format!("{}{:?}", n.name(), n.leaves()))
            .collect();
        println!("  level {level}: {}", nodes.join("  "));
    }

    // Where does each leaf land on the coarse level?
    for (leaf, name) in h.leaf_names().iter().enumerate() {
        let node = h.project_target(leaf, 0).unwrap();
        println!("  {name} projects to {:?}", h.level(0).unwrap()[node].name());
    }

    // Node probabilities are sums of leaf probabilities.
    let probs = [0.2, 0.5, 0.3];
    println!("  leaf probs {probs:?}");
    for level in 0..h.num_levels() {
        println!("    level {level} -> {:?}", h.aggregate_probs(&probs, level).unwrap());
    }

    // A deeper custom hierarchy: tissue -> {hard, soft} -> four leaves.
    let custom = ClassHierarchy::build(&HierarchySpec {
        leaves: vec!["enamel".into(), "dentin".into(), "pulp".into(), "gingiva".into()],
        coarse_levels: vec![
            vec![(
                "tissue".into(),
                vec!["enamel".into(), "dentin".into(), "pulp".into(), "gingiva".into()],
            )],
            vec![
                ("hard".into(), vec!["enamel".into(), "dentin".into()]),
                ("soft".into(), vec!["pulp".into(), "gingiva".into()]),
            ],
        ],
    })
    .unwrap();
    println!(
        "custom hierarchy: {} levels over {:?}",
        custom.num_levels(),
        custom.leaf_names()
    );

    // Invalid specs are rejected with the offending node named.
    let err = ClassHierarchy::build(&HierarchySpec {
        leaves: vec!["a".into(), "b".into(), "c".into()],
        coarse_levels: vec![vec![
            ("left".into(), vec!["a".into(), "b".into()]),
            ("right".into(), vec!["b".into(), "c".into()]),
        ]],
    })
    .unwrap_err();
    println!("overlapping groups are rejected: {err}");
}
