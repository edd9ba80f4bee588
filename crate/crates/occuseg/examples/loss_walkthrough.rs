//! The combined hierarchical loss on a one-pixel fixture, term by term,
//! plus the flat-hierarchy reduction to the standard losses.
//!
//! ```bash
//! cargo run -p occuseg --example loss_walkthrough
//! ```

use occuseg::hierarchy::{ClassHierarchy, HierarchySpec};
use occuseg::loss::{
    combined_loss, evaluate, hcel_level, hdl_level, softmax_probs, ChannelField, LossConfig,
};
use occuseg::mask::LabelMask;

fn main() {
    let h = ClassHierarchy::occlusal();
    let cfg = LossConfig {
        epsilon: 1e-12,
        ..LossConfig::default()
    };

    // One pixel with uniform logits whose target is MTP.
    let logits = ChannelField::from_values(1, 1, 3, vec![0.0, 0.0, 0.0]);
    let mut target = LabelMask::new(1, 1).unwrap();
    target.set(0, 0, 1);

    let probs = softmax_probs(&logits);
    println!("softmax of (0, 0, 0): {:?}", probs.pixel(0));
    println!(
        "aggregated to the coarse level: {:?}",
        h.aggregate_probs(probs.pixel(0), 0).unwrap()
    );

    for level in 0..h.num_levels() {
        println!(
            "level {level}: cross-entropy term {:.6}, dice term {:.6}",
            hcel_level(&logits, &target, &h, level),
            hdl_level(&logits, &target, &h, level, &cfg)
        );
    }
    let breakdown = evaluate(&logits, &target, &h, &cfg);
    println!(
        "HCEL {:.6} + HDL {:.6} = combined {:.6}",
        breakdown.hcel, breakdown.hdl, breakdown.combined
    );

    // Adding a constant to every logit of a pixel changes nothing.
    let shifted = ChannelField::from_values(1, 1, 3, vec![4.2, 4.2, 4.2]);
    println!(
        "after a uniform logit shift: {:.6}",
        combined_loss(&shifted, &target, &h, &cfg)
    );

    // With a single flat level the losses are the standard multiclass cross
    // entropy and the standard micro soft dice.
    let flat = ClassHierarchy::build(&HierarchySpec {
        leaves: vec!["bg".into(), "a".into(), "b".into()],
        coarse_levels: vec![],
    })
    .unwrap();
    let flat_break = evaluate(&logits, &target, &flat, &cfg);
    println!(
        "flat hierarchy: cross entropy {:.6} (ln 3 = {:.6}), dice {:.6}",
        flat_break.hcel,
        3f64.ln(),
        flat_break.hdl
    );
}
