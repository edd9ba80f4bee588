//! Segmentation metrics from confusion counts through the fold-wise
//! report: per-class IoU/Dice/Precision/Recall, FULL-contact union
//! evaluation, undefined-marking, and the mean / mean-of-std aggregation.
//!
//! ```bash
//! cargo run -p occuseg --example metrics_report
//! ```

use occuseg::mask::LabelMask;
use occuseg::metrics::{
    aggregate_folds, confusion, full_contact_metrics, per_image_csv, EvalClass, ImageMetrics,
};

fn checkerboard(w: u32, h: u32, on: u8, phase: u32) -> LabelMask {
    let mut mask = LabelMask::new(w, h).unwrap();
    for y in 0..h {
        for x in 0..w {
            if (x + y) % 2 == phase {
                mask.set(x, y, on);
            }
        }
    }
    mask
}

fn main() {
    // Per-class confusion and metrics on a small pair.
    let pred = checkerboard(6, 4, 1, 0);
    let target = checkerboard(6, 4, 1, 1);
    let c = confusion(&pred, &target, 1).unwrap();
    println!("disjoint checkerboards, class 1: {c:?}");
    println!(
        "  IoU {:?}  Dice {:?}  Precision {:?}  Recall {:?}",
        c.iou(),
        c.dice(),
        c.precision(),
        c.recall()
    );

    // FULL contact ignores the MTP/MFP distinction.
    let mut swapped = target.clone();
    for y in 0..4 {
        for x in 0..6 {
            if swapped.get(x, y) == 1 {
                swapped.set(x, y, 2);
            }
        }
    }
    let full = full_contact_metrics(&target, &swapped).unwrap();
    println!("FULL metrics after an MTP/MFP swap: Dice {:?}", full.dice());

    // Empty classes are undefined-marked, never coerced to 0 or 1.
    let empty = confusion(&LabelMask::new(6, 4).unwrap(), &LabelMask::new(6, 4).unwrap(), 1).unwrap();
    println!("empty class metrics: IoU {:?} (excluded from means)", empty.iou());

    // Fold-wise aggregation: mean over folds of per-fold means and of
    // per-fold sample standard deviations.
    let mut rows = Vec::new();
    for (image, fold, phase) in [("a", 0usize, 0u32), ("b", 0, 1), ("c", 1, 0), ("d", 1, 0)] {
        let pred = checkerboard(6, 4, 1, phase);
        for class in EvalClass::ALL {
            let counts = match class {
                EvalClass::Mtp => confusion(&pred, &target, 1).unwrap(),
                EvalClass::Mfp => confusion(&pred, &target, 2).unwrap(),
                EvalClass::Full => full_contact_metrics(&pred, &target).unwrap(),
            };
            rows.push(ImageMetrics {
                image: image.to_string(),
                fold,
                class,
                counts,
            });
        }
    }
    let report = aggregate_folds(rows, 2).unwrap();
    print!("{}", report.render_table());
    println!("per-image records:\n{}", per_image_csv(&report.rows));
}
