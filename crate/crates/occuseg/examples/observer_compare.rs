//! Observer-study comparison through the CLI layer: score two simulated
//! annotators' FULL-contact masks against reference masks, with per-image
//! timings, and print the resulting table.
//!
//! ```bash
//! cargo run -p occuseg --example observer_compare
//! ```

use occuseg::cli::run_from;
use occuseg::mask::{encode_binary_mask, BinaryMask};
use std::path::Path;

fn disc(mask: &mut BinaryMask, cx: i32, cy: i32, r: i32) {
    for y in 0..mask.height() as i32 {
        for x in 0..mask.width() as i32 {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                mask.set(x as u32, y as u32, true);
            }
        }
    }
}

fn save(mask: &BinaryMask, path: &Path) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    encode_binary_mask(mask).save(path).unwrap();
}

fn main() {
    let root = Path::new("target/examples/observer_compare");
    let reference = root.join("reference");
    let annotations = root.join("annotations");

    for (name, cx, cy) in [("img_1.png", 20, 20), ("img_2.png", 36, 30)] {
        let mut truth = BinaryMask::new(56, 56).unwrap();
        disc(&mut truth, cx, cy, 9);
        save(&truth, &reference.join(name));

        // "careful" annotates tightly (slightly undersized), "hasty" marks a
        // shifted and oversized region.
        let mut careful = BinaryMask::new(56, 56).unwrap();
        disc(&mut careful, cx, cy, 8);
        save(&careful, &annotations.join("careful").join(name));

        let mut hasty = BinaryMask::new(56, 56).unwrap();
        disc(&mut hasty, cx + 4, cy + 3, 11);
        save(&hasty, &annotations.join("hasty").join(name));
    }

    let timing = root.join("timing.csv");
    std::fs::write(
        &timing,
        "annotator,image,seconds\n\
         careful,img_1.png,131\n\
         careful,img_2.png,142\n\
         hasty,img_1.png,45\n\
         hasty,img_2.png,52\n",
    )
    .unwrap();

    let out = root.join("out");
    let code = run_from([
        "occuseg",
        "compare",
        "--annotations",
        annotations.to_str().unwrap(),
        "--reference",
        reference.to_str().unwrap(),
        "--timing",
        timing.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    println!("\nreport written to {}", out.join("observer_report.txt").display());
}
