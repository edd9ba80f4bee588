//! Generate a synthetic dataset, write it in the on-disk layout, load it
//! back, and verify that the mask pipeline reproduces the generator's
//! ground truth.
//!
//! ```bash
//! cargo run -p occuseg --example synthetic_dataset
//! ```

use occuseg::data::{kfold_split, load_dataset, synth_generate, write_dataset, SynthConfig};
use occuseg::mask::generate_mtp_mfp;

fn main() {
    let cfg = SynthConfig {
        patients: 4,
        raster_size: 48,
        overlap: 0.6,
        seed: 42,
        ..SynthConfig::default()
    };
    let records = synth_generate(&cfg).unwrap();
    let first = &records[0].images[0];
    println!(
        "{} patients x {} images, {}x{} px",
        records.len(),
        records[0].images.len(),
        first.image.width(),
        first.image.height()
    );

    // Ground truth is known by construction; the pipeline reproduces it.
    let truth = first.label.as_ref().unwrap();
    let derived = generate_mtp_mfp(&first.ap, &records[0].ofr_test, &records[0].ofr_retest).unwrap();
    println!("pipeline reproduces generator truth: {}", &derived == truth);
    let ink = first.ap.count_positives();
    let confirmed = truth.class_mask(1).count_positives();
    println!(
        "confirmed ink fraction {:.2} (target {})",
        confirmed as f64 / ink as f64,
        cfg.overlap
    );

    let out_dir = std::path::Path::new("target/examples/synthetic_dataset");
    write_dataset(&records, out_dir).unwrap();
    let loaded = load_dataset(out_dir).unwrap();
    println!(
        "round trip through {}: {} patients, images equal: {}",
        out_dir.display(),
        loaded.len(),
        loaded[0].images[0].image == first.image
    );

    // Patient-wise folds: every image of a patient stays in one fold.
    let ids: Vec<String> = records.iter().map(|p| p.id.clone()).collect();
    let folds = kfold_split(&ids, 2, 7).unwrap();
    for fold in 0..folds.k() {
        println!("fold {fold}: {:?}", folds.patients_in(fold));
    }
}
