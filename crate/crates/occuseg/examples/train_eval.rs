//! End-to-end desk run through the library API: synthesize patients, derive
//! the multiclass masks, train the dual-branch network on one fold with the
//! combined hierarchical loss, and report validation metrics.
//!
//! A few epochs on a small raster finish in well under a minute; the full
//! acceptance-scale run uses the CLI (see the README).
//!
//! ```bash
//! cargo run -p occuseg --example train_eval
//! ```

use occuseg::data::{kfold_split, synth_generate, SynthConfig};
use occuseg::hierarchy::ClassHierarchy;
use occuseg::mask::generate_mtp_mfp;
use occuseg::metrics::{aggregate_folds, confusion, full_contact_metrics, EvalClass, ImageMetrics};
use occuseg::model::{self, image_to_field, DualBranchNet, TrainConfig, TrainSample};

fn main() {
    let h = ClassHierarchy::occlusal();
    let seed = 7;

    let patients = synth_generate(&SynthConfig {
        patients: 4,
        raster_size: 48,
        overlap: 0.6,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    println!("synthesized {} patients x {} images", patients.len(), patients[0].images.len());

    // Patient-wise split; fold 0 is the validation fold here.
    let ids: Vec<String> = patients.iter().map(|p| p.id.clone()).collect();
    let folds = kfold_split(&ids, 2, seed).unwrap();
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for patient in &patients {
        for record in &patient.images {
            // The masks a real run reads from disk come from the same
            // pipeline the generator used.
            let target = generate_mtp_mfp(&record.ap, &patient.ofr_test, &patient.ofr_retest).unwrap();
            let sample = TrainSample {
                id: format!("{}/{}", patient.id, record.condition_key()),
                image: record.image.clone(),
                target,
            };
            if folds.fold_of(&patient.id) == Some(0) {
                val_set.push(sample);
            } else {
                train_set.push(sample);
            }
        }
    }
    println!("train {} images, validation {}", train_set.len(), val_set.len());

    let mut net = DualBranchNet::new(h.num_leaves(), seed);
    // Smaller rasters mean smaller sum-reduced gradients, so the rate is
    // scaled up relative to the 64x64 default.
    let cfg = TrainConfig {
        epochs: 20,
        initial_lr: 2e-4,
        seed,
        ..TrainConfig::default()
    };
    let report = model::train(&mut net, &train_set, &val_set, &h, &cfg).unwrap();
    for record in &report.epochs {
        println!("{}", record.to_kv_line());
    }
    println!("best epoch {} with Dice {:.4}", report.best_epoch, report.best_monitor);

    // Evaluate the restored best weights on the validation fold.
    let mut rows = Vec::new();
    for sample in &val_set {
        let pred = net.predict(&image_to_field(&sample.image)).unwrap();
        for class in EvalClass::ALL {
            let counts = match class {
                EvalClass::Mtp => confusion(&pred, &sample.target, 1).unwrap(),
                EvalClass::Mfp => confusion(&pred, &sample.target, 2).unwrap(),
                EvalClass::Full => full_contact_metrics(&pred, &sample.target).unwrap(),
            };
            rows.push(ImageMetrics {
                image: sample.id.clone(),
                fold: 0,
                class,
                counts,
            });
        }
    }
    let metrics_report = aggregate_folds(rows, 1).unwrap();
    print!("{}", metrics_report.render_table());
}
