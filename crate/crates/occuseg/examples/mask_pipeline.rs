//! The mask-generation pipeline on a hand-drawn scene: intersect the
//! bite-registration test/retest masks, split the articulating-paper ink
//! into confirmed (MTP) and unconfirmed (MFP) regions, encode the result as
//! a grayscale PNG, and render a prediction-vs-target overlay.
//!
//! Outputs land in `target/examples/mask_pipeline/`.
//!
//! ```bash
//! cargo run -p occuseg --example mask_pipeline
//! ```

use occuseg::mask::{
    encode_label_mask, generate_mtp_mfp, render_overlay, BinaryMask, PatientTransform,
};

fn disc(mask: &mut BinaryMask, cx: i32, cy: i32, r: i32) {
    for y in 0..mask.height() as i32 {
        for x in 0..mask.width() as i32 {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                mask.set(x as u32, y as u32, true);
            }
        }
    }
}

fn main() {
    let out_dir = std::path::Path::new("target/examples/mask_pipeline");
    std::fs::create_dir_all(out_dir).unwrap();

    // Ink marks: two blobs of articulating-paper ink.
    let mut ap = BinaryMask::new(64, 64).unwrap();
    disc(&mut ap, 20, 22, 9);
    disc(&mut ap, 44, 40, 7);

    // Registration masks agree on the core of the first blob only; the
    // second blob is unconfirmed ink. Each registration also saw a contact
    // the paper missed (bottom left), which stays out of the labels.
    let mut test = BinaryMask::new(64, 64).unwrap();
    disc(&mut test, 20, 22, 6);
    disc(&mut test, 10, 54, 5);
    let mut retest = BinaryMask::new(64, 64).unwrap();
    disc(&mut retest, 21, 22, 6);
    disc(&mut retest, 11, 53, 5);

    let confirmed = test.intersect(&retest).unwrap();
    println!(
        "ink {} px, test∩retest {} px",
        ap.count_positives(),
        confirmed.count_positives()
    );

    let label = generate_mtp_mfp(&ap, &test, &retest).unwrap();
    let mtp = label.class_mask(1);
    let mfp = label.class_mask(2);
    println!(
        "MTP {} px, MFP {} px (partition of the ink: {})",
        mtp.count_positives(),
        mfp.count_positives(),
        mtp.count_positives() + mfp.count_positives() == ap.count_positives()
    );

    let gray = encode_label_mask(&label).unwrap();
    gray.save(out_dir.join("label_mask.png")).unwrap();

    // Pretend the model predicted the confirmed region slightly off.
    let mut pred = BinaryMask::new(64, 64).unwrap();
    disc(&mut pred, 22, 23, 6);
    let overlay = render_overlay(&pred, &mtp, None).unwrap();
    overlay.save(out_dir.join("overlay.png")).unwrap();

    // Spatial calibration: the same crop/resize maps every raster of a
    // patient into one frame.
    let t = PatientTransform {
        crop_x: 8,
        crop_y: 8,
        crop_w: 48,
        crop_h: 48,
        output_size: 96,
    };
    let calibrated = t.apply_to_gray(&gray).unwrap();
    calibrated.save(out_dir.join("label_mask_calibrated.png")).unwrap();
    println!("wrote {}", out_dir.display());
}
