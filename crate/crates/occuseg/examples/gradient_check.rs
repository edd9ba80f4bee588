//! Check the analytic gradients against central finite differences: first
//! the loss gradient with respect to logits, then the network's parameter
//! gradients from the hand-written backward pass.
//!
//! ```bash
//! cargo run -p occuseg --example gradient_check
//! ```

use occuseg::hierarchy::ClassHierarchy;
use occuseg::loss::{
    combined_loss, combined_loss_grad, finite_diff_grad, max_relative_error, ChannelField,
    LossConfig,
};
use occuseg::mask::LabelMask;
use occuseg::model::DualBranchNet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let h = ClassHierarchy::occlusal();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // Loss gradient on a random 6x6 field.
    let values = (0..6 * 6 * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
    let logits = ChannelField::from_values(6, 6, 3, values);
    let mut target = LabelMask::new(6, 6).unwrap();
    for y in 0..6 {
        for x in 0..6 {
            target.set(x, y, rng.random_range(0..3));
        }
    }
    let analytic = combined_loss_grad(&logits, &target, &h, &cfg);
    for step in [1e-3, 1e-4, 1e-5] {
        let numeric = finite_diff_grad(&logits, &target, &h, &cfg, step);
        println!(
            "loss gradient, step {step:>7.0e}: max relative error {:.3e}",
            max_relative_error(&analytic, &numeric)
        );
    }

    // Parameter gradients of a small network on an 8x8 image.
    let mut net = DualBranchNet::with_dims(3, 4, 3, 4, 2);
    let image_values = (0..8 * 8 * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let image = ChannelField::from_values(8, 8, 3, image_values);
    let mut image_target = LabelMask::new(8, 8).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            image_target.set(x, y, rng.random_range(0..3));
        }
    }
    let (grads, loss_value) = net.backward(&image, &image_target, &h, &cfg).unwrap();
    println!("network loss {loss_value:.4}, {} parameters", net.param_count());

    let flat = grads.flat();
    let params = net.snapshot();
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    let mut probe = params.clone();
    let mut numeric = vec![0.0; params.len()];
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        net.restore(&probe);
        let up = combined_loss(&net.forward(&image).unwrap(), &image_target, &h, &cfg);
        probe[i] = params[i] - step;
        net.restore(&probe);
        let down = combined_loss(&net.forward(&image).unwrap(), &image_target, &h, &cfg);
        probe[i] = params[i];
        numeric[i] = (up - down) / (2.0 * step);
        scale = scale.max(numeric[i].abs());
    }
    for (a, n) in flat.iter().zip(&numeric) {
        worst = worst.max((a - n).abs());
    }
    println!(
        "parameter gradients: max relative error {:.3e}",
        worst / scale.max(1e-12)
    );
}
