//! Hierarchical cross-entropy loss (HCEL), hierarchical dice loss (HDL),
//! their combination, and exact analytic gradients with respect to the leaf
//! logits, plus a central finite-difference oracle for checking them.
//!
//! Both losses evaluate one term per hierarchy level and sum the terms. At a
//! level, leaf softmax probabilities are aggregated to node probabilities by
//! summing over each node's leaf set, and the target leaf projects to the
//! node containing it:
//!
//! * HCEL level term: `-Σ_pixels log(node probability of the target node)`,
//!   pixel reduction SUM (a mean-reduced option exists for training).
//! * HDL level term: one micro dice ratio with classes and pixels summed
//!   inside it, `1 - (2·Σ y·p + 2ε) / (Σ (y + p) + ε)`. Background is part
//!   of the sums like any other node.
//!
//! All loss math runs in double precision regardless of what a model trains
//! in.

use crate::hierarchy::ClassHierarchy;
use crate::mask::LabelMask;

/// Aggregated target probabilities equal to exactly 0 are clamped to this
/// before the log so adversarially confident wrong logits keep the loss
/// finite. Clamp events are counted in [`LossBreakdown::clamped_pixels`].
pub const LOG_CLAMP: f64 = 1e-30;

/// Pixel reduction for the cross-entropy part. `Sum` is the contract used by
/// every documented value; `Mean` divides by the pixel count and is exposed
/// as a training-stability option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelReduction {
    #[default]
    Sum,
    Mean,
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Small positive constant guarding the dice ratio against a zero
    /// denominator.
    pub epsilon: f64,
    /// Pixel reduction applied to the HCEL part by the combined-loss entry
    /// points. The per-level/total HCEL functions are always SUM.
    pub hcel_reduction: PixelReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-6,
            hcel_reduction: PixelReduction::Sum,
        }
    }
}

/// Dense per-pixel real vector field: logits, probabilities, gradients and
/// feature maps all use this container. Layout is row-major by pixel with
/// the channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelField {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ChannelField {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "field dimensions must be positive");
        ChannelField {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn from_values(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width * channels, "value count must match dimensions");
        ChannelField {
            height,
            width,
            channels,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.values[(y * self.width + x) * self.channels + c] = value;
    }

    /// Channel vector of pixel `p` in row-major pixel order.
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.values[p * self.channels..(p + 1) * self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn check_shapes(logits: &ChannelField, target: &LabelMask, h: &ClassHierarchy) {
    assert_eq!(logits.channels(), h.num_leaves(), "logit channels must match hierarchy leaves");
    assert_eq!(
        (logits.width(), logits.height()),
        (target.width() as usize, target.height() as usize),
        "logits and target must have the same spatial shape"
    );
    for &label in target.labels() {
        assert!((label as usize) < h.num_leaves(), "target label {label} out of range");
    }
}

/// Per-pixel softmax over the leaf channels. The per-pixel maximum is
/// subtracted before exponentiation so arbitrary finite logits stay in
/// range; the result sums to 1 per pixel.
pub fn softmax_probs(logits: &ChannelField) -> ChannelField {
    let mut probs = logits.clone();
    for p in 0..probs.num_pixels() {
        softmax_in_place(probs.pixel_mut(p));
    }
    probs
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Sum over a node's leaf set of one pixel's probability row.
fn node_prob(row: &[f64], leaves: &[usize]) -> f64 {
    leaves.iter().map(|&k| row[k]).sum()
}

fn hcel_level_counting(
    probs: &ChannelField,
    target: &LabelMask,
    h: &ClassHierarchy,
    level: usize,
) -> (f64, u64) {
    let nodes = h.level(level).expect("level index in range");
    let table = h.node_table(level).expect("level index in range");
    let mut total = 0.0;
    let mut clamped = 0u64;
    for (p, &label) in target.labels().iter().enumerate() {
        let node = &nodes[table[label as usize]];
        let mut q = node_prob(probs.pixel(p), node.leaves());
        if q <= 0.0 {
            q = LOG_CLAMP;
            clamped += 1;
        }
        total -= q.ln();
    }
    (total, clamped)
}

/// Cross-entropy term of one hierarchy level, summed over pixels.
pub fn hcel_level(logits: &ChannelField, target: &LabelMask, h: &ClassHierarchy, level: usize) -> f64 {
    check_shapes(logits, target, h);
    hcel_level_counting(&softmax_probs(logits), target, h, level).0
}

/// Cross-entropy loss summed over all hierarchy levels (pixel reduction SUM).
pub fn hcel_total(logits: &ChannelField, target: &LabelMask, h: &ClassHierarchy) -> f64 {
    check_shapes(logits, target, h);
    let probs = softmax_probs(logits);
    (0..h.num_levels())
        .map(|l| hcel_level_counting(&probs, target, h, l).0)
        .sum()
}

fn hdl_level_from_probs(
    probs: &ChannelField,
    target: &LabelMask,
    h: &ClassHierarchy,
    level: usize,
    epsilon: f64,
) -> f64 {
    let nodes = h.level(level).expect("level index in range");
    let table = h.node_table(level).expect("level index in range");
    let pixels = probs.num_pixels() as f64;
    // One-hot targets contribute exactly one y = 1 per pixel and the node
    // probabilities of a partition sum to 1, so the denominator
    // Σ_nodes Σ_pixels (y + p) collapses to 2·pixels.
    let mut overlap = 0.0;
    for (p, &label) in target.labels().iter().enumerate() {
        let node = &nodes[table[label as usize]];
        overlap += node_prob(probs.pixel(p), node.leaves());
    }
    1.0 - (2.0 * overlap + 2.0 * epsilon) / (2.0 * pixels + epsilon)
}

/// Micro soft dice loss of one hierarchy level: classes and pixels are
/// summed inside a single ratio, Background included.
pub fn hdl_level(
    logits: &ChannelField,
    target: &LabelMask,
    h: &ClassHierarchy,
    level: usize,
    cfg: &LossConfig,
) -> f64 {
    check_shapes(logits, target, h);
    hdl_level_from_probs(&softmax_probs(logits), target, h, level, cfg.epsilon)
}

/// Dice loss summed over all hierarchy levels.
pub fn hdl_total(logits: &ChannelField, target: &LabelMask, h: &ClassHierarchy, cfg: &LossConfig) -> f64 {
    check_shapes(logits, target, h);
    let probs = softmax_probs(logits);
    (0..h.num_levels())
        .map(|l| hdl_level_from_probs(&probs, target, h, l, cfg.epsilon))
        .sum()
}

/// Per-level and total values of one loss evaluation, plus the count of
/// pixels whose aggregated target probability had to be clamped before the
/// log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub hcel_levels: Vec<f64>,
    pub hdl_levels: Vec<f64>,
    pub hcel: f64,
    pub hdl: f64,
    pub combined: f64,
    pub clamped_pixels: u64,
}

/// Evaluate every level term once and assemble HCEL, HDL and the combined
/// loss. `cfg.hcel_reduction` is applied to the HCEL part.
pub fn evaluate(
    logits: &ChannelField,
    target: &LabelMask,
    h: &ClassHierarchy,
    cfg: &LossConfig,
) -> LossBreakdown {
    check_shapes(logits, target, h);
    let probs = softmax_probs(logits);
    let scale = match cfg.hcel_reduction {
        PixelReduction::Sum => 1.0,
        PixelReduction::Mean => 1.0 / probs.num_pixels() as f64,
    };
    let mut breakdown = LossBreakdown {
        hcel_levels: Vec::with_capacity(h.num_levels()),
        hdl_levels: Vec::with_capacity(h.num_levels()),
        hcel: 0.0,
        hdl: 0.0,
        combined: 0.0,
        clamped_pixels: 0,
    };
    for level in 0..h.num_levels() {
        let (ce, clamped) = hcel_level_counting(&probs, target, h, level);
        let dice = hdl_level_from_probs(&probs, target, h, level, cfg.epsilon);
        breakdown.hcel_levels.push(ce * scale);
        breakdown.hdl_levels.push(dice);
        breakdown.clamped_pixels += clamped;
    }
    breakdown.hcel = breakdown.hcel_levels.iter().sum();
    breakdown.hdl = breakdown.hdl_levels.iter().sum();
    breakdown.combined = breakdown.hcel + breakdown.hdl;
    breakdown
}

/// Combined loss: HCEL plus HDL, no weighting factors.
pub fn combined_loss(
    logits: &ChannelField,
    target: &LabelMask,
    h: &ClassHierarchy,
    cfg: &LossConfig,
) -> f64 {
    evaluate(logits, target, h, cfg).combined
}

/// Exact analytic gradient of [`combined_loss`] with respect to every logit.
///
/// Chaining through the softmax and a level's leaf-set sums gives, per pixel
/// and leaf `j` with target-node probability `Q` and indicator `m_j`
/// (1 when leaf `j` is in the target node):
///
/// * HCEL level term: `q_j − q_j·m_j / Q`
/// * HDL level term: `−2/(2P + ε) · q_j·(m_j − Q)` — the dice denominator is
///   constant because node probabilities of a partition sum to 1 per pixel,
///   so only the numerator carries gradient.
pub fn combined_loss_grad(
    logits: &ChannelField,
    target: &LabelMask,
    h: &ClassHierarchy,
    cfg: &LossConfig,
) -> ChannelField {
    check_shapes(logits, target, h);
    let probs = softmax_probs(logits);
    let pixels = probs.num_pixels() as f64;
    let ce_scale = match cfg.hcel_reduction {
        PixelReduction::Sum => 1.0,
        PixelReduction::Mean => 1.0 / pixels,
    };
    let dice_scale = 2.0 / (2.0 * pixels + cfg.epsilon);
    let num_leaves = h.num_leaves();

    let mut grad = ChannelField::zeros(logits.height(), logits.width(), num_leaves);
    for level in 0..h.num_levels() {
        let nodes = h.level(level).expect("level index in range");
        let table = h.node_table(level).expect("level index in range");
        for (p, &label) in target.labels().iter().enumerate() {
            let node = &nodes[table[label as usize]];
            let row = probs.pixel(p);
            let q_node = node_prob(row, node.leaves());
            let q_clamped = q_node.max(LOG_CLAMP);
            let out = grad.pixel_mut(p);
            for j in 0..num_leaves {
                out[j] += ce_scale * row[j] - dice_scale * row[j] * (-q_node);
            }
            for &j in node.leaves() {
                out[j] += -ce_scale * row[j] / q_clamped - dice_scale * row[j];
            }
        }
    }
    grad
}

/// Central finite-difference estimate of the combined-loss gradient:
/// `(f(x + step) − f(x − step)) / (2·step)` per logit. Test oracle for
/// [`combined_loss_grad`]; O(#logits) loss evaluations, so keep fields small.
pub fn finite_diff_grad(
    logits: &ChannelField,
    target: &LabelMask,
    h: &ClassHierarchy,
    cfg: &LossConfig,
    step: f64,
) -> ChannelField {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = logits.clone();
    let mut grad = ChannelField::zeros(logits.height(), logits.width(), logits.channels());
    for i in 0..logits.values().len() {
        let original = probe.values()[i];
        probe.values_mut()[i] = original + step;
        let plus = combined_loss(&probe, target, h, cfg);
        probe.values_mut()[i] = original - step;
        let minus = combined_loss(&probe, target, h, cfg);
        probe.values_mut()[i] = original;
        grad.values_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest absolute difference between two fields, relative to the scale of
/// `reference` (its max absolute entry, floored to avoid division by zero).
pub fn max_relative_error(candidate: &ChannelField, reference: &ChannelField) -> f64 {
    assert_eq!(candidate.values().len(), reference.values().len());
    let scale = reference
        .values()
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-12);
    candidate
        .values()
        .iter()
        .zip(reference.values())
        .fold(0.0f64, |acc, (c, r)| acc.max((c - r).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{ClassHierarchy, HierarchySpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS_LIMIT: LossConfig = LossConfig {
        epsilon: 1e-12,
        hcel_reduction: PixelReduction::Sum,
    };

    fn occlusal() -> ClassHierarchy {
        ClassHierarchy::occlusal()
    }

    fn flat(n: usize) -> ClassHierarchy {
        ClassHierarchy::build(&HierarchySpec {
            leaves: (0..n).map(|i| format!("C{i}")).collect(),
            coarse_levels: vec![],
        })
        .unwrap()
    }

    fn one_pixel(logits: [f64; 3], label: u8) -> (ChannelField, LabelMask) {
        let field = ChannelField::from_values(1, 1, 3, logits.to_vec());
        let mut target = LabelMask::new(1, 1).unwrap();
        target.set(0, 0, label);
        (field, target)
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        h: &ClassHierarchy,
        height: usize,
        width: usize,
    ) -> (ChannelField, LabelMask) {
        let n = h.num_leaves();
        let values = (0..height * width * n)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let logits = ChannelField::from_values(height, width, n, values);
        let mut target = LabelMask::new(width as u32, height as u32).unwrap();
        for y in 0..height as u32 {
            for x in 0..width as u32 {
                target.set(x, y, rng.random_range(0..n as u8));
            }
        }
        (logits, target)
    }

    #[test]
    fn softmax_matches_hand_values() {
        let uniform = ChannelField::from_values(1, 1, 3, vec![0.0, 0.0, 0.0]);
        let probs = softmax_probs(&uniform);
        for c in 0..3 {
            assert!((probs.get(0, 0, c) - 1.0 / 3.0).abs() < 1e-15);
        }

        // Shift invariance.
        let shifted = ChannelField::from_values(1, 1, 3, vec![7.5, 7.5, 7.5]);
        assert_eq!(softmax_probs(&shifted), probs);

        let skew = ChannelField::from_values(1, 1, 3, vec![2.0f64.ln(), 0.0, 0.0]);
        let probs = softmax_probs(&skew);
        assert!((probs.get(0, 0, 0) - 0.5).abs() < 1e-15);
        assert!((probs.get(0, 0, 1) - 0.25).abs() < 1e-15);
        assert!((probs.get(0, 0, 2) - 0.25).abs() < 1e-15);

        // Extreme logits stay normalized.
        let extreme = ChannelField::from_values(1, 1, 3, vec![1e4, -1e4, 0.0]);
        let probs = softmax_probs(&extreme);
        assert!((probs.pixel(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hcel_levels_match_hand_evaluation() {
        let h = occlusal();
        let (logits, target) = one_pixel([0.0, 0.0, 0.0], 1);
        // Finest level: -ln(1/3); coarse level: target projects to FULL with
        // probability 2/3.
        assert!((hcel_level(&logits, &target, &h, 1) - 3f64.ln()).abs() < 1e-12);
        assert!((hcel_level(&logits, &target, &h, 0) - 1.5f64.ln()).abs() < 1e-12);
        assert!((hcel_total(&logits, &target, &h) - (3f64.ln() + 1.5f64.ln())).abs() < 1e-12);
        assert!((hcel_total(&logits, &target, &h) - 1.504_077_396_776_274_2).abs() < 1e-12);

        let (confident, target) = one_pixel([-30.0, 30.0, -30.0], 1);
        assert!(hcel_level(&confident, &target, &h, 1) < 1e-12);
    }

    #[test]
    fn hcel_sums_linearly_over_pixels() {
        let h = occlusal();
        let (one, target_one) = one_pixel([0.3, -0.2, 1.0], 2);
        let two = ChannelField::from_values(1, 2, 3, vec![0.3, -0.2, 1.0, 0.3, -0.2, 1.0]);
        let mut target_two = LabelMask::new(2, 1).unwrap();
        target_two.set(0, 0, 2);
        target_two.set(1, 0, 2);
        let single = hcel_total(&one, &target_one, &h);
        let double = hcel_total(&two, &target_two, &h);
        assert!((double - 2.0 * single).abs() < 1e-12);
    }

    #[test]
    fn hdl_levels_match_hand_evaluation() {
        let h = occlusal();
        let (logits, target) = one_pixel([0.0, 0.0, 0.0], 1);
        let fine = hdl_level(&logits, &target, &h, 1, &EPS_LIMIT);
        let coarse = hdl_level(&logits, &target, &h, 0, &EPS_LIMIT);
        assert!((fine - 2.0 / 3.0).abs() < 1e-9);
        assert!((coarse - 1.0 / 3.0).abs() < 1e-9);
        assert!((hdl_total(&logits, &target, &h, &EPS_LIMIT) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hdl_perfect_prediction_is_bounded_by_epsilon() {
        let h = occlusal();
        let cfg = LossConfig::default();
        let (logits, target) = one_pixel([-40.0, 40.0, -40.0], 1);
        for level in 0..2 {
            let value = hdl_level(&logits, &target, &h, level, &cfg);
            // 1 - (2P + 2ε)/(2P + ε) is slightly negative, magnitude ≤ ε/(2P).
            assert!(value <= 0.0);
            assert!(value.abs() <= cfg.epsilon / 2.0 + 1e-15);
        }
    }

    #[test]
    fn combined_matches_hand_value_and_shift_invariance() {
        let h = occlusal();
        let (logits, target) = one_pixel([0.0, 0.0, 0.0], 1);
        let combined = combined_loss(&logits, &target, &h, &EPS_LIMIT);
        assert!((combined - 2.504_077_396_776_274).abs() < 1e-6);

        let (shifted, _) = one_pixel([5.0, 5.0, 5.0], 1);
        let shifted_loss = combined_loss(&shifted, &target, &h, &EPS_LIMIT);
        assert!((combined - shifted_loss).abs() < 1e-9);

        let (confident, target) = one_pixel([-40.0, 40.0, -40.0], 1);
        assert!(combined_loss(&confident, &target, &h, &EPS_LIMIT).abs() < 1e-6);
    }

    #[test]
    fn flat_hierarchy_reduces_to_standard_losses() {
        let h = flat(3);
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (logits, target) = random_instance(&mut rng, &h, 4, 4);
            let probs = softmax_probs(&logits);

            // Standard multiclass cross entropy, SUM over pixels.
            let ce: f64 = target
                .labels()
                .iter()
                .enumerate()
                .map(|(p, &label)| -probs.pixel(p)[label as usize].ln())
                .sum();
            assert!((hcel_total(&logits, &target, &h) - ce).abs() < 1e-12);

            // Standard micro soft dice.
            let overlap: f64 = target
                .labels()
                .iter()
                .enumerate()
                .map(|(p, &label)| probs.pixel(p)[label as usize])
                .sum();
            let denom = 2.0 * probs.num_pixels() as f64 + cfg.epsilon;
            let dice = 1.0 - (2.0 * overlap + 2.0 * cfg.epsilon) / denom;
            assert!((hdl_total(&logits, &target, &h, &cfg) - dice).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_softmax_cross_entropy_identity_on_flat_hierarchy() {
        // With one flat level and the dice part removed by epsilon -> the
        // dice gradient still exists; use the identity on the HCEL part by
        // comparing against probs - onehot + dice term analytically is
        // overkill. Instead check the known identity with dice disabled via
        // a huge pixel count... simplest: verify HCEL-only gradient by
        // finite differences of hcel_total.
        let h = flat(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (logits, target) = random_instance(&mut rng, &h, 2, 2);
        let probs = softmax_probs(&logits);
        let step = 1e-6;
        let mut probe = logits.clone();
        for p in 0..4 {
            for j in 0..3 {
                let i = p * 3 + j;
                let orig = probe.values()[i];
                probe.values_mut()[i] = orig + step;
                let plus = hcel_total(&probe, &target, &h);
                probe.values_mut()[i] = orig - step;
                let minus = hcel_total(&probe, &target, &h);
                probe.values_mut()[i] = orig;
                let fd = (plus - minus) / (2.0 * step);
                let expected = probs.pixel(p)[j]
                    - if target.labels()[p] as usize == j { 1.0 } else { 0.0 };
                assert!((fd - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let h = occlusal();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let (logits, target) = random_instance(&mut rng, &h, 4, 4);
            let analytic = combined_loss_grad(&logits, &target, &h, &cfg);
            let numeric = finite_diff_grad(&logits, &target, &h, &cfg, 1e-5);
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn gradient_matches_with_mean_reduction() {
        let h = occlusal();
        let cfg = LossConfig {
            epsilon: 1e-6,
            hcel_reduction: PixelReduction::Mean,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (logits, target) = random_instance(&mut rng, &h, 4, 4);
        let analytic = combined_loss_grad(&logits, &target, &h, &cfg);
        let numeric = finite_diff_grad(&logits, &target, &h, &cfg, 1e-5);
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn hcel_gradient_components_sum_to_zero_per_pixel() {
        // Shift invariance of the softmax makes the full combined gradient
        // sum to zero per pixel as well.
        let h = occlusal();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (logits, target) = random_instance(&mut rng, &h, 3, 5);
        let grad = combined_loss_grad(&logits, &target, &h, &cfg);
        for p in 0..grad.num_pixels() {
            let s: f64 = grad.pixel(p).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        let h = occlusal();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (logits, target) = random_instance(&mut rng, &h, 2, 2);
        let analytic = combined_loss_grad(&logits, &target, &h, &cfg);

        let err = |step: f64| -> f64 {
            let numeric = finite_diff_grad(&logits, &target, &h, &cfg, step);
            analytic
                .values()
                .iter()
                .zip(numeric.values())
                .fold(0.0f64, |acc, (a, n)| acc.max((a - n).abs()))
        };
        let coarse = err(1e-2);
        let fine = err(5e-3);
        // Central differences are second-order accurate: halving the step
        // should cut the error by roughly 4. Allow generous slack.
        assert!(fine < coarse / 2.5, "coarse {coarse}, fine {fine}");
    }

    #[test]
    fn uniform_shift_is_a_constant_loss_direction() {
        let h = occlusal();
        let cfg = LossConfig::default();
        let (logits, target) = one_pixel([0.4, -1.0, 0.2], 2);
        let grad = combined_loss_grad(&logits, &target, &h, &cfg);
        // Directional derivative along (1,1,1) is the per-pixel component sum.
        let directional: f64 = grad.pixel(0).iter().sum();
        assert!(directional.abs() < 1e-12);
    }

    #[test]
    fn losses_are_permutation_equivariant_over_pixels() {
        let h = occlusal();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (logits, target) = random_instance(&mut rng, &h, 4, 4);

        // Reverse the pixel order in both logits and target.
        let n = h.num_leaves();
        let pixels = logits.num_pixels();
        let mut rev_values = Vec::with_capacity(pixels * n);
        for p in (0..pixels).rev() {
            rev_values.extend_from_slice(logits.pixel(p));
        }
        let rev_logits = ChannelField::from_values(logits.height(), logits.width(), n, rev_values);
        let rev_labels: Vec<u8> = target.labels().iter().rev().cloned().collect();
        let rev_target = LabelMask::from_labels(target.width(), target.height(), rev_labels).unwrap();

        // Summation order changes, so allow float-roundoff slack.
        let a = evaluate(&logits, &target, &h, &cfg);
        let b = evaluate(&rev_logits, &rev_target, &h, &cfg);
        for (x, y) in a.hcel_levels.iter().zip(&b.hcel_levels) {
            assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
        }
        for (x, y) in a.hdl_levels.iter().zip(&b.hdl_levels) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn level_terms_are_nonnegative_up_to_epsilon() {
        let h = occlusal();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let (logits, target) = random_instance(&mut rng, &h, 3, 3);
            let breakdown = evaluate(&logits, &target, &h, &cfg);
            let finest = h.finest_level();
            for level in 0..h.num_levels() {
                assert!(breakdown.hcel_levels[level] >= 0.0);
                assert!(breakdown.hdl_levels[level] >= -cfg.epsilon);
                assert!(breakdown.hdl_levels[level] <= 1.0);
            }
            assert!(breakdown.hcel >= breakdown.hcel_levels[finest]);
            assert!(breakdown.hdl >= breakdown.hdl_levels[finest] - cfg.epsilon);
        }
    }

    #[test]
    fn clamped_pixels_are_counted() {
        let h = occlusal();
        let cfg = LossConfig::default();
        // exp(-1500) underflows to exactly 0 after max subtraction.
        let (logits, target) = one_pixel([1000.0, -1000.0, 900.0], 1);
        let breakdown = evaluate(&logits, &target, &h, &cfg);
        assert!(breakdown.clamped_pixels > 0);
        assert!(breakdown.combined.is_finite());
    }

    #[test]
    fn mean_reduction_scales_the_hcel_part_only() {
        let h = occlusal();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (logits, target) = random_instance(&mut rng, &h, 4, 2);
        let sum_cfg = LossConfig::default();
        let mean_cfg = LossConfig {
            epsilon: sum_cfg.epsilon,
            hcel_reduction: PixelReduction::Mean,
        };
        let sum = evaluate(&logits, &target, &h, &sum_cfg);
        let mean = evaluate(&logits, &target, &h, &mean_cfg);
        let pixels = logits.num_pixels() as f64;
        assert!((mean.hcel - sum.hcel / pixels).abs() < 1e-12);
        assert_eq!(mean.hdl_levels, sum.hdl_levels);
    }
}
