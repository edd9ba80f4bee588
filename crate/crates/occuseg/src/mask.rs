//! Binary mask set algebra, the MTP/MFP mask-generation pipeline, the
//! grayscale multiclass codec, spatial calibration transforms, and overlay
//! rendering.
//!
//! The generation pipeline takes three spatially calibrated binary masks —
//! the articulating-paper (AP) mask and the bite-registration test/retest
//! masks — and produces a three-class label mask:
//!
//! * `MTP = AP ∩ test ∩ retest` (ink confirmed by both registrations),
//! * `MFP = AP \ MTP` (ink not confirmed),
//! * everything else is Background.
//!
//! On disk, label masks are 8-bit grayscale PNGs with values exactly
//! `{0, 128, 255}` (Background, MFP, MTP) and binary masks use `{0, 255}`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use thiserror::Error;

use crate::hierarchy::{OCCLUSAL_BACKGROUND, OCCLUSAL_MFP, OCCLUSAL_MTP};

/// Gray value encoding Background pixels.
pub const GRAY_BACKGROUND: u8 = 0;
/// Gray value encoding MFP pixels (grey).
pub const GRAY_MFP: u8 = 128;
/// Gray value encoding MTP pixels (white).
pub const GRAY_MTP: u8 = 255;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask dimensions differ: {w0}x{h0} vs {w1}x{h1}")]
    ShapeMismatch { w0: u32, h0: u32, w1: u32, h1: u32 },
    #[error("mask dimensions must be positive, got {0}x{1}")]
    EmptyMask(u32, u32),
    #[error("illegal gray values {0}: expected {1}")]
    IllegalGrayValues(GrayValueList, &'static str),
    #[error("label {0} is not a legal class id (expected 0, 1 or 2)")]
    IllegalLabel(u8),
    #[error("crop {x},{y} {w}x{h} exceeds source bounds {src_w}x{src_h}")]
    CropOutOfBounds { x: u32, y: u32, w: u32, h: u32, src_w: u32, src_h: u32 },
    #[error("invalid transform: {0}")]
    BadTransform(String),
}

/// Offending gray values collected for error reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayValueList(pub Vec<u8>);

impl fmt::Display for GrayValueList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "[{}]", items.join(", "))
    }
}

fn check_same_shape(aw: u32, ah: u32, bw: u32, bh: u32) -> Result<(), MaskError> {
    if aw != bw || ah != bh {
        return Err(MaskError::ShapeMismatch {
            w0: aw,
            h0: ah,
            w1: bw,
            h1: bh,
        });
    }
    Ok(())
}

/// Single-class raster of positive/negative pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    /// All-negative mask. Dimensions must be positive.
    pub fn new(width: u32, height: u32) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyMask(width, height));
        }
        Ok(BinaryMask {
            width,
            height,
            bits: vec![false; (width as usize) * (height as usize)],
        })
    }

    /// Mask with the given positions set, for fixtures and tests.
    pub fn from_positions(
        width: u32,
        height: u32,
        positions: &[(u32, u32)],
    ) -> Result<Self, MaskError> {
        let mut mask = Self::new(width, height)?;
        for &(x, y) in positions {
            mask.set(x, y, true);
        }
        Ok(mask)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[(y * self.width + x) as usize] = value;
    }

    pub fn count_positives(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Positive pixel coordinates in row-major order.
    pub fn positions(&self) -> BTreeSet<(u32, u32)> {
        let mut set = BTreeSet::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    set.insert((x, y));
                }
            }
        }
        set
    }

    fn zip_map(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<Self, MaskError> {
        check_same_shape(self.width, self.height, other.width, other.height)?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Pixelwise AND.
    pub fn intersect(&self, other: &BinaryMask) -> Result<Self, MaskError> {
        self.zip_map(other, |a, b| a && b)
    }

    /// Pixelwise OR.
    pub fn union(&self, other: &BinaryMask) -> Result<Self, MaskError> {
        self.zip_map(other, |a, b| a || b)
    }

    /// Pixelwise AND-NOT (`self` minus `other`).
    pub fn subtract(&self, other: &BinaryMask) -> Result<Self, MaskError> {
        self.zip_map(other, |a, b| a && !b)
    }
}

/// Per-pixel class-id raster; 0 = Background, 1 = MTP, 2 = MFP for the
/// occlusal classes. The container itself accepts any `u8` labels so it can
/// also carry targets of other hierarchies; the grayscale codec and the
/// mask-generation pipeline are what pin the three-class encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

impl LabelMask {
    /// All-Background mask.
    pub fn new(width: u32, height: u32) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyMask(width, height));
        }
        Ok(LabelMask {
            width,
            height,
            labels: vec![0; (width as usize) * (height as usize)],
        })
    }

    pub fn from_labels(width: u32, height: u32, labels: Vec<u8>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 || labels.len() != (width as usize) * (height as usize) {
            return Err(MaskError::EmptyMask(width, height));
        }
        Ok(LabelMask {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, label: u8) {
        self.labels[(y * self.width + x) as usize] = label;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    /// Binary mask of the pixels carrying `class_id`.
    pub fn class_mask(&self, class_id: u8) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l == class_id).collect(),
        }
    }

    /// Count of pixels per label value present in the mask.
    pub fn histogram(&self) -> Vec<(u8, usize)> {
        let mut counts = [0usize; 256];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(l, &c)| (l as u8, c))
            .collect()
    }
}

/// Derive the MTP/MFP label mask from an AP mask and the bite-registration
/// test/retest masks: `MTP = ap ∩ test ∩ retest`, `MFP = ap \ MTP`.
pub fn generate_mtp_mfp(
    ap: &BinaryMask,
    ofr_test: &BinaryMask,
    ofr_retest: &BinaryMask,
) -> Result<LabelMask, MaskError> {
    check_same_shape(ap.width, ap.height, ofr_test.width, ofr_test.height)?;
    check_same_shape(ap.width, ap.height, ofr_retest.width, ofr_retest.height)?;
    let labels = ap
        .bits
        .iter()
        .zip(ofr_test.bits.iter().zip(&ofr_retest.bits))
        .map(|(&a, (&t, &r))| {
            if a && t && r {
                OCCLUSAL_MTP
            } else if a {
                OCCLUSAL_MFP
            } else {
                OCCLUSAL_BACKGROUND
            }
        })
        .collect();
    Ok(LabelMask {
        width: ap.width,
        height: ap.height,
        labels,
    })
}

/// Encode a three-class label mask as an 8-bit grayscale raster
/// (`0`/`128`/`255` for Background/MFP/MTP).
pub fn encode_label_mask(mask: &LabelMask) -> Result<GrayImage, MaskError> {
    let mut img = GrayImage::new(mask.width, mask.height);
    for (pixel, &label) in img.pixels_mut().zip(&mask.labels) {
        pixel.0[0] = match label {
            OCCLUSAL_BACKGROUND => GRAY_BACKGROUND,
            OCCLUSAL_MTP => GRAY_MTP,
            OCCLUSAL_MFP => GRAY_MFP,
            other => return Err(MaskError::IllegalLabel(other)),
        };
    }
    Ok(img)
}

/// Decode a grayscale raster back into a label mask. Any value outside
/// `{0, 128, 255}` is a format error listing the offending values.
pub fn decode_label_mask(raster: &GrayImage) -> Result<LabelMask, MaskError> {
    let mut bad = BTreeSet::new();
    let mut labels = Vec::with_capacity((raster.width() * raster.height()) as usize);
    for pixel in raster.pixels() {
        match pixel.0[0] {
            GRAY_BACKGROUND => labels.push(OCCLUSAL_BACKGROUND),
            GRAY_MTP => labels.push(OCCLUSAL_MTP),
            GRAY_MFP => labels.push(OCCLUSAL_MFP),
            other => {
                bad.insert(other);
            }
        }
    }
    if !bad.is_empty() {
        return Err(MaskError::IllegalGrayValues(
            GrayValueList(bad.into_iter().collect()),
            "{0, 128, 255}",
        ));
    }
    LabelMask::from_labels(raster.width(), raster.height(), labels)
}

/// Encode a binary mask as an 8-bit grayscale raster (`0`/`255`).
pub fn encode_binary_mask(mask: &BinaryMask) -> GrayImage {
    let mut img = GrayImage::new(mask.width, mask.height);
    for (pixel, &bit) in img.pixels_mut().zip(&mask.bits) {
        pixel.0[0] = if bit { 255 } else { 0 };
    }
    img
}

/// Decode a grayscale raster into a binary mask; values must be `{0, 255}`.
pub fn decode_binary_mask(raster: &GrayImage) -> Result<BinaryMask, MaskError> {
    let mut bad = BTreeSet::new();
    let mut bits = Vec::with_capacity((raster.width() * raster.height()) as usize);
    for pixel in raster.pixels() {
        match pixel.0[0] {
            0 => bits.push(false),
            255 => bits.push(true),
            other => {
                bad.insert(other);
            }
        }
    }
    if !bad.is_empty() {
        return Err(MaskError::IllegalGrayValues(
            GrayValueList(bad.into_iter().collect()),
            "{0, 255}",
        ));
    }
    if raster.width() == 0 || raster.height() == 0 {
        return Err(MaskError::EmptyMask(raster.width(), raster.height()));
    }
    Ok(BinaryMask {
        width: raster.width(),
        height: raster.height(),
        bits,
    })
}

/// Per-patient spatial calibration: crop a rectangle out of the source frame
/// and resize it to a square output. The same transform instance is applied
/// to every raster of a patient so masks stay aligned across modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatientTransform {
    pub crop_x: u32,
    pub crop_y: u32,
    pub crop_w: u32,
    pub crop_h: u32,
    /// Side length of the square output frame.
    pub output_size: u32,
}

impl PatientTransform {
    /// Identity transform for rasters already in a `size`-square frame.
    pub fn identity(size: u32) -> Self {
        PatientTransform {
            crop_x: 0,
            crop_y: 0,
            crop_w: size,
            crop_h: size,
            output_size: size,
        }
    }

    pub fn validate(&self, src_w: u32, src_h: u32) -> Result<(), MaskError> {
        if self.crop_w == 0 || self.crop_h == 0 || self.output_size == 0 {
            return Err(MaskError::BadTransform(format!(
                "crop {}x{} and output size {} must be positive",
                self.crop_w, self.crop_h, self.output_size
            )));
        }
        let x_end = self.crop_x.checked_add(self.crop_w);
        let y_end = self.crop_y.checked_add(self.crop_h);
        match (x_end, y_end) {
            (Some(xe), Some(ye)) if xe <= src_w && ye <= src_h => Ok(()),
            _ => Err(MaskError::CropOutOfBounds {
                x: self.crop_x,
                y: self.crop_y,
                w: self.crop_w,
                h: self.crop_h,
                src_w,
                src_h,
            }),
        }
    }

    /// Apply to a categorical raster (mask): crop, then nearest-neighbor
    /// resize so labels stay categorical. Output pixel `(x, y)` reads source
    /// pixel `(floor(x·w/out), floor(y·h/out))` of the crop, so an exact
    /// 2x upscale turns each source pixel into a 2x2 block.
    pub fn apply_to_gray(&self, raster: &GrayImage) -> Result<GrayImage, MaskError> {
        self.validate(raster.width(), raster.height())?;
        let out = self.output_size;
        let mut result = GrayImage::new(out, out);
        for y in 0..out {
            let sy = self.crop_y + ((y as u64 * self.crop_h as u64) / out as u64) as u32;
            for x in 0..out {
                let sx = self.crop_x + ((x as u64 * self.crop_w as u64) / out as u64) as u32;
                result.put_pixel(x, y, *raster.get_pixel(sx, sy));
            }
        }
        Ok(result)
    }

    /// Apply to a photograph: crop, then bilinear resize. An identity crop
    /// at matching size reproduces the input exactly.
    pub fn apply_to_rgb(&self, raster: &RgbImage) -> Result<RgbImage, MaskError> {
        self.validate(raster.width(), raster.height())?;
        let out = self.output_size;
        let sx_scale = self.crop_w as f64 / out as f64;
        let sy_scale = self.crop_h as f64 / out as f64;
        let mut result = RgbImage::new(out, out);
        for y in 0..out {
            let fy = ((y as f64 + 0.5) * sy_scale - 0.5).max(0.0);
            let y0 = (fy.floor() as u32).min(self.crop_h - 1);
            let y1 = (y0 + 1).min(self.crop_h - 1);
            let wy = fy - y0 as f64;
            for x in 0..out {
                let fx = ((x as f64 + 0.5) * sx_scale - 0.5).max(0.0);
                let x0 = (fx.floor() as u32).min(self.crop_w - 1);
                let x1 = (x0 + 1).min(self.crop_w - 1);
                let wx = fx - x0 as f64;
                let mut channels = [0u8; 3];
                for (c, channel) in channels.iter_mut().enumerate() {
                    let p00 = raster.get_pixel(self.crop_x + x0, self.crop_y + y0).0[c] as f64;
                    let p10 = raster.get_pixel(self.crop_x + x1, self.crop_y + y0).0[c] as f64;
                    let p01 = raster.get_pixel(self.crop_x + x0, self.crop_y + y1).0[c] as f64;
                    let p11 = raster.get_pixel(self.crop_x + x1, self.crop_y + y1).0[c] as f64;
                    let top = p00 * (1.0 - wx) + p10 * wx;
                    let bottom = p01 * (1.0 - wx) + p11 * wx;
                    *channel = (top * (1.0 - wy) + bottom * wy).round().clamp(0.0, 255.0) as u8;
                }
                result.put_pixel(x, y, Rgb(channels));
            }
        }
        Ok(result)
    }

    /// Sidecar serialization (`transform.txt`), key = value per line.
    pub fn to_sidecar_string(&self) -> String {
        format!(
            "crop_x = {}\ncrop_y = {}\ncrop_w = {}\ncrop_h = {}\noutput_size = {}\n",
            self.crop_x, self.crop_y, self.crop_w, self.crop_h, self.output_size
        )
    }

    pub fn from_sidecar_str(text: &str) -> Result<Self, MaskError> {
        #[derive(serde::Deserialize)]
        struct Sidecar {
            crop_x: u32,
            crop_y: u32,
            crop_w: u32,
            crop_h: u32,
            output_size: u32,
        }
        let s: Sidecar =
            toml::from_str(text).map_err(|e| MaskError::BadTransform(e.to_string()))?;
        Ok(PatientTransform {
            crop_x: s.crop_x,
            crop_y: s.crop_y,
            crop_w: s.crop_w,
            crop_h: s.crop_h,
            output_size: s.output_size,
        })
    }

    pub fn load(path: &Path) -> Result<Self, MaskError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MaskError::BadTransform(format!("{}: {e}", path.display())))?;
        Self::from_sidecar_str(&text)
    }
}

/// Overlay color for pixels predicted positive but not in the target (FP).
pub const OVERLAY_FP: Rgb<u8> = Rgb([255, 0, 0]);
/// Overlay color for target pixels missed by the prediction (FN).
pub const OVERLAY_FN: Rgb<u8> = Rgb([0, 255, 0]);
/// Overlay color for agreed pixels (TP).
pub const OVERLAY_TP: Rgb<u8> = Rgb([255, 255, 0]);

/// Render the prediction/target comparison: red where only the prediction is
/// positive (FP), green where only the target is (FN), yellow where both
/// agree (TP), composited over `base` when given, black otherwise.
pub fn render_overlay(
    pred: &BinaryMask,
    target: &BinaryMask,
    base: Option<&RgbImage>,
) -> Result<RgbImage, MaskError> {
    check_same_shape(pred.width, pred.height, target.width, target.height)?;
    if let Some(img) = base {
        check_same_shape(pred.width, pred.height, img.width(), img.height())?;
    }
    let mut out = match base {
        Some(img) => img.clone(),
        None => RgbImage::new(pred.width, pred.height),
    };
    for y in 0..pred.height {
        for x in 0..pred.width {
            match (pred.get(x, y), target.get(x, y)) {
                (true, true) => out.put_pixel(x, y, OVERLAY_TP),
                (true, false) => out.put_pixel(x, y, OVERLAY_FP),
                (false, true) => out.put_pixel(x, y, OVERLAY_FN),
                (false, false) => {}
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: u32, h: u32, pos: &[(u32, u32)]) -> BinaryMask {
        BinaryMask::from_positions(w, h, pos).unwrap()
    }

    #[test]
    fn set_operations_match_set_semantics() {
        let a = mask(2, 2, &[(0, 0), (0, 1)]);
        let b = mask(2, 2, &[(0, 1), (1, 1)]);
        assert_eq!(a.intersect(&b).unwrap().positions(), [(0, 1)].into());
        assert_eq!(
            a.union(&mask(2, 2, &[(1, 1)])).unwrap().positions(),
            [(0, 0), (0, 1), (1, 1)].into()
        );
        assert_eq!(a.intersect(&a).unwrap(), a);
        let empty = BinaryMask::new(2, 2).unwrap();
        assert_eq!(a.intersect(&empty).unwrap(), empty);
        assert_eq!(a.subtract(&a).unwrap(), empty);
        assert_eq!(a.subtract(&empty).unwrap(), a);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = mask(2, 2, &[]);
        let b = mask(3, 2, &[]);
        assert!(matches!(
            a.intersect(&b),
            Err(MaskError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mtp_mfp_generation_follows_the_pipeline() {
        // AP = {(0,0),(0,1),(1,0)}, Td∩Rd = {(0,1),(1,1)} -> MTP = {(0,1)},
        // MFP = {(0,0),(1,0)}.
        let ap = mask(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        let td = mask(2, 2, &[(0, 1), (1, 1)]);
        let rd = mask(2, 2, &[(0, 1), (1, 1), (0, 0)]);
        // td ∩ rd = {(0,1),(1,1)}
        let label = generate_mtp_mfp(&ap, &td, &rd).unwrap();
        assert_eq!(label.class_mask(OCCLUSAL_MTP).positions(), [(0, 1)].into());
        assert_eq!(
            label.class_mask(OCCLUSAL_MFP).positions(),
            [(0, 0), (1, 0)].into()
        );

        // Disjoint: everything becomes MFP.
        let far = mask(2, 2, &[(1, 1)]);
        let label = generate_mtp_mfp(&ap, &far, &far).unwrap();
        assert_eq!(label.class_mask(OCCLUSAL_MTP).count_positives(), 0);
        assert_eq!(label.class_mask(OCCLUSAL_MFP).positions(), ap.positions());

        // Containment: everything becomes MTP.
        let all = mask(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let label = generate_mtp_mfp(&ap, &all, &all).unwrap();
        assert_eq!(label.class_mask(OCCLUSAL_MTP).positions(), ap.positions());
        assert_eq!(label.class_mask(OCCLUSAL_MFP).count_positives(), 0);
    }

    #[test]
    fn label_codec_round_trips_and_rejects_bad_values() {
        let mut label = LabelMask::new(3, 2).unwrap();
        label.set(1, 0, OCCLUSAL_MTP);
        label.set(2, 1, OCCLUSAL_MFP);
        let img = encode_label_mask(&label).unwrap();
        assert_eq!(img.get_pixel(1, 0).0[0], GRAY_MTP);
        assert_eq!(img.get_pixel(2, 1).0[0], GRAY_MFP);
        assert_eq!(img.get_pixel(0, 0).0[0], GRAY_BACKGROUND);
        assert_eq!(decode_label_mask(&img).unwrap(), label);

        let mut bad = img.clone();
        bad.put_pixel(0, 0, image::Luma([7]));
        match decode_label_mask(&bad) {
            Err(MaskError::IllegalGrayValues(values, _)) => assert_eq!(values.0, vec![7]),
            other => panic!("expected illegal gray values, got {other:?}"),
        }
    }

    #[test]
    fn binary_codec_round_trips() {
        let m = mask(3, 3, &[(0, 0), (2, 2)]);
        let img = encode_binary_mask(&m);
        assert_eq!(decode_binary_mask(&img).unwrap(), m);
        let mut bad = img.clone();
        bad.put_pixel(1, 1, image::Luma([37]));
        assert!(matches!(
            decode_binary_mask(&bad),
            Err(MaskError::IllegalGrayValues(..))
        ));
    }

    #[test]
    fn identity_transform_is_a_no_op() {
        let mut img = GrayImage::new(4, 4);
        img.put_pixel(1, 2, image::Luma([255]));
        let t = PatientTransform::identity(4);
        assert_eq!(t.apply_to_gray(&img).unwrap(), img);

        let mut rgb = RgbImage::new(4, 4);
        rgb.put_pixel(3, 1, Rgb([10, 200, 30]));
        assert_eq!(t.apply_to_rgb(&rgb).unwrap(), rgb);
    }

    #[test]
    fn nearest_upscale_makes_blocks_and_scales_counts() {
        let m = mask(2, 2, &[(0, 0), (1, 1)]);
        let img = encode_binary_mask(&m);
        let t = PatientTransform {
            crop_x: 0,
            crop_y: 0,
            crop_w: 2,
            crop_h: 2,
            output_size: 4,
        };
        let up = decode_binary_mask(&t.apply_to_gray(&img).unwrap()).unwrap();
        assert_eq!(up.count_positives(), 4 * m.count_positives());
        assert_eq!(
            up.positions(),
            [(0, 0), (1, 0), (0, 1), (1, 1), (2, 2), (3, 2), (2, 3), (3, 3)].into()
        );
    }

    #[test]
    fn out_of_bounds_crop_is_rejected() {
        let img = GrayImage::new(4, 4);
        let t = PatientTransform {
            crop_x: 2,
            crop_y: 2,
            crop_w: 3,
            crop_h: 1,
            output_size: 4,
        };
        assert!(matches!(
            t.apply_to_gray(&img),
            Err(MaskError::CropOutOfBounds { .. })
        ));
    }

    #[test]
    fn transform_sidecar_round_trips() {
        let t = PatientTransform {
            crop_x: 12,
            crop_y: 34,
            crop_w: 500,
            crop_h: 500,
            output_size: 1000,
        };
        let text = t.to_sidecar_string();
        assert_eq!(PatientTransform::from_sidecar_str(&text).unwrap(), t);
    }

    #[test]
    fn overlay_classifies_pixels() {
        let pred = mask(2, 2, &[(0, 0), (0, 1)]);
        let target = mask(2, 2, &[(0, 1)]);
        let img = render_overlay(&pred, &target, None).unwrap();
        assert_eq!(*img.get_pixel(0, 0), OVERLAY_FP);
        assert_eq!(*img.get_pixel(0, 1), OVERLAY_TP);
        assert_eq!(*img.get_pixel(1, 1), Rgb([0, 0, 0]));

        let same = render_overlay(&pred, &pred, None).unwrap();
        assert_eq!(*same.get_pixel(0, 0), OVERLAY_TP);
        assert_eq!(*same.get_pixel(0, 1), OVERLAY_TP);

        let disjoint = render_overlay(&pred, &mask(2, 2, &[(1, 0)]), None).unwrap();
        assert_eq!(*disjoint.get_pixel(0, 0), OVERLAY_FP);
        assert_eq!(*disjoint.get_pixel(1, 0), OVERLAY_FN);
    }

    fn arb_mask(w: u32, h: u32) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), (w * h) as usize).prop_map(move |bits| {
            let mut m = BinaryMask::new(w, h).unwrap();
            for (i, bit) in bits.into_iter().enumerate() {
                m.bits[i] = bit;
            }
            m
        })
    }

    proptest! {
        #[test]
        fn boolean_algebra_laws(a in arb_mask(8, 6), b in arb_mask(8, 6), c in arb_mask(8, 6)) {
            prop_assert_eq!(a.intersect(&b).unwrap(), b.intersect(&a).unwrap());
            prop_assert_eq!(a.union(&b).unwrap(), b.union(&a).unwrap());
            prop_assert_eq!(a.intersect(&a).unwrap(), a.clone());
            // De Morgan via subtraction: c \ (a ∪ b) = (c \ a) ∩ (c \ b)
            prop_assert_eq!(
                c.subtract(&a.union(&b).unwrap()).unwrap(),
                c.subtract(&a).unwrap().intersect(&c.subtract(&b).unwrap()).unwrap()
            );
        }

        #[test]
        fn generated_masks_partition_the_ap_mask(
            ap in arb_mask(8, 6), td in arb_mask(8, 6), rd in arb_mask(8, 6)
        ) {
            let label = generate_mtp_mfp(&ap, &td, &rd).unwrap();
            let mtp = label.class_mask(OCCLUSAL_MTP);
            let mfp = label.class_mask(OCCLUSAL_MFP);
            prop_assert_eq!(mtp.union(&mfp).unwrap(), ap.clone());
            prop_assert_eq!(mtp.intersect(&mfp).unwrap().count_positives(), 0);
            let confirmed = td.intersect(&rd).unwrap();
            prop_assert_eq!(mtp.clone(), ap.intersect(&confirmed).unwrap());
        }

        #[test]
        fn codec_round_trip(labels in proptest::collection::vec(0u8..3, 48)) {
            let m = LabelMask::from_labels(8, 6, labels).unwrap();
            prop_assert_eq!(decode_label_mask(&encode_label_mask(&m).unwrap()).unwrap(), m);
        }

        #[test]
        fn overlay_partitions_union(pred in arb_mask(8, 6), target in arb_mask(8, 6)) {
            let img = render_overlay(&pred, &target, None).unwrap();
            for y in 0..6 {
                for x in 0..8 {
                    let expected = match (pred.get(x, y), target.get(x, y)) {
                        (true, true) => OVERLAY_TP,
                        (true, false) => OVERLAY_FP,
                        (false, true) => OVERLAY_FN,
                        (false, false) => Rgb([0, 0, 0]),
                    };
                    prop_assert_eq!(*img.get_pixel(x, y), expected);
                }
            }
        }
    }
}
