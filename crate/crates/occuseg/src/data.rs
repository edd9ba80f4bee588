//! Synthetic dataset generation, dataset loading, patient-wise k-fold
//! splitting, and training augmentation.
//!
//! The synthetic generator stands in for the clinical dataset: per patient
//! it renders a tooth-like background, elliptical ink blobs forming the AP
//! mask, and two bite-registration masks built so that the confirmed
//! fraction of the ink `|AP ∩ test ∩ retest| / |AP|` tracks the configured
//! overlap. The confirmed region is painted in a different ink color than
//! the unconfirmed rest, so the classes are separable from pixels alone and
//! the ground-truth label mask is known by construction — running the mask
//! pipeline on the emitted masks reproduces it exactly.
//!
//! On-disk layout, one directory per patient:
//!
//! ```text
//! root/patient_<id>/
//!   image_<thickness>_<application>_<session>.png   RGB photograph
//!   ap_<thickness>_<application>_<session>.png      AP binary mask
//!   ofr_test.png, ofr_retest.png                    registration masks
//!   transform.txt                                   calibration sidecar
//!   mask_<...>.png                                  written by gen-masks
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fsio;
use crate::mask::{
    decode_binary_mask, decode_label_mask, encode_binary_mask, BinaryMask, LabelMask, MaskError,
    PatientTransform,
};

/// Paper thicknesses of the four AP conditions, in micrometers.
pub const THICKNESSES: [u32; 4] = [12, 40, 100, 200];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Application {
    Active,
    Passive,
}

impl fmt::Display for Application {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Application::Active => "active",
            Application::Passive => "passive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Session {
    Test,
    Retest,
}

impl fmt::Display for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Session::Test => "test",
            Session::Retest => "retest",
        })
    }
}

/// The 16 acquisition conditions in a fixed order.
pub fn all_conditions() -> Vec<(u32, Application, Session)> {
    let mut out = Vec::with_capacity(16);
    for thickness in THICKNESSES {
        for application in [Application::Active, Application::Passive] {
            for session in [Session::Test, Session::Retest] {
                out.push((thickness, application, session));
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synth config: {0}")]
    BadConfig(String),
    #[error("missing file {0}")]
    Missing(PathBuf),
    #[error("{path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Mask {
        path: PathBuf,
        #[source]
        source: MaskError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected a {expected}x{expected} raster, got {width}x{height}")]
    BadDimensions {
        path: PathBuf,
        expected: u32,
        width: u32,
        height: u32,
    },
    #[error("k-fold split needs 1 <= k <= patient count, got k={k} for {patients} patients")]
    BadFoldCount { k: usize, patients: usize },
}

/// One acquisition condition of a patient: photograph, AP mask, optional
/// generated label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub thickness: u32,
    pub application: Application,
    pub session: Session,
    pub image: RgbImage,
    pub ap: BinaryMask,
    /// Ground-truth multiclass mask; populated by the generator or when a
    /// `mask_<...>.png` is present on disk.
    pub label: Option<LabelMask>,
}

impl ImageRecord {
    /// Condition key used in filenames, e.g. `100_passive_retest`.
    pub fn condition_key(&self) -> String {
        format!("{}_{}_{}", self.thickness, self.application, self.session)
    }
}

/// All rasters of one patient, spatially calibrated to a shared square frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub images: Vec<ImageRecord>,
    pub ofr_test: BinaryMask,
    pub ofr_retest: BinaryMask,
    pub transform: PatientTransform,
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub patients: usize,
    /// Side length of the square rasters.
    pub raster_size: u32,
    /// Inclusive range of ink blob counts per patient.
    pub blobs: (usize, usize),
    /// Inclusive blob radius range as a fraction of the raster size.
    pub radius_frac: (f64, f64),
    /// Inclusive range of registration-only blobs per session.
    pub extra_ofr_blobs: (usize, usize),
    /// Target confirmed fraction `|AP ∩ test ∩ retest| / |AP|`.
    pub overlap: f64,
    /// Per-channel uniform pixel noise amplitude (0..=255 scale).
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Radii sized so the unconfirmed ink ring around each confirmed
        // core stays a few pixels wide at 64x64; hairline rings are washed
        // out by augmentation resampling.
        SynthConfig {
            patients: 8,
            raster_size: 64,
            blobs: (2, 4),
            radius_frac: (0.12, 0.2),
            extra_ofr_blobs: (1, 3),
            overlap: 0.6,
            noise: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.patients == 0 {
            return Err(DataError::BadConfig("patient count must be positive".into()));
        }
        if self.raster_size < 8 {
            return Err(DataError::BadConfig("raster size must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(DataError::BadConfig(format!(
                "overlap fraction must lie in [0, 1], got {}",
                self.overlap
            )));
        }
        if self.blobs.0 == 0 || self.blobs.0 > self.blobs.1 {
            return Err(DataError::BadConfig("blob count range is empty".into()));
        }
        if self.radius_frac.0 <= 0.0 || self.radius_frac.0 > self.radius_frac.1 {
            return Err(DataError::BadConfig("blob radius range is empty".into()));
        }
        let max_radius = self.radius_frac.1 * self.raster_size as f64;
        if 2.0 * max_radius + 2.0 >= self.raster_size as f64 {
            return Err(DataError::BadConfig(format!(
                "blobs of radius {max_radius:.1} px do not fit a {} px raster",
                self.raster_size
            )));
        }
        if self.radius_frac.0 * (self.raster_size as f64) < 1.0 {
            return Err(DataError::BadConfig(
                "minimum blob radius is below one pixel".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    /// Orientation in radians.
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64, scale: f64) -> bool {
        if scale <= 0.0 {
            return false;
        }
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin, cos) = self.theta.sin_cos();
        let u = (dx * cos + dy * sin) / (self.rx * scale);
        let v = (-dx * sin + dy * cos) / (self.ry * scale);
        u * u + v * v <= 1.0
    }
}

fn rasterize(size: u32, ellipses: &[Ellipse], scale: f64) -> BinaryMask {
    let mut mask = BinaryMask::new(size, size).expect("validated raster size");
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if ellipses.iter().any(|e| e.contains(fx, fy, scale)) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

fn random_ellipse(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Ellipse {
    let size = cfg.raster_size as f64;
    let r_max = cfg.radius_frac.1 * size;
    let margin = r_max + 1.0;
    Ellipse {
        cx: rng.random_range(margin..size - margin),
        cy: rng.random_range(margin..size - margin),
        rx: rng.random_range(cfg.radius_frac.0 * size..=cfg.radius_frac.1 * size),
        ry: rng.random_range(cfg.radius_frac.0 * size..=cfg.radius_frac.1 * size),
        theta: rng.random_range(0.0..std::f64::consts::PI),
    }
}

/// Ink colors: the confirmed (MTP) region is rendered in blue ink, the
/// unconfirmed (MFP) rest in red ink. Distinct hues keep the synthetic task
/// solvable from pixels alone.
const MTP_INK: [f64; 3] = [45.0, 65.0, 190.0];
const MFP_INK: [f64; 3] = [235.0, 95.0, 105.0];

fn render_image(
    label: &LabelMask,
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    intensity: f64,
) -> RgbImage {
    let size = cfg.raster_size;
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            // Ivory gradient background, brighter towards the top left.
            let t = (x as f64 + y as f64) / (2.0 * size as f64);
            let base = [232.0 - 26.0 * t, 224.0 - 30.0 * t, 204.0 - 34.0 * t];
            let pixel = match label.get(x, y) {
                1 => blend(base, MTP_INK, 0.55 + 0.4 * intensity),
                2 => blend(base, MFP_INK, 0.55 + 0.4 * intensity),
                _ => base,
            };
            let mut channels = [0u8; 3];
            for (c, v) in pixel.iter().enumerate() {
                let jitter = rng.random_range(-cfg.noise..=cfg.noise);
                channels[c] = (v + jitter).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(channels));
        }
    }
    img
}

fn blend(base: [f64; 3], ink: [f64; 3], alpha: f64) -> [f64; 3] {
    let a = alpha.clamp(0.0, 1.0);
    [
        base[0] * (1.0 - a) + ink[0] * a,
        base[1] * (1.0 - a) + ink[1] * a,
        base[2] * (1.0 - a) + ink[2] * a,
    ]
}

/// SplitMix64 mixing of a base seed with up to two stream words; every
/// random decision in the crate draws from a generator seeded this way, so
/// per-item work is order-independent and reproducible.
pub(crate) fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate synthetic patients. Ground-truth label masks are attached to
/// every image record; [`write_dataset`] does not persist them (the mask
/// pipeline regenerates them from the emitted AP/registration masks).
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<PatientRecord>, DataError> {
    cfg.validate()?;
    let size = cfg.raster_size;
    let mut patients = Vec::with_capacity(cfg.patients);
    for p in 0..cfg.patients {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, p as u64, 0x50415449));

        // Contact sites shared by all of the patient's images.
        let blob_count = rng.random_range(cfg.blobs.0..=cfg.blobs.1);
        let sites: Vec<Ellipse> = (0..blob_count).map(|_| random_ellipse(&mut rng, cfg)).collect();
        let ap = rasterize(size, &sites, 1.0);
        // Confirmed contact region: concentric sub-ellipses whose area
        // fraction is the overlap (radius scale sqrt(overlap)), so it is a
        // subset of the ink by construction.
        let confirmed = rasterize(size, &sites, cfg.overlap.sqrt());

        let extra = |rng: &mut ChaCha8Rng| -> Result<BinaryMask, DataError> {
            let count = rng.random_range(cfg.extra_ofr_blobs.0..=cfg.extra_ofr_blobs.1);
            let blobs: Vec<Ellipse> = (0..count).map(|_| random_ellipse(rng, cfg)).collect();
            rasterize(size, &blobs, 1.0)
                .subtract(&ap)
                .map_err(|source| DataError::Mask {
                    path: PathBuf::new(),
                    source,
                })
        };
        // Registration masks: confirmed region plus registration-only blobs
        // kept clear of the ink, so AP ∩ test ∩ retest is exactly the
        // confirmed region.
        let ofr_test = confirmed.union(&extra(&mut rng)?).expect("same frame");
        let ofr_retest = confirmed.union(&extra(&mut rng)?).expect("same frame");

        let label = crate::mask::generate_mtp_mfp(&ap, &ofr_test, &ofr_retest)
            .expect("generator masks share one frame");

        let mut images = Vec::with_capacity(16);
        for (idx, (thickness, application, session)) in all_conditions().into_iter().enumerate() {
            let mut img_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, p as u64, 0x494D47 + idx as u64));
            // Heavier paper leaves a stronger imprint.
            let thickness_factor = match thickness {
                12 => 0.55,
                40 => 0.7,
                100 => 0.85,
                _ => 1.0,
            };
            let application_factor = match application {
                Application::Active => 0.9,
                Application::Passive => 1.0,
            };
            let intensity = thickness_factor * application_factor;
            let image = render_image(&label, &mut img_rng, cfg, intensity);
            images.push(ImageRecord {
                thickness,
                application,
                session,
                image,
                ap: ap.clone(),
                label: Some(label.clone()),
            });
        }

        patients.push(PatientRecord {
            id: format!("patient_{p:02}"),
            images,
            ofr_test,
            ofr_retest,
            transform: PatientTransform::identity(size),
        });
    }
    Ok(patients)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write the dataset layout. Label masks are not written; `gen-masks`
/// derives them from the persisted AP and registration masks.
pub fn write_dataset(patients: &[PatientRecord], root: &Path) -> Result<(), DataError> {
    for patient in patients {
        let dir = root.join(&patient.id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for record in &patient.images {
            let key = record.condition_key();
            let image_path = dir.join(format!("image_{key}.png"));
            fsio::write_png_rgb(&image_path, &record.image).map_err(io_err(&image_path))?;
            let ap_path = dir.join(format!("ap_{key}.png"));
            fsio::write_png_gray(&ap_path, &encode_binary_mask(&record.ap))
                .map_err(io_err(&ap_path))?;
        }
        let test_path = dir.join("ofr_test.png");
        fsio::write_png_gray(&test_path, &encode_binary_mask(&patient.ofr_test))
            .map_err(io_err(&test_path))?;
        let retest_path = dir.join("ofr_retest.png");
        fsio::write_png_gray(&retest_path, &encode_binary_mask(&patient.ofr_retest))
            .map_err(io_err(&retest_path))?;
        let transform_path = dir.join("transform.txt");
        fsio::write_atomic(&transform_path, patient.transform.to_sidecar_string().as_bytes())
            .map_err(io_err(&transform_path))?;
    }
    Ok(())
}

fn check_dims(path: &Path, width: u32, height: u32, expected: u32) -> Result<(), DataError> {
    if width != expected || height != expected {
        return Err(DataError::BadDimensions {
            path: path.to_path_buf(),
            expected,
            width,
            height,
        });
    }
    Ok(())
}

fn load_binary_mask(path: &Path, t: &PatientTransform) -> Result<BinaryMask, DataError> {
    if !path.is_file() {
        return Err(DataError::Missing(path.to_path_buf()));
    }
    let raw = fsio::read_png_gray(path).map_err(|reason| DataError::Decode {
        path: path.to_path_buf(),
        reason,
    })?;
    let calibrated = t.apply_to_gray(&raw).map_err(|source| DataError::Mask {
        path: path.to_path_buf(),
        source,
    })?;
    decode_binary_mask(&calibrated).map_err(|source| DataError::Mask {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a dataset directory: decode every raster, apply the per-patient
/// transform, and validate dimensions and gray values. Errors name the
/// offending file.
pub fn load_dataset(root: &Path) -> Result<Vec<PatientRecord>, DataError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("patient_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(DataError::Missing(root.join("patient_*")));
    }

    let mut patients = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .expect("filtered on file name")
            .to_string();
        let transform_path = dir.join("transform.txt");
        if !transform_path.is_file() {
            return Err(DataError::Missing(transform_path));
        }
        let transform = PatientTransform::load(&transform_path).map_err(|source| DataError::Mask {
            path: transform_path.clone(),
            source,
        })?;
        let out = transform.output_size;

        let mut images = Vec::with_capacity(16);
        for (thickness, application, session) in all_conditions() {
            let key = format!("{thickness}_{application}_{session}");
            let image_path = dir.join(format!("image_{key}.png"));
            if !image_path.is_file() {
                return Err(DataError::Missing(image_path));
            }
            let raw = fsio::read_png_rgb(&image_path).map_err(|reason| DataError::Decode {
                path: image_path.clone(),
                reason,
            })?;
            let image = transform.apply_to_rgb(&raw).map_err(|source| DataError::Mask {
                path: image_path.clone(),
                source,
            })?;
            check_dims(&image_path, image.width(), image.height(), out)?;

            let ap_path = dir.join(format!("ap_{key}.png"));
            let ap = load_binary_mask(&ap_path, &transform)?;
            check_dims(&ap_path, ap.width(), ap.height(), out)?;

            // Generated label masks already live in the calibrated frame;
            // they are decoded as-is.
            let mask_path = dir.join(format!("mask_{key}.png"));
            let label = if mask_path.is_file() {
                let raw = fsio::read_png_gray(&mask_path).map_err(|reason| DataError::Decode {
                    path: mask_path.clone(),
                    reason,
                })?;
                let label = decode_label_mask(&raw).map_err(|source| DataError::Mask {
                    path: mask_path.clone(),
                    source,
                })?;
                check_dims(&mask_path, label.width(), label.height(), out)?;
                Some(label)
            } else {
                None
            };

            images.push(ImageRecord {
                thickness,
                application,
                session,
                image,
                ap,
                label,
            });
        }

        let ofr_test = load_binary_mask(&dir.join("ofr_test.png"), &transform)?;
        let ofr_retest = load_binary_mask(&dir.join("ofr_retest.png"), &transform)?;
        check_dims(&dir.join("ofr_test.png"), ofr_test.width(), ofr_test.height(), out)?;

        patients.push(PatientRecord {
            id,
            images,
            ofr_test,
            ofr_retest,
            transform,
        });
    }
    Ok(patients)
}

/// Patient-wise fold assignment; every image of a patient stays in that
/// patient's fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.fold_of.get(patient).copied()
    }

    /// Patient ids of one fold, in id order.
    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn assignments(&self) -> impl Iterator<Item = (&str, usize)> {
        self.fold_of.iter().map(|(id, &f)| (id.as_str(), f))
    }
}

/// Seeded-shuffle contiguous-block split of patients into `k` folds. When
/// the patient count is not divisible by `k`, the remainder is distributed
/// round-robin over the leading folds.
pub fn kfold_split(patients: &[String], k: usize, seed: u64) -> Result<FoldAssignment, DataError> {
    if k == 0 || k > patients.len() {
        return Err(DataError::BadFoldCount {
            k,
            patients: patients.len(),
        });
    }
    let mut shuffled: Vec<&String> = patients.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x464F4C44, 0));
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let base = patients.len() / k;
    let remainder = patients.len() % k;
    let mut fold_of = BTreeMap::new();
    let mut cursor = 0;
    for fold in 0..k {
        let len = base + usize::from(fold < remainder);
        for id in &shuffled[cursor..cursor + len] {
            fold_of.insert((*id).clone(), fold);
        }
        cursor += len;
    }
    Ok(FoldAssignment { k, fold_of })
}

/// One draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    /// Rotation about the raster center, degrees.
    pub rotate_deg: f64,
    /// Brightness scale applied to the image only.
    pub brightness: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            hflip: false,
            rotate_deg: 0.0,
            brightness: 1.0,
        }
    }

    /// Horizontal flip with probability 1/2, rotation in ±15°, brightness
    /// in [0.8, 1.2].
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        AugmentParams {
            hflip: rng.random_bool(0.5),
            rotate_deg: rng.random_range(-15.0..=15.0),
            brightness: rng.random_range(0.8..=1.2),
        }
    }
}

/// Seeded augmentation of a training pair: identical geometric transform on
/// image and mask (bilinear vs nearest resampling), brightness on the image
/// only.
pub fn augment(image: &RgbImage, mask: &LabelMask, seed: u64) -> (RgbImage, LabelMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_augment(&AugmentParams::sample(&mut rng), image, mask)
}

/// Apply explicit augmentation parameters. Identity parameters reproduce
/// the pair exactly.
pub fn apply_augment(
    params: &AugmentParams,
    image: &RgbImage,
    mask: &LabelMask,
) -> (RgbImage, LabelMask) {
    assert_eq!(
        (image.width(), image.height()),
        (mask.width(), mask.height()),
        "image and mask must be paired"
    );
    let (w, h) = (image.width(), image.height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let theta = params.rotate_deg.to_radians();
    let (sin, cos) = theta.sin_cos();

    // Inverse mapping: undo the rotation, then undo the flip.
    let source_of = |x: u32, y: u32| -> (f64, f64) {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = dx * cos + dy * sin + cx;
        let sy = -dx * sin + dy * cos + cy;
        if params.hflip {
            (w as f64 - 1.0 - sx, sy)
        } else {
            (sx, sy)
        }
    };

    let mut out_image = RgbImage::new(w, h);
    let mut out_mask = LabelMask::new(w, h).expect("paired rasters are non-empty");
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_of(x, y);

            // Mask: nearest neighbor, background outside the frame.
            let nx = sx.round();
            let ny = sy.round();
            if nx >= 0.0 && ny >= 0.0 && (nx as u32) < w && (ny as u32) < h {
                out_mask.set(x, y, mask.get(nx as u32, ny as u32));
            }

            // Image: bilinear, black outside the frame.
            let pixel = if sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64 {
                let x0 = sx.floor() as u32;
                let y0 = sy.floor() as u32;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let wx = sx - x0 as f64;
                let wy = sy - y0 as f64;
                let mut channels = [0u8; 3];
                for (c, channel) in channels.iter_mut().enumerate() {
                    let p00 = image.get_pixel(x0, y0).0[c] as f64;
                    let p10 = image.get_pixel(x1, y0).0[c] as f64;
                    let p01 = image.get_pixel(x0, y1).0[c] as f64;
                    let p11 = image.get_pixel(x1, y1).0[c] as f64;
                    let top = p00 * (1.0 - wx) + p10 * wx;
                    let bottom = p01 * (1.0 - wx) + p11 * wx;
                    let value = (top * (1.0 - wy) + bottom * wy) * params.brightness;
                    *channel = value.round().clamp(0.0, 255.0) as u8;
                }
                Rgb(channels)
            } else {
                Rgb([0, 0, 0])
            };
            out_image.put_pixel(x, y, pixel);
        }
    }
    (out_image, out_mask)
}
