//! Desk-scale dual-branch segmentation network with a hand-written backward
//! pass, trained with the combined hierarchical loss.
//!
//! The topology echoes a two-branch encoder/decoder fusion at toy scale: a
//! global-context branch (4x average pool, two 3x3 convolutions, nearest
//! upsample back to input resolution) runs beside a full-resolution local
//! branch (two 3x3 convolutions); their feature maps are concatenated and a
//! 1x1 predictor head emits one logit channel per leaf class.
//!
//! Everything is plain f64 and single-threaded: gradients are exact, runs
//! are bitwise reproducible given a seed, and every layer is small enough to
//! verify against finite differences.

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::augment;
use crate::hierarchy::ClassHierarchy;
use crate::loss::{self, ChannelField, LossConfig};
use crate::mask::LabelMask;
use crate::metrics;

const WEIGHTS_MAGIC: &[u8; 8] = b"OCSEGW01";
const WEIGHTS_VERSION: u32 = 1;
/// RGB input.
const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input {width}x{height} not divisible by downsample factor {factor}")]
    Indivisible {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("image and target dimensions differ: {0}x{1} vs {2}x{3}")]
    TargetMismatch(usize, usize, u32, u32),
    #[error("weight file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("train and validation splits must both be nonempty")]
    EmptySplit,
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
}

/// A same-padded 2D convolution storing weights as `[ky][kx][in][out]` so
/// the inner accumulation runs over contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv2d {
    fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = (0..kernel * kernel * in_channels * out_channels)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    fn forward(&self, input: &ChannelField) -> ChannelField {
        let (h, w) = (input.height(), input.width());
        let pad = self.kernel / 2;
        let mut out = ChannelField::zeros(h, w, self.out_channels);
        for y in 0..h {
            for x in 0..w {
                let out_row = out.pixel_mut(y * w + x);
                out_row.copy_from_slice(&self.bias);
                for ky in 0..self.kernel {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    for kx in 0..self.kernel {
                        let sx = x + kx;
                        if sx < pad || sx - pad >= w {
                            continue;
                        }
                        let sx = sx - pad;
                        let in_row = input.pixel(sy * w + sx);
                        let base = (ky * self.kernel + kx) * self.in_channels * self.out_channels;
                        for (i, &v) in in_row.iter().enumerate() {
                            let taps =
                                &self.weight[base + i * self.out_channels..base + (i + 1) * self.out_channels];
                            for (o, &t) in taps.iter().enumerate() {
                                out_row[o] += v * t;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradients of the loss with respect to input, weights and bias, given
    /// the layer input and the gradient at the layer output.
    fn backward(&self, input: &ChannelField, grad_out: &ChannelField) -> (ChannelField, ConvGrads) {
        let (h, w) = (input.height(), input.width());
        let pad = self.kernel / 2;
        let mut grad_in = ChannelField::zeros(h, w, self.in_channels);
        let mut grads = ConvGrads::zeros(self);
        for y in 0..h {
            for x in 0..w {
                let go = grad_out.pixel(y * w + x);
                for (o, &g) in go.iter().enumerate() {
                    grads.bias[o] += g;
                }
                for ky in 0..self.kernel {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    for kx in 0..self.kernel {
                        let sx = x + kx;
                        if sx < pad || sx - pad >= w {
                            continue;
                        }
                        let sx = sx - pad;
                        let in_row = input.pixel(sy * w + sx);
                        let gi_row = grad_in.pixel_mut(sy * w + sx);
                        let base = (ky * self.kernel + kx) * self.in_channels * self.out_channels;
                        for (i, &v) in in_row.iter().enumerate() {
                            let span = base + i * self.out_channels;
                            let taps = &self.weight[span..span + self.out_channels];
                            let wg = &mut grads.weight[span..span + self.out_channels];
                            let mut acc = 0.0;
                            for (o, &g) in go.iter().enumerate() {
                                wg[o] += v * g;
                                acc += taps[o] * g;
                            }
                            gi_row[i] += acc;
                        }
                    }
                }
            }
        }
        (grad_in, grads)
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Per-layer parameter gradients, same layout as the layer's parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvGrads {
    fn zeros(layer: &Conv2d) -> Self {
        ConvGrads {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    fn add_assign(&mut self, other: &ConvGrads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    fn scale(&mut self, factor: f64) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *v *= factor;
        }
    }
}

/// Gradients for every layer of the network, in [`DualBranchNet::LAYER_NAMES`]
/// order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    layers: Vec<ConvGrads>,
}

impl ParamGrads {
    pub fn zeros(net: &DualBranchNet) -> Self {
        ParamGrads {
            layers: net.layers().iter().map(|l| ConvGrads::zeros(l)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.scale(factor);
        }
    }

    /// All gradient entries flattened in parameter-index order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

/// Dual-branch segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchNet {
    num_leaves: usize,
    global_channels: usize,
    local_channels: usize,
    downsample: usize,
    global1: Conv2d,
    global2: Conv2d,
    local1: Conv2d,
    local2: Conv2d,
    head: Conv2d,
}

struct ForwardTrace {
    pooled: ChannelField,
    g1_act: ChannelField,
    g2_act: ChannelField,
    l1_act: ChannelField,
    l2_act: ChannelField,
    concat: ChannelField,
    logits: ChannelField,
}

impl DualBranchNet {
    pub const LAYER_NAMES: [&'static str; 5] = ["global1", "global2", "local1", "local2", "head"];

    /// Default widths: 16 global channels, 8 local channels, 4x downsample.
    pub fn new(num_leaves: usize, seed: u64) -> Self {
        Self::with_dims(num_leaves, 16, 8, 4, seed)
    }

    pub fn with_dims(
        num_leaves: usize,
        global_channels: usize,
        local_channels: usize,
        downsample: usize,
        seed: u64,
    ) -> Self {
        assert!(num_leaves >= 2 && global_channels > 0 && local_channels > 0 && downsample > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DualBranchNet {
            num_leaves,
            global_channels,
            local_channels,
            downsample,
            global1: Conv2d::new(INPUT_CHANNELS, global_channels, 3, &mut rng),
            global2: Conv2d::new(global_channels, global_channels, 3, &mut rng),
            local1: Conv2d::new(INPUT_CHANNELS, local_channels, 3, &mut rng),
            local2: Conv2d::new(local_channels, local_channels, 3, &mut rng),
            head: Conv2d::new(global_channels + local_channels, num_leaves, 1, &mut rng),
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn global_channels(&self) -> usize {
        self.global_channels
    }

    pub fn local_channels(&self) -> usize {
        self.local_channels
    }

    fn layers(&self) -> [&Conv2d; 5] {
        [&self.global1, &self.global2, &self.local1, &self.local2, &self.head]
    }

    fn layers_mut(&mut self) -> [&mut Conv2d; 5] {
        [
            &mut self.global1,
            &mut self.global2,
            &mut self.local1,
            &mut self.local2,
            &mut self.head,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// Flat copy of all parameters, layer by layer, weights then bias.
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn restore(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut cursor = 0;
        for layer in self.layers_mut() {
            let weight_len = layer.weight.len();
            layer.weight.copy_from_slice(&params[cursor..cursor + weight_len]);
            cursor += weight_len;
            let bias_len = layer.bias.len();
            layer.bias.copy_from_slice(&params[cursor..cursor + bias_len]);
            cursor += bias_len;
        }
    }

    /// Scale the predictor-head parameters; used to probe head linearity.
    pub fn scale_head(&mut self, factor: f64) {
        for v in self.head.weight.iter_mut().chain(self.head.bias.iter_mut()) {
            *v *= factor;
        }
    }

    pub fn apply_grads(&mut self, grads: &ParamGrads, lr: f64) {
        for (layer, g) in self.layers_mut().into_iter().zip(&grads.layers) {
            for (w, gw) in layer.weight.iter_mut().zip(&g.weight) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    fn trace(&self, image: &ChannelField) -> Result<ForwardTrace, ModelError> {
        let (h, w) = (image.height(), image.width());
        if h % self.downsample != 0 || w % self.downsample != 0 {
            return Err(ModelError::Indivisible {
                width: w,
                height: h,
                factor: self.downsample,
            });
        }
        let pooled = avg_pool(image, self.downsample);
        let g1_act = relu(&self.global1.forward(&pooled));
        let g2_act = relu(&self.global2.forward(&g1_act));
        let upsampled = upsample_nearest(&g2_act, self.downsample);
        let l1_act = relu(&self.local1.forward(image));
        let l2_act = relu(&self.local2.forward(&l1_act));
        let concat = concat_channels(&upsampled, &l2_act);
        let logits = self.head.forward(&concat);
        Ok(ForwardTrace {
            pooled,
            g1_act,
            g2_act,
            l1_act,
            l2_act,
            concat,
            logits,
        })
    }

    /// Logit field with one channel per leaf class at input resolution.
    pub fn forward(&self, image: &ChannelField) -> Result<ChannelField, ModelError> {
        Ok(self.trace(image)?.logits)
    }

    /// Exact gradients of the combined loss with respect to every parameter,
    /// plus the loss value.
    pub fn backward(
        &self,
        image: &ChannelField,
        target: &LabelMask,
        h: &ClassHierarchy,
        cfg: &LossConfig,
    ) -> Result<(ParamGrads, f64), ModelError> {
        if (image.width(), image.height()) != (target.width() as usize, target.height() as usize) {
            return Err(ModelError::TargetMismatch(
                image.width(),
                image.height(),
                target.width(),
                target.height(),
            ));
        }
        let trace = self.trace(image)?;
        let loss_value = loss::combined_loss(&trace.logits, target, h, cfg);
        let grad_logits = loss::combined_loss_grad(&trace.logits, target, h, cfg);

        let (grad_concat, head_grads) = self.head.backward(&trace.concat, &grad_logits);
        let (grad_up, grad_l2) = split_channels(&grad_concat, self.global_channels);

        // Local branch.
        let grad_l2 = relu_backward(&trace.l2_act, &grad_l2);
        let (grad_l1, local2_grads) = self.local2.backward(&trace.l1_act, &grad_l2);
        let grad_l1 = relu_backward(&trace.l1_act, &grad_l1);
        let (_, local1_grads) = self.local1.backward(image, &grad_l1);

        // Global branch.
        let grad_g2 = upsample_nearest_backward(&grad_up, self.downsample);
        let grad_g2 = relu_backward(&trace.g2_act, &grad_g2);
        let (grad_g1, global2_grads) = self.global2.backward(&trace.g1_act, &grad_g2);
        let grad_g1 = relu_backward(&trace.g1_act, &grad_g1);
        let (_, global1_grads) = self.global1.backward(&trace.pooled, &grad_g1);

        Ok((
            ParamGrads {
                layers: vec![global1_grads, global2_grads, local1_grads, local2_grads, head_grads],
            },
            loss_value,
        ))
    }

    /// Per-pixel argmax over the leaf classes; ties go to the lowest index.
    pub fn predict(&self, image: &ChannelField) -> Result<LabelMask, ModelError> {
        let logits = self.forward(image)?;
        Ok(argmax_labels(&logits))
    }

    /// Versioned binary weight file: magic, architecture header, then per
    /// layer a shape manifest followed by raw little-endian f64 parameters.
    pub fn save_weights(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        for value in [
            WEIGHTS_VERSION,
            self.num_leaves as u32,
            self.global_channels as u32,
            self.local_channels as u32,
            self.downsample as u32,
        ] {
            buf.extend_from_slice(&value.to_le_bytes());
        }
        for (name, layer) in Self::LAYER_NAMES.iter().zip(self.layers()) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            for dim in [layer.in_channels as u32, layer.out_channels as u32, layer.kernel as u32] {
                buf.extend_from_slice(&dim.to_le_bytes());
            }
            buf.extend_from_slice(&(layer.weight.len() as u64).to_le_bytes());
            for v in &layer.weight {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(layer.bias.len() as u64).to_le_bytes());
            for v in &layer.bias {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::fsio::write_atomic(path, &buf).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load_weights(path: &Path) -> Result<Self, ModelError> {
        let format_err = |reason: String| ModelError::Format {
            path: path.display().to_string(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut reader = ByteReader::new(&bytes);

        let magic = reader.take(8).map_err(|e| format_err(e.to_string()))?;
        if magic != WEIGHTS_MAGIC {
            return Err(format_err("bad magic bytes".into()));
        }
        let version = reader.u32().map_err(|e| format_err(e.to_string()))?;
        if version != WEIGHTS_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let num_leaves = reader.u32().map_err(|e| format_err(e.to_string()))? as usize;
        let global_channels = reader.u32().map_err(|e| format_err(e.to_string()))? as usize;
        let local_channels = reader.u32().map_err(|e| format_err(e.to_string()))? as usize;
        let downsample = reader.u32().map_err(|e| format_err(e.to_string()))? as usize;
        if num_leaves < 2 || global_channels == 0 || local_channels == 0 || downsample == 0 {
            return Err(format_err("degenerate architecture header".into()));
        }

        let expected: [(&str, usize, usize, usize); 5] = [
            ("global1", INPUT_CHANNELS, global_channels, 3),
            ("global2", global_channels, global_channels, 3),
            ("local1", INPUT_CHANNELS, local_channels, 3),
            ("local2", local_channels, local_channels, 3),
            ("head", global_channels + local_channels, num_leaves, 1),
        ];
        let mut layers = Vec::with_capacity(5);
        for (name, in_ch, out_ch, kernel) in expected {
            let name_len = reader.u32().map_err(|e| format_err(e.to_string()))? as usize;
            let got_name = reader.take(name_len).map_err(|e| format_err(e.to_string()))?;
            if got_name != name.as_bytes() {
                return Err(format_err(format!(
                    "layer name mismatch: expected {name}, got {}",
                    String::from_utf8_lossy(got_name)
                )));
            }
            let dims = [
                reader.u32().map_err(|e| format_err(e.to_string()))? as usize,
                reader.u32().map_err(|e| format_err(e.to_string()))? as usize,
                reader.u32().map_err(|e| format_err(e.to_string()))? as usize,
            ];
            if dims != [in_ch, out_ch, kernel] {
                return Err(format_err(format!(
                    "layer {name}: manifest shape {dims:?} does not match architecture {:?}",
                    [in_ch, out_ch, kernel]
                )));
            }
            let weight_len = reader.u64().map_err(|e| format_err(e.to_string()))? as usize;
            if weight_len != kernel * kernel * in_ch * out_ch {
                return Err(format_err(format!("layer {name}: bad weight count {weight_len}")));
            }
            let weight = reader.f64s(weight_len).map_err(|e| format_err(e.to_string()))?;
            let bias_len = reader.u64().map_err(|e| format_err(e.to_string()))? as usize;
            if bias_len != out_ch {
                return Err(format_err(format!("layer {name}: bad bias count {bias_len}")));
            }
            let bias = reader.f64s(bias_len).map_err(|e| format_err(e.to_string()))?;
            layers.push(Conv2d {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel,
                weight,
                bias,
            });
        }
        if !reader.is_empty() {
            return Err(format_err("trailing bytes after last layer".into()));
        }
        let mut it = layers.into_iter();
        Ok(DualBranchNet {
            num_leaves,
            global_channels,
            local_channels,
            downsample,
            global1: it.next().unwrap(),
            global2: it.next().unwrap(),
            local1: it.next().unwrap(),
            local2: it.next().unwrap(),
            head: it.next().unwrap(),
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

#[derive(Debug, Error)]
#[error("truncated file at byte {0}")]
struct Truncated(usize);

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        if self.pos + n > self.bytes.len() {
            return Err(Truncated(self.pos));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, Truncated> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, Truncated> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn relu(field: &ChannelField) -> ChannelField {
    let mut out = field.clone();
    for v in out.values_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn relu_backward(activation: &ChannelField, grad: &ChannelField) -> ChannelField {
    let mut out = grad.clone();
    for (g, &a) in out.values_mut().iter_mut().zip(activation.values()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

fn avg_pool(input: &ChannelField, factor: usize) -> ChannelField {
    let (h, w, c) = (input.height() / factor, input.width() / factor, input.channels());
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = ChannelField::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let row = out.pixel_mut(y * w + x);
            for dy in 0..factor {
                for dx in 0..factor {
                    let src = input.pixel((y * factor + dy) * input.width() + x * factor + dx);
                    for (acc, &v) in row.iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            for v in row.iter_mut() {
                *v *= norm;
            }
        }
    }
    out
}

fn upsample_nearest(input: &ChannelField, factor: usize) -> ChannelField {
    let (h, w, c) = (input.height() * factor, input.width() * factor, input.channels());
    let mut out = ChannelField::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let src = input.pixel((y / factor) * input.width() + x / factor);
            out.pixel_mut(y * w + x).copy_from_slice(src);
        }
    }
    out
}

fn upsample_nearest_backward(grad: &ChannelField, factor: usize) -> ChannelField {
    let (h, w, c) = (grad.height() / factor, grad.width() / factor, grad.channels());
    let mut out = ChannelField::zeros(h, w, c);
    for y in 0..grad.height() {
        for x in 0..grad.width() {
            let src = grad.pixel(y * grad.width() + x);
            let row = out.pixel_mut((y / factor) * w + x / factor);
            for (dst, &g) in row.iter_mut().zip(src) {
                *dst += g;
            }
        }
    }
    out
}

fn concat_channels(a: &ChannelField, b: &ChannelField) -> ChannelField {
    assert_eq!((a.height(), a.width()), (b.height(), b.width()));
    let c = a.channels() + b.channels();
    let mut out = ChannelField::zeros(a.height(), a.width(), c);
    for p in 0..a.num_pixels() {
        let row = out.pixel_mut(p);
        row[..a.channels()].copy_from_slice(a.pixel(p));
        row[a.channels()..].copy_from_slice(b.pixel(p));
    }
    out
}

fn split_channels(field: &ChannelField, first: usize) -> (ChannelField, ChannelField) {
    let rest = field.channels() - first;
    let mut a = ChannelField::zeros(field.height(), field.width(), first);
    let mut b = ChannelField::zeros(field.height(), field.width(), rest);
    for p in 0..field.num_pixels() {
        let row = field.pixel(p);
        a.pixel_mut(p).copy_from_slice(&row[..first]);
        b.pixel_mut(p).copy_from_slice(&row[first..]);
    }
    (a, b)
}

fn argmax_labels(logits: &ChannelField) -> LabelMask {
    let mut mask = LabelMask::new(logits.width() as u32, logits.height() as u32)
        .expect("logit fields have positive dimensions");
    for y in 0..logits.height() {
        for x in 0..logits.width() {
            let row = logits.pixel(y * logits.width() + x);
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            mask.set(x as u32, y as u32, best as u8);
        }
    }
    mask
}

/// Convert an RGB photograph to the f64 field the network consumes.
/// Channels are scaled to [-0.5, 0.5]; centering keeps the bright
/// background from dominating every gradient direction.
pub fn image_to_field(image: &RgbImage) -> ChannelField {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut field = ChannelField::zeros(h, w, INPUT_CHANNELS);
    for (p, pixel) in image.pixels().enumerate() {
        let row = field.pixel_mut(p);
        for c in 0..INPUT_CHANNELS {
            row[c] = pixel.0[c] as f64 / 255.0 - 0.5;
        }
    }
    field
}

/// One training or validation item: photograph plus its target label mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: RgbImage,
    pub target: LabelMask,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Epochs without validation-Dice improvement before the rate decays.
    pub plateau_patience: usize,
    /// The learning rate divides by this on each plateau trigger.
    pub decay_factor: f64,
    pub lr_floor: f64,
    pub seed: u64,
    /// Apply random augmentation to training pairs as they are loaded.
    pub augment: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 5,
            initial_lr: 1e-4,
            plateau_patience: 3,
            decay_factor: 2.0,
            lr_floor: 1e-6,
            seed: 0,
            augment: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::BadConfig("epochs and batch size must be positive".into()));
        }
        if !(self.initial_lr > 0.0 && self.lr_floor > 0.0 && self.decay_factor > 1.0) {
            return Err(ModelError::BadConfig(
                "learning rates must be positive and decay factor > 1".into(),
            ));
        }
        if self.lr_floor > self.initial_lr {
            return Err(ModelError::BadConfig("lr floor exceeds the initial rate".into()));
        }
        if self.plateau_patience == 0 {
            return Err(ModelError::BadConfig("plateau patience must be positive".into()));
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate the epoch trained with.
    pub lr: f64,
    /// Mean combined loss over the epoch's training samples.
    pub train_loss: f64,
    /// Mean validation Dice per non-background leaf class, `None` when the
    /// class was undefined on every validation image.
    pub class_dice: Vec<(String, Option<f64>)>,
    /// Unweighted mean of the defined per-class Dice means; the monitored
    /// quantity for plateau decay and best-epoch selection.
    pub monitor: f64,
}

impl EpochRecord {
    /// Line-oriented `key=value` rendering; floats use shortest round-trip
    /// formatting so identical runs produce identical logs.
    pub fn to_kv_line(&self) -> String {
        let mut line = format!(
            "epoch={} lr={} train_loss={}",
            self.epoch, self.lr, self.train_loss
        );
        for (name, dice) in &self.class_dice {
            match dice {
                Some(v) => write!(line, " dice_{name}={v}").unwrap(),
                None => write!(line, " dice_{name}=undefined").unwrap(),
            }
        }
        write!(line, " monitor={}", self.monitor).unwrap();
        line
    }
}

/// Result of a training run. The network passed to [`train`] is left holding
/// the best-epoch weights.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_monitor: f64,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&record.to_kv_line());
            out.push('\n');
        }
        writeln!(out, "best_epoch={} best_monitor={}", self.best_epoch, self.best_monitor).unwrap();
        out
    }
}

use crate::data::mix_seed;

/// Mean validation Dice per non-background class plus the scalar monitor.
fn validation_dice(
    net: &DualBranchNet,
    val: &[TrainSample],
    h: &ClassHierarchy,
) -> Result<(Vec<(String, Option<f64>)>, f64), ModelError> {
    let class_count = h.num_leaves();
    let mut sums = vec![0.0f64; class_count];
    let mut counts = vec![0usize; class_count];
    for sample in val {
        let pred = net.predict(&image_to_field(&sample.image))?;
        for class_id in 1..class_count {
            let c = metrics::confusion(&pred, &sample.target, class_id as u8)
                .expect("prediction shape matches target");
            if let Some(d) = c.dice() {
                sums[class_id] += d;
                counts[class_id] += 1;
            }
        }
    }
    let mut class_dice = Vec::new();
    let mut defined = Vec::new();
    for class_id in 1..class_count {
        let mean = (counts[class_id] > 0).then(|| sums[class_id] / counts[class_id] as f64);
        if let Some(m) = mean {
            defined.push(m);
        }
        class_dice.push((h.leaf_names()[class_id].clone(), mean));
    }
    let monitor = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok((class_dice, monitor))
}

/// Stochastic gradient descent over shuffled minibatches with the combined
/// hierarchical loss, validation-Dice plateau decay of the learning rate,
/// and best-epoch checkpointing. Deterministic given the seed.
pub fn train(
    net: &mut DualBranchNet,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    h: &ClassHierarchy,
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::EmptySplit);
    }

    let mut lr = cfg.initial_lr;
    let mut best_params = net.snapshot();
    let mut best_monitor = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stale_epochs = 0usize;
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_monitor: 0.0,
    };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0x5357_4150));
        // Fisher-Yates shuffle.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::zeros(net);
            for &idx in batch {
                let sample = &train_set[idx];
                let (image, target) = if cfg.augment {
                    augment(
                        &sample.image,
                        &sample.target,
                        mix_seed(cfg.seed, epoch as u64, idx as u64),
                    )
                } else {
                    (sample.image.clone(), sample.target.clone())
                };
                let field = image_to_field(&image);
                let (sample_grads, loss_value) = net.backward(&field, &target, h, &cfg.loss)?;
                if !loss_value.is_finite() {
                    return Err(ModelError::Diverged { epoch });
                }
                epoch_loss += loss_value;
                grads.add_assign(&sample_grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            net.apply_grads(&grads, lr);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }

        let (class_dice, monitor) = validation_dice(net, val_set, h)?;
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            class_dice,
            monitor,
        });

        if monitor > best_monitor {
            best_monitor = monitor;
            best_epoch = epoch;
            best_params = net.snapshot();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.plateau_patience {
                lr = (lr / cfg.decay_factor).max(cfg.lr_floor);
                stale_epochs = 0;
            }
        }
    }

    net.restore(&best_params);
    report.best_epoch = best_epoch;
    report.best_monitor = best_monitor;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::ClassHierarchy;
    use crate::loss::PixelReduction;

    fn tiny_net(seed: u64) -> DualBranchNet {
        DualBranchNet::with_dims(3, 4, 3, 4, seed)
    }

    fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ChannelField {
        let values = (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect();
        ChannelField::from_values(h, w, c, values)
    }

    fn random_target(rng: &mut ChaCha8Rng, w: u32, h: u32, classes: u8) -> LabelMask {
        let mut mask = LabelMask::new(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                mask.set(x, y, rng.random_range(0..classes));
            }
        }
        mask
    }

    #[test]
    fn forward_shape_contract() {
        let net = DualBranchNet::new(3, 1);
        let image = ChannelField::zeros(64, 64, 3);
        let logits = net.forward(&image).unwrap();
        assert_eq!((logits.height(), logits.width(), logits.channels()), (64, 64, 3));

        let odd = ChannelField::zeros(63, 64, 3);
        assert!(matches!(net.forward(&odd), Err(ModelError::Indivisible { .. })));
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut net = tiny_net(2);
        let zeros = vec![0.0; net.param_count()];
        net.restore(&zeros);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = random_field(&mut rng, 8, 8, 3);
        let logits = net.forward(&image).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
        let probs = loss::softmax_probs(&logits);
        assert!(probs.values().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn head_is_linear_in_its_parameters() {
        let net = tiny_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = random_field(&mut rng, 8, 8, 3);
        let logits = net.forward(&image).unwrap();
        let mut doubled = net.clone();
        doubled.scale_head(2.0);
        let logits2 = doubled.forward(&image).unwrap();
        for (a, b) in logits.values().iter().zip(logits2.values()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let h = ClassHierarchy::occlusal();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = tiny_net(5);
        let image = random_field(&mut rng, 8, 8, 3);
        let target = random_target(&mut rng, 8, 8, 3);

        let (grads, loss_value) = net.backward(&image, &target, &h, &cfg).unwrap();
        let direct = loss::combined_loss(&net.forward(&image).unwrap(), &target, &h, &cfg);
        assert!((loss_value - direct).abs() < 1e-12);

        let analytic = grads.flat();
        let step = 1e-5;
        let params = net.snapshot();
        let mut numeric = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += step;
            net.restore(&plus);
            let up = loss::combined_loss(&net.forward(&image).unwrap(), &target, &h, &cfg);
            let mut minus = params.clone();
            minus[i] -= step;
            net.restore(&minus);
            let down = loss::combined_loss(&net.forward(&image).unwrap(), &target, &h, &cfg);
            numeric[i] = (up - down) / (2.0 * step);
        }
        net.restore(&params);

        let scale = numeric.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        let worst = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
            / scale;
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn gradient_of_a_zeroed_input_channel_is_zero() {
        let h = ClassHierarchy::occlusal();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = tiny_net(7);
        let mut image = random_field(&mut rng, 8, 8, 3);
        for p in 0..image.num_pixels() {
            image.pixel_mut(p)[2] = 0.0;
        }
        let target = random_target(&mut rng, 8, 8, 3);
        let (grads, _) = net.backward(&image, &target, &h, &cfg).unwrap();
        // Taps reading input channel 2 of the first conv in each branch
        // never see a signal, so their weight gradients vanish.
        for (layer_idx, layer) in [(0usize, &net.global1), (2usize, &net.local1)] {
            let g = &grads.layers[layer_idx];
            for ky in 0..layer.kernel {
                for kx in 0..layer.kernel {
                    let base = (ky * layer.kernel + kx) * layer.in_channels * layer.out_channels;
                    let span = base + 2 * layer.out_channels;
                    for o in 0..layer.out_channels {
                        assert_eq!(g.weight[span + o], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn predict_breaks_ties_toward_the_lowest_class() {
        let mut net = tiny_net(8);
        let zeros = vec![0.0; net.param_count()];
        net.restore(&zeros);
        let image = ChannelField::zeros(8, 8, 3);
        let pred = net.predict(&image).unwrap();
        assert!(pred.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn predict_is_shift_invariant() {
        let logits = ChannelField::from_values(1, 2, 3, vec![0.3, 0.9, 0.1, -1.0, -0.2, -0.4]);
        let shifted = ChannelField::from_values(1, 2, 3, vec![5.3, 5.9, 5.1, 4.0, 4.8, 4.6]);
        assert_eq!(argmax_labels(&logits), argmax_labels(&shifted));
        assert_eq!(argmax_labels(&logits).get(0, 0), 1);
        assert_eq!(argmax_labels(&logits).get(1, 0), 1);
    }

    #[test]
    fn weights_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.weights");
        let net = DualBranchNet::with_dims(3, 5, 4, 2, 11);
        net.save_weights(&path).unwrap();
        let loaded = DualBranchNet::load_weights(&path).unwrap();
        assert_eq!(net, loaded);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let image = random_field(&mut rng, 8, 8, 3);
        assert_eq!(
            net.forward(&image).unwrap().values(),
            loaded.forward(&image).unwrap().values()
        );
    }

    #[test]
    fn truncated_and_inconsistent_weight_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.weights");
        let net = tiny_net(13);
        net.save_weights(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = &bytes[..bytes.len() - 9];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(
            DualBranchNet::load_weights(&path),
            Err(ModelError::Format { .. })
        ));

        // Corrupt the num_leaves header field: the head manifest no longer
        // matches the declared architecture.
        let mut wrong = bytes.clone();
        wrong[12..16].copy_from_slice(&4u32.to_le_bytes());
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(
            DualBranchNet::load_weights(&path),
            Err(ModelError::Format { .. })
        ));

        std::fs::write(&path, b"JUNKFILE").unwrap();
        assert!(matches!(
            DualBranchNet::load_weights(&path),
            Err(ModelError::Format { .. })
        ));
    }

    #[test]
    fn plateau_schedule_halves_after_each_patience_window() {
        // Monitor never improves after epoch 1: with patience 3, the rate
        // halves at epochs 4 and 7 -> initial/4 after two triggers.
        let h = ClassHierarchy::occlusal();
        let mut net = tiny_net(17);
        let mut image = RgbImage::new(8, 8);
        for p in image.pixels_mut() {
            *p = image::Rgb([255, 0, 0]);
        }
        let target = LabelMask::new(8, 8).unwrap();
        let sample = TrainSample {
            id: "fixture".into(),
            image,
            target,
        };
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 1,
            initial_lr: 1e-4,
            augment: false,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train(
            &mut net,
            std::slice::from_ref(&sample),
            std::slice::from_ref(&sample),
            &h,
            &cfg,
        )
        .unwrap();
        let lrs: Vec<f64> = report.epochs.iter().map(|e| e.lr).collect();
        // All-background target: Dice undefined every epoch, monitor stuck at 0.
        assert_eq!(lrs[..4], [1e-4, 1e-4, 1e-4, 1e-4]);
        assert_eq!(lrs[4..7], [5e-5, 5e-5, 5e-5]);
        assert_eq!(lrs[7], 2.5e-5);
    }

    #[test]
    fn training_is_deterministic_given_the_seed() {
        let h = ClassHierarchy::occlusal();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut samples = Vec::new();
        for i in 0..4 {
            let mut image = RgbImage::new(8, 8);
            for p in image.pixels_mut() {
                *p = image::Rgb([rng.random(), rng.random(), rng.random()]);
            }
            let target = random_target(&mut rng, 8, 8, 3);
            samples.push(TrainSample {
                id: format!("s{i}"),
                image,
                target,
            });
        }
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 99,
            ..TrainConfig::default()
        };
        let run = |cfg: &TrainConfig| {
            let mut net = tiny_net(31);
            let report = train(&mut net, &samples[..3], &samples[3..], &h, cfg).unwrap();
            (report.log_text(), net.snapshot())
        };
        let (log_a, params_a) = run(&cfg);
        let (log_b, params_b) = run(&cfg);
        assert_eq!(log_a, log_b);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn best_epoch_weights_are_restored() {
        let h = ClassHierarchy::occlusal();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        // Color-coded target: red pixels are MTP, everything else background.
        let mut image = RgbImage::new(8, 8);
        let mut target = LabelMask::new(8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if (x + y) % 3 == 0 {
                    image.put_pixel(x, y, image::Rgb([220, 30, 30]));
                    target.set(x, y, 1);
                } else {
                    image.put_pixel(x, y, image::Rgb([rng.random_range(80..140), 200, 200]));
                }
            }
        }
        let sample = TrainSample {
            id: "fixture".into(),
            image,
            target,
        };
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 1,
            initial_lr: 0.05,
            loss: LossConfig {
                epsilon: 1e-6,
                hcel_reduction: PixelReduction::Mean,
            },
            augment: false,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut net = tiny_net(41);
        let report = train(
            &mut net,
            std::slice::from_ref(&sample),
            std::slice::from_ref(&sample),
            &h,
            &cfg,
        )
        .unwrap();
        let best_logged = report
            .epochs
            .iter()
            .map(|e| e.monitor)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.best_monitor, best_logged);
        // The restored network reproduces the logged best monitor.
        let (_, monitor) = validation_dice(&net, std::slice::from_ref(&sample), &h).unwrap();
        assert!((monitor - report.best_monitor).abs() < 1e-12);
    }
}
