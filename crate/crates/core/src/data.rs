//! Dataset ingestion and generation.
//!
//! Images live in `[N,C,H,W]` tensors with values in `[0,1]`. The on-disk
//! interchange format is classic IDX (big-endian magic + dims + u8 payload);
//! parsing works on byte slices so it stays I/O-free, the companion crate
//! adds the file handling. A seeded synthetic generator provides the
//! desk-scale classification task: one smooth low-frequency template per
//! class plus per-sample Gaussian pixel noise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const IDX_IMAGES_MAGIC_3D: u32 = 0x0000_0803;
pub const IDX_IMAGES_MAGIC_4D: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An immutable labelled image set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    fingerprint: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::BadShape {
                op: "dataset",
                shape: images.shape().to_vec(),
                reason: "expected [N,C,H,W] images",
            });
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::Data("dataset must contain at least one sample".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Data(format!(
                "label {l} out of range for {class_count} classes at sample {i}"
            )));
        }
        if !images.all_finite() {
            return Err(Error::Data("images contain non-finite values".into()));
        }
        let fingerprint = fingerprint(&images, &labels, class_count);
        Ok(Dataset {
            images,
            labels,
            class_count,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// `(C, H, W)` of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copies the given samples into a batch, remembering their dataset
    /// indices (external-teacher logits are looked up by these).
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Ok(Batch {
            images: Tensor::new(&[indices.len(), c, h, w], data)?,
            labels,
            indices: indices.to_vec(),
        })
    }
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Fingerprint
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(FNV_OFFSET)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }
}

/// Content hash over shape, pixel bits and labels; stable across loads of
/// identical bytes.
fn fingerprint(images: &Tensor, labels: &[usize], class_count: usize) -> String {
    let mut h = Fnv::new();
    h.write(b"dataset-v1");
    h.write_u64(class_count as u64);
    h.write_u64(images.rank() as u64);
    for &d in images.shape() {
        h.write_u64(d as u64);
    }
    for v in images.data() {
        h.write(&v.to_bits().to_le_bytes());
    }
    for &l in labels {
        h.write_u64(l as u64);
    }
    format!("fnv1a64:{:016x}", h.0)
}

// ---------------------------------------------------------------------------
// IDX parsing and serialization (byte level)
// ---------------------------------------------------------------------------

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Format {
            offset,
            reason: "truncated header".into(),
        }),
    }
}

/// Parses an IDX image file. The classic 3-dim form (`N,H,W`) loads as
/// single-channel; the 4-dim form (`N,C,H,W`) carries channels explicitly.
/// Pixels scale from `u8` to `[0,1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let magic = read_be_u32(bytes, 0)?;
    let dims = match magic {
        IDX_IMAGES_MAGIC_3D => 3,
        IDX_IMAGES_MAGIC_4D => 4,
        _ => {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad image magic 0x{magic:08x}"),
            })
        }
    };
    let mut shape = Vec::with_capacity(4);
    for d in 0..dims {
        shape.push(read_be_u32(bytes, 4 + 4 * d)? as usize);
    }
    if dims == 3 {
        shape.insert(1, 1); // grayscale: C = 1
    }
    let header = 4 + 4 * dims;
    let expected: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Format {
            offset: header + payload.len().min(expected),
            reason: format!(
                "payload length {} does not match header dims (expected {expected})",
                payload.len()
            ),
        });
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((shape, data))
}

/// Parses an IDX label file into raw label values.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad label magic 0x{magic:08x}"),
        });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format {
            offset: 8 + payload.len().min(n),
            reason: format!("payload length {} does not match count {n}", payload.len()),
        });
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Builds a dataset from IDX image and label payloads. The class count is
/// taken as `max(label) + 1`.
pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (shape, data) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != shape[0] {
        return Err(Error::Format {
            offset: 4,
            reason: format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            ),
        });
    }
    let class_count = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(&shape, data)?, labels, class_count)
}

/// Serializes a dataset to IDX bytes, quantizing pixels to `u8`
/// (`round(v * 255)`, clamped). Single-channel data uses the classic 3-dim
/// form so the files round-trip bit-exactly with `parse_idx_images`.
pub fn dataset_to_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (c, h, w) = ds.image_dims();
    let n = ds.len();
    if ds.class_count() > 256 {
        return Err(Error::Data(
            "IDX labels are u8; more than 256 classes cannot be exported".into(),
        ));
    }
    let mut images = Vec::with_capacity(16 + n * c * h * w);
    if c == 1 {
        images.extend_from_slice(&IDX_IMAGES_MAGIC_3D.to_be_bytes());
        for d in [n, h, w] {
            images.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        images.extend_from_slice(&IDX_IMAGES_MAGIC_4D.to_be_bytes());
        for d in [n, c, h, w] {
            images.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    for v in ds.images().data() {
        let q = libm::round(v * 255.0).clamp(0.0, 255.0) as u8;
        images.push(q);
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(ds.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Parameters of the synthetic classification task.
///
/// `seed` defines the class templates; `noise_seed` drives the per-sample
/// noise. Keeping them apart lets a train/eval pair share class definitions
/// while drawing disjoint samples.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_channels"))]
    pub channels: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_sigma"))]
    pub noise_sigma: f64,
    pub seed: u64,
    pub noise_seed: u64,
}

fn default_channels() -> usize {
    3
}

fn default_sigma() -> f64 {
    0.25
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            per_class,
            image_size,
            channels: default_channels(),
            noise_sigma: default_sigma(),
            seed,
            noise_seed: seed,
        }
    }

    /// Same classes, fresh noise: the matching evaluation split.
    pub fn eval_split(&self, per_class: usize, noise_seed: u64) -> Self {
        SyntheticSpec {
            per_class,
            noise_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.per_class == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config(
                "per_class, image_size and channels must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// The noiseless class templates: per class and channel, a base offset plus
/// a couple of low-frequency sinusoids with seeded frequencies, phases and
/// amplitudes.
///
/// The per-channel offsets matter: networks that end in global average
/// pooling are nearly blind to phase, so classes must also differ in
/// statistics pooling can see (channel means, band energies). Scales are
/// calibrated against the default noise so a nearest-template classifier
/// lands below 100% but well above chance.
pub fn synthetic_templates(spec: &SyntheticSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let s = spec.image_size;
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut templates = Vec::with_capacity(spec.classes);
    for class in 0..spec.classes {
        let mut rng = Rng::seeded(spec.seed, &[0x7e71, class as u64]);
        let mut data = vec![0.0; spec.channels * s * s];
        for ch in 0..spec.channels {
            let offset = 0.20 * rng.next_f64() - 0.10;
            let waves: Vec<(f64, f64, f64, f64)> = (0..2)
                .map(|j| {
                    let fx = (1 + rng.next_below(3)) as f64 * if rng.next_bool() { 1.0 } else { -1.0 };
                    let fy = (1 + rng.next_below(3)) as f64 * if rng.next_bool() { 1.0 } else { -1.0 };
                    let phase = two_pi * rng.next_f64();
                    let amp = (0.030 + 0.030 * rng.next_f64()) / (1.0 + j as f64);
                    (fx, fy, phase, amp)
                })
                .collect();
            for y in 0..s {
                for x in 0..s {
                    let mut v = 0.5 + offset;
                    for (fx, fy, phase, amp) in &waves {
                        v += amp
                            * libm::sin(two_pi * (fx * x as f64 + fy * y as f64) / s as f64 + phase);
                    }
                    data[(ch * s + y) * s + x] = v.clamp(0.05, 0.95);
                }
            }
        }
        templates.push(Tensor::new(&[spec.channels, s, s], data)?);
    }
    Ok(templates)
}

/// Generates the dataset: per sample, its class template plus Gaussian
/// pixel noise, clipped back to `[0,1]`. Samples are ordered class-major.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let templates = synthetic_templates(spec)?;
    let s = spec.image_size;
    let img_len = spec.channels * s * s;
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * img_len);
    let mut labels = Vec::with_capacity(n);
    let mut rng = Rng::seeded(spec.noise_seed, &[0x5a3b]);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &t in template.data() {
                let v = t + spec.noise_sigma * rng.next_normal();
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::new(&[n, spec.channels, s, s], data)?,
        labels,
        spec.classes,
    )
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Crop padding: 10% of the side, rounded.
pub fn default_pad(side: usize) -> usize {
    libm::round(0.1 * side as f64) as usize
}

/// Deterministic augmentation kernel: optional horizontal flip, then a crop
/// of the zero-padded image at offset `(dy, dx)`, `0 <= dy,dx <= 2*pad`.
/// `(pad, pad)` is the center crop that reproduces the input.
pub fn augment_image(
    img: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    flip: bool,
    dy: usize,
    dx: usize,
    pad: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(img.len(), channels * h * w);
    debug_assert_eq!(out.len(), img.len());
    debug_assert!(dy <= 2 * pad && dx <= 2 * pad);
    for ch in 0..channels {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = y as isize + dy as isize - pad as isize;
            for x in 0..w {
                let sx = x as isize + dx as isize - pad as isize;
                dst[y * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    let src_x = if flip { w - 1 - sx as usize } else { sx as usize };
                    src[sy as usize * w + src_x]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Randomly flips and crops every image of a batch. Draw order per image is
/// flip, dy, dx, so a seeded rng reproduces the same batch.
pub fn augment_batch(images: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::BadShape {
            op: "augment",
            shape: shape.to_vec(),
            reason: "expected [N,C,H,W]",
        });
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pad = default_pad(h.min(w));
    let img_len = c * h * w;
    let mut out = vec![0.0; images.len()];
    for i in 0..n {
        let flip = rng.next_bool();
        let dy = rng.next_below(2 * pad + 1);
        let dx = rng.next_below(2 * pad + 1);
        augment_image(
            &images.data()[i * img_len..(i + 1) * img_len],
            c,
            h,
            w,
            flip,
            dy,
            dx,
            pad,
            &mut out[i * img_len..(i + 1) * img_len],
        );
    }
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Shuffle order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seeded(seed, &[0xba7c, epoch as u64]);
    rng.shuffle(&mut order);
    order
}

/// Iterator over one epoch's batches in a reproducible shuffled order; the
/// last partial batch is kept.
pub fn batches<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(Batches {
        ds,
        order: epoch_permutation(ds.len(), seed, epoch),
        batch_size,
        pos: 0,
    })
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.ds.gather(idx).expect("permutation indices in range"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 4 grayscale 2x2 images with pixel k*16 at flat position k, labels
    /// 0..3. Written by hand against the IDX layout.
    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&4u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for k in 0..16u8 {
            img.push(k * 16);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&4u32.to_be_bytes());
        lbl.extend_from_slice(&[0, 1, 2, 3]);
        (img, lbl)
    }

    #[test]
    fn idx_fixture_parses_with_known_values() {
        let (img, lbl) = idx_fixture();
        let ds = dataset_from_idx(&img, &lbl).unwrap();
        assert_eq!(ds.images().shape(), &[4, 1, 2, 2]);
        assert_eq!(ds.labels(), &[0, 1, 2, 3]);
        assert_eq!(ds.class_count(), 4);
        assert_eq!(ds.images().at(&[0, 0, 0, 0]), 0.0);
        assert!((ds.images().at(&[0, 0, 0, 1]) - 16.0 / 255.0).abs() < 1e-15);
        assert!((ds.images().at(&[3, 0, 1, 1]) - 240.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn idx_count_mismatch_is_a_format_error() {
        let (img, mut lbl) = idx_fixture();
        lbl[7] = 3; // claim 3 labels
        lbl.truncate(8 + 3);
        match dataset_from_idx(&img, &lbl) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_bad_magic_reports_offset_zero() {
        let (mut img, lbl) = idx_fixture();
        img[0] = 0xff;
        match dataset_from_idx(&img, &lbl) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_payload_is_rejected() {
        let (mut img, lbl) = idx_fixture();
        img.truncate(img.len() - 3);
        assert!(matches!(
            dataset_from_idx(&img, &lbl),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn idx_round_trips_bit_exactly() {
        let (img, lbl) = idx_fixture();
        let ds = dataset_from_idx(&img, &lbl).unwrap();
        let (img2, lbl2) = dataset_to_idx(&ds).unwrap();
        assert_eq!(img, img2);
        assert_eq!(lbl, lbl2);
    }

    #[test]
    fn fingerprint_is_stable_and_content_sensitive() {
        let (img, lbl) = idx_fixture();
        let a = dataset_from_idx(&img, &lbl).unwrap();
        let b = dataset_from_idx(&img, &lbl).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut img2 = img.clone();
        *img2.last_mut().unwrap() ^= 1;
        let c = dataset_from_idx(&img2, &lbl).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::new(3, 5, 8, 99);
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
    }

    #[test]
    fn sigma_zero_collapses_to_templates() {
        let mut spec = SyntheticSpec::new(3, 4, 8, 5);
        spec.noise_sigma = 0.0;
        let ds = gen_synthetic(&spec).unwrap();
        let templates = synthetic_templates(&spec).unwrap();
        let img_len = 3 * 8 * 8;
        for i in 0..ds.len() {
            let class = ds.labels()[i];
            let img = &ds.images().data()[i * img_len..(i + 1) * img_len];
            for (a, b) in img.iter().zip(templates[class].data()) {
                assert_eq!(a, b);
            }
        }
    }

    /// Classify by nearest template in L2; the reference oracle for the
    /// generator's difficulty calibration.
    fn nearest_template_accuracy(ds: &Dataset, templates: &[Tensor]) -> f64 {
        let (c, h, w) = ds.image_dims();
        let img_len = c * h * w;
        let mut correct = 0usize;
        for i in 0..ds.len() {
            let img = &ds.images().data()[i * img_len..(i + 1) * img_len];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, t) in templates.iter().enumerate() {
                let d: f64 = img
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best == ds.labels()[i] {
                correct += 1;
            }
        }
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn default_sigma_keeps_oracle_between_90_and_100_percent() {
        let spec = SyntheticSpec::new(10, 100, 12, 424242);
        let ds = gen_synthetic(&spec).unwrap();
        let templates = synthetic_templates(&spec).unwrap();
        let acc = nearest_template_accuracy(&ds, &templates);
        assert!(acc > 0.90 && acc < 1.00, "oracle accuracy {acc}");
    }

    #[test]
    fn center_crop_without_flip_is_identity() {
        let spec = SyntheticSpec::new(2, 1, 8, 1);
        let ds = gen_synthetic(&spec).unwrap();
        let img_len = 3 * 8 * 8;
        let img = &ds.images().data()[..img_len];
        let pad = default_pad(8);
        let mut out = vec![0.0; img_len];
        augment_image(img, 3, 8, 8, false, pad, pad, pad, &mut out);
        assert_eq!(img, &out[..]);
    }

    #[test]
    fn double_flip_is_identity() {
        let spec = SyntheticSpec::new(2, 1, 8, 2);
        let ds = gen_synthetic(&spec).unwrap();
        let img_len = 3 * 8 * 8;
        let img = &ds.images().data()[..img_len];
        let pad = default_pad(8);
        let mut once = vec![0.0; img_len];
        let mut twice = vec![0.0; img_len];
        augment_image(img, 3, 8, 8, true, pad, pad, pad, &mut once);
        augment_image(&once, 3, 8, 8, true, pad, pad, pad, &mut twice);
        assert_eq!(img, &twice[..]);
    }

    #[test]
    fn augment_preserves_shape_and_range() {
        let spec = SyntheticSpec::new(3, 4, 9, 7);
        let ds = gen_synthetic(&spec).unwrap();
        let mut rng = Rng::new(123);
        let out = augment_batch(ds.images(), &mut rng).unwrap();
        assert_eq!(out.shape(), ds.images().shape());
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batches_cover_the_dataset_exactly_once() {
        let spec = SyntheticSpec::new(3, 7, 6, 3);
        let ds = gen_synthetic(&spec).unwrap();
        let mut seen: Vec<usize> = batches(&ds, 4, 9, 0)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(seen.len(), ds.len());
        seen.sort_unstable();
        assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_depends_on_epoch_not_on_call() {
        let spec = SyntheticSpec::new(2, 10, 6, 3);
        let ds = gen_synthetic(&spec).unwrap();
        let a: Vec<usize> = batches(&ds, 32, 1, 0).unwrap().flat_map(|b| b.indices).collect();
        let b: Vec<usize> = batches(&ds, 32, 1, 0).unwrap().flat_map(|b| b.indices).collect();
        let c: Vec<usize> = batches(&ds, 32, 1, 1).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_batch_is_a_single_permuted_batch() {
        let spec = SyntheticSpec::new(2, 5, 6, 8);
        let ds = gen_synthetic(&spec).unwrap();
        let all: Vec<Batch> = batches(&ds, 100, 4, 0).unwrap().collect();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].len(), ds.len());
        assert_ne!(all[0].indices, (0..ds.len()).collect::<Vec<_>>());
    }
}
