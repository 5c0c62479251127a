//! Image datasets: the in-memory container plus a deterministic synthetic
//! shapes generator for desk-scale experiments.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::hash::sha256;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// Spatial layout of one image. Tensors store images as `[C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Tensor shape `[C, H, W]` for one image.
    pub fn tensor_shape(&self) -> Vec<usize> {
        vec![self.c, self.h, self.w]
    }
}

/// A uniform-shape image collection with optional class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    shape: ImageShape,
    images: Vec<Tensor>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        name: String,
        shape: ImageShape,
        images: Vec<Tensor>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape.tensor_shape().as_slice() {
                return Err(CoreError::ShapeMismatch(alloc::format!(
                    "image {} has shape {:?}, dataset expects {:?}",
                    i,
                    img.shape(),
                    shape.tensor_shape()
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(CoreError::InvalidArgument(alloc::format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        Ok(Self { name, shape, images, labels })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Number of distinct classes implied by the labels (max label + 1).
    pub fn class_count(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Deterministically shuffle images (and labels) in place.
    pub fn shuffle(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed);
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut rng);
        self.images = order.iter().map(|&i| self.images[i].clone()).collect();
        if let Some(l) = &self.labels {
            self.labels = Some(order.iter().map(|&i| l[i]).collect());
        }
    }

    /// Split off the first `n_head` examples.
    pub fn split(&self, n_head: usize) -> Result<(Dataset, Dataset)> {
        if n_head > self.len() {
            return Err(CoreError::InvalidArgument(alloc::format!(
                "cannot take {} of {} examples",
                n_head,
                self.len()
            )));
        }
        let head = Dataset {
            name: alloc::format!("{}/head", self.name),
            shape: self.shape,
            images: self.images[..n_head].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n_head].to_vec()),
        };
        let tail = Dataset {
            name: alloc::format!("{}/tail", self.name),
            shape: self.shape,
            images: self.images[n_head..].to_vec(),
            labels: self.labels.as_ref().map(|l| l[n_head..].to_vec()),
        };
        Ok((head, tail))
    }

    /// Content digest over shape, pixel bits and labels. Name is excluded so
    /// renames do not change identity.
    pub fn digest(&self) -> [u8; 32] {
        let mut bytes = Vec::new();
        for d in [self.shape.c, self.shape.h, self.shape.w] {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for img in &self.images {
            for v in img.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                bytes.extend_from_slice(&(*l as u32).to_le_bytes());
            }
        }
        sha256(&bytes)
    }
}

/// Number of classes produced by [`synth_shapes`].
pub const SYNTH_CLASSES: usize = 4;

/// Deterministic labeled dataset of simple geometric shapes on a noisy
/// background: horizontal bars, vertical bars, crosses and disks. Values lie
/// in `[0,1]`; classes are balanced to within one example.
pub fn synth_shapes(size: usize, count: usize, seed: u64) -> Result<Dataset> {
    if count < 1 {
        return Err(CoreError::NotEnoughData("synthetic dataset needs count >= 1".into()));
    }
    if size < 8 {
        return Err(CoreError::InvalidArgument("synthetic images need size >= 8".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % SYNTH_CLASSES;
        images.push(render_shape(size, label, &mut rng));
        labels.push(label);
    }
    Dataset::new(
        alloc::format!("shapes-{}", size),
        ImageShape { h: size, w: size, c: 1 },
        images,
        Some(labels),
    )
}

fn render_shape(s: usize, label: usize, rng: &mut impl Rng) -> Tensor {
    let mut px = vec![0.0f64; s * s];
    let base: f64 = rng.random_range(0.05..0.12);
    for v in px.iter_mut() {
        *v = base + rng.random_range(0.0..0.04);
    }
    let fg: f64 = rng.random_range(0.70..0.95);

    match label {
        0 => {
            // Horizontal bar.
            let t = rng.random_range((s / 6).max(2)..=s / 3);
            let r0 = rng.random_range(1..s - t);
            fill_rect(&mut px, s, r0, 1, t, s - 2, fg);
        }
        1 => {
            // Vertical bar.
            let t = rng.random_range((s / 6).max(2)..=s / 3);
            let c0 = rng.random_range(1..s - t);
            fill_rect(&mut px, s, 1, c0, s - 2, t, fg);
        }
        2 => {
            // Cross: thin bars near the center.
            let t = rng.random_range(2..=(s / 5).max(2));
            let jitter = s / 8;
            let mid = s / 2;
            let r0 = rng.random_range(mid - jitter..=mid + jitter) - t / 2;
            let c0 = rng.random_range(mid - jitter..=mid + jitter) - t / 2;
            fill_rect(&mut px, s, r0, 1, t, s - 2, fg);
            fill_rect(&mut px, s, 1, c0, s - 2, t, fg);
        }
        _ => {
            // Filled disk.
            let r = rng.random_range(s / 5..=s / 3);
            let cy = rng.random_range(r + 1..s - r - 1);
            let cx = rng.random_range(r + 1..s - r - 1);
            for y in 0..s {
                for x in 0..s {
                    let dy = y as i64 - cy as i64;
                    let dx = x as i64 - cx as i64;
                    if dy * dy + dx * dx <= (r * r) as i64 {
                        px[y * s + x] = fg;
                    }
                }
            }
        }
    }

    let blurred = box_blur(&px, s);
    Tensor::new(vec![1, s, s], blurred).expect("render produces s*s pixels")
}

fn fill_rect(px: &mut [f64], s: usize, r0: usize, c0: usize, height: usize, width: usize, v: f64) {
    for r in r0..(r0 + height).min(s) {
        for c in c0..(c0 + width).min(s) {
            px[r * s + c] = v;
        }
    }
}

/// 3x3 mean blur with clamped borders; output stays in the convex hull of
/// the input values.
fn box_blur(px: &[f64], s: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && xx >= 0 && (yy as usize) < s && (xx as usize) < s {
                        sum += px[yy as usize * s + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * s + x] = sum / n;
        }
    }
    out
}
