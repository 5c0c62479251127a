//! The two networks: a shallow convolutional autoencoder trained on benign
//! images, and a small convolutional classifier standing in for the large
//! pretrained models the detector guards.
//!
//! The autoencoder is Conv(3x3)+ReLU -> MaxPool(2) -> Conv(3x3)+ReLU ->
//! Upsample(2) -> Conv(3x3)+Sigmoid, so its output always matches the input
//! shape and lies in (0,1). The classifier is two conv+pool blocks and a
//! dense head. Both train with Adam; all randomness comes from explicit
//! seeds.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::ImageShape;
use crate::math;
use crate::rng::{purpose_rng, seeded_rng};
use crate::tensor::{Tape, Tensor, Var};
use crate::{CoreError, Result};

/// Kernel + per-channel bias of one 3x3, stride-1, padding-1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(out_ch: usize, in_ch: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * 9) as f64;
        let fan_out = (out_ch * 9) as f64;
        let limit = math::sqrt(6.0 / (fan_in + fan_out));
        let data: Vec<f64> =
            (0..out_ch * in_ch * 9).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            kernel: Tensor::new(vec![out_ch, in_ch, 3, 3], data).expect("sized above"),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    fn on_tape(&self, tape: &mut Tape, with_grad: bool) -> (Var, Var) {
        let mut k = self.kernel.clone();
        let mut b = self.bias.clone();
        if with_grad {
            k = k.with_grad();
            b = b.with_grad();
        }
        (tape.var(k), tape.var(b))
    }

    fn apply(&self, tape: &mut Tape, x: Var, vars: (Var, Var)) -> Result<Var> {
        let c = tape.conv2d(x, vars.0, 1, 1)?;
        tape.bias_channel(c, vars.1)
    }

    fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Shallow encoder-decoder: filters are configurable, structure is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    input_shape: ImageShape,
    filters: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

/// Two conv+pool blocks and a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    input_shape: ImageShape,
    filters1: usize,
    filters2: usize,
    class_count: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Anything that can put a logit computation for one image on a tape.
/// Attacks differentiate through this surface.
pub trait DifferentiableClassifier {
    fn class_count(&self) -> usize;
    /// Expected input tensor shape (for images, `[C, H, W]`).
    fn input_shape(&self) -> Vec<usize>;
    /// Record the logits for `input` on `tape` and return their node.
    fn logits_on_tape(&self, tape: &mut Tape, input: Var) -> Result<Var>;
}

/// Build the autoencoder for a given input shape. Height and width must be
/// even (one pooling stage).
pub fn build_autoencoder(shape: ImageShape, filters: usize, seed: u64) -> Result<AutoencoderModel> {
    if shape.h % 2 != 0 || shape.w % 2 != 0 {
        return Err(CoreError::DimensionError(alloc::format!(
            "autoencoder needs even spatial dims, got {}x{}",
            shape.h, shape.w
        )));
    }
    if filters < 1 || shape.c < 1 {
        return Err(CoreError::InvalidArgument("filters and channels must be >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    Ok(AutoencoderModel {
        input_shape: shape,
        filters,
        conv1: ConvLayer::init(filters, shape.c, &mut rng),
        conv2: ConvLayer::init(filters, filters, &mut rng),
        conv3: ConvLayer::init(shape.c, filters, &mut rng),
    })
}

/// Build the stand-in classifier. Height and width must be divisible by 4
/// (two pooling stages).
pub fn build_classifier(
    shape: ImageShape,
    filters1: usize,
    filters2: usize,
    class_count: usize,
    seed: u64,
) -> Result<ClassifierModel> {
    if shape.h % 4 != 0 || shape.w % 4 != 0 {
        return Err(CoreError::DimensionError(alloc::format!(
            "classifier needs spatial dims divisible by 4, got {}x{}",
            shape.h, shape.w
        )));
    }
    if class_count < 2 {
        return Err(CoreError::InvalidArgument("classifier needs >= 2 classes".into()));
    }
    if filters1 < 1 || filters2 < 1 {
        return Err(CoreError::InvalidArgument("filter counts must be >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let conv1 = ConvLayer::init(filters1, shape.c, &mut rng);
    let conv2 = ConvLayer::init(filters2, filters1, &mut rng);
    let feat = filters2 * (shape.h / 4) * (shape.w / 4);
    let limit = math::sqrt(6.0 / (feat + class_count) as f64);
    let wdata: Vec<f64> =
        (0..class_count * feat).map(|_| rng.random_range(-limit..limit)).collect();
    Ok(ClassifierModel {
        input_shape: shape,
        filters1,
        filters2,
        class_count,
        conv1,
        conv2,
        head_weight: Tensor::new(vec![class_count, feat], wdata).expect("sized above"),
        head_bias: Tensor::zeros(&[class_count]),
    })
}

impl AutoencoderModel {
    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.conv3.param_count()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.input_shape.tensor_shape().as_slice() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "image shape {:?}, model expects {:?}",
                image.shape(),
                self.input_shape.tensor_shape()
            )));
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, x: Var, vars: &[(Var, Var); 3]) -> Result<Var> {
        let c1 = self.conv1.apply(tape, x, vars[0])?;
        let r1 = tape.relu(c1);
        let p = tape.maxpool2d(r1, 2)?;
        let c2 = self.conv2.apply(tape, p, vars[1])?;
        let r2 = tape.relu(c2);
        let u = tape.upsample2d(r2, 2)?;
        let c3 = self.conv3.apply(tape, u, vars[2])?;
        Ok(tape.sigmoid(c3))
    }

    fn params_on_tape(&self, tape: &mut Tape, with_grad: bool) -> [(Var, Var); 3] {
        [
            self.conv1.on_tape(tape, with_grad),
            self.conv2.on_tape(tape, with_grad),
            self.conv3.on_tape(tape, with_grad),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.kernel,
            &mut self.conv1.bias,
            &mut self.conv2.kernel,
            &mut self.conv2.bias,
            &mut self.conv3.kernel,
            &mut self.conv3.bias,
        ]
    }

    pub(crate) fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1.kernel,
            &self.conv1.bias,
            &self.conv2.kernel,
            &self.conv2.bias,
            &self.conv3.kernel,
            &self.conv3.bias,
        ]
    }
}

/// Run an image through the autoencoder; output has the input's shape and
/// values in (0,1).
pub fn reconstruct(model: &AutoencoderModel, image: &Tensor) -> Result<Tensor> {
    model.check_image(image)?;
    let mut tape = Tape::new();
    let vars = model.params_on_tape(&mut tape, false);
    let shape = model.input_shape;
    let x4 = image.reshape(vec![1, shape.c, shape.h, shape.w])?;
    let xv = tape.constant(x4);
    let out = model.forward(&mut tape, xv, &vars)?;
    tape.value(out).reshape(shape.tensor_shape())
}

impl ClassifierModel {
    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn filters(&self) -> (usize, usize) {
        (self.filters1, self.filters2)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.head_weight.len()
            + self.head_bias.len()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.input_shape.tensor_shape().as_slice() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "image shape {:?}, model expects {:?}",
                image.shape(),
                self.input_shape.tensor_shape()
            )));
        }
        Ok(())
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        vars: &ClassifierVars,
    ) -> Result<Var> {
        let c1 = self.conv1.apply(tape, x, vars.conv1)?;
        let r1 = tape.relu(c1);
        let p1 = tape.maxpool2d(r1, 2)?;
        let c2 = self.conv2.apply(tape, p1, vars.conv2)?;
        let r2 = tape.relu(c2);
        let p2 = tape.maxpool2d(r2, 2)?;
        let feat = self.filters2 * (self.input_shape.h / 4) * (self.input_shape.w / 4);
        let flat = tape.reshape(p2, vec![feat])?;
        tape.dense(flat, vars.head_w, vars.head_b)
    }

    fn params_on_tape(&self, tape: &mut Tape, with_grad: bool) -> ClassifierVars {
        let conv1 = self.conv1.on_tape(tape, with_grad);
        let conv2 = self.conv2.on_tape(tape, with_grad);
        let mut w = self.head_weight.clone();
        let mut b = self.head_bias.clone();
        if with_grad {
            w = w.with_grad();
            b = b.with_grad();
        }
        ClassifierVars { conv1, conv2, head_w: tape.var(w), head_b: tape.var(b) }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.kernel,
            &mut self.conv1.bias,
            &mut self.conv2.kernel,
            &mut self.conv2.bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ]
    }

    pub(crate) fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1.kernel,
            &self.conv1.bias,
            &self.conv2.kernel,
            &self.conv2.bias,
            &self.head_weight,
            &self.head_bias,
        ]
    }
}

struct ClassifierVars {
    conv1: (Var, Var),
    conv2: (Var, Var),
    head_w: Var,
    head_b: Var,
}

impl DifferentiableClassifier for ClassifierModel {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn input_shape(&self) -> Vec<usize> {
        self.input_shape.tensor_shape()
    }

    fn logits_on_tape(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let shape = self.input_shape;
        let x4 = tape.reshape(input, vec![1, shape.c, shape.h, shape.w])?;
        let vars = self.params_on_tape(tape, false);
        self.forward(tape, x4, &vars)
    }
}

/// Softmax prediction vector for one image.
pub fn predict(model: &impl DifferentiableClassifier, image: &Tensor) -> Result<Vec<f64>> {
    if image.shape() != model.input_shape().as_slice() {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "image shape {:?}, model expects {:?}",
            image.shape(),
            model.input_shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(image.clone());
    let logits = model.logits_on_tape(&mut tape, xv)?;
    let probs = tape.softmax(logits)?;
    Ok(tape.data(probs).to_vec())
}

/// Argmax class, lowest index on ties.
pub fn predict_label(model: &impl DifferentiableClassifier, image: &Tensor) -> Result<usize> {
    if image.shape() != model.input_shape().as_slice() {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "image shape {:?}, model expects {:?}",
            image.shape(),
            model.input_shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(image.clone());
    let logits = model.logits_on_tape(&mut tape, xv)?;
    Ok(tape.value(logits).argmax())
}

// ── Training ────────────────────────────────────────────────────────────

/// Optimizer and loop settings. Defaults follow the autoencoder recipe:
/// Adam, learning rate 0.01, batch 64, 50 epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, batch_size: 64, epochs: 50, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(CoreError::InvalidArgument("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        Self {
            m: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((p, g), (mi, vi)) in
                param.data_mut().iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (math::sqrt(v_hat) + self.eps_stab);
            }
        }
    }
}

/// Per-epoch history returned by the training loops.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean per-example loss for each epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean training accuracy for each epoch (classifier only).
    pub epoch_accuracy: Vec<f64>,
}

fn check_training_images(images: &[Tensor], shape: ImageShape) -> Result<()> {
    if images.is_empty() {
        return Err(CoreError::NotEnoughData("training set is empty".into()));
    }
    for (i, img) in images.iter().enumerate() {
        if img.shape() != shape.tensor_shape().as_slice() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "training image {} has shape {:?}, model expects {:?}",
                i,
                img.shape(),
                shape.tensor_shape()
            )));
        }
        if !img.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(CoreError::InvalidArgument(alloc::format!(
                "training image {} has values outside [0,1]",
                i
            )));
        }
    }
    Ok(())
}

/// Minimize mean per-image reconstruction MSE on benign images.
pub fn train_autoencoder(
    model: &mut AutoencoderModel,
    images: &[Tensor],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_training_images(images, model.input_shape)?;

    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut rng = purpose_rng(cfg.seed, "autoencoder/shuffle");
    let mut order: Vec<usize> = (0..images.len()).collect();
    let shape = model.input_shape;
    let mut report = TrainReport::default();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad_acc: Vec<Vec<f64>> = sizes.iter().map(|n| vec![0.0; *n]).collect();
            for &idx in chunk {
                let mut tape = Tape::new();
                let vars = model.params_on_tape(&mut tape, true);
                let x4 = images[idx].reshape(vec![1, shape.c, shape.h, shape.w])?;
                let xv = tape.constant(x4);
                let recon = model.forward(&mut tape, xv, &vars)?;
                let loss = tape.mse_scalar(recon, xv)?;
                loss_sum += tape.data(loss)[0];
                tape.backward(loss)?;
                accumulate_param_grads(&tape, &flatten_vars(&vars), &mut grad_acc);
            }
            scale_grads(&mut grad_acc, 1.0 / chunk.len() as f64);
            adam.apply(&mut model.params_mut(), &grad_acc, cfg.learning_rate);
        }
        report.epoch_loss.push(loss_sum / images.len() as f64);
    }
    Ok(report)
}

/// Minimize cross-entropy on labeled images.
pub fn train_classifier(
    model: &mut ClassifierModel,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_training_images(images, model.input_shape)?;
    if labels.len() != images.len() {
        return Err(CoreError::InvalidArgument(alloc::format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    for l in labels {
        if *l >= model.class_count {
            return Err(CoreError::LabelOutOfRange { label: *l, classes: model.class_count });
        }
    }

    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut rng = purpose_rng(cfg.seed, "classifier/shuffle");
    let mut order: Vec<usize> = (0..images.len()).collect();
    let shape = model.input_shape;
    let mut report = TrainReport::default();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad_acc: Vec<Vec<f64>> = sizes.iter().map(|n| vec![0.0; *n]).collect();
            for &idx in chunk {
                let mut tape = Tape::new();
                let vars = model.params_on_tape(&mut tape, true);
                let x4 = images[idx].reshape(vec![1, shape.c, shape.h, shape.w])?;
                let xv = tape.constant(x4);
                let logits = model.forward(&mut tape, xv, &vars)?;
                if tape.value(logits).argmax() == labels[idx] {
                    correct += 1;
                }
                let loss = tape.cross_entropy(logits, labels[idx])?;
                loss_sum += tape.data(loss)[0];
                tape.backward(loss)?;
                let var_list =
                    [vars.conv1.0, vars.conv1.1, vars.conv2.0, vars.conv2.1, vars.head_w, vars.head_b];
                accumulate_param_grads(&tape, &var_list, &mut grad_acc);
            }
            scale_grads(&mut grad_acc, 1.0 / chunk.len() as f64);
            adam.apply(&mut model.params_mut(), &grad_acc, cfg.learning_rate);
        }
        report.epoch_loss.push(loss_sum / images.len() as f64);
        report.epoch_accuracy.push(correct as f64 / images.len() as f64);
    }
    Ok(report)
}

fn flatten_vars(vars: &[(Var, Var); 3]) -> [Var; 6] {
    [vars[0].0, vars[0].1, vars[1].0, vars[1].1, vars[2].0, vars[2].1]
}

fn accumulate_param_grads(tape: &Tape, vars: &[Var], acc: &mut [Vec<f64>]) {
    for (v, slot) in vars.iter().zip(acc.iter_mut()) {
        if let Some(g) = tape.grad(*v) {
            for (s, gi) in slot.iter_mut().zip(g) {
                *s += gi;
            }
        }
    }
}

fn scale_grads(acc: &mut [Vec<f64>], scale: f64) {
    for g in acc {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
}

/// Fraction of images whose predicted label matches.
pub fn accuracy(model: &ClassifierModel, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(CoreError::NotEnoughData("accuracy needs at least one image".into()));
    }
    let mut correct = 0usize;
    for (img, l) in images.iter().zip(labels) {
        if predict_label(model, img)? == *l {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

// ── Checkpoint encoding ─────────────────────────────────────────────────
//
// Layout: magic "AEAE" | u32 version | u8 kind | descriptor | params.
// Params are written as u32 rank, u32 dims, then raw little-endian f64s.

pub(crate) const MAGIC: &[u8; 4] = b"AEAE";
pub(crate) const VERSION: u32 = 1;
const KIND_AUTOENCODER: u8 = 1;
const KIND_CLASSIFIER: u8 = 2;

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for d in t.shape() {
            self.u32(*d as u32);
        }
        for v in t.data() {
            self.f64(*v);
        }
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::CorruptCheckpoint(alloc::format!(
                "truncated: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CoreError::CorruptCheckpoint(alloc::format!(
                "implausible tensor rank {}",
                rank
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 16_000_000 {
            return Err(CoreError::CorruptCheckpoint(alloc::format!(
                "implausible tensor size {}",
                numel
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CoreError::CorruptCheckpoint(alloc::format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn read_header(r: &mut ByteReader, expected_kind: u8) -> Result<()> {
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(CoreError::VersionMismatch(alloc::format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CoreError::VersionMismatch(alloc::format!(
            "format version {}, this build reads {}",
            version, VERSION
        )));
    }
    let kind = r.u8()?;
    if kind != expected_kind {
        return Err(CoreError::CorruptCheckpoint(alloc::format!(
            "checkpoint kind {} where {} was expected",
            kind, expected_kind
        )));
    }
    Ok(())
}

/// Serialize the autoencoder to a versioned byte stream.
pub fn encode_autoencoder(model: &AutoencoderModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(KIND_AUTOENCODER);
    for d in [model.input_shape.h, model.input_shape.w, model.input_shape.c, model.filters] {
        w.u32(d as u32);
    }
    for p in model.params() {
        w.tensor(p);
    }
    w.buf
}

/// Parse an autoencoder checkpoint; parameters round-trip bit-exactly.
pub fn decode_autoencoder(bytes: &[u8]) -> Result<AutoencoderModel> {
    let mut r = ByteReader::new(bytes);
    let model = decode_autoencoder_from(&mut r)?;
    r.finish()?;
    Ok(model)
}

pub(crate) fn decode_autoencoder_from(r: &mut ByteReader) -> Result<AutoencoderModel> {
    read_header(r, KIND_AUTOENCODER)?;
    let h = r.u32()? as usize;
    let w_ = r.u32()? as usize;
    let c = r.u32()? as usize;
    let filters = r.u32()? as usize;
    let shape = ImageShape { h, w: w_, c };
    let mut model = build_autoencoder(shape, filters, 0)?;
    for p in model.params_mut() {
        let t = r.tensor()?;
        if t.shape() != p.shape() {
            return Err(CoreError::CorruptCheckpoint(alloc::format!(
                "parameter shape {:?} does not match architecture {:?}",
                t.shape(),
                p.shape()
            )));
        }
        *p = t;
    }
    Ok(model)
}

/// Serialize the classifier to a versioned byte stream.
pub fn encode_classifier(model: &ClassifierModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(KIND_CLASSIFIER);
    for d in [
        model.input_shape.h,
        model.input_shape.w,
        model.input_shape.c,
        model.filters1,
        model.filters2,
        model.class_count,
    ] {
        w.u32(d as u32);
    }
    for p in model.params() {
        w.tensor(p);
    }
    w.buf
}

/// Parse a classifier checkpoint; parameters round-trip bit-exactly.
pub fn decode_classifier(bytes: &[u8]) -> Result<ClassifierModel> {
    let mut r = ByteReader::new(bytes);
    let model = decode_classifier_from(&mut r)?;
    r.finish()?;
    Ok(model)
}

pub(crate) fn decode_classifier_from(r: &mut ByteReader) -> Result<ClassifierModel> {
    read_header(r, KIND_CLASSIFIER)?;
    let h = r.u32()? as usize;
    let w_ = r.u32()? as usize;
    let c = r.u32()? as usize;
    let f1 = r.u32()? as usize;
    let f2 = r.u32()? as usize;
    let k = r.u32()? as usize;
    let mut model = build_classifier(ImageShape { h, w: w_, c }, f1, f2, k, 0)?;
    for p in model.params_mut() {
        let t = r.tensor()?;
        if t.shape() != p.shape() {
            return Err(CoreError::CorruptCheckpoint(alloc::format!(
                "parameter shape {:?} does not match architecture {:?}",
                t.shape(),
                p.shape()
            )));
        }
        *p = t;
    }
    Ok(model)
}

#[cfg(test)]
mod tests;
