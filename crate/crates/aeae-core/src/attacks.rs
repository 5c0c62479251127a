//! White-box evasion attacks against a differentiable classifier.
//!
//! Five methods: the one-step sign attack, its iterated/clipped variant, the
//! randomly-started projected variant, iterative minimal-perturbation search
//! via local linearization, and margin-penalty L2 minimization in tanh
//! space with a binary search on the penalty weight. Pixel domain is [0,1]
//! throughout; per-step sizes quoted on the 0-255 integer scale translate to
//! 1/255 here.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::Dataset;
use crate::math::{self, clamp01, sign};
use crate::models::{predict_label, AdamState, DifferentiableClassifier};
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor::{Tape, Tensor};
use crate::{CoreError, Result};

/// Attack selector for [`AttackConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    DeepFool,
    CwL2,
}

impl AttackMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Pgd => "pgd",
            AttackMethod::DeepFool => "deepfool",
            AttackMethod::CwL2 => "cw_l2",
        }
    }
}

/// Full knob set for one attack run. Constructors fill in the conventional
/// defaults; anything can be overridden before use.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub name: String,
    pub method: AttackMethod,
    /// L-infinity budget for the sign-step family.
    pub epsilon: f64,
    /// Per-step size for the iterative sign-step attacks.
    pub alpha: f64,
    /// Iteration count (per penalty constant for the L2 attack).
    pub iterations: usize,
    /// Margin the L2 attack must reach on the logits.
    pub confidence: f64,
    /// Starting penalty weight for the L2 attack.
    pub initial_c: f64,
    /// Binary-search steps on the penalty weight.
    pub c_steps: usize,
    /// Final boundary-crossing factor for the linearization attack.
    pub overshoot: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            name: alloc::format!("fgsm_eps{}", epsilon),
            method: AttackMethod::Fgsm,
            epsilon,
            alpha: epsilon,
            iterations: 1,
            confidence: 0.0,
            initial_c: 1.0,
            c_steps: 1,
            overshoot: 0.0,
            seed: 0,
        }
    }

    /// Step size 1/255 mirrors "one integer level per step" on byte pixels.
    pub fn bim(epsilon: f64) -> Self {
        Self {
            name: alloc::format!("bim_eps{}", epsilon),
            method: AttackMethod::Bim,
            epsilon,
            alpha: 1.0 / 255.0,
            iterations: 100,
            confidence: 0.0,
            initial_c: 1.0,
            c_steps: 1,
            overshoot: 0.0,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64) -> Self {
        Self {
            name: alloc::format!("pgd_eps{}", epsilon),
            method: AttackMethod::Pgd,
            epsilon,
            alpha: 0.01,
            iterations: 40,
            confidence: 0.0,
            initial_c: 1.0,
            c_steps: 1,
            overshoot: 0.0,
            seed: 0,
        }
    }

    pub fn deepfool() -> Self {
        Self {
            name: "deepfool".into(),
            method: AttackMethod::DeepFool,
            epsilon: 0.0,
            alpha: 0.0,
            iterations: 50,
            confidence: 0.0,
            initial_c: 1.0,
            c_steps: 1,
            overshoot: 0.02,
            seed: 0,
        }
    }

    pub fn cw_l2(confidence: f64) -> Self {
        Self {
            name: alloc::format!("cw_k{}", confidence),
            method: AttackMethod::CwL2,
            epsilon: 0.0,
            alpha: 0.0,
            iterations: 200,
            confidence,
            initial_c: 1.0,
            c_steps: 5,
            overshoot: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(CoreError::InvalidArgument("epsilon must be >= 0".into()));
        }
        if self.iterations < 1 {
            return Err(CoreError::InvalidArgument("iterations must be >= 1".into()));
        }
        match self.method {
            AttackMethod::Bim => {
                if !(self.alpha > 0.0) {
                    return Err(CoreError::InvalidArgument("alpha must be > 0".into()));
                }
                if self.alpha > self.epsilon {
                    return Err(CoreError::InvalidArgument(
                        "iterated sign attack needs alpha <= epsilon".into(),
                    ));
                }
            }
            AttackMethod::Pgd => {
                if !(self.alpha > 0.0) {
                    return Err(CoreError::InvalidArgument("alpha must be > 0".into()));
                }
            }
            AttackMethod::CwL2 => {
                if self.c_steps < 1 {
                    return Err(CoreError::InvalidArgument("c_steps must be >= 1".into()));
                }
                if !(self.initial_c > 0.0) {
                    return Err(CoreError::InvalidArgument("initial_c must be > 0".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Perturbation magnitudes: support fraction, Euclidean norm, max norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpNorms {
    pub l0_fraction: f64,
    pub l2: f64,
    pub linf: f64,
}

/// Outcome of one attack on one image.
#[derive(Debug, Clone)]
pub struct AdversarialResult {
    pub original: Tensor,
    pub adversarial: Tensor,
    /// True iff the model labels the adversarial image differently from the
    /// original image.
    pub success: bool,
    pub l0_fraction: f64,
    pub l2: f64,
    pub linf: f64,
    pub iterations_used: usize,
}

/// Component-wise perturbation statistics. The support count uses a 1e-12
/// threshold so exact zeros from clipping do not register.
pub fn lp_norms(original: &Tensor, adversarial: &Tensor) -> Result<LpNorms> {
    if original.shape() != adversarial.shape() {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "lp_norms: {:?} vs {:?}",
            original.shape(),
            adversarial.shape()
        )));
    }
    let n = original.len() as f64;
    let mut nonzero = 0usize;
    let mut sq = 0.0;
    let mut linf: f64 = 0.0;
    for (a, b) in original.data().iter().zip(adversarial.data()) {
        let d = math::abs(b - a);
        if d > 1e-12 {
            nonzero += 1;
        }
        sq += d * d;
        linf = linf.max(d);
    }
    Ok(LpNorms { l0_fraction: nonzero as f64 / n, l2: math::sqrt(sq), linf })
}

fn finish<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    original: &Tensor,
    adversarial: Tensor,
    iterations_used: usize,
) -> Result<AdversarialResult> {
    let orig_label = predict_label(model, original)?;
    let adv_label = predict_label(model, &adversarial)?;
    let norms = lp_norms(original, &adversarial)?;
    Ok(AdversarialResult {
        original: original.clone(),
        adversarial,
        success: adv_label != orig_label,
        l0_fraction: norms.l0_fraction,
        l2: norms.l2,
        linf: norms.linf,
        iterations_used,
    })
}

/// Gradient of the cross-entropy loss w.r.t. the input pixels.
fn loss_input_grad<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    image: &Tensor,
    label: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.var(image.clone().with_grad());
    let logits = model.logits_on_tape(&mut tape, xv)?;
    let loss = tape.cross_entropy(logits, label)?;
    tape.backward(loss)?;
    Ok(tape.grad(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; image.len()]))
}

fn check_image<M: DifferentiableClassifier + ?Sized>(model: &M, image: &Tensor) -> Result<()> {
    if image.shape() != model.input_shape().as_slice() {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "image shape {:?}, model expects {:?}",
            image.shape(),
            model.input_shape()
        )));
    }
    Ok(())
}

/// One sign step of size epsilon along the loss gradient, clipped to [0,1].
pub fn fgsm<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    image: &Tensor,
    label: usize,
    epsilon: f64,
) -> Result<AdversarialResult> {
    check_image(model, image)?;
    if epsilon < 0.0 {
        return Err(CoreError::InvalidArgument("epsilon must be >= 0".into()));
    }
    let grad = loss_input_grad(model, image, label)?;
    let data: Vec<f64> = image
        .data()
        .iter()
        .zip(&grad)
        .map(|(x, g)| clamp01(x + epsilon * sign(*g)))
        .collect();
    let adv = Tensor::new(image.shape().to_vec(), data)?;
    finish(model, image, adv, 1)
}

/// Iterated sign steps; every iterate is clipped to the epsilon-ball of the
/// original image intersected with [0,1].
pub fn bim<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    image: &Tensor,
    label: usize,
    epsilon: f64,
    alpha: f64,
    iterations: usize,
) -> Result<AdversarialResult> {
    check_image(model, image)?;
    if !(alpha > 0.0) || alpha > epsilon {
        return Err(CoreError::InvalidArgument("need 0 < alpha <= epsilon".into()));
    }
    if iterations < 1 {
        return Err(CoreError::InvalidArgument("iterations must be >= 1".into()));
    }
    let mut cur = image.clone();
    for _ in 0..iterations {
        let grad = loss_input_grad(model, &cur, label)?;
        let stepped: Vec<f64> = cur
            .data()
            .iter()
            .zip(&grad)
            .zip(image.data())
            .map(|((v, g), x0)| {
                (v + alpha * sign(*g)).clamp((x0 - epsilon).max(0.0), (x0 + epsilon).min(1.0))
            })
            .collect();
        cur = Tensor::new(image.shape().to_vec(), stepped)?;
    }
    finish(model, image, cur, iterations)
}

/// Iterated sign steps from a uniformly random start inside the
/// epsilon-ball intersected with [0,1], projecting back after each step.
pub fn pgd<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    image: &Tensor,
    label: usize,
    epsilon: f64,
    alpha: f64,
    iterations: usize,
    seed: u64,
) -> Result<AdversarialResult> {
    check_image(model, image)?;
    if !(alpha > 0.0) {
        return Err(CoreError::InvalidArgument("alpha must be > 0".into()));
    }
    if epsilon < 0.0 {
        return Err(CoreError::InvalidArgument("epsilon must be >= 0".into()));
    }
    if iterations < 1 {
        return Err(CoreError::InvalidArgument("iterations must be >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    // The feasible region is a product of per-pixel intervals, so uniform
    // per-pixel sampling is uniform on the whole region.
    let start: Vec<f64> = image
        .data()
        .iter()
        .map(|x0| {
            let lo = (x0 - epsilon).max(0.0);
            let hi = (x0 + epsilon).min(1.0);
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
        .collect();
    let mut cur = Tensor::new(image.shape().to_vec(), start)?;
    for _ in 0..iterations {
        let grad = loss_input_grad(model, &cur, label)?;
        let stepped: Vec<f64> = cur
            .data()
            .iter()
            .zip(&grad)
            .zip(image.data())
            .map(|((v, g), x0)| {
                (v + alpha * sign(*g)).clamp((x0 - epsilon).max(0.0), (x0 + epsilon).min(1.0))
            })
            .collect();
        cur = Tensor::new(image.shape().to_vec(), stepped)?;
    }
    finish(model, image, cur, iterations)
}

/// Accumulate minimal linearized steps toward the nearest class boundary
/// until the label flips, then overshoot the summed perturbation.
///
/// `reference_label`, when given, is the ground-truth class: an input the
/// model already misclassifies returns immediately with a zero perturbation.
pub fn deepfool<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    image: &Tensor,
    reference_label: Option<usize>,
    max_iterations: usize,
    overshoot: f64,
) -> Result<AdversarialResult> {
    check_image(model, image)?;
    let k = model.class_count();
    if k < 2 {
        return Err(CoreError::InvalidArgument("deepfool needs >= 2 classes".into()));
    }
    if max_iterations < 1 {
        return Err(CoreError::InvalidArgument("iterations must be >= 1".into()));
    }
    let orig_label = predict_label(model, image)?;
    if let Some(reference) = reference_label {
        if orig_label != reference {
            return finish(model, image, image.clone(), 0);
        }
    }

    let mut total_delta = vec![0.0; image.len()];
    let mut cur = image.clone();
    let mut iterations_used = 0;
    let mut stalled = false;

    for _ in 0..max_iterations {
        let mut tape = Tape::new();
        let xv = tape.var(cur.clone().with_grad());
        let logits = model.logits_on_tape(&mut tape, xv)?;
        if tape.value(logits).argmax() != orig_label {
            break;
        }

        // Nearest linearized boundary over all other classes.
        let mut best: Option<(f64, f64, Vec<f64>)> = None; // (distance, scale, direction)
        for class in 0..k {
            if class == orig_label {
                continue;
            }
            let diff = tape.logit_diff(logits, class, orig_label)?;
            let f_diff = tape.data(diff)[0];
            tape.backward(diff)?;
            let w = match tape.grad(xv) {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let norm_sq: f64 = w.iter().map(|v| v * v).sum();
            if norm_sq < 1e-24 {
                continue;
            }
            let norm = math::sqrt(norm_sq);
            let dist = math::abs(f_diff) / norm;
            if best.as_ref().map_or(true, |(d, _, _)| dist < *d) {
                best = Some((dist, math::abs(f_diff) / norm_sq, w));
            }
        }

        let Some((_, scale, w)) = best else {
            stalled = true;
            break;
        };
        for ((td, cv), wv) in total_delta.iter_mut().zip(cur.data_mut()).zip(&w) {
            let step = scale * wv;
            *td += step;
            *cv += step;
        }
        iterations_used += 1;
    }

    if stalled && iterations_used == 0 {
        // Every class-difference gradient vanished and nothing moved.
        return Err(CoreError::NoProgress);
    }

    let data: Vec<f64> = image
        .data()
        .iter()
        .zip(&total_delta)
        .map(|(x0, d)| clamp01(x0 + (1.0 + overshoot) * d))
        .collect();
    let adv = Tensor::new(image.shape().to_vec(), data)?;
    finish(model, image, adv, iterations_used)
}

const CW_ADAM_LR: f64 = 0.01;
const CW_BOX_GUARD: f64 = 1e-6;

/// Targeted L2 margin attack: minimize `||delta||_2^2 + c * g(x')` over the
/// tanh reparameterization of the pixel box, binary-searching `c`. Returns
/// the lowest-L2 candidate whose target class leads the logits; when no `c`
/// succeeds, the closest attempt comes back with `success = false`.
pub fn cw_l2<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    image: &Tensor,
    target_label: usize,
    confidence: f64,
    initial_c: f64,
    c_steps: usize,
    iterations: usize,
) -> Result<AdversarialResult> {
    check_image(model, image)?;
    let k = model.class_count();
    if target_label >= k {
        return Err(CoreError::LabelOutOfRange { label: target_label, classes: k });
    }
    let orig_label = predict_label(model, image)?;
    if target_label == orig_label {
        return Err(CoreError::InvalidArgument(
            "target label equals the model's current prediction".into(),
        ));
    }
    if c_steps < 1 || iterations < 1 || !(initial_c > 0.0) {
        return Err(CoreError::InvalidArgument("bad penalty-search parameters".into()));
    }

    let w0: Vec<f64> = image
        .data()
        .iter()
        .map(|x| math::atanh(2.0 * x.clamp(CW_BOX_GUARD, 1.0 - CW_BOX_GUARD) - 1.0))
        .collect();

    let mut c = initial_c;
    let mut c_lo = 0.0;
    let mut c_hi = f64::INFINITY;
    let mut best: Option<(f64, Tensor)> = None; // (l2, adversarial)
    let mut closest: Option<(f64, Tensor)> = None; // (margin, attempt)
    let mut total_steps = 0usize;

    for _ in 0..c_steps {
        let mut w = Tensor::new(image.shape().to_vec(), w0.clone())?;
        let mut adam = AdamState::new(&[w.len()]);
        let mut succeeded_at_c = false;

        for _ in 0..iterations {
            let mut tape = Tape::new();
            let wv = tape.var(w.clone().with_grad());
            let th = tape.tanh(wv);
            let xprime = tape.affine(th, 0.5, 0.5);
            let x0 = tape.constant(image.clone());
            let delta = tape.sub(xprime, x0)?;
            let l2_sq = tape.sum_squares(delta);
            let logits = model.logits_on_tape(&mut tape, xprime)?;
            let margin = tape.cw_margin(logits, target_label, confidence)?;
            let penalty = tape.affine(margin, c, 0.0);
            let objective = tape.add(l2_sq, penalty)?;
            tape.backward(objective)?;
            total_steps += 1;

            let margin_val = tape.data(margin)[0];
            if margin_val <= 0.0 {
                // Target class leads; keep the smallest L2 seen anywhere.
                let l2 = math::sqrt(tape.data(l2_sq)[0]);
                if best.as_ref().map_or(true, |(b, _)| l2 < *b) {
                    best = Some((l2, tape.value(xprime).clone()));
                }
                succeeded_at_c = true;
            }
            if closest.as_ref().map_or(true, |(m, _)| margin_val < *m) {
                closest = Some((margin_val, tape.value(xprime).clone()));
            }

            let grad = tape.grad(wv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; w.len()]);
            adam.apply(&mut [&mut w], &[grad], CW_ADAM_LR);
        }

        if succeeded_at_c {
            c_hi = c;
            c = 0.5 * (c_lo + c_hi);
        } else {
            c_lo = c;
            c = if c_hi.is_finite() { 0.5 * (c_lo + c_hi) } else { c * 10.0 };
        }
    }

    let adv = match (&best, &closest) {
        (Some((_, adv)), _) => adv.clone(),
        (None, Some((_, attempt))) => attempt.clone(),
        (None, None) => image.clone(),
    };
    finish(model, image, adv, total_steps)
}

/// Untargeted form: try every class other than `reference_label` (the true
/// class when known, else the model's prediction) and keep the best
/// successful candidate by L2.
pub fn cw_l2_untargeted<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    image: &Tensor,
    reference_label: Option<usize>,
    confidence: f64,
    initial_c: f64,
    c_steps: usize,
    iterations: usize,
) -> Result<AdversarialResult> {
    check_image(model, image)?;
    let orig_label = predict_label(model, image)?;
    let avoid = reference_label.unwrap_or(orig_label);
    let mut best: Option<AdversarialResult> = None;
    let mut fallback: Option<AdversarialResult> = None;
    let mut total_steps = 0usize;
    for target in 0..model.class_count() {
        if target == avoid || target == orig_label {
            continue;
        }
        let result = cw_l2(model, image, target, confidence, initial_c, c_steps, iterations)?;
        total_steps += result.iterations_used;
        if result.success {
            if best.as_ref().map_or(true, |b| result.l2 < b.l2) {
                best = Some(result);
            }
        } else if fallback.is_none() {
            fallback = Some(result);
        }
    }
    let mut out = match (best, fallback) {
        (Some(b), _) => b,
        (None, Some(f)) => f,
        (None, None) => finish(model, image, image.clone(), 0)?,
    };
    out.iterations_used = total_steps;
    Ok(out)
}

/// Run one configured attack on one image.
pub fn run_attack<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    image: &Tensor,
    true_label: Option<usize>,
    cfg: &AttackConfig,
) -> Result<AdversarialResult> {
    cfg.validate()?;
    match cfg.method {
        AttackMethod::Fgsm => {
            let label = label_for(model, image, true_label)?;
            fgsm(model, image, label, cfg.epsilon)
        }
        AttackMethod::Bim => {
            let label = label_for(model, image, true_label)?;
            bim(model, image, label, cfg.epsilon, cfg.alpha, cfg.iterations)
        }
        AttackMethod::Pgd => {
            let label = label_for(model, image, true_label)?;
            pgd(model, image, label, cfg.epsilon, cfg.alpha, cfg.iterations, cfg.seed)
        }
        AttackMethod::DeepFool => {
            deepfool(model, image, true_label, cfg.iterations, cfg.overshoot)
        }
        AttackMethod::CwL2 => cw_l2_untargeted(
            model,
            image,
            true_label,
            cfg.confidence,
            cfg.initial_c,
            cfg.c_steps,
            cfg.iterations,
        ),
    }
}

fn label_for<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    image: &Tensor,
    true_label: Option<usize>,
) -> Result<usize> {
    match true_label {
        Some(l) => Ok(l),
        None => predict_label(model, image),
    }
}

/// All results for one configuration.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub config: AttackConfig,
    pub results: Vec<AdversarialResult>,
}

/// Per-configuration aggregate over successful examples.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSummary {
    pub attempted: usize,
    pub succeeded: usize,
    pub avg_l0_fraction: f64,
    pub avg_l2: f64,
    pub avg_linf: f64,
}

impl AttackRun {
    pub fn successes(&self) -> impl Iterator<Item = &AdversarialResult> {
        self.results.iter().filter(|r| r.success)
    }

    /// Averages over successful examples; `None` when nothing succeeded.
    pub fn summary(&self) -> Option<LpSummary> {
        let succeeded = self.successes().count();
        if succeeded == 0 {
            return None;
        }
        let n = succeeded as f64;
        Some(LpSummary {
            attempted: self.results.len(),
            succeeded,
            avg_l0_fraction: self.successes().map(|r| r.l0_fraction).sum::<f64>() / n,
            avg_l2: self.successes().map(|r| r.l2).sum::<f64>() / n,
            avg_linf: self.successes().map(|r| r.linf).sum::<f64>() / n,
        })
    }
}

/// Suite outcome: one run per configuration plus warnings for
/// configurations that produced no successful example.
#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub runs: Vec<AttackRun>,
    pub warnings: Vec<String>,
}

impl SuiteReport {
    /// Summary rows for configurations with at least one success.
    pub fn summary_rows(&self) -> Vec<(String, LpSummary)> {
        self.runs
            .iter()
            .filter_map(|r| r.summary().map(|s| (r.config.name.clone(), s)))
            .collect()
    }
}

/// Attack every dataset image with every configuration. Per-example seeds
/// derive from the master seed, the configuration name and the image index,
/// so adding a configuration never shifts another's randomness.
pub fn generate_suite<M: DifferentiableClassifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    configs: &[AttackConfig],
    master_seed: u64,
) -> Result<SuiteReport> {
    if dataset.is_empty() {
        return Err(CoreError::NotEnoughData("attack suite needs a non-empty dataset".into()));
    }
    let labels = dataset
        .labels()
        .ok_or_else(|| CoreError::InvalidArgument("attack suite needs labeled data".into()))?;

    let mut report = SuiteReport::default();
    for cfg in configs {
        cfg.validate()?;
        let mut results = Vec::with_capacity(dataset.len());
        for (idx, image) in dataset.images().iter().enumerate() {
            let mut per_example = cfg.clone();
            per_example.seed =
                derive_seed(master_seed, &alloc::format!("attack/{}/{}", cfg.name, idx));
            results.push(run_attack(model, image, Some(labels[idx]), &per_example)?);
        }
        let run = AttackRun { config: cfg.clone(), results };
        if run.summary().is_none() {
            report
                .warnings
                .push(alloc::format!("attack {} produced no successful example", cfg.name));
        }
        report.runs.push(run);
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
