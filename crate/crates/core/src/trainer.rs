//! Losses, closed-form projector gradients and the per-session SGD loop.
//!
//! The global loss is cross-entropy over `cos(ṽ_cls, t̃_eos^c) / τ`; the local
//! loss is cross-entropy over transport-weighted patch/attribute similarity.
//! Local gradients hold the transport plan and the selected patch set fixed
//! at their forward-pass values and flow through the cosine similarities into
//! both local projector stacks. All per-sample gradients are reduced in batch
//! order, so results do not depend on the thread count.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    local_logits, prepare_class_texts, sample_attribute_rows, ClassAlignment, ClassTexts, LocalAlignment, LocalConfig,
    PatchSelection,
};
use crate::corpus::{EmbeddingBundle, TokenEmbeddings};
use crate::engine::EngineState;
use crate::linalg::{cosine_grad_acc, dot, log_sum_exp, norm, softmax, Matrix};
use crate::projectors::{Branch, ProjectorStack};
use crate::replay::{record_statistics, GaussianSampler, DEFAULT_SHRINKAGE};
use crate::rng::{self, Stream};
use crate::semantics::{build_visual_sample_sets, VisualSampleSet, DEFAULT_DIVERSE_SAMPLES};
use crate::{ordered_map, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial rate, cosine-annealed to 0 within each session.
    pub learning_rate: f64,
    /// Weight of the local loss.
    pub beta: f64,
    /// Global temperature.
    pub tau: f64,
    /// Selected patches per class.
    pub k: usize,
    /// Attributes per class.
    pub n: usize,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Temperature of the local softmax in the local loss.
    pub local_temperature: f64,
    /// Temperature of the local softmax when fused with the global one at
    /// inference.
    pub fusion_temperature: f64,
    pub alignment: LocalAlignment,
    pub selection: PatchSelection,
    /// Covariance shrinkage for pseudo-feature sampling.
    pub epsilon: f64,
    pub seed: u64,
    /// Gaussian pseudo-features for old classes from session 2 on.
    pub replay: bool,
    pub diagonal_covariance: bool,
    /// Redraw each class's attribute rows every epoch.
    pub resample_attributes: bool,
    pub n_diverse: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let local = LocalConfig::default();
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            beta: 0.2,
            tau: 0.01,
            k: local.k,
            n: local.n,
            lambda: local.lambda,
            tol: local.tol,
            max_iter: local.max_iter,
            local_temperature: local.temperature,
            fusion_temperature: 0.01,
            alignment: local.alignment,
            selection: local.selection,
            epsilon: DEFAULT_SHRINKAGE,
            seed: 1993,
            replay: true,
            diagonal_covariance: false,
            resample_attributes: false,
            n_diverse: DEFAULT_DIVERSE_SAMPLES,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        for t in [self.local_temperature, self.fusion_temperature] {
            if !(t > 0.0 && t.is_finite()) {
                return bad("local_temperature and fusion_temperature must be positive");
            }
        }
        if self.k == 0 || self.n == 0 {
            return bad("k and n must be positive");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_iter == 0 {
            return bad("tol and max_iter must be positive");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be non-negative");
        }
        Ok(())
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            k: self.k,
            n: self.n,
            lambda: self.lambda,
            tol: self.tol,
            max_iter: self.max_iter,
            alignment: self.alignment,
            selection: self.selection,
            temperature: self.local_temperature,
            selection_seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global_loss: f64,
    pub local_loss: f64,
    pub total: f64,
}

pub fn total_loss(global: f64, local: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        global_loss: global,
        local_loss: local,
        total: global + beta * local,
    }
}

/// Gradient with respect to one projector's weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ProjectorGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    /// Adds the contribution of an output gradient `g` for input `x`.
    fn accumulate(&mut self, g: &[f64], x: &[f64]) {
        self.weight.add_outer(1.0, g, x);
        for (b, gi) in self.bias.iter_mut().zip(g) {
            *b += gi;
        }
    }
}

fn checked_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a, b) / (na * nb))
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits.iter().copied()) - logits[label]
}

#[derive(Debug, Clone)]
pub struct GlobalLoss {
    pub loss: f64,
    pub visual: ProjectorGrad,
    pub textual: ProjectorGrad,
}

/// Mean cross-entropy of `softmax(cos(VG(v), TG(eos_c)) / τ)` over the batch.
///
/// `labels[i]` indexes `class_eos`. Gradients are with respect to the
/// parameters of any single projector in each stack (all projectors in a
/// stack receive the same gradient because their outputs are summed).
pub fn global_loss(
    visual: &ProjectorStack,
    textual: &ProjectorStack,
    features: &[&[f64]],
    labels: &[usize],
    class_eos: &[&[f64]],
    tau: f64,
) -> Result<GlobalLoss> {
    check_batch(features.len(), labels, class_eos.len())?;
    let dim = visual.dim();
    let eos: Vec<Vec<f64>> = class_eos
        .iter()
        .map(|e| textual.adapt_feature(e))
        .collect::<Result<_>>()?;
    let scale = 1.0 / features.len() as f64;
    let items: Vec<(&[f64], usize)> = features.iter().copied().zip(labels.iter().copied()).collect();

    let per_sample = ordered_map(&items, |&(v, y)| -> Result<(f64, Vec<f64>, Matrix)> {
        let adapted = visual.adapt_feature(v)?;
        let logits: Vec<f64> = eos
            .iter()
            .map(|e| checked_cosine(&adapted, e).map(|c| c / tau))
            .collect::<Result<_>>()?;
        let p = softmax(&logits);
        let mut g_v = vec![0.0; dim];
        let mut g_e = Matrix::zeros(eos.len(), dim);
        for (c, e) in eos.iter().enumerate() {
            let dz = (p[c] - f64::from(u8::from(c == y))) * scale / tau;
            cosine_grad_acc(&adapted, e, dz, &mut g_v, g_e.row_mut(c));
        }
        Ok((cross_entropy(&logits, y), g_v, g_e))
    });

    let mut loss = 0.0;
    let mut g_vis = ProjectorGrad::zeros(dim);
    let mut g_eos = Matrix::zeros(eos.len(), dim);
    for (r, v) in per_sample.into_iter().zip(features) {
        let (l, g_v, g_e) = r?;
        loss += l;
        g_vis.accumulate(&g_v, v);
        g_eos.axpy(1.0, &g_e);
    }
    let mut g_txt = ProjectorGrad::zeros(dim);
    for (c, e) in class_eos.iter().enumerate() {
        g_txt.accumulate(g_eos.row(c), e);
    }
    Ok(GlobalLoss {
        loss: loss * scale,
        visual: g_vis,
        textual: g_txt,
    })
}

#[derive(Debug, Clone)]
pub struct LocalLoss {
    pub loss: f64,
    pub nonconverged: usize,
    pub visual: ProjectorGrad,
    pub textual: ProjectorGrad,
    /// Forward record per image, one entry per candidate class.
    pub alignments: Vec<Vec<ClassAlignment>>,
}

/// Mean cross-entropy of the local logits over the batch.
///
/// `labels[i]` indexes `classes`, whose adapted attributes must come from the
/// local textual stack the gradient is taken for.
pub fn local_loss(
    visual: &ProjectorStack,
    images: &[&TokenEmbeddings],
    labels: &[usize],
    classes: &[ClassTexts],
    cfg: &LocalConfig,
) -> Result<LocalLoss> {
    check_batch(images.len(), labels, classes.len())?;
    let dim = visual.dim();
    let scale = 1.0 / images.len() as f64;
    let items: Vec<(&TokenEmbeddings, usize)> = images.iter().copied().zip(labels.iter().copied()).collect();

    let per_sample = ordered_map(&items, |&(image, y)| -> Result<_> {
        let out = local_logits(image, classes, visual, cfg)?;
        let logits: Vec<f64> = out.sigma.iter().map(|s| s / cfg.temperature).collect();
        let mut g_p = Matrix::zeros(out.patches.rows(), dim);
        let mut g_a: Vec<Matrix> = classes
            .iter()
            .map(|t| Matrix::zeros(t.attributes.rows(), dim))
            .collect();
        for (c, (al, texts)) in out.alignments.iter().zip(classes).enumerate() {
            let d_sigma = (out.probs[c] - f64::from(u8::from(c == y))) * scale / cfg.temperature;
            for (row, &m) in al.selected.indices.iter().enumerate() {
                for n in 0..texts.attributes.rows() {
                    let w = al.weights[(row, n)];
                    if w == 0.0 {
                        continue;
                    }
                    let mut g_patch = vec![0.0; dim];
                    cosine_grad_acc(
                        out.patches.row(m),
                        texts.attributes.row(n),
                        d_sigma * w,
                        &mut g_patch,
                        g_a[c].row_mut(n),
                    );
                    crate::linalg::axpy(1.0, &g_patch, g_p.row_mut(m));
                }
            }
        }
        let nonconverged = out.nonconverged();
        Ok((cross_entropy(&logits, y), nonconverged, g_p, g_a, out.alignments))
    });

    let mut loss = 0.0;
    let mut nonconverged = 0;
    let mut g_vis = ProjectorGrad::zeros(dim);
    let mut g_attr: Vec<Matrix> = classes
        .iter()
        .map(|t| Matrix::zeros(t.attributes.rows(), dim))
        .collect();
    let mut alignments = Vec::with_capacity(images.len());
    for (r, image) in per_sample.into_iter().zip(images) {
        let (l, nc, g_p, g_a, al) = r?;
        loss += l;
        nonconverged += nc;
        for m in 0..g_p.rows() {
            g_vis.accumulate(g_p.row(m), image.patches.row(m));
        }
        for (acc, g) in g_attr.iter_mut().zip(&g_a) {
            acc.axpy(1.0, g);
        }
        alignments.push(al);
    }
    let mut g_txt = ProjectorGrad::zeros(dim);
    for (texts, g) in classes.iter().zip(&g_attr) {
        for n in 0..texts.raw_attributes.rows() {
            g_txt.accumulate(g.row(n), texts.raw_attributes.row(n));
        }
    }
    Ok(LocalLoss {
        loss: loss * scale,
        nonconverged,
        visual: g_vis,
        textual: g_txt,
        alignments,
    })
}

fn check_batch(len: usize, labels: &[usize], classes: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != len {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {len} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label index {bad} out of {classes} classes"
        )));
    }
    Ok(())
}

/// `η_0 · (1 + cos(π s / (T - 1))) / 2` for step `s` of `T`.
pub fn cosine_learning_rate(step: usize, total_steps: usize, initial: f64) -> f64 {
    if total_steps <= 1 {
        return initial;
    }
    let t = step as f64 / (total_steps - 1) as f64;
    initial * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// One SGD step record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub session: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_g")]
    pub global_loss: f64,
    /// `None` when `beta` is 0 and the local branch is skipped.
    #[serde(rename = "L_l")]
    pub local_loss: Option<f64>,
    #[serde(rename = "L")]
    pub total_loss: f64,
    pub sinkhorn_nonconverged_count: usize,
    pub pseudo_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub session: usize,
    pub records: Vec<StepRecord>,
    pub sample_sets: Vec<VisualSampleSet>,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.total_loss)
            .collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

fn sgd_step(stack: &mut ProjectorStack, grad: &ProjectorGrad, lr: f64) {
    if lr == 0.0 {
        return;
    }
    if let Some(p) = stack.trainable_mut() {
        p.weight.axpy(-lr, &grad.weight);
        crate::linalg::axpy(-lr, &grad.bias, &mut p.bias);
    }
}

/// Trains one incremental session.
///
/// Opens a new projector in every stack (freezing the rest), binds attribute
/// rows and sample sets for the new classes, runs `epochs` passes of
/// minibatch SGD over the session's samples, and stores Gaussian statistics
/// of the new classes' frozen `[CLS]` features.
pub fn train_task(
    state: &mut EngineState,
    bundle: &EmbeddingBundle,
    train_indices: &[usize],
    classes: &[u32],
    cfg: &TrainerConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if bundle.dim() != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            actual: bundle.dim(),
        });
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("session has no classes".into()));
    }
    let samples: Vec<usize> = train_indices
        .iter()
        .copied()
        .filter(|&i| classes.contains(&bundle.samples()[i].label))
        .collect();
    for &c in classes {
        let idx = bundle
            .class_index(c)
            .ok_or_else(|| Error::InvalidArgument(format!("class {c} has no attribute set")))?;
        if !samples.iter().any(|&i| bundle.sample_class_index(i) == idx) {
            return Err(Error::EmptyClass(c));
        }
        if bundle.classes()[idx].attribute_embeddings.rows() < cfg.n {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} attributes, {} required",
                bundle.classes()[idx].attribute_embeddings.rows(),
                cfg.n
            )));
        }
    }

    let old_classes = state.seen_classes();
    state.begin_session(classes.to_vec());
    let session = state.sessions_trained();
    for &c in classes {
        let available = bundle.classes()[bundle.class_index(c).expect("checked")]
            .attribute_embeddings
            .rows();
        state.set_attribute_choice(c, sample_attribute_rows(available, cfg.n, cfg.seed, c, 0)?);
    }
    let sample_sets = build_visual_sample_sets(bundle, &samples, classes, cfg.n_diverse)?;

    let seen = state.seen_classes();
    let position: HashMap<u32, usize> = seen.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let class_sets: Vec<_> = seen
        .iter()
        .map(|&c| &bundle.classes()[bundle.class_index(c).expect("seen classes are in the bundle")])
        .collect();
    let eos: Vec<&[f64]> = class_sets.iter().map(|c| c.eos_embedding.as_slice()).collect();

    let samplers: Vec<GaussianSampler> = if cfg.replay && session > 1 {
        old_classes
            .iter()
            .map(|&c| {
                let stats = state
                    .statistics()
                    .get(&c)
                    .ok_or_else(|| Error::InvalidArgument(format!("no statistics stored for class {c}")))?;
                GaussianSampler::new(stats, cfg.epsilon, cfg.diagonal_covariance)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let local_cfg = cfg.local_config();
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut records = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = samples.clone();
        rng::shuffle(
            &mut order,
            &mut rng::stream(cfg.seed, Stream::EpochShuffle, &[session as u64, epoch as u64]),
        );
        let rows: Vec<Vec<usize>> = if cfg.resample_attributes {
            let round = ((session as u64) << 32) | (epoch as u64 + 1);
            class_sets
                .iter()
                .map(|c| sample_attribute_rows(c.attribute_embeddings.rows(), cfg.n, cfg.seed, c.class_id, round))
                .collect::<Result<_>>()?
        } else {
            seen.iter()
                .map(|c| state.attribute_choice(*c).expect("bound at session start").to_vec())
                .collect()
        };

        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_learning_rate(step, total_steps, cfg.learning_rate);
            let images: Vec<&TokenEmbeddings> = batch.iter().map(|&i| &bundle.samples()[i]).collect();
            let labels: Vec<usize> = images.iter().map(|s| position[&s.label]).collect();

            let mut features: Vec<&[f64]> = images.iter().map(|s| s.cls.as_slice()).collect();
            let mut global_labels = labels.clone();
            let pseudo: Vec<(usize, Vec<f64>)> = if samplers.is_empty() {
                Vec::new()
            } else {
                let mut r = rng::stream(
                    cfg.seed,
                    Stream::PseudoBatch,
                    &[session as u64, epoch as u64, step as u64],
                );
                (0..batch.len())
                    .map(|_| {
                        let s = &samplers[rng::uniform_index(&mut r, samplers.len())];
                        (position[&s.class_id()], s.sample(&mut r))
                    })
                    .collect()
            };
            for (y, f) in &pseudo {
                features.push(f);
                global_labels.push(*y);
            }

            let g = global_loss(
                state.stack(Branch::VisualGlobal),
                state.stack(Branch::TextualGlobal),
                &features,
                &global_labels,
                &eos,
                cfg.tau,
            )?;
            let local = if cfg.beta > 0.0 {
                let textual = state.stack(Branch::TextualLocal);
                let texts: Vec<ClassTexts> = class_sets
                    .iter()
                    .zip(&rows)
                    .map(|(c, r)| prepare_class_texts(c, r, textual))
                    .collect::<Result<_>>()?;
                Some(local_loss(
                    state.stack(Branch::VisualLocal),
                    &images,
                    &labels,
                    &texts,
                    &local_cfg,
                )?)
            } else {
                None
            };
            let breakdown = total_loss(g.loss, local.as_ref().map_or(0.0, |l| l.loss), cfg.beta);
            if !breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "session {session} epoch {epoch} step {step}: L_g = {}, L_l = {}",
                    breakdown.global_loss, breakdown.local_loss
                )));
            }

            sgd_step(state.stack_mut(Branch::VisualGlobal), &g.visual, lr);
            sgd_step(state.stack_mut(Branch::TextualGlobal), &g.textual, lr);
            if let Some(l) = &local {
                sgd_step(state.stack_mut(Branch::VisualLocal), &l.visual, lr * cfg.beta);
                sgd_step(state.stack_mut(Branch::TextualLocal), &l.textual, lr * cfg.beta);
            }
            records.push(StepRecord {
                session,
                epoch,
                step,
                lr,
                global_loss: breakdown.global_loss,
                local_loss: local.as_ref().map(|l| l.loss),
                total_loss: breakdown.total,
                sinkhorn_nonconverged_count: local.as_ref().map_or(0, |l| l.nonconverged),
                pseudo_count: pseudo.len(),
            });
            step += 1;
        }
    }

    for &c in classes {
        let idx = bundle.class_index(c).expect("checked");
        let feats: Vec<&[f64]> = samples
            .iter()
            .filter(|&&i| bundle.sample_class_index(i) == idx)
            .map(|&i| bundle.samples()[i].cls.as_slice())
            .collect();
        state.insert_statistics(record_statistics(c, &feats)?);
    }
    state.end_session();
    Ok(TrainingLog {
        session,
        records,
        sample_sets,
    })
}
