//! Two training regimes and their plumbing.
//!
//! Stage A fits the convolutional encoder plus its finding heads to the ten
//! binary findings with Adam under a step-decay schedule. Stage B fits the
//! transformer classifier (and, unless frozen, the backbone underneath it)
//! with momentum SGD, global gradient clipping, and a cosine schedule with
//! linear warmup. Both loops are bit-reproducible: batch order, parameter
//! updates, and manifest contents depend only on the seed and config.

use std::path::Path;

use crate::backbone::{backbone_forward, pretrain_loss, BoundParams, NormContext};
use crate::error::{Error, Result};
use crate::metrics::softmax_rows;
use crate::model::ModelState;
use crate::params::ParamSet;
use crate::preprocess::{load_image, run_pipeline, PreprocessConfig};
use crate::rng::RngStream;
use crate::synth::{Dataset, NUM_FINDINGS};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::transformer::transformer_forward;

/// Stage-B hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub max_grad_norm: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub backbone_trainable: bool,
    /// Weight the cross-entropy by inverse class frequency.
    pub class_weighted: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// CPU-budget defaults: 2000 steps with a 100-step warmup.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            max_grad_norm: 1.0,
            total_steps: 2000,
            warmup_steps: 100,
            batch_size: 8,
            backbone_trainable: true,
            class_weighted: false,
            seed,
        }
    }

    /// Full-scale defaults: 10000 steps with a 500-step warmup.
    pub fn full_scale(seed: u64) -> Self {
        TrainConfig {
            total_steps: 10_000,
            warmup_steps: 500,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.momentum < 0.0 || self.max_grad_norm <= 0.0 {
            return Err(Error::invalid("train_config", "rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train_config", "batch size must be positive"));
        }
        // total_steps == 0 is a valid no-op run (useful for checkpoint
        // plumbing); otherwise the warmup must leave room for decay.
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::invalid(
                "train_config",
                format!(
                    "warmup ({}) must be shorter than the run ({})",
                    self.warmup_steps, self.total_steps
                ),
            ));
        }
        Ok(())
    }
}

/// Stage-A hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl PretrainConfig {
    /// CPU-budget defaults. The rate is hotter than the full-scale recipe's
    /// 1e-4: at a few hundred steps instead of many thousands, 1e-4 leaves
    /// the finding loss barely past its bias-only floor.
    pub fn desk(seed: u64) -> Self {
        PretrainConfig {
            lr: 3e-4,
            steps: 400,
            batch_size: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("pretrain_config", "all fields must be positive"));
        }
        Ok(())
    }
}

/// Linear warmup to `lr`, then a cosine decay to zero over the remaining
/// steps. Continuous at the junction.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(Error::invalid(
            "lr_at",
            format!("step {step} outside a {}-step run", cfg.total_steps),
        ));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Stage-A step decay: one tenth at half the run, another tenth at three
/// quarters.
pub fn pretrain_lr_at(step: usize, total: usize, base: f64) -> f64 {
    let mut lr = base;
    if 2 * step >= total {
        lr *= 0.1;
    }
    if 4 * step >= 3 * total {
        lr *= 0.1;
    }
    lr
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g {
            sq = v.mul_add(*v, sq);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        let mut post_sq = 0.0;
        for g in grads.iter_mut() {
            for v in g {
                *v *= scale;
                post_sq = v.mul_add(*v, post_sq);
            }
        }
        assert!(
            post_sq.sqrt() <= max_norm + 1e-12,
            "clipped norm {} exceeds bound {max_norm}",
            post_sq.sqrt()
        );
    }
    norm
}

/// Classical momentum SGD over the trainable subset of a parameter set.
pub struct Sgd {
    momentum: f64,
    names: Vec<String>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    /// Track every parameter currently marked trainable, in set order.
    pub fn new(params: &ParamSet, momentum: f64) -> Self {
        let mut names = Vec::new();
        let mut velocity = Vec::new();
        for (name, t) in params.iter() {
            if t.requires_grad() {
                names.push(name.to_string());
                velocity.push(vec![0.0; t.data().len()]);
            }
        }
        Sgd {
            momentum,
            names,
            velocity,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// v <- momentum * v + g; p <- p - lr * v. `grads` must align with
    /// [`Sgd::names`].
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.names.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!("{} gradients for {} parameters", grads.len(), self.names.len()),
            ));
        }
        for ((name, v), g) in self.names.iter().zip(&mut self.velocity).zip(grads) {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid("sgd_step", format!("unknown parameter {name}")))?;
            let data = p.data_mut();
            if data.len() != g.len() {
                return Err(Error::invalid(
                    "sgd_step",
                    format!("{name}: {} gradient values for {} weights", g.len(), data.len()),
                ));
            }
            for ((pv, vv), gv) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction over the trainable subset of a parameter set.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in params.iter() {
            if t.requires_grad() {
                names.push(name.to_string());
                m.push(vec![0.0; t.data().len()]);
                v.push(vec![0.0; t.data().len()]);
            }
        }
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            names,
            m,
            v,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.names.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), self.names.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, name) in self.names.iter().enumerate() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid("adam_step", format!("unknown parameter {name}")))?;
            let data = p.data_mut();
            for ((pv, (mv, vv)), gv) in data
                .iter_mut()
                .zip(self.m[i].iter_mut().zip(self.v[i].iter_mut()))
                .zip(&grads[i])
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// A split loaded into memory: preprocessed input tensors (each (1,1,S,S))
/// with class and finding labels.
#[derive(Debug, Clone, Default)]
pub struct LoadedSplit {
    pub inputs: Vec<Tensor>,
    pub classes: Vec<usize>,
    pub findings: Vec<[bool; NUM_FINDINGS]>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Load and preprocess every image of one split, in manifest order.
pub fn load_split(data: &Dataset, split: &str, prep: &PreprocessConfig) -> Result<LoadedSplit> {
    let mut out = LoadedSplit::default();
    for s in data.samples.iter().filter(|s| s.split == split) {
        let img = load_image(&s.path)?;
        out.inputs.push(run_pipeline(&img, prep)?);
        out.classes.push(s.class);
        out.findings.push(s.findings);
    }
    Ok(out)
}

/// Carve a seed-determined validation fraction out of a split.
pub fn split_validation(split: &LoadedSplit, fraction: f64, seed: u64) -> (LoadedSplit, LoadedSplit) {
    let n = split.len();
    let n_val = ((n as f64 * fraction).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, "validation-split", 0).shuffle(&mut order);
    let pick = |idx: &[usize]| LoadedSplit {
        inputs: idx.iter().map(|&i| split.inputs[i].clone()).collect(),
        classes: idx.iter().map(|&i| split.classes[i]).collect(),
        findings: idx.iter().map(|&i| split.findings[i]).collect(),
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_sorted = train_idx.to_vec();
    let mut val_sorted = val_idx.to_vec();
    train_sorted.sort_unstable();
    val_sorted.sort_unstable();
    (pick(&train_sorted), pick(&val_sorted))
}

/// Inverse-frequency class weights normalized to mean 1.
pub fn class_weights(classes: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &c in classes {
        counts[c] += 1;
    }
    let n = classes.len() as f64;
    (0..num_classes)
        .map(|c| {
            if counts[c] == 0 {
                0.0
            } else {
                n / (num_classes as f64 * counts[c] as f64)
            }
        })
        .collect()
}

/// Stack single-sample tensors (1, ...) into one batch tensor (n, ...).
pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("stack_batch", "empty batch"))?;
    let tail = &first.shape()[1..];
    let mut data = Vec::with_capacity(items.len() * first.data().len());
    for t in items {
        if t.shape()[0] != 1 || &t.shape()[1..] != tail {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(tail);
    Tensor::from_vec(shape, data)
}

/// Seed-determined infinite batch iterator: shuffles the index list once per
/// epoch and drops any ragged final batch.
pub struct BatchSchedule {
    seed: u64,
    n: usize,
    batch: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSchedule {
    pub fn new(seed: u64, n: usize, batch: usize) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::invalid(
                "batch_schedule",
                format!("batch size {batch} for a split of {n}"),
            ));
        }
        let mut s = BatchSchedule {
            seed,
            n,
            batch,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        RngStream::new(self.seed, "batch-order", self.epoch).shuffle(&mut self.order);
        self.pos = 0;
        self.epoch += 1;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Line-oriented record of one command invocation; content is fully
/// determined by config and seed so reruns produce identical bytes.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    lines: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            lines: vec![format!("command {command}")],
        }
    }

    pub fn config(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("config {key} {value}"));
    }

    pub fn stat(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("stat {key} {value}"));
    }

    pub fn step(&mut self, step: usize, lr: f64, loss: f64) {
        self.lines.push(format!("step {step} lr {lr:.12e} loss {loss:.12e}"));
    }

    pub fn checkpoint(&mut self, path: &Path, sha256: &str) {
        self.lines.push(format!("checkpoint {} sha256 {sha256}", path.display()));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }
}

/// Scan parameters for the first non-finite value; used to name the culprit
/// when a loss diverges.
fn first_bad_block(params: &ParamSet) -> Option<String> {
    for (name, t) in params.iter() {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Some(name.to_string());
        }
    }
    None
}

/// Collect gradients for `names` (parameter-set order) from a finished
/// backward pass.
fn collect_grads(
    tape_grads: &crate::tensor::tape::Gradients,
    bound: &BoundParams,
    names: &[String],
    step: usize,
    params: &ParamSet,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let var = bound.var(name);
        let g = tape_grads
            .get(var)
            .ok_or_else(|| Error::invalid("train", format!("no gradient for {name}")))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                block: name.clone(),
            });
        }
        out.push(g.to_vec());
    }
    // also catch parameters that have already gone bad
    if let Some(block) = first_bad_block(params) {
        return Err(Error::NonFiniteLoss { step, block });
    }
    Ok(out)
}

fn check_finite_loss(loss: f64, step: usize, params: &ParamSet) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        step,
        block: first_bad_block(params).unwrap_or_else(|| "loss".to_string()),
    })
}

/// Stage-A summary statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainStats {
    /// Mean per-sample finding BCE over the split before any update.
    pub initial_bce: f64,
    /// Same measurement after the final step.
    pub final_bce: f64,
}

/// Mean per-sample finding loss over a whole split, gradient-free.
pub fn eval_pretrain_bce(model: &mut ModelState, data: &LoadedSplit, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("eval_pretrain_bce", "empty split"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut i = 0;
    while i < data.len() {
        let j = (i + batch).min(data.len());
        let refs: Vec<&Tensor> = data.inputs[i..j].iter().collect();
        let x = stack_batch(&refs)?;
        let labels: Vec<f64> = data.findings[i..j]
            .iter()
            .flat_map(|f| f.iter().map(|&b| b as u8 as f64))
            .collect();
        let mut tape = Tape::new(false);
        let bound = BoundParams::bind_all(&mut tape, &model.params);
        let input = tape.constant(&x);
        let mut norm = NormContext {
            kind: model.backbone.norm,
            train: false,
            buffers: &mut model.buffers,
        };
        let loss = pretrain_loss(&mut tape, &bound, &model.backbone, &mut norm, input, &labels)?;
        total += tape.data(loss)[0] * (j - i) as f64;
        count += j - i;
        i = j;
    }
    Ok(total / count as f64)
}

/// Stage A: fit backbone + finding heads to the ten findings with Adam.
/// Transformer parameters are untouched. Records per-step losses and the
/// before/after split BCE in the manifest.
pub fn pretrain_backbone(
    model: &mut ModelState,
    data: &LoadedSplit,
    cfg: &PretrainConfig,
    manifest: &mut RunManifest,
) -> Result<PretrainStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("pretrain_backbone", "empty training split"));
    }
    model.params.set_requires_grad_prefix("backbone.", true);
    model.params.set_requires_grad_prefix("pcam.", true);
    model.params.set_requires_grad_prefix("vit.", false);

    let initial_bce = eval_pretrain_bce(model, data, cfg.batch_size)?;
    manifest.stat("initial_bce", format!("{initial_bce:.12e}"));

    let mut opt = Adam::new(&model.params);
    let names = opt.names().to_vec();
    let mut schedule = BatchSchedule::new(cfg.seed, data.len(), cfg.batch_size.min(data.len()))?;
    for step in 0..cfg.steps {
        let idx = schedule.next_batch();
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &data.inputs[i]).collect();
        let x = stack_batch(&refs)?;
        let labels: Vec<f64> = idx
            .iter()
            .flat_map(|&i| data.findings[i].iter().map(|&b| b as u8 as f64))
            .collect();

        let mut tape = Tape::new(true);
        let bound = BoundParams::bind_all(&mut tape, &model.params);
        let input = tape.constant(&x);
        let mut norm = NormContext {
            kind: model.backbone.norm,
            train: true,
            buffers: &mut model.buffers,
        };
        let loss = pretrain_loss(&mut tape, &bound, &model.backbone, &mut norm, input, &labels)?;
        let loss_val = tape.data(loss)[0];
        check_finite_loss(loss_val, step, &model.params)?;
        let grads = tape.backward(loss)?;
        let grads = collect_grads(&grads, &bound, &names, step, &model.params)?;
        let lr = pretrain_lr_at(step, cfg.steps, cfg.lr);
        opt.step(&mut model.params, &grads, lr)?;
        manifest.step(step, lr, loss_val);
    }

    let final_bce = eval_pretrain_bce(model, data, cfg.batch_size)?;
    manifest.stat("final_bce", format!("{final_bce:.12e}"));
    Ok(PretrainStats {
        initial_bce,
        final_bce,
    })
}

/// Precomputed corpus tensors for the frozen-backbone regime.
fn precompute_features(model: &mut ModelState, data: &LoadedSplit, batch: usize) -> Result<Vec<Tensor>> {
    let mut features = Vec::with_capacity(data.len());
    let mut i = 0;
    while i < data.len() {
        let j = (i + batch).min(data.len());
        let refs: Vec<&Tensor> = data.inputs[i..j].iter().collect();
        let x = stack_batch(&refs)?;
        let mut tape = Tape::new(false);
        let bound = BoundParams::bind(&mut tape, &model.params, |n| n.starts_with("backbone."));
        let input = tape.constant(&x);
        let mut norm = NormContext {
            kind: model.backbone.norm,
            train: false,
            buffers: &mut model.buffers,
        };
        let f = backbone_forward(&mut tape, &bound, &model.backbone, &mut norm, input, true)?;
        let t = tape.value(f);
        let fsh = t.shape().to_vec();
        let per = t.data().len() / (j - i);
        for (k, chunk) in t.data().chunks(per).enumerate() {
            let mut shape = fsh.clone();
            shape[0] = 1;
            features.push(Tensor::from_vec(shape, chunk.to_vec())?);
            debug_assert_eq!(i + k, features.len() - 1);
        }
        i = j;
    }
    Ok(features)
}

/// Stage B: fit the class head with momentum SGD, cosine warmup schedule,
/// and global gradient clipping. With `backbone_trainable = false` the
/// corpus is computed once up front and the backbone (and finding heads)
/// stay bitwise untouched.
pub fn train_classifier(
    model: &mut ModelState,
    data: &LoadedSplit,
    cfg: &TrainConfig,
    manifest: &mut RunManifest,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_classifier", "empty training split"));
    }
    if data.classes.iter().any(|&c| c >= model.vit.num_classes) {
        return Err(Error::invalid(
            "train_classifier",
            "split contains a class the head does not cover",
        ));
    }
    model.params.set_requires_grad_prefix("vit.", true);
    model.params.set_requires_grad_prefix("backbone.", cfg.backbone_trainable);
    model.params.set_requires_grad_prefix("pcam.", false);
    if cfg.total_steps == 0 {
        return Ok(());
    }

    let weights = cfg
        .class_weighted
        .then(|| class_weights(&data.classes, model.vit.num_classes));
    if let Some(w) = &weights {
        manifest.stat(
            "class_weights",
            w.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","),
        );
    }

    let frozen_features = if cfg.backbone_trainable {
        None
    } else {
        let f = precompute_features(model, data, cfg.batch_size)?;
        manifest.stat("precomputed_features", f.len());
        Some(f)
    };

    let mut opt = Sgd::new(&model.params, cfg.momentum);
    let names = opt.names().to_vec();
    let mut schedule = BatchSchedule::new(cfg.seed, data.len(), cfg.batch_size.min(data.len()))?;

    for step in 0..cfg.total_steps {
        let idx = schedule.next_batch();
        let classes: Vec<usize> = idx.iter().map(|&i| data.classes[i]).collect();

        let mut tape = Tape::new(true);
        let (bound, logits) = match &frozen_features {
            Some(features) => {
                let refs: Vec<&Tensor> = idx.iter().map(|&i| &features[i]).collect();
                let f = stack_batch(&refs)?;
                let bound = BoundParams::bind(&mut tape, &model.params, |n| n.starts_with("vit."));
                let fv = tape.constant(&f);
                let (logits, _) = transformer_forward(&mut tape, &bound, &model.vit, fv)?;
                (bound, logits)
            }
            None => {
                let refs: Vec<&Tensor> = idx.iter().map(|&i| &data.inputs[i]).collect();
                let x = stack_batch(&refs)?;
                let bound = BoundParams::bind(&mut tape, &model.params, |n| {
                    n.starts_with("vit.") || n.starts_with("backbone.")
                });
                let input = tape.constant(&x);
                let mut norm = NormContext {
                    kind: model.backbone.norm,
                    train: true,
                    buffers: &mut model.buffers,
                };
                let f = backbone_forward(&mut tape, &bound, &model.backbone, &mut norm, input, false)?;
                let (logits, _) = transformer_forward(&mut tape, &bound, &model.vit, f)?;
                (bound, logits)
            }
        };
        let loss = tape.cross_entropy(logits, &classes, weights.as_deref())?;
        let loss_val = tape.data(loss)[0];
        check_finite_loss(loss_val, step, &model.params)?;
        let grads = tape.backward(loss)?;
        let mut grads = collect_grads(&grads, &bound, &names, step, &model.params)?;
        clip_global_norm(&mut grads, cfg.max_grad_norm);
        let lr = lr_at(step, cfg)?;
        opt.step(&mut model.params, &grads, lr)?;
        manifest.step(step, lr, loss_val);
    }
    Ok(())
}

/// Gradient-free class probabilities for a whole split, row-major (n,
/// num_classes).
pub fn predict_probs(model: &mut ModelState, data: &LoadedSplit, batch: usize) -> Result<Vec<f64>> {
    let mut logits_all = Vec::with_capacity(data.len() * model.vit.num_classes);
    let mut i = 0;
    while i < data.len() {
        let j = (i + batch).min(data.len());
        let refs: Vec<&Tensor> = data.inputs[i..j].iter().collect();
        let x = stack_batch(&refs)?;
        let (tape, _, trace) = model.forward(&x, false, false)?;
        logits_all.extend_from_slice(tape.data(trace.logits));
        i = j;
    }
    Ok(softmax_rows(&logits_all, model.vit.num_classes))
}

/// SHA-256 of all trainable-prefix parameters, for freezing contracts.
pub fn params_digest(params: &ParamSet, prefix: &str) -> String {
    use sha2::Digest;
    let mut hasher = sha2::Sha256::new();
    for (name, t) in params.iter() {
        if name.starts_with(prefix) {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Convenience: map split name -> evaluation probabilities and labels.
pub fn eval_split(
    model: &mut ModelState,
    data: &Dataset,
    split: &str,
    batch: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let loaded = load_split(data, split, &model.prep.clone())?;
    if loaded.is_empty() {
        return Err(Error::invalid("eval_split", format!("split {split} is empty")));
    }
    let probs = predict_probs(model, &loaded, batch)?;
    Ok((probs, loaded.classes))
}

/// Shared HashMap-free lookup of one split's per-class sample counts.
pub fn split_class_histogram(data: &LoadedSplit, num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &c in &data.classes {
        counts[c] += 1;
    }
    counts
}

/// Names of trainable parameters in set order (test helper for freezing
/// contracts).
pub fn trainable_names(params: &ParamSet) -> Vec<String> {
    params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect()
}

