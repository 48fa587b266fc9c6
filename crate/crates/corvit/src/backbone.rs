//! Densely connected convolutional encoder with per-finding attention
//! pooling.
//!
//! The encoder follows the dense-block pattern: a strided stem (conv 7x7 /2,
//! norm, relu, maxpool /2), four dense blocks where every layer contributes
//! `growth_rate` channels to a running concatenation, and 1x1 + avg-pool
//! transitions that halve channels and resolution between blocks. Total
//! downsampling is 32x, so an S x S input yields an (S/32)^2 grid of feature
//! vectors — the low-level feature corpus consumed by the transformer.
//!
//! Each of the `num_findings` heads scores the corpus with a 1x1 convolution,
//! squashes scores through a sigmoid into per-location probabilities,
//! normalizes those into attention weights, pools the corpus under them, and
//! classifies the pooled vector with a per-finding linear map.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{he_normal, trunc_normal, ParamSet};
use crate::rng::RngStream;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Spatial reduction from input to feature grid (stem /4, three transitions /2).
pub const DOWNSAMPLE: usize = 32;

const NORM_EPS: f64 = 1e-5;
/// EMA momentum for batch-norm running statistics.
const BN_MOMENTUM: f64 = 0.1;

/// Normalization flavour used throughout the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Batch-independent group normalization (the default: deterministic
    /// regardless of batch composition).
    Group { groups: usize },
    /// Classic batch normalization with running statistics.
    Batch,
}

impl NormKind {
    pub fn as_str(&self) -> String {
        match self {
            NormKind::Group { groups } => format!("group{groups}"),
            NormKind::Batch => "batch".to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "batch" {
            return Some(NormKind::Batch);
        }
        s.strip_prefix("group")
            .and_then(|g| g.parse().ok())
            .map(|groups| NormKind::Group { groups })
    }
}

/// Encoder hyperparameters. `feature_channels` (the corpus dimension C') is
/// derived, not stored: stem channels plus per-block growth, halved at each
/// transition.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub growth_rate: usize,
    pub block_layers: [usize; 4],
    pub stem_channels: usize,
    /// Insert a 1x1 bottleneck (to 4 * growth) before each 3x3 conv.
    pub bottleneck: bool,
    pub norm: NormKind,
    pub num_findings: usize,
    pub input_size: usize,
}

impl BackboneConfig {
    /// Small preset trainable on one CPU core: 64-channel corpus from a
    /// 128x128 input (4x4 grid).
    pub fn desk() -> Self {
        BackboneConfig {
            growth_rate: 16,
            block_layers: [2, 2, 2, 2],
            stem_channels: 32,
            bottleneck: false,
            norm: NormKind::Group { groups: 8 },
            num_findings: 10,
            input_size: 128,
        }
    }

    /// Full-scale preset: 1024-channel corpus from a 512x512 input
    /// (16x16 grid).
    pub fn full_scale() -> Self {
        BackboneConfig {
            growth_rate: 32,
            block_layers: [6, 12, 24, 16],
            stem_channels: 64,
            bottleneck: true,
            norm: NormKind::Group { groups: 8 },
            num_findings: 10,
            input_size: 512,
        }
    }

    /// Corpus channel count C' after the final dense block.
    pub fn feature_channels(&self) -> usize {
        let mut c = self.stem_channels;
        for (i, &n) in self.block_layers.iter().enumerate() {
            c += n * self.growth_rate;
            if i < 3 {
                c /= 2;
            }
        }
        c
    }

    /// Feature-grid side length for this config's input size.
    pub fn grid_size(&self) -> Result<usize> {
        Self::grid_for(self.input_size)
    }

    /// Feature-grid side length for an arbitrary input size.
    pub fn grid_for(input_size: usize) -> Result<usize> {
        if input_size == 0 || !input_size.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::InputNotDivisible {
                size: input_size,
                factor: DOWNSAMPLE,
            });
        }
        Ok(input_size / DOWNSAMPLE)
    }

    /// Channel count entering layer `j` of block `i` (0-based).
    fn layer_in_channels(&self, block: usize, layer: usize) -> usize {
        let mut c = self.stem_channels;
        for b in 0..block {
            c += self.block_layers[b] * self.growth_rate;
            c /= 2;
        }
        c + layer * self.growth_rate
    }

    /// Channel count entering transition `i` (after block `i`).
    fn transition_in_channels(&self, block: usize) -> usize {
        self.layer_in_channels(block, self.block_layers[block])
    }

    pub fn validate(&self) -> Result<()> {
        if self.growth_rate == 0 || self.stem_channels == 0 || self.num_findings == 0 {
            return Err(Error::invalid("backbone_config", "all size fields must be positive"));
        }
        if self.block_layers.contains(&0) {
            return Err(Error::invalid("backbone_config", "every block needs at least one layer"));
        }
        Self::grid_for(self.input_size)?;
        for b in 0..4 {
            if b < 3 && !self.transition_in_channels(b).is_multiple_of(2) {
                return Err(Error::invalid(
                    "backbone_config",
                    format!("block {b} output channels must be even for the transition"),
                ));
            }
        }
        if let NormKind::Group { groups } = self.norm {
            let mut sites = vec![self.stem_channels, self.feature_channels()];
            for b in 0..4 {
                for l in 0..self.block_layers[b] {
                    sites.push(self.layer_in_channels(b, l));
                    if self.bottleneck {
                        sites.push(4 * self.growth_rate);
                    }
                }
                if b < 3 {
                    sites.push(self.transition_in_channels(b));
                }
            }
            for c in sites {
                if groups == 0 || c % groups != 0 {
                    return Err(Error::invalid(
                        "backbone_config",
                        format!("{groups} norm groups do not divide {c} channels"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The flattened low-level feature corpus for one or more images:
/// `features` has shape (N, C', H', W'); token i of an image is the C'-vector
/// at spatial cell (i / W', i % W') — row-major order.
#[derive(Debug, Clone)]
pub struct FeatureCorpus {
    pub features: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl FeatureCorpus {
    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Tape handles for a bound parameter set.
pub struct BoundParams {
    map: HashMap<String, Var>,
}

impl BoundParams {
    /// Register every parameter (optionally filtered by name) as a tape leaf.
    pub fn bind(tape: &mut Tape, params: &ParamSet, mut keep: impl FnMut(&str) -> bool) -> Self {
        let mut map = HashMap::new();
        for (name, t) in params.iter() {
            if keep(name) {
                map.insert(name.to_string(), tape.leaf(t));
            }
        }
        BoundParams { map }
    }

    pub fn bind_all(tape: &mut Tape, params: &ParamSet) -> Self {
        Self::bind(tape, params, |_| true)
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound to this tape"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Bind (or rebind) a single name to an existing tape variable.
    pub fn set(&mut self, name: impl Into<String>, var: Var) {
        self.map.insert(name.into(), var);
    }

    /// (name, var) pairs, unordered.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

/// How normalization layers behave during this forward pass.
pub struct NormContext<'a> {
    pub kind: NormKind,
    /// Training mode: batch norm uses batch moments and updates running
    /// buffers. Ignored by group norm.
    pub train: bool,
    pub buffers: &'a mut ParamSet,
}

impl<'a> NormContext<'a> {
    pub fn group(kind: NormKind, buffers: &'a mut ParamSet) -> Self {
        NormContext {
            kind,
            train: false,
            buffers,
        }
    }
}

fn apply_norm(
    tape: &mut Tape,
    bound: &BoundParams,
    ctx: &mut NormContext,
    site: &str,
    x: Var,
) -> Result<Var> {
    let gamma = bound.var(&format!("{site}.gamma"));
    let beta = bound.var(&format!("{site}.beta"));
    match ctx.kind {
        NormKind::Group { groups } => tape.group_norm(x, gamma, beta, groups, NORM_EPS),
        NormKind::Batch => {
            let mean_name = format!("{site}.running_mean");
            let var_name = format!("{site}.running_var");
            if ctx.train {
                let (y, mean, var) = tape.batch_norm(x, gamma, beta, NORM_EPS, None)?;
                let rm = ctx
                    .buffers
                    .get_mut(&mean_name)
                    .ok_or_else(|| Error::invalid("batch_norm", format!("missing buffer {mean_name}")))?;
                for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = ctx
                    .buffers
                    .get_mut(&var_name)
                    .ok_or_else(|| Error::invalid("batch_norm", format!("missing buffer {var_name}")))?;
                for (r, v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
                Ok(y)
            } else {
                let mean = ctx
                    .buffers
                    .get(&mean_name)
                    .ok_or_else(|| Error::invalid("batch_norm", format!("missing buffer {mean_name}")))?
                    .data()
                    .to_vec();
                let var = ctx
                    .buffers
                    .get(&var_name)
                    .ok_or_else(|| Error::invalid("batch_norm", format!("missing buffer {var_name}")))?
                    .data()
                    .to_vec();
                let (y, _, _) = tape.batch_norm(x, gamma, beta, NORM_EPS, Some((&mean, &var)))?;
                Ok(y)
            }
        }
    }
}

fn register_norm(
    cfg: &BackboneConfig,
    params: &mut ParamSet,
    buffers: &mut ParamSet,
    site: &str,
    channels: usize,
) -> Result<()> {
    params.insert(format!("{site}.gamma"), Tensor::full(vec![channels], 1.0).with_requires_grad())?;
    params.insert(format!("{site}.beta"), Tensor::zeros(vec![channels]).with_requires_grad())?;
    if cfg.norm == NormKind::Batch {
        buffers.insert(format!("{site}.running_mean"), Tensor::zeros(vec![channels]))?;
        buffers.insert(format!("{site}.running_var"), Tensor::full(vec![channels], 1.0))?;
    }
    Ok(())
}

/// Append freshly initialized encoder + finding-head parameters (and, for
/// batch norm, running-statistic buffers).
pub fn init_backbone_params(
    cfg: &BackboneConfig,
    seed: u64,
    params: &mut ParamSet,
    buffers: &mut ParamSet,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = RngStream::new(seed, "backbone-init", 0);
    let g = cfg.growth_rate;

    let stem_w = he_normal(&mut rng, &[cfg.stem_channels, 1, 7, 7], 49).with_requires_grad();
    params.insert("backbone.stem.conv", stem_w)?;
    register_norm(cfg, params, buffers, "backbone.stem.norm", cfg.stem_channels)?;

    for b in 0..4 {
        for l in 0..cfg.block_layers[b] {
            let c_in = cfg.layer_in_channels(b, l);
            let prefix = format!("backbone.block{b}.layer{l}");
            if cfg.bottleneck {
                register_norm(cfg, params, buffers, &format!("{prefix}.norm1"), c_in)?;
                let w1 = he_normal(&mut rng, &[4 * g, c_in, 1, 1], c_in).with_requires_grad();
                params.insert(format!("{prefix}.conv1"), w1)?;
                register_norm(cfg, params, buffers, &format!("{prefix}.norm2"), 4 * g)?;
                let w2 = he_normal(&mut rng, &[g, 4 * g, 3, 3], 4 * g * 9).with_requires_grad();
                params.insert(format!("{prefix}.conv2"), w2)?;
            } else {
                register_norm(cfg, params, buffers, &format!("{prefix}.norm"), c_in)?;
                let w = he_normal(&mut rng, &[g, c_in, 3, 3], c_in * 9).with_requires_grad();
                params.insert(format!("{prefix}.conv"), w)?;
            }
        }
        if b < 3 {
            let c_in = cfg.transition_in_channels(b);
            let prefix = format!("backbone.trans{b}");
            register_norm(cfg, params, buffers, &format!("{prefix}.norm"), c_in)?;
            let w = he_normal(&mut rng, &[c_in / 2, c_in, 1, 1], c_in).with_requires_grad();
            params.insert(format!("{prefix}.conv"), w)?;
        }
    }
    let c_final = cfg.feature_channels();
    register_norm(cfg, params, buffers, "backbone.final.norm", c_final)?;

    // finding heads: stacked 1x1 score convs and per-finding linear classifiers
    let f = cfg.num_findings;
    params.insert(
        "pcam.score.w",
        he_normal(&mut rng, &[f, c_final, 1, 1], c_final).with_requires_grad(),
    )?;
    params.insert("pcam.score.b", Tensor::zeros(vec![f]).with_requires_grad())?;
    params.insert(
        "pcam.cls.w",
        trunc_normal(&mut rng, &[f, c_final], 0.02).with_requires_grad(),
    )?;
    params.insert("pcam.cls.b", Tensor::zeros(vec![f]).with_requires_grad())?;
    Ok(())
}

/// Run the encoder on a (N, 1, S, S) input, producing the feature corpus
/// (N, C', S/32, S/32). With `release_intermediates` (gradient-free tapes
/// only) earlier activations are dropped as soon as they are consumed,
/// bounding peak memory at full scale.
pub fn backbone_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &BackboneConfig,
    norm: &mut NormContext,
    x: Var,
    release_intermediates: bool,
) -> Result<Var> {
    let in_shape = tape.shape(x).to_vec();
    if in_shape.len() != 4 || in_shape[1] != 1 {
        return Err(Error::invalid(
            "backbone_forward",
            format!("expected (N, 1, S, S) input, got {in_shape:?}"),
        ));
    }
    BackboneConfig::grid_for(in_shape[2])?;
    BackboneConfig::grid_for(in_shape[3])?;

    let release = |tape: &mut Tape, keep: Var| {
        if release_intermediates {
            tape.release_except(&[keep]);
        }
    };

    // stem
    let mut h = tape.conv2d(x, bound.var("backbone.stem.conv"), 2, 3)?;
    h = apply_norm(tape, bound, norm, "backbone.stem.norm", h)?;
    h = tape.relu(h)?;
    h = tape.max_pool2d(h, 3, 2, 1)?;
    release(tape, h);

    for b in 0..4 {
        for l in 0..cfg.block_layers[b] {
            let prefix = format!("backbone.block{b}.layer{l}");
            let new = if cfg.bottleneck {
                let n1 = apply_norm(tape, bound, norm, &format!("{prefix}.norm1"), h)?;
                let r1 = tape.relu(n1)?;
                let c1 = tape.conv2d(r1, bound.var(&format!("{prefix}.conv1")), 1, 0)?;
                let n2 = apply_norm(tape, bound, norm, &format!("{prefix}.norm2"), c1)?;
                let r2 = tape.relu(n2)?;
                tape.conv2d(r2, bound.var(&format!("{prefix}.conv2")), 1, 1)?
            } else {
                let n1 = apply_norm(tape, bound, norm, &format!("{prefix}.norm"), h)?;
                let r1 = tape.relu(n1)?;
                tape.conv2d(r1, bound.var(&format!("{prefix}.conv")), 1, 1)?
            };
            h = tape.concat(&[h, new], 1)?;
            release(tape, h);
        }
        if b < 3 {
            let prefix = format!("backbone.trans{b}");
            let n = apply_norm(tape, bound, norm, &format!("{prefix}.norm"), h)?;
            let r = tape.relu(n)?;
            let c_in = cfg.transition_in_channels(b);
            let cv = tape.conv2d(r, bound.var(&format!("{prefix}.conv")), 1, 0)?;
            debug_assert_eq!(tape.shape(cv)[1], c_in / 2);
            h = tape.avg_pool2d(cv, 2, 2, 0)?;
            release(tape, h);
        }
    }
    let n = apply_norm(tape, bound, norm, "backbone.final.norm", h)?;
    let f = tape.relu(n)?;
    release(tape, f);
    Ok(f)
}

/// Outputs of the finding heads over a feature corpus.
pub struct PcamOutput {
    /// Pre-sigmoid finding scores, shape (N, num_findings).
    pub logits: Var,
    /// Normalized attention over locations, shape (N, num_findings, H', W');
    /// every (n, finding) slice sums to 1.
    pub attention: Var,
    /// Attention-pooled feature vectors, shape (N, num_findings, C').
    pub pooled: Var,
}

/// Score, normalize, pool, classify: the per-finding attention pooling head.
pub fn pcam_pool(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &BackboneConfig,
    features: Var,
) -> Result<PcamOutput> {
    let fsh = tape.shape(features).to_vec();
    if fsh.len() != 4 {
        return Err(Error::invalid(
            "pcam_pool",
            format!("expected (N, C', H', W') features, got {fsh:?}"),
        ));
    }
    let (n, c, gh, gw) = (fsh[0], fsh[1], fsh[2], fsh[3]);
    if c != cfg.feature_channels() {
        return Err(Error::ChannelMismatch {
            input: c,
            weight: cfg.feature_channels(),
        });
    }
    let f = cfg.num_findings;
    // score maps: (N, F, H', W')
    let s = tape.conv2d(features, bound.var("pcam.score.w"), 1, 0)?;
    let sb = tape.reshape(bound.var("pcam.score.b"), vec![1, f, 1, 1])?;
    let s = tape.add(s, sb)?;
    let p = tape.sigmoid(s)?;
    // normalize over locations
    let sum_h = tape.sum_axis(p, 2)?;
    let sum_hw = tape.sum_axis(sum_h, 3)?;
    let attention = tape.div(p, sum_hw)?;
    // pooled (N, F, C') = attention (N, F, HW) x features^T (N, HW, C')
    let attn_flat = tape.reshape(attention, vec![n, f, gh * gw])?;
    let feat_flat = tape.reshape(features, vec![n, c, gh * gw])?;
    let feat_t = tape.permute(feat_flat, &[0, 2, 1])?;
    let pooled = tape.matmul(attn_flat, feat_t)?;
    // per-finding linear classifier: logits[n, k] = pooled[n, k, :] . w[k, :] + b[k]
    let w = tape.reshape(bound.var("pcam.cls.w"), vec![1, f, c])?;
    let prod = tape.mul(pooled, w)?;
    let summed = tape.sum_axis(prod, 2)?;
    let flat = tape.reshape(summed, vec![n, f])?;
    let logits = tape.add(flat, bound.var("pcam.cls.b"))?;
    Ok(PcamOutput {
        logits,
        attention,
        pooled,
    })
}

/// Stage-A objective: binary cross-entropy per finding, summed over the
/// findings of each sample and averaged over the batch. `labels` is row-major
/// (batch, num_findings).
pub fn pretrain_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &BackboneConfig,
    norm: &mut NormContext,
    x: Var,
    labels: &[f64],
) -> Result<Var> {
    let features = backbone_forward(tape, bound, cfg, norm, x, false)?;
    let out = pcam_pool(tape, bound, cfg, features)?;
    let mean_bce = tape.bce_with_logits(out.logits, labels)?;
    tape.scale(mean_bce, cfg.num_findings as f64)
}
