//! Encoder-only vision transformer over the convolutional feature corpus.
//!
//! The corpus is projected to the latent width with a 1x1 convolution and
//! flattened row-major into a token sequence; a learnable class token is
//! prepended and a learnable positional embedding added. Each encoder layer
//! is pre-norm residual: z' = MSA(LN(z)) + z, then z = MLP(LN(z')) + z', with
//! GELU inside the two-layer MLP. The classification head reads token 0 only.

use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamSet};
use crate::rng::RngStream;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    /// Latent token width D.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl TransformerConfig {
    pub fn desk() -> Self {
        TransformerConfig {
            dim: 256,
            layers: 4,
            heads: 8,
            mlp_ratio: 4.0,
            num_classes: 3,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.num_classes == 0 {
            return Err(Error::invalid("transformer_config", "all size fields must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "transformer_config",
                format!("dim {} not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if self.hidden_dim() == 0 {
            return Err(Error::invalid("transformer_config", "mlp hidden width must be positive"));
        }
        Ok(())
    }
}

/// Append freshly initialized transformer parameters. `corpus_channels` is
/// the backbone's C' and `grid_tokens` the number of spatial tokens (H'*W');
/// the positional embedding covers `grid_tokens + 1` positions.
pub fn init_transformer_params(
    cfg: &TransformerConfig,
    corpus_channels: usize,
    grid_tokens: usize,
    seed: u64,
    params: &mut ParamSet,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = RngStream::new(seed, "transformer-init", 0);
    let d = cfg.dim;
    let h = cfg.hidden_dim();
    let std = 0.02;

    params.insert(
        "vit.proj.w",
        trunc_normal(&mut rng, &[d, corpus_channels, 1, 1], std).with_requires_grad(),
    )?;
    params.insert("vit.proj.b", Tensor::zeros(vec![d]).with_requires_grad())?;
    params.insert(
        "vit.cls_token",
        trunc_normal(&mut rng, &[1, 1, d], std).with_requires_grad(),
    )?;
    params.insert(
        "vit.pos_embed",
        Tensor::zeros(vec![1, grid_tokens + 1, d]).with_requires_grad(),
    )?;
    for l in 0..cfg.layers {
        let p = format!("vit.layer{l}");
        params.insert(format!("{p}.ln1.gamma"), Tensor::full(vec![d], 1.0).with_requires_grad())?;
        params.insert(format!("{p}.ln1.beta"), Tensor::zeros(vec![d]).with_requires_grad())?;
        for name in ["wq", "wk", "wv"] {
            params.insert(
                format!("{p}.attn.{name}"),
                trunc_normal(&mut rng, &[d, d], std).with_requires_grad(),
            )?;
        }
        for name in ["bq", "bk", "bv"] {
            params.insert(format!("{p}.attn.{name}"), Tensor::zeros(vec![d]).with_requires_grad())?;
        }
        params.insert(
            format!("{p}.attn.proj.w"),
            trunc_normal(&mut rng, &[d, d], std).with_requires_grad(),
        )?;
        params.insert(format!("{p}.attn.proj.b"), Tensor::zeros(vec![d]).with_requires_grad())?;
        params.insert(format!("{p}.ln2.gamma"), Tensor::full(vec![d], 1.0).with_requires_grad())?;
        params.insert(format!("{p}.ln2.beta"), Tensor::zeros(vec![d]).with_requires_grad())?;
        params.insert(
            format!("{p}.mlp.fc1.w"),
            trunc_normal(&mut rng, &[d, h], std).with_requires_grad(),
        )?;
        params.insert(format!("{p}.mlp.fc1.b"), Tensor::zeros(vec![h]).with_requires_grad())?;
        params.insert(
            format!("{p}.mlp.fc2.w"),
            trunc_normal(&mut rng, &[h, d], std).with_requires_grad(),
        )?;
        params.insert(format!("{p}.mlp.fc2.b"), Tensor::zeros(vec![d]).with_requires_grad())?;
    }
    params.insert(
        "vit.head.w",
        trunc_normal(&mut rng, &[d, cfg.num_classes], std).with_requires_grad(),
    )?;
    params.insert(
        "vit.head.b",
        Tensor::zeros(vec![cfg.num_classes]).with_requires_grad(),
    )?;
    Ok(())
}

use crate::backbone::BoundParams;

fn linear(tape: &mut Tape, x2d: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x2d, w)?;
    tape.add(y, b)
}

/// Project the feature corpus (N, C', H', W') to tokens (N, H'*W', D) with a
/// pointwise linear map; spatial cells flatten row-major into sequence order.
pub fn project(tape: &mut Tape, bound: &BoundParams, features: Var) -> Result<Var> {
    let fsh = tape.shape(features).to_vec();
    if fsh.len() != 4 {
        return Err(Error::invalid(
            "project",
            format!("expected (N, C', H', W') features, got {fsh:?}"),
        ));
    }
    let proj = tape.conv2d(features, bound.var("vit.proj.w"), 1, 0)?;
    let d = tape.shape(proj)[1];
    let (n, gh, gw) = (fsh[0], fsh[2], fsh[3]);
    let b = tape.reshape(bound.var("vit.proj.b"), vec![1, d, 1, 1])?;
    let proj = tape.add(proj, b)?;
    let flat = tape.reshape(proj, vec![n, d, gh * gw])?;
    tape.permute(flat, &[0, 2, 1])
}

/// Prepend the class token and add the positional embedding:
/// z_0 = [cls; tokens] + pos.
pub fn assemble(tape: &mut Tape, bound: &BoundParams, tokens: Var) -> Result<Var> {
    let tsh = tape.shape(tokens).to_vec();
    if tsh.len() != 3 {
        return Err(Error::invalid(
            "assemble",
            format!("expected (N, T, D) tokens, got {tsh:?}"),
        ));
    }
    let (n, t, d) = (tsh[0], tsh[1], tsh[2]);
    let pos = bound.var("vit.pos_embed");
    let psh = tape.shape(pos).to_vec();
    if psh != [1, t + 1, d] {
        return Err(Error::ShapeMismatch {
            op: "assemble",
            lhs: psh,
            rhs: vec![1, t + 1, d],
        });
    }
    let cls = tape.broadcast_to(bound.var("vit.cls_token"), &[n, 1, d])?;
    let seq = tape.concat(&[cls, tokens], 1)?;
    tape.add(seq, pos)
}

/// One pre-norm encoder layer. Returns the new sequence and the attention
/// probabilities (N, heads, T, T).
pub fn encoder_layer(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &TransformerConfig,
    layer: usize,
    z: Var,
) -> Result<(Var, Var)> {
    let zsh = tape.shape(z).to_vec();
    if zsh.len() != 3 || zsh[2] != cfg.dim {
        return Err(Error::invalid(
            "encoder_layer",
            format!("expected (N, T, {}) sequence, got {zsh:?}", cfg.dim),
        ));
    }
    let (n, t, d) = (zsh[0], zsh[1], zsh[2]);
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let p = format!("vit.layer{layer}");

    // attention branch
    let ln1 = tape.layer_norm(
        z,
        bound.var(&format!("{p}.ln1.gamma")),
        bound.var(&format!("{p}.ln1.beta")),
        LN_EPS,
    )?;
    let flat = tape.reshape(ln1, vec![n * t, d])?;
    let split_heads = |tape: &mut Tape, m: Var| -> Result<Var> {
        let r = tape.reshape(m, vec![n, t, heads, hd])?;
        tape.permute(r, &[0, 2, 1, 3])
    };
    let q = linear(tape, flat, bound.var(&format!("{p}.attn.wq")), bound.var(&format!("{p}.attn.bq")))?;
    let k = linear(tape, flat, bound.var(&format!("{p}.attn.wk")), bound.var(&format!("{p}.attn.bk")))?;
    let v = linear(tape, flat, bound.var(&format!("{p}.attn.wv")), bound.var(&format!("{p}.attn.bv")))?;
    let qh = split_heads(tape, q)?;
    let kh = split_heads(tape, k)?;
    let vh = split_heads(tape, v)?;
    let kt = tape.transpose(kh, 2, 3)?;
    let scores = tape.matmul(qh, kt)?;
    let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let attention = tape.softmax(scaled, 3)?;
    let mixed = tape.matmul(attention, vh)?;
    let merged = tape.permute(mixed, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, vec![n * t, d])?;
    let msa = linear(
        tape,
        merged,
        bound.var(&format!("{p}.attn.proj.w")),
        bound.var(&format!("{p}.attn.proj.b")),
    )?;
    let msa = tape.reshape(msa, vec![n, t, d])?;
    let z1 = tape.add(msa, z)?;

    // mlp branch
    let ln2 = tape.layer_norm(
        z1,
        bound.var(&format!("{p}.ln2.gamma")),
        bound.var(&format!("{p}.ln2.beta")),
        LN_EPS,
    )?;
    let flat2 = tape.reshape(ln2, vec![n * t, d])?;
    let h1 = linear(
        tape,
        flat2,
        bound.var(&format!("{p}.mlp.fc1.w")),
        bound.var(&format!("{p}.mlp.fc1.b")),
    )?;
    let act = tape.gelu(h1)?;
    let h2 = linear(
        tape,
        act,
        bound.var(&format!("{p}.mlp.fc2.w")),
        bound.var(&format!("{p}.mlp.fc2.b")),
    )?;
    let mlp = tape.reshape(h2, vec![n, t, d])?;
    let z2 = tape.add(mlp, z1)?;
    Ok((z2, attention))
}

/// Linear head on token 0 only: (N, T, D) -> (N, num_classes).
pub fn classify(tape: &mut Tape, bound: &BoundParams, cfg: &TransformerConfig, z: Var) -> Result<Var> {
    let zsh = tape.shape(z).to_vec();
    if zsh.len() != 3 || zsh[2] != cfg.dim {
        return Err(Error::invalid(
            "classify",
            format!("expected (N, T, {}) sequence, got {zsh:?}", cfg.dim),
        ));
    }
    let tok0 = tape.narrow(z, 1, 0, 1)?;
    let flat = tape.reshape(tok0, vec![zsh[0], cfg.dim])?;
    linear(tape, flat, bound.var("vit.head.w"), bound.var("vit.head.b"))
}

/// Tape handles recorded during a transformer forward pass, kept for
/// relevance propagation.
#[derive(Debug)]
pub struct ForwardTrace {
    /// Per-layer attention probabilities, each (N, heads, T, T).
    pub attention: Vec<Var>,
    pub logits: Var,
    /// Sequence length T (class token included).
    pub tokens: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Corpus -> tokens -> encoder stack -> logits, collecting attention.
pub fn transformer_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &TransformerConfig,
    features: Var,
) -> Result<(Var, ForwardTrace)> {
    let fsh = tape.shape(features).to_vec();
    let (gh, gw) = (fsh[2], fsh[3]);
    let tokens = project(tape, bound, features)?;
    let mut z = assemble(tape, bound, tokens)?;
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (next, attn) = encoder_layer(tape, bound, cfg, l, z)?;
        z = next;
        attention.push(attn);
    }
    let logits = classify(tape, bound, cfg, z)?;
    let trace = ForwardTrace {
        attention,
        logits,
        tokens: gh * gw + 1,
        grid_h: gh,
        grid_w: gw,
    };
    Ok((logits, trace))
}
