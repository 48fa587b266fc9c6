//! Saliency maps from gradient-weighted attention relevance propagation.
//!
//! Relevance starts as the identity over tokens and flows backward through
//! the encoder stack. Each layer contributes its attention probabilities
//! weighted by the gradient of the target logit, rectified, averaged over
//! heads, and applied additively so the residual (skip) path keeps earlier
//! relevance alive:
//!
//!   R <- R + mean_heads(relu(dlogit/dA ⊙ A)) · R
//!
//! The class token's row, restricted to the spatial tokens and un-flattened
//! row-major, is the saliency grid.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::select_logit;
use crate::preprocess::Image;
use crate::tensor::tape::Tape;
use crate::tensor::{io as tio, Tensor};
use crate::transformer::ForwardTrace;

/// Relevance of each spatial token for one (image, class) pair.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Un-normalized relevance, row-major over the grid. Never negative.
    pub raw: Vec<f64>,
    /// Min-max normalized to [0, 1] for display; a flat nonzero map becomes
    /// all ones, a zero map stays zero.
    pub normalized: Vec<f64>,
    /// True when no positive gradient-weighted attention reached the class
    /// token and the raw map is identically zero.
    pub degenerate: bool,
}

impl SaliencyMap {
    /// Grid cell (row, col) holding the largest relevance; ties break toward
    /// the first cell in row-major order.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = 0usize;
        for (i, v) in self.raw.iter().enumerate() {
            if *v > self.raw[best] {
                best = i;
            }
        }
        (best / self.grid_w, best % self.grid_w)
    }

    /// Write the raw grid as a rank-2 tensor in the crate binary format.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let t = Tensor::from_vec(vec![self.grid_h, self.grid_w], self.raw.clone())?;
        tio::save_tensor(path, &t)
    }
}

/// One encoder layer's attention state: probabilities and the gradient of
/// the target logit with respect to them, both flattened (heads, T, T)
/// row-major.
pub struct LayerAttention {
    pub attention: Vec<f64>,
    pub gradient: Vec<f64>,
    pub heads: usize,
}

/// Pure propagation rule over explicit matrices: returns the class-token row
/// of the accumulated relevance (length `tokens`), class position included.
/// Layers are visited in forward order.
pub fn propagate_row0(layers: &[LayerAttention], tokens: usize) -> Result<Vec<f64>> {
    let t = tokens;
    // R = I
    let mut r = vec![0.0; t * t];
    for i in 0..t {
        r[i * t + i] = 1.0;
    }
    let mut abar = vec![0.0; t * t];
    let mut next = vec![0.0; t * t];
    for (idx, layer) in layers.iter().enumerate() {
        let expect = layer.heads * t * t;
        if layer.heads == 0 || layer.attention.len() != expect || layer.gradient.len() != expect {
            return Err(Error::invalid(
                "relevance",
                format!(
                    "layer {idx}: expected {} x {t} x {t} attention and gradient, got {} and {}",
                    layer.heads,
                    layer.attention.len(),
                    layer.gradient.len()
                ),
            ));
        }
        // mean over heads of the rectified gradient-attention product
        abar.fill(0.0);
        for h in 0..layer.heads {
            let base = h * t * t;
            let grad = &layer.gradient[base..base + t * t];
            let attn = &layer.attention[base..base + t * t];
            for ((a, &g), &p) in abar.iter_mut().zip(grad).zip(attn) {
                let w = g * p;
                if w > 0.0 {
                    *a += w;
                }
            }
        }
        let inv = 1.0 / layer.heads as f64;
        for v in abar.iter_mut() {
            *v *= inv;
        }
        // R <- R + Abar * R
        for i in 0..t {
            for j in 0..t {
                let mut acc = r[i * t + j];
                for k in 0..t {
                    acc = abar[i * t + k].mul_add(r[k * t + j], acc);
                }
                next[i * t + j] = acc;
            }
        }
        std::mem::swap(&mut r, &mut next);
    }
    Ok(r[..t].to_vec())
}

/// Min-max normalize a nonnegative map; flat nonzero maps become all ones.
fn normalize(raw: &[f64]) -> (Vec<f64>, bool) {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return (vec![0.0; raw.len()], true);
    }
    if max == min {
        return (vec![1.0; raw.len()], false);
    }
    let spread = max - min;
    (raw.iter().map(|v| (v - min) / spread).collect(), false)
}

/// Run relevance propagation for `target_class` on a gradient-enabled tape
/// holding a single-image forward trace. Consumes the tape's backward pass.
pub fn relevance_propagate(
    tape: &mut Tape,
    trace: &ForwardTrace,
    target_class: usize,
) -> Result<SaliencyMap> {
    let lsh = tape.shape(trace.logits).to_vec();
    if lsh.first() != Some(&1) {
        return Err(Error::invalid(
            "relevance",
            format!("saliency needs a single-image trace, got batch {lsh:?}"),
        ));
    }
    if !tape.grad_enabled() {
        return Err(Error::invalid(
            "relevance",
            "trace was recorded without gradients; rerun the forward pass with gradients on",
        ));
    }
    let t = trace.tokens;
    if t != trace.grid_h * trace.grid_w + 1 {
        return Err(Error::invalid(
            "relevance",
            format!(
                "trace grid {}x{} does not match {} tokens",
                trace.grid_h, trace.grid_w, t
            ),
        ));
    }
    let loss = select_logit(tape, trace.logits, target_class)?;
    let grads = tape.backward(loss)?;
    let mut layers = Vec::with_capacity(trace.attention.len());
    for &a in &trace.attention {
        let ash = tape.shape(a).to_vec();
        let heads = ash[1];
        let attention = tape.data(a).to_vec();
        let gradient = grads
            .get(a)
            .ok_or_else(|| {
                Error::invalid("relevance", "attention gradient missing from the trace")
            })?
            .to_vec();
        layers.push(LayerAttention {
            attention,
            gradient,
            heads,
        });
    }
    let row0 = propagate_row0(&layers, t)?;
    let raw = row0[1..].to_vec(); // drop the class token's self-relevance
    let (normalized, degenerate) = normalize(&raw);
    Ok(SaliencyMap {
        grid_h: trace.grid_h,
        grid_w: trace.grid_w,
        raw,
        normalized,
        degenerate,
    })
}

/// Alpha-blend the (bilinearly upsampled) saliency map as a red tint over a
/// grayscale image. `alpha` in [0, 1] scales the tint; a zero map returns
/// the input unchanged. Output is row-major RGB, values in [0, 1].
pub fn render_overlay(map: &SaliencyMap, img: &Image, alpha: f64) -> Vec<[f64; 3]> {
    let (h, w) = (img.height(), img.width());
    let sy = map.grid_h as f64 / h as f64;
    let sx = map.grid_w as f64 / w as f64;
    let sample = |y: f64, x: f64| -> f64 {
        // half-pixel-aligned bilinear lookup, clamped at the borders
        let gy = (y + 0.5) * sy - 0.5;
        let gx = (x + 0.5) * sx - 0.5;
        let y0 = gy.floor().clamp(0.0, (map.grid_h - 1) as f64) as usize;
        let x0 = gx.floor().clamp(0.0, (map.grid_w - 1) as f64) as usize;
        let y1 = (y0 + 1).min(map.grid_h - 1);
        let x1 = (x0 + 1).min(map.grid_w - 1);
        let fy = (gy - y0 as f64).clamp(0.0, 1.0);
        let fx = (gx - x0 as f64).clamp(0.0, 1.0);
        let at = |yy: usize, xx: usize| map.normalized[yy * map.grid_w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let g = img.pixels()[y * w + x];
            let weight = (alpha * sample(y as f64, x as f64)).clamp(0.0, 1.0);
            out.push([
                g * (1.0 - weight) + weight, // toward full red
                g * (1.0 - weight),
                g * (1.0 - weight),
            ]);
        }
    }
    out
}

/// Write an RGB overlay to a PNG file.
pub fn save_overlay_png(path: &Path, rgb: &[[f64; 3]], height: usize, width: usize) -> Result<()> {
    if rgb.len() != height * width {
        return Err(Error::invalid(
            "save_overlay_png",
            format!("{} pixels for a {height}x{width} image", rgb.len()),
        ));
    }
    let mut buf = image::RgbImage::new(width as u32, height as u32);
    for (i, px) in rgb.iter().enumerate() {
        let x = (i % width) as u32;
        let y = (i / width) as u32;
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        buf.put_pixel(x, y, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
